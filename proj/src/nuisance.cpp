#include "nettrial/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace nettrial {

double log_loss(const ScenarioSpec& spec, const TrialData& data, const TransitionTable& q) {
  if (data.N != spec.N) throw ValidationError("log_loss: data does not match the scenario");
  TrialView v{&data, &spec.initial_state};
  double loss = 0.0;
  long long n = 0;
  for (int t = 1; t <= data.T; ++t)
    for (int i = 1; i <= data.N; ++i) {
      const double p = q.prob(spec.sum_l->code(v, t, i), data.l(t, i));
      loss -= std::log(p);
      ++n;
    }
  return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Tabular MLE

FittedDensity fit_tabular_mle(const TrialData& data, const ScenarioSpec& spec, double eps0) {
  if (data.N != spec.N) throw ValidationError("fit_tabular_mle: data does not match the scenario");
  if (data.T < 1) throw ValidationError("fit_tabular_mle: empty trial");
  if (eps0 < 0.0) throw ValidationError("fit_tabular_mle: shrinkage must be nonnegative");
  const int S = spec.n_states;
  TrialView v{&data, &spec.initial_state};
  std::map<long long, std::vector<double>> counts;
  for (long long c : spec.q0.codes()) counts[c].assign(static_cast<std::size_t>(S), 0.0);
  for (int t = 1; t <= data.T; ++t)
    for (int i = 1; i <= data.N; ++i) {
      auto& row = counts[spec.sum_l->code(v, t, i)];
      if (row.empty()) row.assign(static_cast<std::size_t>(S), 0.0);
      row[static_cast<std::size_t>(data.l(t, i))] += 1.0;
    }
  std::vector<long long> codes;
  std::vector<std::vector<double>> rows;
  long long seen = 0;
  for (const auto& [c, cnt] : counts) {
    const double total = std::accumulate(cnt.begin(), cnt.end(), 0.0);
    if (total > 0.0) ++seen;
    std::vector<double> row(static_cast<std::size_t>(S));
    if (total + eps0 * S > 0.0)
      for (int l = 0; l < S; ++l) row[static_cast<std::size_t>(l)] = (cnt[static_cast<std::size_t>(l)] + eps0) / (total + eps0 * S);
    else
      row.assign(static_cast<std::size_t>(S), 1.0 / S);
    codes.push_back(c);
    rows.push_back(std::move(row));
  }
  FittedDensity fit;
  fit.estimator = "tabular-mle";
  fit.q_hat = TransitionTable(S, std::move(codes), std::move(rows));
  fit.metadata = json{{"eps0", eps0},
                      {"n", static_cast<long long>(data.T) * data.N},
                      {"contexts_observed", seen},
                      {"context_universe", static_cast<long long>(counts.size())}};
  return fit;
}

// ---------------------------------------------------------------------------
// Lasso over the indicator basis

namespace {

// Multinomial logistic fit with an l1 penalty on everything except the
// intercept row, minimized by proximal gradient descent with momentum.
// X is n x (1+B) row-major (column 0 all ones), y in {0..S-1}; W is
// (1+B) x S row-major.
struct LassoProblem {
  int n = 0, B = 0, S = 0;
  std::vector<double> X;
  std::vector<int> y;

  double x_at(int k, int b) const { return X[static_cast<std::size_t>(k) * (B + 1) + b]; }

  void scores(const std::vector<double>& W, int k, std::vector<double>& s) const {
    for (int c = 0; c < S; ++c) {
      double acc = 0.0;
      for (int b = 0; b <= B; ++b) acc += x_at(k, b) * W[static_cast<std::size_t>(b) * S + c];
      s[static_cast<std::size_t>(c)] = acc;
    }
  }

  static void softmax(std::vector<double>& s) {
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& v : s) z += (v = std::exp(v - m));
    for (double& v : s) v /= z;
  }

  double loss(const std::vector<double>& W) const {
    std::vector<double> s(static_cast<std::size_t>(S));
    double total = 0.0;
    for (int k = 0; k < n; ++k) {
      scores(W, k, s);
      const double m = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double v : s) z += std::exp(v - m);
      total += std::log(z) + m - s[static_cast<std::size_t>(y[static_cast<std::size_t>(k)])];
    }
    return total / n;
  }

  void grad(const std::vector<double>& W, std::vector<double>& g) const {
    std::fill(g.begin(), g.end(), 0.0);
    std::vector<double> s(static_cast<std::size_t>(S));
    for (int k = 0; k < n; ++k) {
      scores(W, k, s);
      softmax(s);
      s[static_cast<std::size_t>(y[static_cast<std::size_t>(k)])] -= 1.0;
      for (int b = 0; b <= B; ++b) {
        const double x = x_at(k, b);
        if (x == 0.0) continue;
        for (int c = 0; c < S; ++c) g[static_cast<std::size_t>(b) * S + c] += x * s[static_cast<std::size_t>(c)];
      }
    }
    for (double& v : g) v /= n;
  }

  // Spectral bound on the gradient Lipschitz constant via power iteration
  // on X^T X (softmax curvature is at most 1/2 per observation).
  double lipschitz() const {
    std::vector<double> v(static_cast<std::size_t>(B) + 1, 1.0), xv(static_cast<std::size_t>(n)), u(v.size());
    double lam = 1.0;
    for (int it = 0; it < 60; ++it) {
      for (int k = 0; k < n; ++k) {
        double acc = 0.0;
        for (int b = 0; b <= B; ++b) acc += x_at(k, b) * v[static_cast<std::size_t>(b)];
        xv[static_cast<std::size_t>(k)] = acc;
      }
      std::fill(u.begin(), u.end(), 0.0);
      for (int k = 0; k < n; ++k)
        for (int b = 0; b <= B; ++b) u[static_cast<std::size_t>(b)] += x_at(k, b) * xv[static_cast<std::size_t>(k)];
      double norm = 0.0;
      for (double w : u) norm += w * w;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      lam = norm;
      for (std::size_t b = 0; b < u.size(); ++b) v[b] = u[b] / norm;
    }
    return 0.5 * lam / n + 1e-12;
  }

  std::vector<double> fit(double lambda, std::vector<double> W0) const {
    const std::size_t dim = static_cast<std::size_t>(B + 1) * S;
    std::vector<double> W = std::move(W0), Z = W, Wp(dim), g(dim);
    if (W.size() != dim) W.assign(dim, 0.0), Z = W;
    const double L = lipschitz();
    double tk = 1.0;
    for (int it = 0; it < 20000; ++it) {
      grad(Z, g);
      Wp = W;
      for (std::size_t d = 0; d < dim; ++d) {
        double w = Z[d] - g[d] / L;
        if (d >= static_cast<std::size_t>(S)) {  // penalized: all but the intercept row
          const double thr = lambda / L;
          w = w > thr ? w - thr : (w < -thr ? w + thr : 0.0);
        }
        W[d] = w;
      }
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      double step = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        Z[d] = W[d] + (tk - 1.0) / tn * (W[d] - Wp[d]);
        step = std::max(step, std::abs(W[d] - Wp[d]));
      }
      tk = tn;
      if (step < 1e-9) break;
    }
    return W;
  }
};

double penalized_l1(const std::vector<double>& W, int S) {
  double l1 = 0.0;
  for (std::size_t d = static_cast<std::size_t>(S); d < W.size(); ++d) l1 += std::abs(W[d]);
  return l1;
}

}  // namespace

FittedDensity fit_hal_lasso(const TrialData& data, const ScenarioSpec& spec, const std::vector<double>& lambda_grid,
                            int folds, std::uint64_t seed) {
  if (data.N != spec.N) throw ValidationError("fit_hal_lasso: data does not match the scenario");
  const int d = spec.sum_l->feature_dim();
  if (d == 0) throw UnsupportedError("fit_hal_lasso: the L-summarizer declares no ordinal feature embedding");
  if (lambda_grid.empty()) throw ValidationError("fit_hal_lasso: empty lambda grid");
  for (double lam : lambda_grid)
    if (lam < 0.0) throw ValidationError("fit_hal_lasso: negative penalty");
  const long long n = static_cast<long long>(data.T) * data.N;
  if (folds < 2 || folds > n) throw ValidationError("fit_hal_lasso: folds must lie in [2, n]");
  const int S = spec.n_states;

  // Observations in node order (round-major), the order blocked CV cuts.
  TrialView v{&data, &spec.initial_state};
  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  for (int t = 1; t <= data.T; ++t)
    for (int i = 1; i <= data.N; ++i) {
      xs.push_back(spec.sum_l->features(spec.sum_l->code(v, t, i)));
      ys.push_back(data.l(t, i));
    }

  // Zero-order indicator basis: for every nonempty coordinate subset and
  // every observed feature point u, the column prod_j 1(x_j >= u_j).
  // Columns are identified by their pattern on the scenario's context grid
  // (what the emitted table evaluates), deduplicated, and constant columns
  // dropped (the intercept is separate and unpenalized).
  const auto& grid = spec.q0.codes();
  std::vector<std::vector<double>> grid_feats;
  grid_feats.reserve(grid.size());
  for (long long c : grid) grid_feats.push_back(spec.sum_l->features(c));
  std::set<std::vector<double>> knots(xs.begin(), xs.end());
  std::map<std::vector<char>, std::pair<int, std::vector<double>>> columns;  // grid pattern -> (order, knot/mask)
  std::vector<std::pair<std::vector<double>, int>> basis;                    // (knot, coordinate mask)
  for (int mask = 1; mask < (1 << d); ++mask)
    for (const auto& u : knots) {
      std::vector<char> pat(grid_feats.size());
      bool any0 = false, any1 = false;
      for (std::size_t gidx = 0; gidx < grid_feats.size(); ++gidx) {
        bool on = true;
        for (int j = 0; j < d; ++j)
          if ((mask & (1 << j)) && grid_feats[gidx][static_cast<std::size_t>(j)] < u[static_cast<std::size_t>(j)]) {
            on = false;
            break;
          }
        pat[gidx] = on ? 1 : 0;
        (on ? any1 : any0) = true;
      }
      if (!any0 || !any1) continue;  // constant on the grid
      if (columns.emplace(std::move(pat), std::make_pair(static_cast<int>(basis.size()), u)).second)
        basis.emplace_back(u, mask);
    }

  auto eval_basis = [&](const std::vector<double>& x, std::vector<double>& out) {
    out.assign(basis.size() + 1, 1.0);  // slot 0: intercept
    for (std::size_t b = 0; b < basis.size(); ++b) {
      const auto& [u, mask] = basis[b];
      bool on = true;
      for (int j = 0; j < d; ++j)
        if ((mask & (1 << j)) && x[static_cast<std::size_t>(j)] < u[static_cast<std::size_t>(j)]) {
          on = false;
          break;
        }
      out[b + 1] = on ? 1.0 : 0.0;
    }
  };

  LassoProblem full;
  full.n = static_cast<int>(n);
  full.B = static_cast<int>(basis.size());
  full.S = S;
  full.y = ys;
  {
    std::vector<double> row;
    for (const auto& x : xs) {
      eval_basis(x, row);
      full.X.insert(full.X.end(), row.begin(), row.end());
    }
  }

  // Contiguous fold boundaries [start, end) over the node order.
  std::vector<std::pair<int, int>> bounds;
  for (int f = 0; f < folds; ++f)
    bounds.emplace_back(static_cast<int>(n * f / folds), static_cast<int>(n * (f + 1) / folds));

  auto subproblem = [&](int skip_lo, int skip_hi) {
    LassoProblem sub;
    sub.B = full.B;
    sub.S = S;
    for (int k = 0; k < full.n; ++k) {
      if (k >= skip_lo && k < skip_hi) continue;
      sub.X.insert(sub.X.end(), full.X.begin() + static_cast<std::ptrdiff_t>(k) * (full.B + 1),
                   full.X.begin() + static_cast<std::ptrdiff_t>(k + 1) * (full.B + 1));
      sub.y.push_back(full.y[static_cast<std::size_t>(k)]);
    }
    sub.n = static_cast<int>(sub.y.size());
    return sub;
  };

  // Penalty path: per-lambda CV loss and full-data l1 norm, strongest
  // penalty first so each solve warm-starts the next.
  std::vector<std::size_t> order(lambda_grid.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return lambda_grid[a] > lambda_grid[b]; });

  std::vector<double> cv_loss(lambda_grid.size(), 0.0), l1_norm(lambda_grid.size(), 0.0);
  std::vector<std::vector<double>> full_fit(lambda_grid.size());
  {
    std::vector<double> warm;
    for (std::size_t k : order) {
      full_fit[k] = full.fit(lambda_grid[k], warm);
      warm = full_fit[k];
      l1_norm[k] = penalized_l1(full_fit[k], S);
    }
  }
  for (int f = 0; f < folds; ++f) {
    LassoProblem train = subproblem(bounds[static_cast<std::size_t>(f)].first, bounds[static_cast<std::size_t>(f)].second);
    std::vector<double> warm, s(static_cast<std::size_t>(S));
    for (std::size_t k : order) {
      auto W = train.fit(lambda_grid[k], warm);
      warm = W;
      double held = 0.0;
      for (int kk = bounds[static_cast<std::size_t>(f)].first; kk < bounds[static_cast<std::size_t>(f)].second; ++kk) {
        full.scores(W, kk, s);
        LassoProblem::softmax(s);
        held -= std::log(s[static_cast<std::size_t>(full.y[static_cast<std::size_t>(kk)])]);
      }
      cv_loss[k] += held / static_cast<double>(n);
    }
  }

  // Smallest CV loss; ties prefer the stronger penalty.
  std::size_t best = 0;
  for (std::size_t k = 1; k < lambda_grid.size(); ++k) {
    if (cv_loss[k] < cv_loss[best] - 1e-12 ||
        (std::abs(cv_loss[k] - cv_loss[best]) <= 1e-12 && lambda_grid[k] > lambda_grid[best]))
      best = k;
  }

  // Emit the table on the scenario's context grid.
  const auto& W = full_fit[best];
  std::vector<long long> codes;
  std::vector<std::vector<double>> rows;
  std::vector<double> phi, s(static_cast<std::size_t>(S));
  for (std::size_t gidx = 0; gidx < grid.size(); ++gidx) {
    eval_basis(grid_feats[gidx], phi);
    for (int c = 0; c < S; ++c) {
      double acc = 0.0;
      for (int b = 0; b <= full.B; ++b) acc += phi[static_cast<std::size_t>(b)] * W[static_cast<std::size_t>(b) * S + c];
      s[static_cast<std::size_t>(c)] = acc;
    }
    LassoProblem::softmax(s);
    codes.push_back(grid[gidx]);
    rows.emplace_back(s.begin(), s.end());
  }

  json path = json::array();
  for (std::size_t k = 0; k < lambda_grid.size(); ++k)
    path.push_back(json{{"lambda", lambda_grid[k]}, {"cv_loss", cv_loss[k]}, {"l1", l1_norm[k]}});
  json fold_json = json::array();
  for (const auto& [lo, hi] : bounds) fold_json.push_back(json{{"start", lo}, {"end", hi}});

  FittedDensity fit;
  fit.estimator = "hal-lasso";
  fit.q_hat = TransitionTable(S, std::move(codes), std::move(rows));
  fit.metadata = json{{"lambda", lambda_grid[best]}, {"path", path},      {"folds", fold_json},
                      {"basis_size", full.B},        {"n", n},            {"seed", seed},
                      {"feature_dim", d}};
  return fit;
}

// ---------------------------------------------------------------------------
// ERM rate fixed point

ErmRate erm_rate_rn(const ErmRateInputs& in, double lo, double hi) {
  if (in.n < 2) throw ValidationError("erm_rate_rn: n must be >= 2");
  if (!(in.alpha > 0.0 && in.alpha < 1.0)) throw ValidationError("erm_rate_rn: alpha must lie in (0,1)");
  if (!(in.p > 0.0 && in.p < 2.0)) throw ValidationError("erm_rate_rn: p must lie in (0,2)");
  if (!(lo > 0.0 && hi > lo)) throw ValidationError("erm_rate_rn: bracket must satisfy 0 < lo < hi");
  const double n = static_cast<double>(in.n), ln = std::log(n), rn = std::sqrt(n);
  auto phi = [&](double r) {
    return std::pow(r, in.alpha) / rn + ln * std::pow(r, 1.0 - in.p / 2.0) / rn +
           ln * ln * std::pow(r, in.alpha - in.p) / n;
  };
  auto psi = [&](double r) { return r * r / 3.0 - phi(r); };
  // psi < 0 near 0 (phi dominates r^2 there) and > 0 for large r; widen
  // the bracket until both signs are enclosed.
  int guard = 0;
  while (psi(hi) <= 0.0) {
    hi *= 2.0;
    if (++guard > 200) throw ValidationError("erm_rate_rn: no sign change on the upper bracket");
  }
  guard = 0;
  while (psi(lo) >= 0.0) {
    lo *= 0.5;
    if (++guard > 2000) throw ValidationError("erm_rate_rn: no sign change on the lower bracket");
  }
  for (int it = 0; it < 300; ++it) {
    const double mid = 0.5 * (lo + hi);
    (psi(mid) < 0.0 ? lo : hi) = mid;
  }
  ErmRate out;
  out.r_n = 0.5 * (lo + hi);
  out.residual = std::abs(out.r_n * out.r_n / 3.0 - phi(out.r_n));
  out.headline = std::pow(n, -1.0 / (4.0 - 2.0 * in.alpha));
  return out;
}

}  // namespace nettrial
