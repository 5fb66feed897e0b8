#include "nettrial/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace nettrial {

namespace {

// Plug-in mean: exact chain for block-local scenarios, exact enumeration
// otherwise, sampling only when the budget refuses.
GcompResult plugin_mean(const ScenarioSpec& spec, const TransitionTable& q, double budget, long long mc_paths,
                        std::uint64_t mc_seed) {
  if (scenario_block_local(spec)) return gcomp_chain(spec, q);
  try {
    return gcomp_exact(spec, q, 0, budget);
  } catch (const BudgetError&) {
    return gcomp_mc(spec, q, 0, mc_paths, mc_seed);
  }
}

// Observed-node counts per tabulated context: n(c, l) and n(c).  Contexts
// outside the gradient table have dbar identically zero and a tilt that
// leaves their row unchanged, so they drop out of the score.
struct ScoreCounts {
  std::map<long long, std::vector<double>> n_cl;
  double n_nodes = 0.0;
};

ScoreCounts count_nodes(const EifBundle& b, int n_states) {
  ScoreCounts sc;
  sc.n_nodes = static_cast<double>(b.nodes.size());
  for (const EifNode& n : b.nodes) {
    if (!b.q_rows.count(n.ctx)) continue;
    auto& row = sc.n_cl[n.ctx];
    if (row.empty()) row.assign(static_cast<std::size_t>(n_states), 0.0);
    row[static_cast<std::size_t>(n.lval)] += 1.0;
  }
  return sc;
}

// Tilted weights of one row at parameter eps, log-space normalized.
std::vector<double> tilt_row(const std::vector<double>& q_row, const EifBundle& b, long long c, double eps) {
  std::vector<double> w(q_row.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < q_row.size(); ++l) top = std::max(top, eps * b.at(c, static_cast<int>(l)));
  double z = 0.0;
  for (std::size_t l = 0; l < q_row.size(); ++l) {
    w[l] = q_row[l] * std::exp(eps * b.at(c, static_cast<int>(l)) - top);
    z += w[l];
  }
  for (double& v : w) v /= z;
  return w;
}

// Empirical score of the tilt and its derivative at eps:
//   S(eps)  = (1/TN) sum_nodes [dbar(c,l) - E_{q_eps}[dbar | c]]
//   S'(eps) = -(1/TN) sum_nodes Var_{q_eps}[dbar | c]  (< 0: S decreases)
std::pair<double, double> score_at(const EifBundle& b, const ScoreCounts& sc, double eps) {
  double s = 0.0, sp = 0.0;
  for (const auto& [c, counts] : sc.n_cl) {
    const std::vector<double> w = tilt_row(b.q_rows.at(c), b, c, eps);
    double m = 0.0, m2 = 0.0, n_c = 0.0, obs = 0.0;
    for (std::size_t l = 0; l < w.size(); ++l) {
      const double d = b.at(c, static_cast<int>(l));
      m += w[l] * d;
      m2 += w[l] * d * d;
      n_c += counts[l];
      obs += counts[l] * d;
    }
    s += obs - n_c * m;
    sp -= n_c * (m2 - m * m);
  }
  return {s / sc.n_nodes, sp / sc.n_nodes};
}

// Root of the score in eps: bracket by doubling, then Newton safeguarded
// by bisection.  S is strictly decreasing, so the root is unique when it
// exists; with a degenerate context (every observation in the state that
// maximizes dbar) S never crosses zero and the root sits at infinity, so
// the bracket is capped where the tilt still has positive mass in double
// precision and the caller's decrease check takes over from there.
double solve_score(const EifBundle& b, const ScoreCounts& sc) {
  auto [s0, sp0] = score_at(b, sc, 0.0);
  if (s0 == 0.0 || sp0 == 0.0) return 0.0;
  double dmax = 0.0;
  for (const auto& [cl, d] : b.table) dmax = std::max(dmax, std::abs(d));
  const double cap = dmax > 0.0 ? 600.0 / dmax : 1.0;
  const double dir = s0 > 0.0 ? 1.0 : -1.0;  // root lies on this side of 0
  double lo = 0.0, hi = dir;
  bool bracketed = false;
  while (std::abs(hi) <= cap) {
    if (score_at(b, sc, hi).first * dir < 0.0) {
      bracketed = true;
      break;
    }
    lo = hi;
    hi *= 2.0;
  }
  if (!bracketed) return cap * dir;
  double eps = lo;
  for (int it = 0; it < 100; ++it) {
    auto [s, sp] = score_at(b, sc, eps);
    if (std::abs(s) <= 1e-14) break;
    if (s * dir > 0.0) lo = eps; else hi = eps;
    double next = sp < 0.0 ? eps - s / sp : 0.5 * (lo + hi);
    if (!((next > std::min(lo, hi)) && (next < std::max(lo, hi)))) next = 0.5 * (lo + hi);
    if (std::abs(next - eps) <= 1e-15 * (1.0 + std::abs(eps))) { eps = next; break; }
    eps = next;
  }
  return eps;
}

TransitionTable tilt_table(const TransitionTable& q, const EifBundle& b, double eps) {
  std::vector<long long> codes = q.codes();
  std::vector<std::vector<double>> rows;
  rows.reserve(codes.size());
  for (long long c : codes) {
    const auto span = q.row(c);
    std::vector<double> row(span.begin(), span.end());
    if (b.q_rows.count(c)) row = tilt_row(row, b, c, eps);
    rows.push_back(std::move(row));
  }
  return TransitionTable(q.n_states(), std::move(codes), std::move(rows));
}

}  // namespace

EstimateRecord one_step(const ScenarioSpec& spec, const TransitionTable& q_hat, const EifBundle& bundle,
                        double budget, long long mc_paths, std::uint64_t mc_seed) {
  EstimateRecord rec;
  rec.estimator = "one-step";
  const GcompResult plug = plugin_mean(spec, q_hat, budget, mc_paths, mc_seed);
  rec.psi_plugin = plug.value;
  rec.plugin_se = plug.se;
  rec.psi_hat = plug.value + bundle.pn;
  rec.pn_init = rec.pn_final = bundle.pn;
  rec.sigma_hat = std::sqrt(std::max(0.0, bundle.sigma2));
  rec.sigma_hat_inf = std::sqrt(std::max(0.0, bundle.sigma2_inf));
  rec.q_star = q_hat;
  rec.pn_trace = {std::abs(bundle.pn)};
  if (!bundle.nodes.empty()) rec.checkpoint = bundle.nodes.back().t;
  return rec;
}

EstimateRecord tmle(const ScenarioSpec& spec, const TransitionTable& q_hat, const TrialData& data,
                    const DesignEngine& engine, double tol, int max_iter, int rep,
                    const std::string& backend, double budget, long long mc_paths, std::uint64_t mc_seed) {
  if (tol <= 0.0) throw ValidationError("tmle: tol must be positive");
  if (max_iter < 0) throw ValidationError("tmle: max_iter must be nonnegative");

  EstimateRecord rec;
  rec.estimator = "tmle";
  rec.checkpoint = data.T;

  TransitionTable q_cur = q_hat;
  ContextMarginals marg = context_marginals(spec, q_cur, engine, data.T, "auto", budget);
  EifBundle bundle = eif_components(spec, q_cur, data, engine, marg, rep, backend, budget, mc_paths, mc_seed);
  {
    const GcompResult plug = plugin_mean(spec, q_hat, budget, 100000, mc_seed);
    rec.psi_plugin = plug.value;
    rec.plugin_se = plug.se;
  }
  rec.pn_init = bundle.pn;
  rec.pn_trace = {std::abs(bundle.pn)};

  const double n_nodes = static_cast<double>(bundle.nodes.size());
  const double threshold = tol / std::sqrt(std::max(1.0, n_nodes));
  while (std::abs(bundle.pn) > threshold && rec.iterations < max_iter) {
    const ScoreCounts sc = count_nodes(bundle, spec.n_states);
    double eps = solve_score(bundle, sc);
    bool accepted = false;
    for (int half = 0; half < 40 && eps != 0.0; ++half) {
      const TransitionTable q_try = tilt_table(q_cur, bundle, eps);
      // An extreme step can push a tilted row against the boundary; such a
      // density fails evaluation and is rejected like any non-improving step.
      try {
        const ContextMarginals m_try = context_marginals(spec, q_try, engine, data.T, "auto", budget);
        EifBundle b_try = eif_components(spec, q_try, data, engine, m_try, rep, backend, budget, mc_paths, mc_seed);
        if (std::abs(b_try.pn) < std::abs(bundle.pn)) {
          q_cur = q_try;
          marg = m_try;
          bundle = std::move(b_try);
          accepted = true;
          break;
        }
      } catch (const ValidationError&) {
      } catch (const PositivityError&) {
      }
      eps *= 0.5;
    }
    if (!accepted) break;  // no improving step along the tilt: stall
    ++rec.iterations;
    rec.pn_trace.push_back(std::abs(bundle.pn));
  }

  rec.converged = std::abs(bundle.pn) <= threshold;
  const GcompResult plug_star = plugin_mean(spec, q_cur, budget, 100000, mc_seed);
  rec.psi_hat = plug_star.value;
  rec.plugin_se = std::max(rec.plugin_se, plug_star.se);
  rec.pn_final = bundle.pn;
  rec.sigma_hat = std::sqrt(std::max(0.0, bundle.sigma2));
  rec.sigma_hat_inf = std::sqrt(std::max(0.0, bundle.sigma2_inf));
  rec.q_star = std::move(q_cur);
  return rec;
}

ExpansionDiagnostics expansion_diagnostics(const ScenarioSpec& spec, const TransitionTable& q_star,
                                           const TrialData& data, const DesignEngine& engine, int rep,
                                           double budget) {
  ExpansionDiagnostics out;
  const ContextMarginals marg_star = context_marginals(spec, q_star, engine, data.T, "auto", budget);
  const ContextMarginals marg_0 = context_marginals(spec, spec.q0, engine, data.T, "auto", budget);
  const EifBundle b_star = eif_components(spec, q_star, data, engine, marg_star, rep, "auto", budget);
  const EifBundle b_0 = eif_components(spec, spec.q0, data, engine, marg_0, rep, "auto", budget);

  // Population means of both gradients under the truth's occupancy; the
  // truth's own gradient is conditionally centered, so mean_d_0 is pure
  // floating-point residue.
  const RemainderReport rem = remainder_exact(spec, engine, data.T, q_star, 0, budget);
  double mean_d_0 = 0.0;
  for (const auto& [c, w] : marg_0.hbar_l) {
    if (w <= 0.0) continue;
    double inner = 0.0;
    for (int l = 0; l < spec.n_states; ++l) inner += spec.q0.prob(c, l) * b_0.at(c, l);
    mean_d_0 += w * inner;
  }

  out.pn_star = b_star.pn;
  out.psi_q0 = rem.psi_q0;
  out.psi_hat = rem.psi_q + b_star.pn;
  out.m1 = b_0.pn;
  out.m2_term = (b_star.pn - b_0.pn) - (rem.mean_d - mean_d_0);
  out.r = rem.r;
  out.residual = (out.psi_hat - out.psi_q0) - (out.m1 + out.m2_term + out.r);
  return out;
}

std::vector<EstimateRecord> estimate_sequence(const ScenarioSpec& spec, const DesignEngine& engine, int T_max,
                                              int N, const std::vector<int>& checkpoints,
                                              const SequenceConfig& cfg, std::uint64_t seed) {
  if (N != spec.N)
    throw ValidationError("estimate_sequence: N must match the scenario's unit count");
  if (checkpoints.empty()) throw ValidationError("estimate_sequence: need at least one checkpoint");
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    if (checkpoints[k] < spec.tau || checkpoints[k] > T_max)
      throw ValidationError("estimate_sequence: checkpoints must lie in [tau, T_max]");
    if (k > 0 && checkpoints[k] <= checkpoints[k - 1])
      throw ValidationError("estimate_sequence: checkpoints must be strictly increasing");
  }

  const TrialData full = simulate_trial(spec, engine, T_max, N, seed, cfg.stream);
  const double psi_ref = std::isnan(cfg.psi_ref)
                             ? plugin_mean(spec, spec.q0, cfg.budget, 100000, seed).value
                             : cfg.psi_ref;

  std::vector<EstimateRecord> records;
  for (int t : checkpoints) {
    TrialData prefix(N, t);
    for (int r = 1; r <= t; ++r) {
      for (int i = 1; i <= N; ++i) {
        prefix.set_a(r, i, full.a(r, i));
        prefix.set_l(r, i, full.l(r, i));
      }
    }
    const FittedDensity fit = cfg.eps0 < 0.0 ? fit_tabular_mle(prefix, spec)
                                             : fit_tabular_mle(prefix, spec, cfg.eps0);
    const ContextMarginals marg = context_marginals(spec, fit.q_hat, engine, t, "auto", cfg.budget);
    const EifBundle bundle =
        eif_components(spec, fit.q_hat, prefix, engine, marg, cfg.rep, cfg.backend, cfg.budget);

    EstimateRecord os = one_step(spec, fit.q_hat, bundle, cfg.budget);
    os.checkpoint = t;
    EstimateRecord tm = tmle(spec, fit.q_hat, prefix, engine, cfg.tol, cfg.max_iter, cfg.rep, cfg.backend,
                             cfg.budget);
    const double scale = (static_cast<double>(t) / T_max) * std::sqrt(static_cast<double>(T_max) * N);
    os.rescaled = os.sigma_hat > 0.0 ? scale * (os.psi_hat - psi_ref) / os.sigma_hat : 0.0;
    tm.rescaled = tm.sigma_hat > 0.0 ? scale * (tm.psi_hat - psi_ref) / tm.sigma_hat : 0.0;
    records.push_back(std::move(os));
    records.push_back(std::move(tm));
  }
  return records;
}

void write_sequence_csv(const std::vector<EstimateRecord>& records, std::ostream& os) {
  os << "checkpoint,psi_onestep,psi_tmle,sigma,pn_eif,iterations\n";
  os << std::setprecision(17);
  std::map<int, std::pair<const EstimateRecord*, const EstimateRecord*>> by_cp;
  for (const EstimateRecord& r : records) {
    auto& slot = by_cp[r.checkpoint];
    (r.estimator == "tmle" ? slot.second : slot.first) = &r;
  }
  for (const auto& [cp, slot] : by_cp) {
    const EstimateRecord* lead = slot.second ? slot.second : slot.first;
    if (!lead) continue;
    os << cp << ',';
    if (slot.first) os << slot.first->psi_hat;
    os << ',';
    if (slot.second) os << slot.second->psi_hat;
    os << ',' << lead->sigma_hat << ',' << lead->pn_final << ',' << lead->iterations << '\n';
  }
}

void write_sequence_csv_file(const std::vector<EstimateRecord>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("write_sequence_csv_file: cannot open " + path);
  write_sequence_csv(records, os);
}

}  // namespace nettrial
