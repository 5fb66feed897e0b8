#include "nettrial/stopping.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <utility>

#include "nettrial/rng.hpp"
#include "nettrial/sim.hpp"

namespace nettrial {

namespace {

void check_family(const std::string& family) {
  if (family != "constant" && family != "sqrt")
    throw ValidationError("StopPlan: unknown band family '" + family + "' (expected constant or sqrt)");
}

GcompResult exact_mean(const ScenarioSpec& spec, const TransitionTable& q, double budget) {
  if (scenario_block_local(spec)) return gcomp_chain(spec, q);
  try {
    return gcomp_exact(spec, q, 0, budget);
  } catch (const BudgetError&) {
    return gcomp_mc(spec, q, 0, 100000, 4242);
  }
}

}  // namespace

// Acklam's rational approximation of the standard normal quantile,
// |error| < 1.2e-9 over (0, 1).
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("normal_quantile: p must lie in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - plow) {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / 1.4142135623730950488); }


// ---------------------------------------------------------------------------
// StopPlan

double StopPlan::a_of(double frac) const {
  check_family(family);
  if (!(frac >= t0 - 1e-9 && frac <= 1.0 + 1e-9))
    throw ValidationError("StopPlan: band queried at fraction " + std::to_string(frac) +
                          " outside the monitored window [t0, 1]");
  if (family == "sqrt") return u * std::sqrt(std::clamp(frac, t0, 1.0));
  return u;
}

void StopPlan::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("StopPlan: alpha must lie in (0, 1)");
  if (!(t0 > 0.0 && t0 <= 1.0)) throw ValidationError("StopPlan: t0 must lie in (0, 1]");
  check_family(family);
  if (!(std::isfinite(u) && u > 0.0)) throw ValidationError("StopPlan: band parameter must be positive and finite");
  if (T_max < 0) throw ValidationError("StopPlan: T_max must be nonnegative");
  if (grid.size() != band.size()) throw ValidationError("StopPlan: grid and band sizes differ");
  // Single-look floor: the band can never undercut the fixed-sample
  // quantile scaled to the burn-in time.  A 3% allowance absorbs the
  // Monte Carlo error of simulation-calibrated levels.
  const double floor_val = 0.97 * std::sqrt(t0) * normal_quantile(1.0 - alpha / 2.0);
  double prev = t0 - 1e-9;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (!(grid[k] >= prev && grid[k] <= 1.0 + 1e-9))
      throw ValidationError("StopPlan: grid must increase within [t0, 1]");
    prev = grid[k];
    if (!(std::isfinite(band[k]) && band[k] > 0.0))
      throw ValidationError("StopPlan: band values must be positive and finite");
    if (band[k] < floor_val)
      throw ValidationError("StopPlan: band dips below the single-look floor sqrt(t0) z_{1-alpha/2}");
  }
}

json StopPlan::to_json() const {
  return json{{"alpha", alpha},
              {"t0", t0},
              {"T_max", T_max},
              {"family", family},
              {"u", u},
              {"grid", grid},
              {"band", band},
              {"coverage", coverage},
              {"coverage_se", coverage_se},
              {"mc_paths", mc_paths},
              {"grid_size", grid_size},
              {"seed", seed}};
}

StopPlan StopPlan::from_json(const json& j) {
  static const char* keys[] = {"alpha",    "t0",          "T_max",    "family",    "u",    "grid",
                               "band",     "coverage",    "coverage_se", "mc_paths", "grid_size", "seed"};
  if (!j.is_object()) throw ValidationError("StopPlan: JSON payload must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) throw ValidationError("StopPlan: unknown key '" + item.key() + "'");
  }
  for (const char* k : keys)
    if (!j.contains(k)) throw ValidationError(std::string("StopPlan: missing key '") + k + "'");
  StopPlan p;
  try {
    p.alpha = j.at("alpha").get<double>();
    p.t0 = j.at("t0").get<double>();
    p.T_max = j.at("T_max").get<int>();
    p.family = j.at("family").get<std::string>();
    p.u = j.at("u").get<double>();
    p.grid = j.at("grid").get<std::vector<double>>();
    p.band = j.at("band").get<std::vector<double>>();
    p.coverage = j.at("coverage").get<double>();
    p.coverage_se = j.at("coverage_se").get<double>();
    p.mc_paths = j.at("mc_paths").get<long long>();
    p.grid_size = j.at("grid_size").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("StopPlan: malformed JSON payload: ") + e.what());
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Band calibration

StopPlan wiener_band(double alpha, double t0, const std::string& family, long long mc_paths,
                     int grid_size, std::uint64_t seed) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("wiener_band: alpha must lie in (0, 1)");
  if (!(t0 > 0.0 && t0 <= 1.0)) throw ValidationError("wiener_band: t0 must lie in (0, 1]");
  check_family(family);
  if (mc_paths < 100) throw ValidationError("wiener_band: need at least 100 simulated paths");
  if (grid_size < 1) throw ValidationError("wiener_band: grid_size must be positive");

  const int G = grid_size;
  const int j0 = std::max(1, static_cast<int>(std::ceil(t0 * G - 1e-9)));
  const double step_sd = std::sqrt(1.0 / G);
  const bool scaled = family == "sqrt";

  Rng rng(seed, 0);
  std::vector<double> sups(static_cast<std::size_t>(mc_paths), 0.0);
  for (long long p = 0; p < mc_paths; ++p) {
    double w = 0.0, m = 0.0;
    for (int jj = 1; jj <= G; ++jj) {
      w += step_sd * rng.normal();
      if (jj < j0) continue;
      const double v = scaled ? std::abs(w) / std::sqrt(static_cast<double>(jj) / G) : std::abs(w);
      m = std::max(m, v);
    }
    sups[static_cast<std::size_t>(p)] = m;
  }
  std::vector<double> sorted = sups;
  std::sort(sorted.begin(), sorted.end());
  long long k = static_cast<long long>(std::ceil((1.0 - alpha) * static_cast<double>(mc_paths)));
  k = std::clamp(k, static_cast<long long>(1), mc_paths);
  const double u = sorted[static_cast<std::size_t>(k - 1)];
  const auto covered =
      std::upper_bound(sorted.begin(), sorted.end(), u) - sorted.begin();
  const double coverage = static_cast<double>(covered) / static_cast<double>(mc_paths);

  StopPlan plan;
  plan.alpha = alpha;
  plan.t0 = t0;
  plan.family = family;
  plan.u = u;
  plan.coverage = coverage;
  plan.coverage_se = std::sqrt(coverage * (1.0 - coverage) / static_cast<double>(mc_paths));
  plan.mc_paths = mc_paths;
  plan.grid_size = grid_size;
  plan.seed = seed;
  plan.grid.reserve(static_cast<std::size_t>(G - j0 + 1));
  plan.band.reserve(static_cast<std::size_t>(G - j0 + 1));
  for (int jj = j0; jj <= G; ++jj) {
    const double frac = static_cast<double>(jj) / G;
    plan.grid.push_back(frac);
    plan.band.push_back(plan.a_of(frac));
  }
  plan.validate();
  return plan;
}

// ---------------------------------------------------------------------------
// Sequential testing

double stop_boundary(const StopPlan& plan, int T, double sigma, int N) {
  if (plan.T_max < 1) throw ValidationError("stop_boundary: plan.T_max must be set before testing");
  if (T < 1 || T > plan.T_max) throw ValidationError("stop_boundary: checkpoint outside [1, T_max]");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("stop_boundary: sigma must be positive");
  if (N < 1) throw ValidationError("stop_boundary: N must be positive");
  const double frac = static_cast<double>(T) / plan.T_max;
  return sigma * std::sqrt(static_cast<double>(plan.T_max) / T) * plan.a_of(frac) /
         std::sqrt(static_cast<double>(N) * T);
}

SequentialDecision sequential_test(const std::vector<EstimateRecord>& records, double sigma, int N,
                                   const StopPlan& plan, double psi0, const std::string& estimator) {
  if (plan.T_max < 1) throw ValidationError("sequential_test: plan.T_max must be set before testing");
  if (!(plan.t0 > 0.0 && plan.t0 <= 1.0)) throw ValidationError("sequential_test: plan.t0 must lie in (0, 1]");
  check_family(plan.family);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("sequential_test: sigma must be positive");
  if (N < 1) throw ValidationError("sequential_test: N must be positive");
  if (!std::isfinite(psi0)) throw ValidationError("sequential_test: psi0 must be finite");

  std::vector<std::pair<int, double>> seq;  // (checkpoint, psi_hat) for the chosen estimator
  for (const auto& r : records) {
    if (r.estimator != estimator) continue;
    if (r.checkpoint < 1 || r.checkpoint > plan.T_max)
      throw ValidationError("sequential_test: record checkpoint outside [1, T_max]");
    if (!seq.empty() && r.checkpoint <= seq.back().first)
      throw ValidationError("sequential_test: checkpoints must be strictly increasing");
    seq.emplace_back(r.checkpoint, r.psi_hat);
  }
  if (seq.empty()) throw ValidationError("sequential_test: no records for estimator '" + estimator + "'");
  if (seq.back().first != plan.T_max)
    throw ValidationError("sequential_test: records must reach the planned horizon T_max");

  const double burn = plan.t0 * plan.T_max - 1e-9;
  SequentialDecision out;
  for (const auto& [T, psi] : seq) {
    if (static_cast<double>(T) < burn) continue;  // burn-in: never tested
    const double bound = stop_boundary(plan, T, sigma, N);
    const double stat = (psi - psi0) / bound;  // NB bound may be +inf: stat 0, never rejects
    out.trajectory.push_back({T, stat});
    if (std::abs(stat) > 1.0) {
      out.stop_time = T;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replicated error-rate studies

StopStudyReport type_one_error_study(const ScenarioSpec& spec, const DesignEngine& engine, int T_max,
                                     int N, const StopPlan& plan_in, int replications,
                                     std::uint64_t seed, const StopStudyConfig& cfg) {
  spec.validate();
  if (replications < 1) throw ValidationError("type_one_error_study: need at least one replication");
  if (T_max < spec.tau) throw ValidationError("type_one_error_study: T_max must be at least tau");
  if (cfg.estimator != "tmle" && cfg.estimator != "one-step")
    throw ValidationError("type_one_error_study: estimator must be tmle or one-step");

  StopPlan plan = plan_in;
  if (plan.T_max == 0)
    plan.T_max = T_max;
  else if (plan.T_max != T_max)
    throw ValidationError("type_one_error_study: plan.T_max disagrees with the study horizon");

  // Checkpoint schedule: every round from the burn-in round by default.
  const double burn = plan.t0 * T_max - 1e-9;
  std::vector<int> checkpoints = cfg.checkpoints;
  if (checkpoints.empty()) {
    int first = std::max(spec.tau, static_cast<int>(std::ceil(plan.t0 * T_max - 1e-9)));
    first = std::max(first, 1);
    for (int t = first; t <= T_max; ++t) checkpoints.push_back(t);
  } else {
    int prev = spec.tau - 1;
    for (int t : checkpoints) {
      if (t <= prev) throw ValidationError("type_one_error_study: checkpoints must increase from tau on");
      if (t > T_max) throw ValidationError("type_one_error_study: checkpoint beyond T_max");
      prev = t;
    }
    if (checkpoints.back() != T_max)
      throw ValidationError("type_one_error_study: the last checkpoint must be T_max");
  }
  std::size_t burn_idx = checkpoints.size();
  for (std::size_t k = 0; k < checkpoints.size(); ++k)
    if (static_cast<double>(checkpoints[k]) >= burn) {
      burn_idx = k;
      break;
    }
  if (burn_idx == checkpoints.size())
    throw ValidationError("type_one_error_study: no checkpoint inside the monitored window");

  const double psi_truth = exact_mean(spec, spec.q0, cfg.budget).value;
  const double psi0 = std::isnan(cfg.psi0) ? psi_truth : cfg.psi0;
  if (!std::isfinite(psi0)) throw ValidationError("type_one_error_study: psi0 must be finite");

  StopStudyReport report;
  report.replications = replications;
  report.psi0 = psi0;
  report.rows.reserve(static_cast<std::size_t>(replications));
  int stops = 0;
  double sigma_sum = 0.0;

  if (cfg.oracle) {
    // One gradient table per checkpoint at the truth, shared by all
    // replications; only the empirical gradient mean varies with data.
    std::vector<EifBundle> bundles;
    bundles.reserve(checkpoints.size());
    for (int T : checkpoints) {
      const ContextMarginals marg = context_marginals(spec, spec.q0, engine, T, cfg.backend, cfg.budget);
      bundles.push_back(eif_table(spec, spec.q0, engine, marg, cfg.rep, cfg.backend, cfg.budget));
    }
    const double sigma = std::sqrt(std::max(0.0, bundles[burn_idx].sigma2_inf));
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw ValidationError("type_one_error_study: degenerate stationary scale at the burn-in checkpoint");
    const double shift = psi_truth - psi0;  // psi_hat - psi0 = shift + P_n dbar

    for (int r = 0; r < replications; ++r) {
      const TrialData data = simulate_trial(spec, engine, T_max, N, seed, cfg.stream0 + static_cast<std::uint64_t>(r));
      const TrialView view{&data, &spec.initial_state};
      std::map<std::pair<long long, int>, double> counts;
      int folded = 0;
      StopStudyRow row;
      row.rep = r;
      for (std::size_t k = 0; k < checkpoints.size(); ++k) {
        const int T = checkpoints[k];
        for (int t = folded + 1; t <= T; ++t)
          for (int i = 1; i <= N; ++i) counts[{spec.sum_l->code(view, t, i), data.l(t, i)}] += 1.0;
        folded = T;
        if (static_cast<double>(T) < burn) continue;
        double pn = 0.0;
        for (const auto& [key, n] : counts) pn += n * bundles[k].at(key.first, key.second);
        pn /= static_cast<double>(T) * N;
        const double stat = (shift + pn) / stop_boundary(plan, T, sigma, N);
        row.terminal_stat = stat;
        if (std::abs(stat) > 1.0) {
          row.stop_time = T;
          break;
        }
      }
      if (row.stop_time >= 0) ++stops;
      sigma_sum += sigma;
      report.rows.push_back(row);
    }
    report.info = json{{"mode", "oracle"},
                       {"burn_in_checkpoint", checkpoints[burn_idx]},
                       {"checkpoints", checkpoints.size()},
                       {"psi_truth", psi_truth}};
  } else {
    for (int r = 0; r < replications; ++r) {
      SequenceConfig est = cfg.est;
      est.stream = cfg.stream0 + static_cast<std::uint64_t>(r);
      const std::vector<EstimateRecord> records =
          estimate_sequence(spec, engine, T_max, N, checkpoints, est, seed);
      double sigma = 0.0;
      for (const auto& rec : records)
        if (rec.estimator == cfg.estimator && static_cast<double>(rec.checkpoint) >= burn) {
          sigma = rec.sigma_hat_inf;
          break;
        }
      if (!(sigma > 0.0) || !std::isfinite(sigma))
        throw ValidationError("type_one_error_study: degenerate frozen scale at the burn-in checkpoint");
      const SequentialDecision dec = sequential_test(records, sigma, N, plan, psi0, cfg.estimator);
      StopStudyRow row;
      row.rep = r;
      row.stop_time = dec.stop_time;
      row.terminal_stat = dec.trajectory.empty() ? 0.0 : dec.trajectory.back().stat;
      if (row.stop_time >= 0) ++stops;
      sigma_sum += sigma;
      report.rows.push_back(row);
    }
    report.info = json{{"mode", "fitted"},
                       {"burn_in_checkpoint", checkpoints[burn_idx]},
                       {"checkpoints", checkpoints.size()},
                       {"estimator", cfg.estimator},
                       {"psi_truth", psi_truth}};
  }

  report.rate = static_cast<double>(stops) / replications;
  report.se = std::sqrt(report.rate * (1.0 - report.rate) / replications);
  report.sigma = sigma_sum / replications;
  return report;
}

void write_stop_study_csv(const std::vector<StopStudyRow>& rows, std::ostream& os) {
  os << "rep,stop_time,terminal_stat\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.rep << ',' << r.stop_time << ',' << r.terminal_stat << '\n';
}

void write_stop_study_csv_file(const std::vector<StopStudyRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("write_stop_study_csv_file: cannot open " + path);
  write_stop_study_csv(rows, os);
  os.close();
  if (!os) throw ValidationError("write_stop_study_csv_file: write failed for " + path);
}

}  // namespace nettrial
