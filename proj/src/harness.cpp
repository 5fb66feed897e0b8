#include "nettrial/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>
#include <utility>

#include "nettrial/nuisance.hpp"
#include "nettrial/sim.hpp"

namespace nettrial {

namespace {

// ---------------------------------------------------------------------------
// JSON schema helpers (strict: unknown keys are configuration bugs)

void expect_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    if (!known) throw ValidationError(where + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
T get_field(const json& j, const std::string& where, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": malformed '" + key + "': " + e.what());
  }
}

template <typename T>
T need_field(const json& j, const std::string& where, const char* key) {
  if (!j.contains(key)) throw ValidationError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": malformed '" + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Shared numerics

GcompResult exact_mean(const ScenarioSpec& spec, const TransitionTable& q, double budget) {
  if (scenario_block_local(spec)) return gcomp_chain(spec, q);
  try {
    return gcomp_exact(spec, q, 0, budget);
  } catch (const BudgetError&) {
    return gcomp_mc(spec, q, 0, 100000, 4242);
  }
}

double median_of(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n < 2) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
    sab += (a[k] - ma) * (b[k] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Kolmogorov-Smirnov distance of a sample from the standard normal.
double ks_normal(std::vector<double> z) {
  if (z.empty()) throw ValidationError("KS of an empty sample");
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  double d = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double f = normal_cdf(z[k]);
    d = std::max(d, std::max(f - static_cast<double>(k) / n, static_cast<double>(k + 1) / n - f));
  }
  return d;
}

double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
  }
  if (!(sxx > 0.0)) throw ValidationError("rate slope needs at least two distinct sample sizes");
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Replication runner: slot-indexed results, so the merge order and every
// stream assignment are independent of the worker count.

struct RepOutcome {
  bool ok = false;
  std::exception_ptr eptr;
  std::string error;
};

template <typename Body>
void run_one(int r, Body& body, RepOutcome& out) {
  const std::string pre = "replication " + std::to_string(r) + ": ";
  try {
    body(r);
    out.ok = true;
  } catch (const BudgetError& e) {
    out.error = pre + e.what();
    out.eptr = std::make_exception_ptr(BudgetError(out.error));
  } catch (const PositivityError& e) {
    out.error = pre + e.what();
    out.eptr = std::make_exception_ptr(PositivityError(out.error));
  } catch (const UnsupportedError& e) {
    out.error = pre + e.what();
    out.eptr = std::make_exception_ptr(UnsupportedError(out.error));
  } catch (const ModelMismatchError& e) {
    out.error = pre + e.what();
    out.eptr = std::make_exception_ptr(ModelMismatchError(out.error));
  } catch (const std::exception& e) {
    out.error = pre + e.what();
    out.eptr = std::make_exception_ptr(ValidationError(out.error));
  }
}

template <typename Body>
std::vector<RepOutcome> run_replications(int total, int workers, Body body) {
  std::vector<RepOutcome> out(static_cast<std::size_t>(total));
  const int w = std::clamp(workers, 1, std::max(1, total));
  if (w <= 1 || total <= 1) {
    for (int r = 0; r < total; ++r) run_one(r, body, out[static_cast<std::size_t>(r)]);
    return out;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(w));
  for (int k = 0; k < w; ++k)
    pool.emplace_back([&] {
      while (true) {
        const int r = next.fetch_add(1);
        if (r >= total) break;
        run_one(r, body, out[static_cast<std::size_t>(r)]);
      }
    });
  for (auto& th : pool) th.join();
  return out;
}

// First failure aborts unless skip_failed; otherwise the failed indices
// are reported for the summary.
std::vector<int> resolve_failures(const std::vector<RepOutcome>& outcomes, bool skip_failed) {
  std::vector<int> failed;
  for (std::size_t r = 0; r < outcomes.size(); ++r)
    if (!outcomes[r].ok) failed.push_back(static_cast<int>(r));
  if (!failed.empty() && !skip_failed)
    std::rethrow_exception(outcomes[static_cast<std::size_t>(failed.front())].eptr);
  return failed;
}

json failed_json(const std::vector<int>& failed) {
  return json{{"count", failed.size()}, {"replications", failed}};
}

std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Density fit honoring the configured shrinkage (< 0 = fitter default).
TransitionTable fit_density(const TrialData& data, const ScenarioSpec& spec, const EstimatorSettings& est) {
  if (est.nuisance == "hal") {
    static const std::vector<double> lambda_grid = {1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0};
    return fit_hal_lasso(data, spec, lambda_grid).q_hat;
  }
  return (est.eps0 < 0.0 ? fit_tabular_mle(data, spec) : fit_tabular_mle(data, spec, est.eps0)).q_hat;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration schema

json ExperimentConfig::to_json() const {
  json d;
  if (design.kind == "fixed") {
    d = json{{"kind", "fixed"}, {"rule", design.rule.to_json()}};
  } else {
    json cands = json::array();
    for (const auto& c : design.candidates) cands.push_back(c.to_json());
    d = json{{"kind", "adaptive"},
             {"initial", design.initial.to_json()},
             {"candidates", cands},
             {"checkpoints", design.checkpoints},
             {"selection",
              json{{"horizon", design.selection.horizon},
                   {"eps0", design.selection.eps0},
                   {"rep", design.selection.rep},
                   {"backend", design.selection.backend},
                   {"budget", design.selection.budget},
                   {"mc_paths", design.selection.mc_paths},
                   {"criterion_seed", design.selection.criterion_seed}}}};
  }
  return json{{"version", version},
              {"study", study},
              {"scenario", json{{"inline", scenario.to_json()}}},
              {"design", d},
              {"estimator",
               json{{"nuisance", estimator.nuisance},
                    {"eps0", estimator.eps0},
                    {"estimator", estimator.estimator},
                    {"tol", estimator.tol},
                    {"max_iter", estimator.max_iter},
                    {"rep", estimator.rep},
                    {"backend", estimator.backend},
                    {"budget", estimator.budget}}},
              {"stopping",
               json{{"alpha", stopping.alpha},
                    {"t0", stopping.t0},
                    {"family", stopping.family},
                    {"mc_paths", stopping.mc_paths},
                    {"grid_size", stopping.grid_size},
                    {"seed", stopping.seed}}},
              {"horizon", horizon},
              {"checkpoints", checkpoints},
              {"replications", replications},
              {"seed", seed},
              {"out", out},
              {"n_grid", n_grid},
              {"ci_level", ci_level},
              {"psi0_shift", psi0_shift}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  expect_keys(j, "config",
              {"version", "study", "scenario", "design", "estimator", "stopping", "horizon", "checkpoints",
               "replications", "seed", "out", "n_grid", "ci_level", "psi0_shift"});
  ExperimentConfig cfg;
  cfg.version = need_field<int>(j, "config", "version");
  if (cfg.version != 1) throw ValidationError("config: unsupported version " + std::to_string(cfg.version));

  // Scenario: named factory or inline specification.
  if (!j.contains("scenario")) throw ValidationError("config: missing key 'scenario'");
  const json& s = j.at("scenario");
  if (!s.is_object()) throw ValidationError("config.scenario: expected a JSON object");
  if (s.contains("inline")) {
    expect_keys(s, "config.scenario", {"inline"});
    try {
      cfg.scenario = ScenarioSpec::from_json(s.at("inline"));
    } catch (const json::exception& e) {
      throw ValidationError(std::string("config.scenario.inline: ") + e.what());
    }
  } else {
    const std::string f = need_field<std::string>(s, "config.scenario", "factory");
    if (f == "best-arm-binary") {
      expect_keys(s, "config.scenario", {"factory", "n_units", "p_arm"});
      cfg.scenario = make_best_arm_binary(need_field<int>(s, "config.scenario", "n_units"),
                                          need_field<std::vector<double>>(s, "config.scenario", "p_arm"));
    } else if (f == "best-arm") {
      expect_keys(s, "config.scenario", {"factory", "n_units", "arms", "states", "memory", "seed"});
      cfg.scenario = make_best_arm(
          need_field<int>(s, "config.scenario", "n_units"), need_field<int>(s, "config.scenario", "arms"),
          need_field<int>(s, "config.scenario", "states"), need_field<int>(s, "config.scenario", "memory"),
          need_field<std::uint64_t>(s, "config.scenario", "seed"));
    } else if (f == "cluster-mdp") {
      expect_keys(s, "config.scenario",
                  {"factory", "clusters", "cluster_size", "arms", "states", "dependence", "seed"});
      cfg.scenario = make_cluster_mdp(need_field<int>(s, "config.scenario", "clusters"),
                                      need_field<int>(s, "config.scenario", "cluster_size"),
                                      need_field<int>(s, "config.scenario", "arms"),
                                      need_field<int>(s, "config.scenario", "states"),
                                      need_field<double>(s, "config.scenario", "dependence"),
                                      need_field<std::uint64_t>(s, "config.scenario", "seed"));
    } else if (f == "household-censoring") {
      expect_keys(s, "config.scenario", {"factory", "households", "contacts", "t0", "seed"});
      cfg.scenario = make_household_censoring(
          need_field<std::vector<std::vector<int>>>(s, "config.scenario", "households"),
          need_field<std::vector<std::vector<int>>>(s, "config.scenario", "contacts"),
          need_field<int>(s, "config.scenario", "t0"),
          need_field<std::uint64_t>(s, "config.scenario", "seed"));
    } else {
      throw ValidationError("config.scenario: unknown factory '" + f + "'");
    }
  }
  const int n_arms = cfg.scenario.n_arms;

  // Design.
  cfg.design.rule = DesignRule::uniform(n_arms);
  cfg.design.initial = DesignRule::uniform(n_arms);
  if (j.contains("design")) {
    const json& d = j.at("design");
    expect_keys(d, "config.design", {"kind", "rule", "initial", "candidates", "checkpoints", "selection"});
    cfg.design.kind = get_field<std::string>(d, "config.design", "kind", "fixed");
    if (cfg.design.kind == "fixed") {
      for (const char* k : {"initial", "candidates", "checkpoints", "selection"})
        if (d.contains(k))
          throw ValidationError(std::string("config.design: '") + k + "' needs kind adaptive");
      if (d.contains("rule")) {
        try {
          cfg.design.rule = DesignRule::from_json(d.at("rule"));
        } catch (const json::exception& e) {
          throw ValidationError(std::string("config.design.rule: ") + e.what());
        }
      }
    } else if (cfg.design.kind == "adaptive") {
      if (d.contains("rule")) throw ValidationError("config.design: 'rule' needs kind fixed");
      try {
        if (d.contains("initial")) cfg.design.initial = DesignRule::from_json(d.at("initial"));
        const json& cands = d.at("candidates");
        if (!cands.is_array() || cands.empty())
          throw ValidationError("config.design.candidates: expected a non-empty array");
        for (const auto& c : cands) cfg.design.candidates.push_back(DesignRule::from_json(c));
      } catch (const json::exception& e) {
        throw ValidationError(std::string("config.design: ") + e.what());
      }
      cfg.design.checkpoints = need_field<std::vector<int>>(d, "config.design", "checkpoints");
      if (d.contains("selection")) {
        const json& sel = d.at("selection");
        expect_keys(sel, "config.design.selection",
                    {"horizon", "eps0", "rep", "backend", "budget", "mc_paths", "criterion_seed"});
        cfg.design.selection.horizon = get_field<int>(sel, "selection", "horizon", cfg.design.selection.horizon);
        cfg.design.selection.eps0 = get_field<double>(sel, "selection", "eps0", cfg.design.selection.eps0);
        cfg.design.selection.rep = get_field<int>(sel, "selection", "rep", cfg.design.selection.rep);
        cfg.design.selection.backend =
            get_field<std::string>(sel, "selection", "backend", cfg.design.selection.backend);
        cfg.design.selection.budget = get_field<double>(sel, "selection", "budget", cfg.design.selection.budget);
        cfg.design.selection.mc_paths =
            get_field<long long>(sel, "selection", "mc_paths", cfg.design.selection.mc_paths);
        cfg.design.selection.criterion_seed =
            get_field<std::uint64_t>(sel, "selection", "criterion_seed", cfg.design.selection.criterion_seed);
      }
    } else {
      throw ValidationError("config.design: kind must be fixed or adaptive");
    }
  }

  // Estimator.
  if (j.contains("estimator")) {
    const json& e = j.at("estimator");
    expect_keys(e, "config.estimator",
                {"nuisance", "eps0", "estimator", "tol", "max_iter", "rep", "backend", "budget"});
    cfg.estimator.nuisance = get_field<std::string>(e, "estimator", "nuisance", cfg.estimator.nuisance);
    cfg.estimator.eps0 = get_field<double>(e, "estimator", "eps0", cfg.estimator.eps0);
    cfg.estimator.estimator = get_field<std::string>(e, "estimator", "estimator", cfg.estimator.estimator);
    cfg.estimator.tol = get_field<double>(e, "estimator", "tol", cfg.estimator.tol);
    cfg.estimator.max_iter = get_field<int>(e, "estimator", "max_iter", cfg.estimator.max_iter);
    cfg.estimator.rep = get_field<int>(e, "estimator", "rep", cfg.estimator.rep);
    cfg.estimator.backend = get_field<std::string>(e, "estimator", "backend", cfg.estimator.backend);
    cfg.estimator.budget = get_field<double>(e, "estimator", "budget", cfg.estimator.budget);
  }
  if (cfg.estimator.nuisance != "oracle" && cfg.estimator.nuisance != "tabular" &&
      cfg.estimator.nuisance != "hal")
    throw ValidationError("config.estimator: nuisance must be oracle, tabular or hal");
  if (cfg.estimator.estimator != "tmle" && cfg.estimator.estimator != "one-step")
    throw ValidationError("config.estimator: estimator must be tmle or one-step");

  // Stopping.
  if (j.contains("stopping")) {
    const json& st = j.at("stopping");
    expect_keys(st, "config.stopping", {"alpha", "t0", "family", "mc_paths", "grid_size", "seed"});
    cfg.stopping.alpha = get_field<double>(st, "stopping", "alpha", cfg.stopping.alpha);
    cfg.stopping.t0 = get_field<double>(st, "stopping", "t0", cfg.stopping.t0);
    cfg.stopping.family = get_field<std::string>(st, "stopping", "family", cfg.stopping.family);
    cfg.stopping.mc_paths = get_field<long long>(st, "stopping", "mc_paths", cfg.stopping.mc_paths);
    cfg.stopping.grid_size = get_field<int>(st, "stopping", "grid_size", cfg.stopping.grid_size);
    cfg.stopping.seed = get_field<std::uint64_t>(st, "stopping", "seed", cfg.stopping.seed);
  }

  cfg.study = get_field<std::string>(j, "config", "study", "");
  cfg.horizon = get_field<int>(j, "config", "horizon", 0);
  cfg.checkpoints = get_field<std::vector<int>>(j, "config", "checkpoints", {});
  cfg.replications = get_field<int>(j, "config", "replications", 0);
  cfg.seed = get_field<std::uint64_t>(j, "config", "seed", 0);
  cfg.out = get_field<std::string>(j, "config", "out", "");
  cfg.n_grid = get_field<std::vector<long long>>(j, "config", "n_grid", {});
  cfg.ci_level = get_field<double>(j, "config", "ci_level", 0.95);
  cfg.psi0_shift = get_field<double>(j, "config", "psi0_shift", 0.0);
  if (cfg.replications < 0) throw ValidationError("config: replications must be nonnegative");
  if (!(cfg.ci_level > 0.0 && cfg.ci_level < 1.0)) throw ValidationError("config: ci_level must lie in (0, 1)");
  return cfg;
}

// ---------------------------------------------------------------------------
// Studies

namespace {

struct CoverageRow {
  double psi = 0.0, se = 0.0, lo = 0.0, hi = 0.0;
  bool hit = false;
};

StudyReport coverage_study(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  const ScenarioSpec& spec = cfg.scenario;
  const EstimatorSettings& est = cfg.estimator;
  const DesignEngine engine = DesignEngine::fixed(cfg.design.rule);
  const int T = cfg.horizon, N = spec.N, R = cfg.replications;
  const double psi0 = exact_mean(spec, spec.q0, est.budget).value;
  const double z = normal_quantile(0.5 + cfg.ci_level / 2.0);

  std::vector<CoverageRow> rows(static_cast<std::size_t>(R));
  std::vector<RepOutcome> outcomes;
  if (est.nuisance == "oracle") {
    const ContextMarginals marg = context_marginals(spec, spec.q0, engine, T, est.backend, est.budget);
    const EifBundle bundle = eif_table(spec, spec.q0, engine, marg, est.rep, est.backend, est.budget);
    outcomes = run_replications(R, workers, [&](int r) {
      const TrialData data = simulate_trial(spec, engine, T, N, cfg.seed, static_cast<std::uint64_t>(r));
      const TrialView view{&data, &spec.initial_state};
      double s1 = 0.0, s2 = 0.0;
      for (int t = 1; t <= T; ++t)
        for (int i = 1; i <= N; ++i) {
          const double d = bundle.at(spec.sum_l->code(view, t, i), data.l(t, i));
          s1 += d;
          s2 += d * d;
        }
      const double nodes = static_cast<double>(T) * N;
      const double pn = s1 / nodes;
      const double var = std::max(0.0, s2 / nodes - pn * pn);
      CoverageRow& row = rows[static_cast<std::size_t>(r)];
      row.psi = psi0 + pn;
      row.se = std::sqrt(var / nodes);
      row.lo = row.psi - z * row.se;
      row.hi = row.psi + z * row.se;
      row.hit = psi0 >= row.lo && psi0 <= row.hi;
    });
  } else {
    outcomes = run_replications(R, workers, [&](int r) {
      const TrialData data = simulate_trial(spec, engine, T, N, cfg.seed, static_cast<std::uint64_t>(r));
      const TransitionTable q_hat = fit_density(data, spec, est);
      EstimateRecord record;
      if (est.estimator == "tmle") {
        record = tmle(spec, q_hat, data, engine, est.tol, est.max_iter, est.rep, est.backend, est.budget);
      } else {
        const ContextMarginals marg = context_marginals(spec, q_hat, engine, T, est.backend, est.budget);
        const EifBundle bundle =
            eif_components(spec, q_hat, data, engine, marg, est.rep, est.backend, est.budget);
        record = one_step(spec, q_hat, bundle, est.budget);
      }
      CoverageRow& row = rows[static_cast<std::size_t>(r)];
      row.psi = record.psi_hat;
      row.se = record.sigma_hat / std::sqrt(static_cast<double>(T) * N);
      row.lo = row.psi - z * row.se;
      row.hi = row.psi + z * row.se;
      row.hit = psi0 >= row.lo && psi0 <= row.hi;
    });
  }
  const std::vector<int> failed = resolve_failures(outcomes, skip_failed);

  std::ostringstream csv;
  csv << "rep,psi_hat,se,lo,hi,hit\n";
  int hits = 0, ok = 0;
  double sum_psi = 0.0, sum_psi2 = 0.0, sum_se = 0.0;
  for (int r = 0; r < R; ++r) {
    if (!outcomes[static_cast<std::size_t>(r)].ok) continue;
    const CoverageRow& row = rows[static_cast<std::size_t>(r)];
    csv << r << ',' << csv_num(row.psi) << ',' << csv_num(row.se) << ',' << csv_num(row.lo) << ','
        << csv_num(row.hi) << ',' << (row.hit ? 1 : 0) << '\n';
    ++ok;
    hits += row.hit;
    sum_psi += row.psi;
    sum_psi2 += row.psi * row.psi;
    sum_se += row.se;
  }
  json summary{{"kind", "coverage"},  {"replications", R},      {"failed", failed_json(failed)},
               {"level", cfg.ci_level}, {"psi_truth", psi0},      {"nuisance", est.nuisance},
               {"estimator", est.estimator}};
  if (ok > 0) {
    const double rate = static_cast<double>(hits) / ok;
    const double mean_psi = sum_psi / ok;
    summary["rate"] = rate;
    summary["rate_se"] = std::sqrt(rate * (1.0 - rate) / ok);
    summary["mean_psi"] = mean_psi;
    summary["sd_psi"] = ok > 1 ? std::sqrt(std::max(0.0, (sum_psi2 - ok * mean_psi * mean_psi) / (ok - 1)))
                               : 0.0;
    summary["mean_se"] = sum_se / ok;
  } else {
    summary["rate"] = nullptr;
    summary["rate_se"] = nullptr;
    summary["mean_psi"] = nullptr;
    summary["sd_psi"] = nullptr;
    summary["mean_se"] = nullptr;
  }
  return {"coverage", std::move(summary), {{"replications.csv", csv.str()}}};
}

StudyReport type1_study(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  const ScenarioSpec& spec = cfg.scenario;
  const EstimatorSettings& est = cfg.estimator;
  const DesignEngine engine = DesignEngine::fixed(cfg.design.rule);
  const int T = cfg.horizon, N = spec.N, R = cfg.replications;
  const StopPlan plan = wiener_band(cfg.stopping.alpha, cfg.stopping.t0, cfg.stopping.family,
                                    cfg.stopping.mc_paths, cfg.stopping.grid_size, cfg.stopping.seed);
  const double psi_truth = exact_mean(spec, spec.q0, est.budget).value;

  StopStudyConfig scfg;
  scfg.checkpoints = cfg.checkpoints;
  scfg.oracle = est.nuisance == "oracle";
  scfg.estimator = est.estimator;
  scfg.est.tol = est.tol;
  scfg.est.max_iter = est.max_iter;
  scfg.est.rep = est.rep;
  scfg.est.backend = est.backend;
  scfg.est.budget = est.budget;
  scfg.est.eps0 = est.eps0;
  scfg.rep = est.rep;
  scfg.backend = est.backend;
  scfg.budget = est.budget;
  scfg.psi0 = psi_truth + cfg.psi0_shift;

  json summary{{"kind", "type1"},
               {"replications", R},
               {"alpha", cfg.stopping.alpha},
               {"t0", cfg.stopping.t0},
               {"family", cfg.stopping.family},
               {"band_u", plan.u},
               {"band_coverage", plan.coverage},
               {"psi_truth", psi_truth},
               {"psi0", scfg.psi0},
               {"nuisance", est.nuisance}};

  std::ostringstream csv;
  if (R == 0) {
    write_stop_study_csv({}, csv);
    summary["failed"] = failed_json({});
    summary["rate"] = nullptr;
    summary["rate_se"] = nullptr;
    summary["sigma"] = nullptr;
    return {"type1", std::move(summary), {{"replications.csv", csv.str()}, {"plan.json", plan.to_json().dump(2) + "\n"}}};
  }

  std::vector<StopStudyRow> rows(static_cast<std::size_t>(R));
  std::vector<double> sigmas(static_cast<std::size_t>(R), 0.0);
  std::vector<RepOutcome> outcomes;
  json info;
  if (scfg.oracle) {
    // One serial call: the per-checkpoint gradient tables are shared, so
    // splitting replications across calls would redo that precomputation.
    const StopStudyReport rep = type_one_error_study(spec, engine, T, N, plan, R, cfg.seed, scfg);
    rows = rep.rows;
    std::fill(sigmas.begin(), sigmas.end(), rep.sigma);
    outcomes.assign(static_cast<std::size_t>(R), RepOutcome{});
    for (auto& o : outcomes) o.ok = true;
    info = rep.info;
  } else {
    outcomes = run_replications(R, workers, [&](int r) {
      StopStudyConfig one = scfg;
      one.stream0 = static_cast<std::uint64_t>(r);
      const StopStudyReport rep = type_one_error_study(spec, engine, T, N, plan, 1, cfg.seed, one);
      rows[static_cast<std::size_t>(r)] = rep.rows.front();
      rows[static_cast<std::size_t>(r)].rep = r;
      sigmas[static_cast<std::size_t>(r)] = rep.sigma;
      if (info.is_null()) info = rep.info;  // identical across replications
    });
  }
  const std::vector<int> failed = resolve_failures(outcomes, skip_failed);

  std::vector<StopStudyRow> ok_rows;
  int stops = 0, ok = 0;
  double sigma_sum = 0.0;
  for (int r = 0; r < R; ++r) {
    if (!outcomes[static_cast<std::size_t>(r)].ok) continue;
    ok_rows.push_back(rows[static_cast<std::size_t>(r)]);
    stops += rows[static_cast<std::size_t>(r)].stop_time >= 0;
    sigma_sum += sigmas[static_cast<std::size_t>(r)];
    ++ok;
  }
  write_stop_study_csv(ok_rows, csv);
  summary["failed"] = failed_json(failed);
  if (ok > 0) {
    const double rate = static_cast<double>(stops) / ok;
    summary["rate"] = rate;
    summary["rate_se"] = std::sqrt(rate * (1.0 - rate) / ok);
    summary["sigma"] = sigma_sum / ok;
    summary["burn_in_checkpoint"] = info.is_object() ? info.value("burn_in_checkpoint", 0) : 0;
  } else {
    summary["rate"] = nullptr;
    summary["rate_se"] = nullptr;
    summary["sigma"] = nullptr;
  }
  return {"type1", std::move(summary), {{"replications.csv", csv.str()}, {"plan.json", plan.to_json().dump(2) + "\n"}}};
}

StudyReport fclt_study(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  const ScenarioSpec& spec = cfg.scenario;
  const EstimatorSettings& est = cfg.estimator;
  const DesignEngine engine = DesignEngine::fixed(cfg.design.rule);
  const int T = cfg.horizon, N = spec.N, R = cfg.replications;
  const double psi0 = exact_mean(spec, spec.q0, est.budget).value;

  std::vector<int> checkpoints = cfg.checkpoints;
  if (checkpoints.empty()) {
    for (int q = 1; q <= 4; ++q) {
      const int t = std::max(spec.tau, (q * T + 3) / 4);
      if (checkpoints.empty() || checkpoints.back() < t) checkpoints.push_back(t);
    }
  } else {
    int prev = spec.tau - 1;
    for (int t : checkpoints) {
      if (t <= prev || t > T) throw ValidationError("fclt: checkpoints must increase within [tau, horizon]");
      prev = t;
    }
    if (checkpoints.back() != T) throw ValidationError("fclt: the last checkpoint must be the horizon");
  }
  const std::size_t K = checkpoints.size();

  std::vector<std::vector<double>> x(static_cast<std::size_t>(R), std::vector<double>(K, 0.0));
  std::vector<double> z(static_cast<std::size_t>(R), 0.0);
  std::vector<RepOutcome> outcomes;
  double sigma_inf = 0.0;
  if (est.nuisance == "oracle") {
    std::vector<EifBundle> bundles;
    bundles.reserve(K);
    for (int t : checkpoints) {
      const ContextMarginals marg = context_marginals(spec, spec.q0, engine, t, est.backend, est.budget);
      bundles.push_back(eif_table(spec, spec.q0, engine, marg, est.rep, est.backend, est.budget));
    }
    sigma_inf = std::sqrt(std::max(0.0, bundles.back().sigma2_inf));
    if (!(sigma_inf > 0.0))
      throw ValidationError("fclt: degenerate stationary scale at the horizon");
    outcomes = run_replications(R, workers, [&](int r) {
      const TrialData data = simulate_trial(spec, engine, T, N, cfg.seed, static_cast<std::uint64_t>(r));
      const TrialView view{&data, &spec.initial_state};
      std::map<std::pair<long long, int>, double> counts;
      int folded = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const int t_k = checkpoints[k];
        for (int t = folded + 1; t <= t_k; ++t)
          for (int i = 1; i <= N; ++i) counts[{spec.sum_l->code(view, t, i), data.l(t, i)}] += 1.0;
        folded = t_k;
        double m = 0.0;
        for (const auto& [key, n] : counts) m += n * bundles[k].at(key.first, key.second);
        x[static_cast<std::size_t>(r)][k] = m / (sigma_inf * std::sqrt(static_cast<double>(N) * T));
        if (k + 1 == K) {
          // Terminal standardized estimate, self-normalized by the
          // replication's empirical gradient scale.
          double s2 = 0.0;
          for (const auto& [key, n] : counts) {
            const double d = bundles[k].at(key.first, key.second);
            s2 += n * d * d;
          }
          const double nodes = static_cast<double>(t_k) * N;
          const double pn = m / nodes;
          const double sd = std::sqrt(std::max(0.0, s2 / nodes - pn * pn));
          z[static_cast<std::size_t>(r)] = sd > 0.0 ? std::sqrt(nodes) * pn / sd : 0.0;
        }
      }
    });
  } else {
    outcomes = run_replications(R, workers, [&](int r) {
      SequenceConfig sc;
      sc.tol = est.tol;
      sc.max_iter = est.max_iter;
      sc.rep = est.rep;
      sc.backend = est.backend;
      sc.budget = est.budget;
      sc.eps0 = est.eps0;
      sc.stream = static_cast<std::uint64_t>(r);
      const std::vector<EstimateRecord> records =
          estimate_sequence(spec, engine, T, N, checkpoints, sc, cfg.seed);
      std::size_t k = 0;
      for (const auto& rec : records) {
        if (rec.estimator != est.estimator) continue;
        if (k >= K) throw ValidationError("fclt: more records than checkpoints");
        x[static_cast<std::size_t>(r)][k] = rec.rescaled;
        ++k;
      }
      if (k != K) throw ValidationError("fclt: missing estimator records");
      z[static_cast<std::size_t>(r)] = x[static_cast<std::size_t>(r)].back();
    });
  }
  const std::vector<int> failed = resolve_failures(outcomes, skip_failed);

  std::vector<double> z_ok;
  std::vector<std::vector<double>> inc(K >= 2 ? K - 1 : 0);
  std::ostringstream csv;
  csv << "rep,z_terminal";
  for (int t : checkpoints) csv << ",x_" << t;
  csv << '\n';
  for (int r = 0; r < R; ++r) {
    if (!outcomes[static_cast<std::size_t>(r)].ok) continue;
    z_ok.push_back(z[static_cast<std::size_t>(r)]);
    for (std::size_t w = 0; w + 1 < K; ++w)
      inc[w].push_back(x[static_cast<std::size_t>(r)][w + 1] - x[static_cast<std::size_t>(r)][w]);
    csv << r << ',' << csv_num(z[static_cast<std::size_t>(r)]);
    for (std::size_t k = 0; k < K; ++k) csv << ',' << csv_num(x[static_cast<std::size_t>(r)][k]);
    csv << '\n';
  }

  json summary{{"kind", "fclt"}, {"replications", R}, {"failed", failed_json(failed)},
               {"checkpoints", checkpoints}, {"nuisance", est.nuisance}};
  if (est.nuisance == "oracle") summary["sigma_inf"] = sigma_inf;
  if (!z_ok.empty()) {
    summary["ks"] = ks_normal(z_ok);
    json corr = json::array();
    double max_off = 0.0;
    for (std::size_t a = 0; a + 1 < K; ++a) {
      json row = json::array();
      for (std::size_t b = 0; b + 1 < K; ++b) {
        const double c = a == b ? 1.0 : pearson(inc[a], inc[b]);
        row.push_back(c);
        if (a != b) max_off = std::max(max_off, std::abs(c));
      }
      corr.push_back(row);
    }
    summary["increment_corr"] = corr;
    summary["max_increment_corr"] = K >= 3 ? json(max_off) : json(nullptr);
  } else {
    summary["ks"] = nullptr;
    summary["increment_corr"] = json::array();
    summary["max_increment_corr"] = nullptr;
  }
  return {"fclt", std::move(summary), {{"replications.csv", csv.str()}}};
}

StudyReport design_adapt_study(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  const ScenarioSpec& spec = cfg.scenario;
  const DesignSettings& des = cfg.design;
  const int T = cfg.horizon, N = spec.N, R = cfg.replications;
  if (spec.n_arms != 2 || !spec.sum_l->decomposes() || spec.sum_l->memory() != 0)
    throw UnsupportedError(
        "design-adapt study: needs a memory-0 two-arm scenario with a decomposing context");

  // Contrast legs: always-treat vs never-treat.
  const DesignRule g1 = DesignRule::fixed_row({0.0, 1.0});
  const DesignRule g2 = DesignRule::fixed_row({1.0, 0.0});

  // Exact variance criterion per candidate at the truth, and the target
  // candidate k*.
  std::vector<double> chi;
  chi.reserve(des.candidates.size());
  for (const auto& cand : des.candidates)
    chi.push_back(contrast_variance(spec, spec.q0, DesignEngine::fixed(cand), g1, g2,
                                    des.selection.horizon, des.selection.rep, des.selection.backend,
                                    des.selection.budget, des.selection.mc_paths,
                                    des.selection.criterion_seed)
                      .value);
  const int kstar = select_design(chi);
  const double chi_kstar = chi[static_cast<std::size_t>(kstar - 1)];

  // Exact per-arm outcome moments at the truth (memory-0: the row is the
  // stationary law of the next state given own arm).
  std::array<double, 2> mu{0.0, 0.0};
  std::array<long long, 2> arm_code{-1, -1};
  for (long long c : spec.q0.codes()) arm_code[static_cast<std::size_t>(spec.sum_l->arm_of(c))] = c;
  for (int a = 0; a < 2; ++a) {
    if (arm_code[static_cast<std::size_t>(a)] < 0)
      throw ValidationError("design-adapt study: no transition row for arm " + std::to_string(a));
    const auto row = spec.q0.row(arm_code[static_cast<std::size_t>(a)]);
    for (int l = 0; l < spec.n_states; ++l) mu[static_cast<std::size_t>(a)] += row[l] * spec.outcome(l);
  }

  const std::size_t K = des.checkpoints.size();
  const std::size_t final_from = K - (K + 1) / 2;  // last ceil(K/2) checkpoints
  std::vector<std::vector<int>> selected(static_cast<std::size_t>(R), std::vector<int>(K, 0));
  std::vector<double> contrast(static_cast<std::size_t>(R), 0.0);
  std::vector<double> final_frac(static_cast<std::size_t>(R), 0.0);

  const std::vector<RepOutcome> outcomes = run_replications(R, workers, [&](int r) {
    const AdaptiveTrialResult res =
        run_design_selection_trial(spec, des.initial, des.candidates, g1, g2, des.checkpoints, T, N,
                                   cfg.seed, static_cast<std::uint64_t>(r), des.selection);
    if (res.checkpoints.size() != K) throw ValidationError("design-adapt study: missing checkpoints");
    int hits = 0;
    for (std::size_t k = 0; k < K; ++k) {
      selected[static_cast<std::size_t>(r)][k] = res.checkpoints[k].selected;
      if (k >= final_from && res.checkpoints[k].selected == kstar) ++hits;
    }
    final_frac[static_cast<std::size_t>(r)] =
        static_cast<double>(hits) / static_cast<double>(K - final_from);

    // Realized contrast estimate with the actual per-round assignment
    // probabilities reconstructed from the selection trace.
    const TrialView view{&res.data, &spec.initial_state};
    double acc = 0.0;
    for (int t = 1; t <= T; ++t) {
      const DesignTraceRow& row = res.trace[static_cast<std::size_t>(t - 1)];
      const DesignRule& rule =
          row.selected_k == 0 ? des.initial : des.candidates[static_cast<std::size_t>(row.selected_k - 1)];
      for (int i = 1; i <= N; ++i) {
        const int a = res.data.a(t, i);
        const std::vector<double> probs =
            design_assign({rule, row.theta}, spec.sum_a->code(view, t, i));
        const double g = probs[static_cast<std::size_t>(a)];
        if (!(g > 0.0))
          throw PositivityError("design-adapt study: realized design assigned zero mass to arm " +
                                std::to_string(a));
        const double resid = spec.outcome(res.data.l(t, i)) - mu[static_cast<std::size_t>(a)];
        acc += (a == 1 ? resid / g : -resid / g);
      }
    }
    contrast[static_cast<std::size_t>(r)] = (mu[1] - mu[0]) + acc / (static_cast<double>(T) * N);
  });
  const std::vector<int> failed = resolve_failures(outcomes, skip_failed);

  std::ostringstream csv;
  csv << "rep,contrast_hat,final_half_freq";
  for (int t : des.checkpoints) csv << ",sel_" << t;
  csv << '\n';
  std::vector<double> freq(K, 0.0), fracs, contrasts;
  for (int r = 0; r < R; ++r) {
    if (!outcomes[static_cast<std::size_t>(r)].ok) continue;
    csv << r << ',' << csv_num(contrast[static_cast<std::size_t>(r)]) << ','
        << csv_num(final_frac[static_cast<std::size_t>(r)]);
    for (std::size_t k = 0; k < K; ++k) {
      csv << ',' << selected[static_cast<std::size_t>(r)][k];
      freq[k] += selected[static_cast<std::size_t>(r)][k] == kstar;
    }
    csv << '\n';
    fracs.push_back(final_frac[static_cast<std::size_t>(r)]);
    contrasts.push_back(contrast[static_cast<std::size_t>(r)]);
  }

  json summary{{"kind", "design-adapt"},
               {"replications", R},
               {"failed", failed_json(failed)},
               {"checkpoints", des.checkpoints},
               {"kstar", kstar},
               {"chi", chi},
               {"chi_kstar", chi_kstar}};
  if (!fracs.empty()) {
    const double n_ok = static_cast<double>(fracs.size());
    for (auto& f : freq) f /= n_ok;
    summary["selection_freq"] = freq;
    summary["median_final_half"] = median_of(fracs);
    double mean = 0.0;
    for (double c : contrasts) mean += c;
    mean /= n_ok;
    double var = 0.0;
    for (double c : contrasts) var += (c - mean) * (c - mean);
    var = contrasts.size() > 1 ? var / (n_ok - 1.0) : 0.0;
    summary["mean_contrast"] = mean;
    summary["realized_var_scaled"] = var * N * T;  // compare against chi_kstar
    summary["var_ratio"] = chi_kstar > 0.0 ? json(var * N * T / chi_kstar) : json(nullptr);
  } else {
    summary["selection_freq"] = nullptr;
    summary["median_final_half"] = nullptr;
    summary["mean_contrast"] = nullptr;
    summary["realized_var_scaled"] = nullptr;
    summary["var_ratio"] = nullptr;
  }
  return {"design-adapt", std::move(summary), {{"replications.csv", csv.str()}}};
}

StudyReport mle_rate_study(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  const ScenarioSpec& spec = cfg.scenario;
  const EstimatorSettings& est = cfg.estimator;
  const DesignEngine engine = DesignEngine::fixed(cfg.design.rule);
  const int N = spec.N, R = cfg.replications;
  const std::size_t G = cfg.n_grid.size();

  std::vector<int> horizons(G, 0);
  std::vector<long long> n_obs(G, 0);
  for (std::size_t gi = 0; gi < G; ++gi) {
    horizons[gi] = std::max(spec.tau, static_cast<int>((cfg.n_grid[gi] + N - 1) / N));
    n_obs[gi] = static_cast<long long>(horizons[gi]) * N;
  }

  const int total = static_cast<int>(G) * R;
  std::vector<double> tv_w(static_cast<std::size_t>(total), 0.0), tv_m(static_cast<std::size_t>(total), 0.0);
  const std::vector<RepOutcome> outcomes = run_replications(total, workers, [&](int idx) {
    const std::size_t gi = static_cast<std::size_t>(idx) / static_cast<std::size_t>(R);
    const int T = horizons[gi];
    const TrialData data = simulate_trial(spec, engine, T, N, cfg.seed, static_cast<std::uint64_t>(idx));
    const TransitionTable q_hat = fit_density(data, spec, est);
    const TrialView view{&data, &spec.initial_state};
    std::map<long long, double> counts;
    for (int t = 1; t <= T; ++t)
      for (int i = 1; i <= N; ++i) counts[spec.sum_l->code(view, t, i)] += 1.0;
    const double nodes = static_cast<double>(T) * N;
    double weighted = 0.0;
    for (const auto& [c, m] : counts) {
      double tv = 1.0;  // a context the fit does not cover counts as maximal error
      if (q_hat.has(c) && spec.q0.has(c)) {
        tv = 0.0;
        for (int l = 0; l < spec.n_states; ++l) tv += std::abs(q_hat.prob(c, l) - spec.q0.prob(c, l));
        tv *= 0.5;
      }
      weighted += (m / nodes) * tv;
    }
    double worst = 0.0;
    for (long long c : spec.q0.codes()) {
      double tv = 1.0;
      if (q_hat.has(c)) {
        tv = 0.0;
        for (int l = 0; l < spec.n_states; ++l) tv += std::abs(q_hat.prob(c, l) - spec.q0.prob(c, l));
        tv *= 0.5;
      }
      worst = std::max(worst, tv);
    }
    tv_w[static_cast<std::size_t>(idx)] = weighted;
    tv_m[static_cast<std::size_t>(idx)] = worst;
  });
  const std::vector<int> failed = resolve_failures(outcomes, skip_failed);

  std::ostringstream csv;
  csv << "n,rep,tv_weighted,tv_max\n";
  std::vector<json> medians(G, nullptr);
  std::vector<double> lx, ly;
  for (std::size_t gi = 0; gi < G; ++gi) {
    std::vector<double> ok;
    for (int r = 0; r < R; ++r) {
      const int idx = static_cast<int>(gi) * R + r;
      if (!outcomes[static_cast<std::size_t>(idx)].ok) continue;
      csv << n_obs[gi] << ',' << r << ',' << csv_num(tv_w[static_cast<std::size_t>(idx)]) << ','
          << csv_num(tv_m[static_cast<std::size_t>(idx)]) << '\n';
      ok.push_back(tv_w[static_cast<std::size_t>(idx)]);
    }
    if (!ok.empty()) {
      const double med = median_of(ok);
      medians[gi] = med;
      if (med > 0.0) {
        lx.push_back(std::log(static_cast<double>(n_obs[gi])));
        ly.push_back(std::log(med));
      }
    }
  }

  json summary{{"kind", "mle-rate"},     {"replications_per_n", R}, {"failed", failed_json(failed)},
               {"backend", est.nuisance}, {"n_grid", cfg.n_grid},    {"n_obs", n_obs},
               {"median_tv", medians}};
  summary["slope"] = lx.size() >= 2 ? json(ols_slope(lx, ly)) : json(nullptr);
  return {"mle-rate", std::move(summary), {{"replications.csv", csv.str()}}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Dispatch and persistence

StudyReport replication_study(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  cfg.scenario.validate();
  if (cfg.replications < 0) throw ValidationError("study: replications must be nonnegative");
  const std::string& kind = cfg.study;
  const bool needs_horizon = kind != "mle-rate";
  if (needs_horizon && cfg.horizon < std::max(1, cfg.scenario.tau))
    throw ValidationError("study: horizon must be at least tau");

  if (kind == "design-adapt") {
    if (cfg.design.kind != "adaptive")
      throw ValidationError("design-adapt study: design.kind must be adaptive");
  } else if (cfg.design.kind != "fixed") {
    throw UnsupportedError("study '" + kind + "': adaptive designs are supported by design-adapt only");
  }
  if (cfg.estimator.nuisance == "hal" && kind != "mle-rate")
    throw UnsupportedError("hal nuisance is supported by the mle-rate study only");

  if (kind == "coverage") return coverage_study(cfg, workers, skip_failed);
  if (kind == "type1") return type1_study(cfg, workers, skip_failed);
  if (kind == "fclt") return fclt_study(cfg, workers, skip_failed);
  if (kind == "design-adapt") return design_adapt_study(cfg, workers, skip_failed);
  if (kind == "mle-rate") {
    if (cfg.n_grid.empty()) throw ValidationError("mle-rate study: n_grid must be non-empty");
    long long prev = 0;
    for (long long n : cfg.n_grid) {
      if (n <= prev) throw ValidationError("mle-rate study: n_grid must be strictly increasing and positive");
      prev = n;
    }
    return mle_rate_study(cfg, workers, skip_failed);
  }
  throw ValidationError("study: unknown kind '" + kind +
                        "' (expected coverage, type1, fclt, design-adapt or mle-rate)");
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("run_experiment: cannot open " + path.string());
  os << bytes;
  os.close();
  if (!os) throw ValidationError("run_experiment: write failed for " + path.string());
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg, int workers, bool skip_failed) {
  if (cfg.out.empty()) throw ValidationError("run_experiment: config needs an output directory");
  const auto start = std::chrono::steady_clock::now();
  StudyReport report = replication_study(cfg, workers, skip_failed);
  const double seconds =
      std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - start)
          .count();

  json summary = report.summary;
  summary["config"] = cfg.to_json();

  const std::filesystem::path dir(cfg.out);
  std::filesystem::create_directories(dir);
  write_text(dir / "scenario.json", cfg.scenario.to_json().dump(2) + "\n");
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  for (const auto& [name, bytes] : report.files) write_text(dir / name, bytes);
  // Wall-clock timing lives outside summary.json so the summary stays
  // byte-identical across reruns of the same (config, seed).
  write_text(dir / "timing.json",
             json{{"kind", report.kind}, {"seconds", seconds}}.dump(2) + "\n");
}

}  // namespace nettrial
