#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "nettrial/estimators.hpp"

using namespace nettrial;

namespace {

TransitionTable mix_toward(const ScenarioSpec& spec, double eps) {
  std::vector<long long> codes = spec.q0.codes();
  std::vector<std::vector<double>> rows;
  for (long long c : codes) {
    double p = spec.q0.prob(c, 0) + (c % 2 == 0 ? eps : -eps);
    p = std::min(0.95, std::max(0.05, p));
    rows.push_back({p, 1.0 - p});
  }
  return TransitionTable(spec.n_states, std::move(codes), std::move(rows));
}

TrialData swap_units(const TrialData& d, int i1, int i2) {
  TrialData out(d.N, d.T);
  for (int t = 1; t <= d.T; ++t) {
    for (int i = 1; i <= d.N; ++i) {
      const int src = i == i1 ? i2 : (i == i2 ? i1 : i);
      out.set_a(t, i, d.a(t, src));
      out.set_l(t, i, d.l(t, src));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("one-step is the plug-in plus the empirical gradient mean") {
  // Constant outcomes: the gradient vanishes, so the correction is zero
  // and the estimator returns the plug-in exactly.
  ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  spec.f_y = {0.5, 0.5};
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TrialData data = simulate_trial(spec, engine, 4, 2, 7);
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, 4);
  const EifBundle bundle = eif_components(spec, spec.q0, data, engine, marg);

  const EstimateRecord rec = one_step(spec, spec.q0, bundle);
  CHECK(rec.estimator == "one-step");
  CHECK(rec.psi_hat == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rec.psi_hat == doctest::Approx(rec.psi_plugin).epsilon(1e-12));
  CHECK(rec.iterations == 0);
  CHECK(rec.plugin_se == 0.0);  // exact backend

  // Linearity in the gradient values: shifting the empirical mean by a
  // constant shifts the estimate by exactly that constant.
  EifBundle shifted = bundle;
  shifted.pn += 0.05;
  const EstimateRecord rec2 = one_step(spec, spec.q0, shifted);
  CHECK(rec2.psi_hat - rec.psi_hat == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("one-step with oracle nuisance is unbiased across replications") {
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const int T = 10;
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, T);
  const double psi0 = gcomp_exact(spec, spec.q0).value;

  std::vector<double> est;
  for (int r = 0; r < 60; ++r) {
    const TrialData d = simulate_trial(spec, engine, T, 2, 3000 + static_cast<std::uint64_t>(r));
    const EifBundle b = eif_components(spec, spec.q0, d, engine, marg);
    est.push_back(one_step(spec, spec.q0, b).psi_hat);
  }
  double mean = 0.0;
  for (double v : est) mean += v;
  mean /= static_cast<double>(est.size());
  double sd = 0.0;
  for (double v : est) sd += (v - mean) * (v - mean);
  sd = std::sqrt(sd / static_cast<double>(est.size() - 1));
  // The empirical gradient mean at the truth is a martingale average:
  // mean zero at every sample size, so the replication mean sits within
  // Monte Carlo error of the target.
  CHECK(std::abs(mean - psi0) <= 4.0 * sd / std::sqrt(60.0));
}

TEST_CASE("targeting stops immediately when already within tolerance") {
  const ScenarioSpec spec = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData data = simulate_trial(spec, engine, 8, spec.N, 21);
  const FittedDensity fit = fit_tabular_mle(data, spec);

  const EstimateRecord rec = tmle(spec, fit.q_hat, data, engine, /*tol=*/10.0);
  CHECK(rec.iterations == 0);
  CHECK(rec.converged);
  CHECK(rec.pn_final == rec.pn_init);
  CHECK(rec.psi_hat == doctest::Approx(rec.psi_plugin).epsilon(1e-12));
}

TEST_CASE("targeting drives the empirical gradient mean below tolerance") {
  const ScenarioSpec spec = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData data = simulate_trial(spec, engine, 15, spec.N, 33);
  const FittedDensity fit = fit_tabular_mle(data, spec);
  const double tn = static_cast<double>(data.T) * spec.N;

  const EstimateRecord rec = tmle(spec, fit.q_hat, data, engine);
  CHECK(rec.converged);
  CHECK(rec.iterations >= 1);
  CHECK(std::abs(rec.pn_final) <= 0.1 / std::sqrt(tn));
  CHECK(std::abs(rec.pn_final) < std::abs(rec.pn_init));
  // Accepted steps never increase |P_n dbar|.
  for (std::size_t k = 1; k < rec.pn_trace.size(); ++k) CHECK(rec.pn_trace[k] < rec.pn_trace[k - 1]);
  // The tilted density is still a transition table: rows normalized and
  // strictly positive.
  for (long long c : rec.q_star.codes()) {
    double sum = 0.0;
    for (int l = 0; l < spec.n_states; ++l) {
      CHECK(rec.q_star.prob(c, l) > 0.0);
      sum += rec.q_star.prob(c, l);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("one-step and targeted estimates agree once targeted") {
  const ScenarioSpec spec = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData data = simulate_trial(spec, engine, 15, spec.N, 33);
  const FittedDensity fit = fit_tabular_mle(data, spec);
  const double tn = static_cast<double>(data.T) * spec.N;

  const EstimateRecord tm = tmle(spec, fit.q_hat, data, engine, /*tol=*/0.01);
  REQUIRE(tm.converged);
  // Rebuild the gradient at the targeted density: the one-step correction
  // from there is exactly the leftover empirical mean, already tiny.
  const ContextMarginals marg = context_marginals(spec, tm.q_star, engine, data.T);
  const EifBundle bundle = eif_components(spec, tm.q_star, data, engine, marg);
  const EstimateRecord os = one_step(spec, tm.q_star, bundle);
  CHECK(std::abs(os.psi_hat - tm.psi_hat) <= 3.0 / tn);
}

TEST_CASE("estimates are invariant to unit relabeling in exchangeable scenarios") {
  const ScenarioSpec spec = make_best_arm(2, 2, 2, 1, 3);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.55, 0.45}));
  const TrialData data = simulate_trial(spec, engine, 12, 2, 44);
  const TrialData swapped = swap_units(data, 1, 2);

  const FittedDensity f1 = fit_tabular_mle(data, spec);
  const FittedDensity f2 = fit_tabular_mle(swapped, spec);
  for (long long c : f1.q_hat.codes())
    for (int l = 0; l < 2; ++l) CHECK(f1.q_hat.prob(c, l) == doctest::Approx(f2.q_hat.prob(c, l)).epsilon(1e-14));

  const ContextMarginals marg = context_marginals(spec, f1.q_hat, engine, 12);
  const EifBundle b1 = eif_components(spec, f1.q_hat, data, engine, marg);
  const EifBundle b2 = eif_components(spec, f2.q_hat, swapped, engine, marg);
  CHECK(one_step(spec, f1.q_hat, b1).psi_hat == doctest::Approx(one_step(spec, f2.q_hat, b2).psi_hat).epsilon(1e-12));

  const EstimateRecord t1 = tmle(spec, f1.q_hat, data, engine);
  const EstimateRecord t2 = tmle(spec, f2.q_hat, swapped, engine);
  CHECK(t1.psi_hat == doctest::Approx(t2.psi_hat).epsilon(1e-12));
  CHECK(t1.iterations == t2.iterations);
}

TEST_CASE("error expansion is an exact identity") {
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TrialData data = simulate_trial(spec, engine, 10, 2, 55);

  // At the truth: no empirical-process term, no remainder.
  const ExpansionDiagnostics at0 = expansion_diagnostics(spec, spec.q0, data, engine);
  CHECK(at0.m2_term == 0.0);
  CHECK(std::abs(at0.r) <= 1e-12);
  CHECK(std::abs(at0.residual) <= 1e-10);
  CHECK(at0.psi_hat - at0.psi_q0 == doctest::Approx(at0.m1).epsilon(1e-10));

  // At a perturbed density the pieces are all live and still sum exactly.
  const ExpansionDiagnostics far = expansion_diagnostics(spec, mix_toward(spec, 0.2), data, engine);
  CHECK(std::abs(far.residual) <= 1e-8);
  CHECK(std::abs(far.m2_term) > 0.0);

  // Same identity through the two-part remainder path on a clustered
  // scenario.
  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine eng_c = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData d_c = simulate_trial(cluster, eng_c, 8, cluster.N, 66);
  const ExpansionDiagnostics fc = expansion_diagnostics(cluster, mix_toward(cluster, 0.2), d_c, eng_c);
  CHECK(std::abs(fc.residual) <= 1e-8);
}

TEST_CASE("empirical-process term shrinks with the sample") {
  // Fixed perturbed density, growing trials: the centered term is an
  // average of bounded mean-zero increments, so its size drops like
  // 1/sqrt(TN).  Compare medians at TN = 100 vs TN = 400.
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TransitionTable q_star = mix_toward(spec, 0.2);

  auto median_m2 = [&](int T, std::uint64_t base) {
    std::vector<double> vals;
    for (int r = 0; r < 12; ++r) {
      const TrialData d = simulate_trial(spec, engine, T, 2, base + static_cast<std::uint64_t>(r));
      vals.push_back(std::abs(expansion_diagnostics(spec, q_star, d, engine).m2_term));
    }
    std::sort(vals.begin(), vals.end());
    return 0.5 * (vals[5] + vals[6]);
  };
  CHECK(median_m2(200, 9000) < median_m2(50, 5000));
}

TEST_CASE("estimate sequence: prefixes, determinism, CSV") {
  const ScenarioSpec spec = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  SequenceConfig cfg;
  const std::vector<int> cps{4, 8, 12};

  const std::vector<EstimateRecord> recs = estimate_sequence(spec, engine, 12, spec.N, cps, cfg, 99);
  REQUIRE(recs.size() == 6);
  for (std::size_t k = 0; k < recs.size(); k += 2) {
    CHECK(recs[k].estimator == "one-step");
    CHECK(recs[k + 1].estimator == "tmle");
    CHECK(recs[k].checkpoint == cps[k / 2]);
    CHECK(std::isfinite(recs[k].rescaled));
    CHECK(std::isfinite(recs[k + 1].rescaled));
  }

  // The terminal checkpoint reproduces direct calls on the full trial.
  const TrialData full = simulate_trial(spec, engine, 12, spec.N, 99, cfg.stream);
  const FittedDensity fit = fit_tabular_mle(full, spec);
  const ContextMarginals marg = context_marginals(spec, fit.q_hat, engine, 12);
  const EifBundle bundle = eif_components(spec, fit.q_hat, full, engine, marg);
  CHECK(recs[4].psi_hat == doctest::Approx(one_step(spec, fit.q_hat, bundle).psi_hat).epsilon(1e-14));
  CHECK(recs[5].psi_hat == doctest::Approx(tmle(spec, fit.q_hat, full, engine).psi_hat).epsilon(1e-14));

  // Byte-identical reruns.
  const std::vector<EstimateRecord> again = estimate_sequence(spec, engine, 12, spec.N, cps, cfg, 99);
  std::ostringstream a, b;
  write_sequence_csv(recs, a);
  write_sequence_csv(again, b);
  CHECK(a.str() == b.str());
  std::istringstream is(a.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "checkpoint,psi_onestep,psi_tmle,sigma,pn_eif,iterations");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 3);

  CHECK_THROWS_AS(estimate_sequence(spec, engine, 12, spec.N, {1, 4}, cfg, 99), ValidationError);
  CHECK_THROWS_AS(estimate_sequence(spec, engine, 12, spec.N, {8, 4}, cfg, 99), ValidationError);
  CHECK_THROWS_AS(estimate_sequence(spec, engine, 12, spec.N + 1, cps, cfg, 99), ValidationError);
  CHECK_THROWS_AS(estimate_sequence(spec, engine, 12, spec.N, {}, cfg, 99), ValidationError);
}
