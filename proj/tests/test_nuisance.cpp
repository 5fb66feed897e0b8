#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "nettrial/nuisance.hpp"
#include "nettrial/rng.hpp"
#include "nettrial/sim.hpp"

using namespace nettrial;

TEST_CASE("tabular MLE matches hand frequencies and shrinkage") {
  // Single unit, memory 0: the L-context is the unit's own arm, so a trial
  // pinned to arm 0 visits exactly one context.
  ScenarioSpec spec = make_best_arm_binary(1, {0.3, 0.7});
  TrialData d(1, 10);
  for (int t = 1; t <= 10; ++t) {
    d.set_a(t, 1, 0);
    d.set_l(t, 1, t <= 7 ? 0 : 1);  // counts (7, 3)
  }

  FittedDensity f0 = fit_tabular_mle(d, spec, 0.0);
  CHECK(f0.estimator == "tabular-mle");
  CHECK(f0.q_hat.prob(0, 0) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(f0.q_hat.prob(0, 1) == doctest::Approx(0.3).epsilon(1e-15));
  // The unvisited arm-1 context carries no data: uniform fallback.
  CHECK(f0.q_hat.prob(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(f0.metadata["contexts_observed"] == 1);
  CHECK(f0.metadata["context_universe"] == 2);

  // eps0 = 1: counts (7,3) -> (8/12, 4/12); unseen context -> uniform prior.
  FittedDensity f1 = fit_tabular_mle(d, spec, 1.0);
  CHECK(f1.q_hat.prob(0, 0) == doctest::Approx(8.0 / 12.0).epsilon(1e-15));
  CHECK(f1.q_hat.prob(0, 1) == doctest::Approx(4.0 / 12.0).epsilon(1e-15));
  CHECK(f1.q_hat.prob(1, 0) == doctest::Approx(0.5).epsilon(1e-15));

  // Default shrinkage keeps every cell strictly positive.
  FittedDensity fd = fit_tabular_mle(d, spec);
  for (long long c : fd.q_hat.codes())
    for (int l = 0; l < 2; ++l) CHECK(fd.q_hat.prob(c, l) > 0.0);

  CHECK_THROWS_AS(fit_tabular_mle(d, spec, -0.1), ValidationError);
}

TEST_CASE("tabular MLE dominates the saturated likelihood") {
  ScenarioSpec spec = make_cluster_mdp(2, 2, 2, 2, 0.6, 5);
  TrialData d = simulate_trial(spec, DesignEngine::fixed(DesignRule::uniform(2)), 30, spec.N, 814, 0);
  FittedDensity fit = fit_tabular_mle(d, spec, 0.0);
  const double risk_hat = log_loss(spec, d, fit.q_hat);

  // The eps0 = 0 fit is the exact empirical risk minimizer over all
  // transition tables: no random competitor can do better.
  Rng rng(99, 0);
  const auto& codes = fit.q_hat.codes();
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < codes.size(); ++k) {
      std::vector<double> row(2);
      double tot = 0.0;
      for (double& p : row) tot += (p = 0.1 + rng.uniform());
      for (double& p : row) p /= tot;
      rows.push_back(row);
    }
    TransitionTable q(2, codes, rows);
    CHECK(risk_hat <= log_loss(spec, d, q) + 1e-12);
  }
}

TEST_CASE("tabular MLE error halves when counts quadruple") {
  // One unit pinned to arm 0: per-round iid draws from a single known row.
  ScenarioSpec spec = make_best_arm_binary(1, {0.35, 0.6});
  DesignEngine eng = DesignEngine::fixed(spec.g_star);
  auto avg_tv = [&](int T, std::uint64_t seed_base) {
    double acc = 0.0;
    const int reps = 40;
    for (int r = 0; r < reps; ++r) {
      TrialData d = simulate_trial(spec, eng, T, 1, seed_base, static_cast<std::uint64_t>(r));
      FittedDensity f = fit_tabular_mle(d, spec, 0.0);
      double tv = 0.0;
      for (int l = 0; l < 2; ++l) tv += std::abs(f.q_hat.prob(0, l) - spec.q0.prob(0, l));
      acc += 0.5 * tv;
    }
    return acc / reps;
  };
  const double e1 = avg_tv(400, 2100);
  const double e2 = avg_tv(1600, 2200);
  // Frequencies converge at the root-n rate: quadrupling the sample should
  // halve the error, within +-50% slack.
  CHECK(e2 / e1 > 0.25);
  CHECK(e2 / e1 < 0.75);
}

TEST_CASE("lasso recovers a monotone step and shrinks to the pooled row") {
  // Memory-0 binary units under the uniform design: the 1-d feature is the
  // own arm, and q0 steps from 0.2 to 0.8 across it.
  ScenarioSpec spec = make_best_arm_binary(1, {0.2, 0.8});
  TrialData d = simulate_trial(spec, DesignEngine::fixed(DesignRule::uniform(2)), 2000, 1, 4242, 0);

  FittedDensity f = fit_hal_lasso(d, spec, {1e-4, 1e-3, 1e-2}, 5, 0);
  CHECK(f.estimator == "hal-lasso");
  for (long long c : spec.q0.codes()) {
    double tv = 0.0;
    for (int l = 0; l < 2; ++l) tv += std::abs(f.q_hat.prob(c, l) - spec.q0.prob(c, l));
    CHECK(0.5 * tv < 0.1);
  }
  // Rows are strictly positive probability vectors.
  for (long long c : f.q_hat.codes()) {
    double s = 0.0;
    for (int l = 0; l < 2; ++l) {
      CHECK(f.q_hat.prob(c, l) > 0.0);
      s += f.q_hat.prob(c, l);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Full shrinkage collapses every context onto the intercept-only row:
  // the pooled empirical frequency.
  FittedDensity fs = fit_hal_lasso(d, spec, {1e6}, 5, 0);
  double pooled = 0.0;
  for (int t = 1; t <= d.T; ++t) pooled += d.l(t, 1);
  pooled /= d.T;
  for (long long c : fs.q_hat.codes()) {
    CHECK(fs.q_hat.prob(c, 1) == doctest::Approx(fs.q_hat.prob(fs.q_hat.codes().front(), 1)).epsilon(1e-6));
    CHECK(fs.q_hat.prob(c, 1) == doctest::Approx(pooled).epsilon(0.02));
  }

  // Penalty path: the l1 norm of the penalized coefficients never grows
  // with the penalty.
  FittedDensity fp = fit_hal_lasso(d, spec, {1e-4, 1e-2, 1.0, 100.0}, 5, 0);
  const auto& path = fp.metadata["path"];
  for (std::size_t k = 1; k < path.size(); ++k)
    CHECK(path[k]["l1"].get<double>() <= path[k - 1]["l1"].get<double>() + 1e-9);

  CHECK_THROWS_AS(fit_hal_lasso(d, spec, {}, 5, 0), ValidationError);
  CHECK_THROWS_AS(fit_hal_lasso(d, spec, {-1.0}, 5, 0), ValidationError);
  CHECK_THROWS_AS(fit_hal_lasso(d, spec, {0.1}, 1, 0), ValidationError);
}

TEST_CASE("lasso with two-dimensional features and blocked folds") {
  // Memory 1: features are (previous state, arm); four contexts.
  ScenarioSpec spec = make_best_arm(1, 2, 2, 1, 23);
  TrialData d = simulate_trial(spec, DesignEngine::fixed(DesignRule::uniform(2)), 3000, 1, 77, 0);
  FittedDensity f = fit_hal_lasso(d, spec, {1e-4, 1e-3, 1e-2}, 5, 0);
  for (long long c : spec.q0.codes()) {
    double tv = 0.0;
    for (int l = 0; l < 2; ++l) tv += std::abs(f.q_hat.prob(c, l) - spec.q0.prob(c, l));
    CHECK(0.5 * tv < 0.1);
  }

  // Folds are contiguous, ordered, and partition the node sequence:
  // dependence-respecting cross-validation never interleaves.
  const auto& folds = f.metadata["folds"];
  REQUIRE(folds.size() == 5);
  int expect = 0;
  for (const auto& fold : folds) {
    CHECK(fold["start"].get<int>() == expect);
    CHECK(fold["end"].get<int>() > fold["start"].get<int>());
    expect = fold["end"].get<int>();
  }
  CHECK(expect == 3000);
  CHECK(f.metadata["feature_dim"] == 2);
}

TEST_CASE("erm rate fixed point: residual, monotonicity, uniqueness") {
  ErmRateInputs in{10000, 1.0 / 3.0, 1.0};
  ErmRate r = erm_rate_rn(in);
  CHECK(r.residual <= 1e-12);
  // Self-check the defining equation with an independently coded phi.
  {
    const double n = 1e4, ln = std::log(n);
    const double phi = std::pow(r.r_n, in.alpha) / std::sqrt(n) +
                       ln * std::pow(r.r_n, 1.0 - in.p / 2.0) / std::sqrt(n) +
                       ln * ln * std::pow(r.r_n, in.alpha - in.p) / n;
    CHECK(r.r_n * r.r_n / 3.0 == doctest::Approx(phi).epsilon(1e-10));
  }
  CHECK(r.headline == doctest::Approx(std::pow(1e4, -1.0 / (4.0 - 2.0 / 3.0))).epsilon(1e-14));

  // phi_n shrinks pointwise in n, so the root does too.
  ErmRate r4 = erm_rate_rn({40000, 1.0 / 3.0, 1.0});
  CHECK(r4.r_n < r.r_n);

  // The fixed point is unique: any valid bracket converges to it.
  Rng rng(5, 0);
  for (int rep = 0; rep < 10; ++rep) {
    const double lo = 1e-9 * (0.5 + rng.uniform());
    const double hi = 5.0 + 20.0 * rng.uniform();
    ErmRate rr = erm_rate_rn(in, lo, hi);
    CHECK(rr.r_n == doctest::Approx(r.r_n).epsilon(1e-10));
  }

  // A smoothness exponent below the entropy exponent flips phi's behavior
  // at zero (it diverges); the root still exists and solves the equation.
  ErmRate rs = erm_rate_rn({10000, 0.2, 1.5});
  CHECK(rs.residual <= 1e-12);

  CHECK_THROWS_AS(erm_rate_rn({1, 0.5, 1.0}), ValidationError);
  CHECK_THROWS_AS(erm_rate_rn({100, 0.0, 1.0}), ValidationError);
  CHECK_THROWS_AS(erm_rate_rn({100, 1.0, 1.0}), ValidationError);
  CHECK_THROWS_AS(erm_rate_rn({100, 0.5, 0.0}), ValidationError);
  CHECK_THROWS_AS(erm_rate_rn({100, 0.5, 2.0}), ValidationError);
  CHECK_THROWS_AS(erm_rate_rn({100, 0.5, 1.0}, -1.0, 2.0), ValidationError);
}
