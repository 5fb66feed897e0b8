#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <vector>

#include "nettrial/eif.hpp"

using namespace nettrial;

namespace {

// Every positive-probability (context, state) key across a set of bundles.
std::set<std::pair<long long, int>> key_union(std::initializer_list<const EifBundle*> bundles) {
  std::set<std::pair<long long, int>> keys;
  for (const EifBundle* b : bundles)
    for (const auto& [k, v] : b->table) keys.insert(k);
  return keys;
}

// A deterministic interior perturbation of q0: state-0 mass shifted by
// +/- d depending on context parity, clamped away from the boundary.
TransitionTable tilt(const ScenarioSpec& spec, double d) {
  std::vector<long long> codes = spec.q0.codes();
  std::vector<std::vector<double>> rows;
  for (long long c : codes) {
    double p = spec.q0.prob(c, 0) + (c % 2 == 0 ? d : -d);
    p = std::min(0.95, std::max(0.05, p));
    rows.push_back({p, 1.0 - p});
  }
  return TransitionTable(spec.n_states, std::move(codes), std::move(rows));
}

}  // namespace

TEST_CASE("constant outcomes zero the gradient in every representation") {
  ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  spec.f_y = {0.5, 0.5};  // Y is constant: nothing to adjust for
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TrialData data = simulate_trial(spec, engine, 3, 2, 101);
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, 3);

  for (int rep : {1, 2, 3}) {
    const EifBundle b = eif_components(spec, spec.q0, data, engine, marg, rep);
    CHECK(b.rep == rep);
    for (const auto& [k, v] : b.table) CHECK(std::abs(v) <= 1e-12);
    CHECK(std::abs(b.pn) <= 1e-12);
    CHECK(b.sigma2 <= 1e-24);
    CHECK(std::abs(b.sigma2_inf) <= 1e-24);
  }
  // Uniform design against the deterministic arm-0 counterfactual: the
  // largest realized cumulative ratio is (1/0.5)^2 = 4 over one round of
  // two units.
  const EifBundle b1 = eif_components(spec, spec.q0, data, engine, marg, 1);
  CHECK(b1.max_ratio == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(b1.info.at("max_ratio").get<double>() == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("gradient is conditionally centered under the truth") {
  const ScenarioSpec spec = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData data = simulate_trial(spec, engine, 3, spec.N, 404);
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, 3);

  const EifBundle b = eif_components(spec, spec.q0, data, engine, marg, 2);
  CHECK(b.backend == "chain");  // block-local scenario: exact within-block backend
  CHECK(!b.table.empty());
  // E[dbar(c, L) | C = c] = 0 at q0 for every tabulated context: summing
  // the q0 row against the table must cancel exactly.
  for (const auto& [c, row] : b.q_rows) {
    double inner = 0.0;
    for (int l = 0; l < spec.n_states; ++l) inner += spec.q0.prob(c, l) * b.at(c, l);
    CHECK(std::abs(inner) <= 1e-10);
  }
  const auto [s2, s2inf] = eif_variance(b, marg);
  CHECK(s2 == doctest::Approx(b.sigma2).epsilon(1e-12));
  CHECK(s2inf == doctest::Approx(b.sigma2_inf).epsilon(1e-12));
}

TEST_CASE("importance-weighted and occupancy-weighted representations agree") {
  // Model class M1: representation 1 (enumeration under the trial design,
  // cumulative assignment ratios) against representation 2 (counterfactual
  // occupancy weights).  Same marginals, so identical denominators.
  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine eng_c = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData d_c = simulate_trial(cluster, eng_c, 3, cluster.N, 404);
  const ContextMarginals m_c = context_marginals(cluster, cluster.q0, eng_c, 3);
  const EifBundle c1 = eif_components(cluster, cluster.q0, d_c, eng_c, m_c, 1);
  const EifBundle c2 = eif_components(cluster, cluster.q0, d_c, eng_c, m_c, 2);
  CHECK(c1.max_ratio >= 1.0);
  for (const auto& k : key_union({&c1, &c2}))
    CHECK(c1.at(k.first, k.second) == doctest::Approx(c2.at(k.first, k.second)).epsilon(1e-8));
  // The per-node evaluations then agree too.
  CHECK(c1.pn == doctest::Approx(c2.pn).epsilon(1e-8));

  // Model class M2 with unit memory: all three representations at once.
  // g* is replaced by a non-degenerate row so the per-round assignment
  // ratio of representation 3 is exercised off the trivial 0/1 values.
  ScenarioSpec ba = make_best_arm(2, 2, 2, 1, 3);
  ba.tau = 2;
  ba.g_star = DesignRule::fixed_row({0.6, 0.4});
  const DesignEngine eng_b = DesignEngine::fixed(DesignRule::fixed_row({0.55, 0.45}));
  const TrialData d_b = simulate_trial(ba, eng_b, 3, 2, 505);
  const ContextMarginals m_b = context_marginals(ba, ba.q0, eng_b, 3);
  const EifBundle b1 = eif_components(ba, ba.q0, d_b, eng_b, m_b, 1);
  const EifBundle b2 = eif_components(ba, ba.q0, d_b, eng_b, m_b, 2);
  const EifBundle b3 = eif_components(ba, ba.q0, d_b, eng_b, m_b, 3);
  CHECK(b2.denom_letter == 0);
  CHECK(b3.denom_letter == 1);
  for (const auto& k : key_union({&b1, &b2, &b3})) {
    CHECK(b1.at(k.first, k.second) == doctest::Approx(b2.at(k.first, k.second)).epsilon(1e-8));
    CHECK(b2.at(k.first, k.second) == doctest::Approx(b3.at(k.first, k.second)).epsilon(1e-8));
  }
}

TEST_CASE("adaptive designs: importance weighting works, per-round tables refuse") {
  const ScenarioSpec spec = make_best_arm_binary(1, {0.3, 0.7});
  const DesignEngine bandit = DesignEngine::bandit(DesignRule::eps_greedy(2, 0.3), 1);
  const TrialData data = simulate_trial(spec, bandit, 3, 1, 17);
  const ContextMarginals marg = context_marginals(spec, spec.q0, bandit, 3, "enum");

  // Representation 3 needs per-round assignment tables; a bandit's rule
  // depends on the realized data, so both the explicit request and the
  // model-class default (M2 -> 3) refuse.
  CHECK_THROWS_AS(eif_components(spec, spec.q0, data, bandit, marg, 3), UnsupportedError);
  CHECK_THROWS_AS(eif_components(spec, spec.q0, data, bandit, marg, 0), UnsupportedError);

  // Representation 1 enumerates the bandit's branch probabilities exactly;
  // representation 2 never looks at the design beyond the denominators.
  // Their tables agree even under an adaptive design.
  const EifBundle b1 = eif_components(spec, spec.q0, data, bandit, marg, 1);
  const EifBundle b2 = eif_components(spec, spec.q0, data, bandit, marg, 2);
  for (const auto& [c, row] : b1.q_rows) {
    double inner = 0.0;
    for (int l = 0; l < spec.n_states; ++l) inner += spec.q0.prob(c, l) * b1.at(c, l);
    CHECK(std::abs(inner) <= 1e-10);
  }
  for (const auto& k : key_union({&b1, &b2}))
    CHECK(b1.at(k.first, k.second) == doctest::Approx(b2.at(k.first, k.second)).epsilon(1e-10));

  // Backend restrictions for the enumeration representation.
  CHECK_THROWS_AS(eif_components(spec, spec.q0, data, bandit, marg, 1, "mc"), UnsupportedError);
  CHECK_THROWS_AS(eif_components(spec, spec.q0, data, bandit, marg, 1, "chain"), UnsupportedError);
  CHECK_THROWS_AS(eif_components(spec, spec.q0, data, bandit, marg, 5), ValidationError);
}

TEST_CASE("foreign data off the design support: zeros where legitimate, refusal where not") {
  const ScenarioSpec spec = make_best_arm_binary(1, {0.3, 0.7});
  const DesignEngine det = DesignEngine::fixed(DesignRule::fixed_row({1.0, 0.0}));
  const ContextMarginals marg = context_marginals(spec, spec.q0, det, 2);
  TrialData data(1, 2);
  data.set_a(1, 1, 1);  // arm the design never assigns
  data.set_l(1, 1, 0);
  data.set_a(2, 1, 0);
  data.set_l(2, 1, 0);

  // Representation 1 divides by the realized assignment probability: zero
  // means the cumulative ratio is undefined.
  CHECK_THROWS_AS(eif_components(spec, spec.q0, data, det, marg, 1), PositivityError);

  // Representation 2 only reads the observed contexts; the arm-1 context
  // has zero counterfactual occupancy at every node, so its gradient value
  // is legitimately zero rather than an error.
  const EifBundle b2 = eif_components(spec, spec.q0, data, det, marg, 2);
  CHECK(b2.nodes[0].ctx == 1);
  CHECK(b2.nodes[0].dbar == 0.0);
  CHECK(b2.nodes[1].dbar != 0.0);
}

TEST_CASE("model-class gates on the representations") {
  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData data = simulate_trial(cluster, engine, 3, cluster.N, 404);
  const ContextMarginals marg = context_marginals(cluster, cluster.q0, engine, 3);

  // The A-occupancy split needs the decomposing class.
  CHECK_THROWS_AS(eif_components(cluster, cluster.q0, data, engine, marg, 3), ModelMismatchError);

  // Without within-block context sufficiency only enumeration remains.
  ScenarioSpec plain = cluster;
  plain.model_class = "M";
  CHECK_THROWS_AS(eif_components(plain, plain.q0, data, engine, marg, 2), ModelMismatchError);
  const EifBundle b1 = eif_components(plain, plain.q0, data, engine, marg, 0);
  CHECK(b1.rep == 1);  // plain-class default
}

TEST_CASE("variance estimates: empirical and stationary with a hand-computed value") {
  // Single memory-0 unit, uniform design, deterministic arm-0 target with
  // q0(L=1 | arm 0) = 0.3 and Y = L.  The gradient lives on the arm-0
  // context alone: dbar(0, l) = (1 / 0.5) (l - 0.3), i.e. -0.6 and +1.4.
  // Occupancy is flat in t (memory 0, static design), so the tail and
  // horizon averages coincide and the stationary variance is exactly
  //   0.5 * (0.7 * 0.36 + 0.3 * 1.96) = 0.42,
  // the arm-1 context contributing zeros with mass 0.5.
  const ScenarioSpec spec = make_best_arm_binary(1, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TrialData data = simulate_trial(spec, engine, 1000, 1, 909);
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, 1000);

  const EifBundle b = eif_components(spec, spec.q0, data, engine, marg);
  CHECK(b.rep == 3);
  CHECK(b.at(0, 0) == doctest::Approx(-0.6).epsilon(1e-12));
  CHECK(b.at(0, 1) == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(b.sigma2_inf == doctest::Approx(0.42).epsilon(1e-10));
  // 1000 observed nodes: the empirical variance is near its limit
  // (standard error of the variance estimate is about 0.02 here).
  CHECK(std::abs(b.sigma2 - 0.42) <= 0.1);

  const TrialData tiny = simulate_trial(spec, engine, 1, 1, 1);
  const EifBundle bt = eif_components(spec, spec.q0, tiny, engine, marg);
  CHECK_THROWS_AS(eif_variance(bt, marg), ValidationError);
}

TEST_CASE("per-node values export as CSV") {
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TrialData data = simulate_trial(spec, engine, 3, 2, 77);
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, 3);
  const EifBundle b = eif_components(spec, spec.q0, data, engine, marg, 2);

  std::ostringstream os;
  write_eif_csv(b, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "t,i,c,l,dbar");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 6);  // T * N nodes

  const std::string path = "eif_nodes_test.csv";
  write_eif_csv_file(b, path);
  std::ifstream f(path);
  std::stringstream file_content;
  file_content << f.rdbuf();
  CHECK(file_content.str() == os.str());
  std::remove(path.c_str());
}

TEST_CASE("rollout backend approximates the exact tables") {
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TrialData data = simulate_trial(spec, engine, 3, 2, 77);
  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, 3);

  const EifBundle exact = eif_components(spec, spec.q0, data, engine, marg, 2);
  const EifBundle approx = eif_components(spec, spec.q0, data, engine, marg, 2, "mc",
                                          DEFAULT_ENUM_BUDGET, 20000, 11);
  CHECK(approx.backend == "mc");
  CHECK(approx.info.contains("mc_max_se"));
  CHECK(approx.info.at("mc_max_se").get<double>() >= 0.0);
  for (const auto& k : key_union({&exact, &approx}))
    CHECK(std::abs(exact.at(k.first, k.second) - approx.at(k.first, k.second)) <= 0.1);
}

TEST_CASE("remainder vanishes at the truth") {
  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine eng_c = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const RemainderReport rc = remainder_exact(cluster, eng_c, 3, cluster.q0);
  CHECK(rc.rep_class == 1);
  CHECK(std::abs(rc.r) <= 1e-10);
  CHECK(std::abs(rc.part_marginal) <= 1e-10);
  CHECK(std::abs(rc.part_telescope) <= 1e-10);
  CHECK(rc.parts_gap <= 1e-10);

  ScenarioSpec ba = make_best_arm(2, 2, 2, 1, 3);
  ba.tau = 2;
  ba.g_star = DesignRule::fixed_row({0.6, 0.4});
  const DesignEngine eng_b = DesignEngine::fixed(DesignRule::fixed_row({0.55, 0.45}));
  const RemainderReport rb = remainder_exact(ba, eng_b, 3, ba.q0);
  CHECK(rb.rep_class == 2);
  CHECK(std::abs(rb.r) <= 1e-10);
  CHECK(std::abs(rb.part_single) <= 1e-10);
  CHECK(rb.parts_gap <= 1e-10);
}

TEST_CASE("matching occupancy ratios kill the remainder at any q") {
  // Memory-0 unit-local chains have a single degenerate A-context, so the
  // counterfactual-to-average A-occupancy ratio is identically 1 under
  // every transition table and the single-integral remainder form is
  // exactly zero — hence R itself vanishes even far from q0.
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const TransitionTable q = tilt(spec, 0.25);
  const RemainderReport r2 = remainder_exact(spec, engine, 2, q, 2);
  CHECK(r2.part_single == 0.0);
  CHECK(r2.parts_gap <= 1e-9);
  CHECK(std::abs(r2.r) <= 1e-9);
  CHECK(std::abs(r2.psi_q - r2.psi_q0) > 1e-3);  // the plug-ins do move

  // The two-part form reaches the same zero through mutual cancellation.
  const RemainderReport r1 = remainder_exact(spec, engine, 2, q, 1);
  CHECK(std::abs(r1.r) <= 1e-9);
  CHECK(r1.parts_gap <= 1e-9);
}

TEST_CASE("remainder decomposition parts are individually material and sum exactly") {
  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TransitionTable q1 = tilt(cluster, 0.3);
  // A 0.3 mixture toward the tilt: far enough from q0 that both parts of
  // the two-part form carry real mass.
  std::vector<long long> codes = cluster.q0.codes();
  std::vector<std::vector<double>> rows;
  for (long long c : codes) {
    std::vector<double> row(2);
    for (int l = 0; l < 2; ++l) row[static_cast<std::size_t>(l)] = 0.7 * cluster.q0.prob(c, l) + 0.3 * q1.prob(c, l);
    rows.push_back(row);
  }
  const TransitionTable q(2, std::move(codes), std::move(rows));

  const RemainderReport r = remainder_exact(cluster, engine, 3, q, 1);
  CHECK(r.r == doctest::Approx(r.psi_q - r.psi_q0 + r.mean_d).epsilon(1e-12));
  CHECK(std::abs(r.part_marginal) > 1e-6);
  CHECK(std::abs(r.part_telescope) > 1e-6);
  CHECK(r.parts_gap <= 1e-9);
}

TEST_CASE("remainder shrinks quadratically along mixture paths") {
  const std::vector<double> eps{0.1, 0.05, 0.025, 0.0125};

  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine eng_c = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const RemainderSweep sc = remainder_sweep(cluster, eng_c, 3, tilt(cluster, 0.3), eps);
  CHECK(sc.slope > 1.8);
  CHECK(sc.slope < 2.2);
  for (std::size_t k = 1; k < sc.r_abs.size(); ++k) CHECK(sc.r_abs[k] < sc.r_abs[k - 1]);

  ScenarioSpec ba = make_best_arm(2, 2, 2, 1, 3);
  ba.tau = 2;
  ba.g_star = DesignRule::fixed_row({0.6, 0.4});
  const DesignEngine eng_b = DesignEngine::fixed(DesignRule::fixed_row({0.55, 0.45}));
  const RemainderSweep sb = remainder_sweep(ba, eng_b, 3, tilt(ba, 0.3), eps);
  CHECK(sb.slope > 1.8);
  CHECK(sb.slope < 2.2);

  CHECK_THROWS_AS(remainder_sweep(cluster, eng_c, 3, tilt(cluster, 0.3), {0.1}), ValidationError);
}

TEST_CASE("per-node integrated means chain across rounds") {
  ScenarioSpec ba = make_best_arm(2, 2, 2, 1, 3);
  ba.tau = 2;
  ba.g_star = DesignRule::fixed_row({0.6, 0.4});
  // Integrating each node's conditional mean against its own occupancy
  // reproduces the counterfactual mean at every node — the cancellation
  // that collapses the cross-round sum in the A-occupancy representation.
  CHECK(rep3_cross_term_gap(ba, ba.q0) <= 1e-9);
  CHECK(rep3_cross_term_gap(ba, tilt(ba, 0.2)) <= 1e-9);

  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  CHECK_THROWS_AS(rep3_cross_term_gap(cluster, cluster.q0), ModelMismatchError);
}

TEST_CASE("gradient norm audit certifies the mixing bound") {
  // Hand-checkable instance: two memory-0 units, uniform design, target
  // pins arm 0 with q0(L=1 | arm 0) = 0.3, Y = L.
  //   b_hat: counterfactual occupancy is the point mass on the arm-0
  //     context, average actual occupancy there is 0.5  ->  2.
  //   phi_hat: under (q0, g*) a unit's own (A, L) determines its Y, so the
  //     coefficient is max(0.3, 0.7) = 0.7; other units are independent
  //     and contribute 0.
  //   largest gradient value: 2 * (1 - 0.3) = 1.4 <= 2 * 1 * 2 * 0.7 = 2.8.
  const ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  const DesignEngine engine = DesignEngine::fixed(DesignRule::uniform(2));
  const GradientBoundReport g = gradient_bound_audit(spec, engine, 3);
  CHECK(g.b_hat == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g.phi_hat == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(g.max_abs == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(g.bound == doctest::Approx(2.8).epsilon(1e-12));
  CHECK(g.ok);

  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const GradientBoundReport gc =
      gradient_bound_audit(cluster, DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3})), 3);
  CHECK(gc.ok);
  CHECK(gc.b_hat >= 1.0 - 1e-12);  // ratio of two distributions over contexts
  CHECK(gc.max_abs > 0.0);
  CHECK(gc.bound == doctest::Approx(2.0 * cluster.tau * gc.b_hat * gc.phi_hat).epsilon(1e-12));

  const ScenarioSpec hh = make_household_censoring({{1, 2}}, {{2}, {1}}, 1, 21);
  const GradientBoundReport gh = gradient_bound_audit(hh, DesignEngine::fixed(DesignRule::uniform(2)), 3);
  CHECK(gh.ok);
  CHECK(gh.b_hat >= 1.0 - 1e-12);
}

TEST_CASE("refusals: zero transition rows, zero design probabilities, short marginals") {
  const ScenarioSpec cluster = make_cluster_mdp(2, 2, 2, 2, 0.3, 11);
  const DesignEngine engine = DesignEngine::fixed(DesignRule::fixed_row({0.7, 0.3}));
  const TrialData data = simulate_trial(cluster, engine, 3, cluster.N, 404);

  // A transition row with a structural zero on a reachable context.
  const auto tables = conditional_outcome_tables(cluster, cluster.q0);
  const long long c_star = tables[0].by_context.begin()->first;
  const TransitionTable q_bad = cluster.q0.with_row(c_star, {1.0, 0.0});
  const ContextMarginals marg_bad = context_marginals(cluster, q_bad, engine, 3);
  CHECK_THROWS_AS(eif_components(cluster, q_bad, data, engine, marg_bad, 2), ValidationError);

  // Marginals that do not cover the target horizon.
  const ContextMarginals short_marg = context_marginals(cluster, cluster.q0, engine, 1);
  CHECK_THROWS_AS(eif_components(cluster, cluster.q0, data, engine, short_marg, 2), ValidationError);

  // Unit-count mismatch between data and scenario.
  TrialData foreign(2, 3);
  const ContextMarginals marg = context_marginals(cluster, cluster.q0, engine, 3);
  CHECK_THROWS_AS(eif_components(cluster, cluster.q0, foreign, engine, marg, 2), ValidationError);

  // g* reaches arm 1 but the design never assigns it: the per-round
  // assignment ratio of representation 3 divides by zero, and the arm-1
  // L-contexts needed by representation 2 have zero average occupancy.
  ScenarioSpec ba = make_best_arm(2, 2, 2, 1, 3);
  ba.g_star = DesignRule::fixed_row({0.6, 0.4});
  const DesignEngine det = DesignEngine::fixed(DesignRule::fixed_row({1.0, 0.0}));
  const TrialData d_b = simulate_trial(ba, det, 3, 2, 31);
  const ContextMarginals m_b = context_marginals(ba, ba.q0, det, 3);
  CHECK_THROWS_AS(eif_components(ba, ba.q0, d_b, det, m_b, 3), PositivityError);
  CHECK_THROWS_AS(eif_components(ba, ba.q0, d_b, det, m_b, 2), PositivityError);
}
