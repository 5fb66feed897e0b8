#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "nettrial/sim.hpp"

using namespace nettrial;

namespace {

// Shared fixtures.  cluster4: two clusters of two (block-local, M1, tau=2).
// pair2: one cluster of two, small enough for exhaustive cross-checks at
// longer horizons.
ScenarioSpec cluster4() { return make_cluster_mdp(2, 2, 2, 2, 0.6, 5); }
ScenarioSpec pair2() { return make_cluster_mdp(1, 2, 2, 2, 0.5, 9); }

ScenarioSpec household3() {
  return make_household_censoring({{1, 2}, {3}}, {{3}, {}, {}}, 1, 7);
}

}  // namespace

TEST_CASE("design engines: kinds, schedules, and rule swaps") {
  DesignEngine st = DesignEngine::fixed(deterministic_arm(0, 2));
  CHECK(st.kind() == DesignEngine::Kind::Static);
  CHECK(!st.adaptive());
  CHECK(st.n_arms() == 2);
  CHECK(st.rule_at(1).dist(0) == std::vector<double>{1.0, 0.0});
  CHECK(st.rule_at(99).dist(0) == std::vector<double>{1.0, 0.0});
  CHECK_THROWS_AS(DesignEngine::fixed(DesignRule::eps_greedy(2)), ValidationError);

  DesignEngine sc = DesignEngine::schedule({deterministic_arm(0, 2), deterministic_arm(1, 2)});
  CHECK(sc.kind() == DesignEngine::Kind::Schedule);
  CHECK(sc.rule_at(1).dist(0)[0] == 1.0);
  CHECK(sc.rule_at(2).dist(0)[1] == 1.0);
  CHECK_THROWS_AS(sc.rule_at(3), ValidationError);
  CHECK_THROWS_AS(sc.set_rule(deterministic_arm(0, 2)), UnsupportedError);
  CHECK_THROWS_AS(DesignEngine::schedule({}), ValidationError);
  CHECK_THROWS_AS(DesignEngine::schedule({DesignRule::eps_greedy(2)}), ValidationError);

  DesignEngine bd = DesignEngine::bandit(DesignRule::eps_greedy(2, 0.1), 3);
  CHECK(bd.adaptive());
  CHECK(bd.update_every() == 3);
  CHECK_THROWS_AS(DesignEngine::bandit(deterministic_arm(0, 2)), ValidationError);
  CHECK_THROWS_AS(DesignEngine::bandit(DesignRule::eps_greedy(2), 0), ValidationError);

  // Swaps keep the family and arm count.
  st.set_rule(deterministic_arm(1, 2));
  CHECK(st.rule_at(1).dist(0)[1] == 1.0);
  CHECK_THROWS_AS(st.set_rule(DesignRule::eps_greedy(2)), UnsupportedError);
  CHECK_THROWS_AS(st.set_rule(deterministic_arm(0, 3)), ValidationError);

  CHECK(st.descriptor()["kind"] == "static");
  CHECK(sc.descriptor()["rules"].size() == 2);
  CHECK(bd.descriptor()["update_every"] == 3);
}

TEST_CASE("theta summaries honor the update cadence") {
  // Binary outcomes f_Y(l) = l, two units; outcomes filled by hand.
  ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  TrialData d(2, 4);
  TrialView v{&d, &spec.initial_state};
  // round 1: arms (0,1), states (0,1); round 2: arms (1,1), states (1,0);
  // round 3: arms (0,0), states (1,1).
  d.set_a(1, 1, 0); d.set_a(1, 2, 1); d.set_l(1, 1, 0); d.set_l(1, 2, 1);
  d.set_a(2, 1, 1); d.set_a(2, 2, 1); d.set_l(2, 1, 1); d.set_l(2, 2, 0);
  d.set_a(3, 1, 0); d.set_a(3, 2, 0); d.set_l(3, 1, 1); d.set_l(3, 2, 1);

  // update_every = 1 at t = 4 reads rounds 1..3: arm 0 saw {0,1,1}, arm 1
  // saw {1,1,0}; both have mean 2/3, sample variance 1/3, se sqrt(1/9).
  DesignTheta th = theta_from_prefix(spec, v, 4, 1);
  CHECK(th.count[0] == 3);
  CHECK(th.count[1] == 3);
  CHECK(th.psi_hat[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(th.sigma_hat[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(th.psi_hat[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // update_every = 2: refreshes at rounds 1, 3, 5, ...; t = 4 uses the
  // refresh at round 3, i.e. rounds 1..2 only.  Arm 0 saw {0} (count 1,
  // se falls back to 1), arm 1 saw {1,1,0}.
  th = theta_from_prefix(spec, v, 4, 2);
  CHECK(th.count[0] == 1);
  CHECK(th.psi_hat[0] == 0.0);
  CHECK(th.sigma_hat[0] == 1.0);
  CHECK(th.count[1] == 3);
  CHECK(th.psi_hat[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // t = 2 with update_every = 2 still sits on the round-1 refresh: no
  // completed rounds, so arms keep the optimistic (1, 1) initialization.
  th = theta_from_prefix(spec, v, 2, 2);
  CHECK(th.count[0] == 0);
  CHECK(th.psi_hat[0] == 1.0);
  CHECK(th.sigma_hat[0] == 1.0);
}

TEST_CASE("simulation is reproducible and stream-sensitive") {
  ScenarioSpec spec = cluster4();
  DesignEngine eng = DesignEngine::fixed(DesignRule::uniform(2));
  TrialData d1 = simulate_trial(spec, eng, 40, spec.N, 123, 0);
  TrialData d2 = simulate_trial(spec, eng, 40, spec.N, 123, 0);
  CHECK(d1.A == d2.A);
  CHECK(d1.L == d2.L);
  TrialData d3 = simulate_trial(spec, eng, 40, spec.N, 123, 1);
  CHECK(d1.L != d3.L);
  CHECK_THROWS_AS(simulate_trial(spec, eng, 40, spec.N + 1, 1, 0), ValidationError);
  CHECK_THROWS_AS(simulate_trial(spec, DesignEngine::fixed(DesignRule::uniform(3)), 4, spec.N, 1, 0),
                  ValidationError);

  // A schedule drives each round with its own frozen rule.
  ScenarioSpec iid = make_best_arm_binary(3, {0.3, 0.7});
  DesignEngine sched = DesignEngine::schedule({deterministic_arm(0, 2), deterministic_arm(1, 2)});
  TrialData ds = simulate_trial(iid, sched, 2, 3, 7, 0);
  for (int i = 1; i <= 3; ++i) {
    CHECK(ds.a(1, i) == 0);
    CHECK(ds.a(2, i) == 1);
  }
  CHECK_THROWS_AS(simulate_trial(iid, sched, 3, 3, 7, 0), ValidationError);
}

TEST_CASE("simulated frequencies match the transition law") {
  // Memory-0 independent units under the deterministic arm-0 design:
  // states are iid Bernoulli(0.3).
  ScenarioSpec spec = make_best_arm_binary(3, {0.3, 0.7});
  DesignEngine eng = DesignEngine::fixed(spec.g_star);
  const int T = 2000;
  TrialData d = simulate_trial(spec, eng, T, 3, 2024, 0);
  long long ones = 0;
  for (int t = 1; t <= T; ++t)
    for (int i = 1; i <= 3; ++i) ones += d.l(t, i);
  const double freq = static_cast<double>(ones) / (3.0 * T);
  // se = sqrt(.3*.7/6000) ~ 0.006; allow 4 se.
  CHECK(freq == doctest::Approx(0.3).epsilon(0.08));
  for (int t = 1; t <= T; ++t)
    for (int i = 1; i <= 3; ++i) CHECK(d.a(t, i) == 0);
}

TEST_CASE("epsilon-greedy concentrates on the better arm") {
  ScenarioSpec spec = make_best_arm_binary(2, {0.2, 0.8});
  DesignEngine eng = DesignEngine::bandit(DesignRule::eps_greedy(2, 0.2), 1);
  const int T = 400;
  TrialData d = simulate_trial(spec, eng, T, 2, 31, 0);
  long long arm1 = 0;
  for (int t = 1; t <= T; ++t)
    for (int i = 1; i <= 2; ++i) arm1 += d.a(t, i);
  // Once estimates separate, P(arm 1) = 1 - eps + eps/2 = 0.9.
  CHECK(static_cast<double>(arm1) / (2.0 * T) > 0.6);
}

TEST_CASE("adaptive hook can swap the rule mid-trial") {
  ScenarioSpec spec = make_best_arm_binary(2, {0.3, 0.7});
  DesignEngine eng = DesignEngine::fixed(deterministic_arm(0, 2));
  int calls = 0;
  AdaptiveHook hook = [&](const TrialView&, int t, DesignEngine& e) {
    ++calls;
    if (t == 4) e.set_rule(deterministic_arm(1, 2));
  };
  TrialData d = simulate_trial(spec, eng, 6, 2, 5, 0, hook);
  CHECK(calls == 6);
  for (int t = 1; t <= 3; ++t)
    for (int i = 1; i <= 2; ++i) CHECK(d.a(t, i) == 0);
  for (int t = 4; t <= 6; ++t)
    for (int i = 1; i <= 2; ++i) CHECK(d.a(t, i) == 1);
}

TEST_CASE("counterfactual mean: hand oracles on independent units") {
  // Memory-0 binary units: under the deterministic arm-a design each state
  // is Bernoulli(p_a), so E[Y(tau)] = p_a for every tau.
  ScenarioSpec spec = make_best_arm_binary(3, {0.3, 0.7});
  GcompResult ex = gcomp_exact(spec, spec.q0);
  CHECK(ex.value == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(ex.backend == "enum");
  GcompResult ch = gcomp_chain(spec, spec.q0);
  CHECK(ch.value == doctest::Approx(ex.value).epsilon(1e-14));
  CHECK(ch.backend == "chain");

  ScenarioSpec arm1 = spec;
  arm1.g_star = deterministic_arm(1, 2);
  CHECK(gcomp_exact(arm1, arm1.q0).value == doctest::Approx(0.7).epsilon(1e-14));

  ScenarioSpec unif = spec;
  unif.g_star = DesignRule::uniform(2);
  CHECK(gcomp_exact(unif, unif.q0).value == doctest::Approx(0.5).epsilon(1e-14));

  GcompResult mc = gcomp_mc(spec, spec.q0, 0, 20000, 99);
  CHECK(mc.se > 0.0);
  CHECK(std::abs(mc.value - 0.3) < 4.0 * mc.se);
  CHECK(mc.paths == 20000);
}

TEST_CASE("counterfactual mean: matrix-power oracle with memory") {
  // Single unit, binary, memory 1: the state follows a two-state Markov
  // chain whose rows we read off q0 by building one-node histories, so the
  // three-round mean is a hand matrix-power computation.
  ScenarioSpec spec = make_best_arm(1, 2, 2, 1, 17);
  spec.tau = 3;
  auto row_for = [&](int lprev) {
    TrialData d(1, 2);
    d.set_l(1, 1, lprev);
    d.set_a(2, 1, 0);  // g* assigns arm 0
    TrialView v{&d, &spec.initial_state};
    auto r = spec.q0.row(spec.sum_l->code(v, 2, 1));
    return std::vector<double>(r.begin(), r.end());
  };
  // Round 1 reads the pre-trial state through padding.
  std::vector<double> dist(2, 0.0);
  {
    TrialData d(1, 1);
    d.set_a(1, 1, 0);
    TrialView v{&d, &spec.initial_state};
    auto r = spec.q0.row(spec.sum_l->code(v, 1, 1));
    dist.assign(r.begin(), r.end());
  }
  for (int t = 2; t <= 3; ++t) {
    std::vector<double> next(2, 0.0);
    for (int l = 0; l < 2; ++l) {
      auto r = row_for(l);
      for (int lp = 0; lp < 2; ++lp) next[lp] += dist[l] * r[lp];
    }
    dist = next;
  }
  double oracle = 0.0;
  for (int l = 0; l < 2; ++l) oracle += dist[l] * spec.outcome(l);

  CHECK(gcomp_exact(spec, spec.q0).value == doctest::Approx(oracle).epsilon(1e-13));
  CHECK(gcomp_chain(spec, spec.q0).value == doctest::Approx(oracle).epsilon(1e-13));
}

TEST_CASE("counterfactual mean: backends agree and the budget counts real paths") {
  ScenarioSpec spec = cluster4();
  GcompResult ex = gcomp_exact(spec, spec.q0);
  GcompResult ch = gcomp_chain(spec, spec.q0);
  CHECK(ch.value == doctest::Approx(ex.value).epsilon(1e-12));
  CHECK(ex.paths == 65536);  // (2 arms * 2 states)^(4 units * 2 rounds), uniform g*
  CHECK_THROWS_AS(gcomp_exact(spec, spec.q0, 0, 100.0), BudgetError);

  // The budget counts positive-probability paths, not the nominal grid: a
  // deterministic g* prunes every off-design branch.
  ScenarioSpec tiny = make_best_arm_binary(1, {0.4, 0.6});
  GcompResult t2 = gcomp_exact(tiny, tiny.q0, 0, 2.0);
  CHECK(t2.paths == 2);
  CHECK_THROWS_AS(gcomp_exact(tiny, tiny.q0, 0, 1.0), BudgetError);

  // Household contacts reach outside the declared blocks, so the chain
  // backend refuses while enumeration still answers.
  ScenarioSpec hh = household3();
  CHECK(!scenario_block_local(hh));
  CHECK_THROWS_AS(gcomp_chain(hh, hh.q0), UnsupportedError);
  GcompResult hv = gcomp_exact(hh, hh.q0);
  CHECK(hv.value >= 0.0);
  CHECK(hv.value <= 1.0);
  CHECK(hv.paths == 64);  // deterministic g*: 2^(3 units * 2 rounds) state branches

  CHECK(scenario_block_local(spec));
  CHECK(scenario_block_local(make_best_arm(3, 2, 2, 1, 4)));
}

TEST_CASE("discounted objective matches the geometric identity") {
  // iid Bernoulli(0.35) states: E[Y(t)] = 0.35 for every t, so the
  // discounted sum is 0.35 * (1 - gamma^{H+1}) / (1 - gamma).
  ScenarioSpec spec = make_best_arm_binary(2, {0.35, 0.5});
  const double gamma = 0.8, tol = 1e-6;
  DiscountedResult res = gcomp_discounted(spec, spec.q0, gamma, tol);
  const int H = res.horizon - spec.tau;
  CHECK(H >= 1);
  CHECK(res.truncation == doctest::Approx(std::pow(gamma, H + 1) / (1 - gamma)).epsilon(1e-12));
  CHECK(res.truncation <= tol);
  // H is minimal: one round shorter would leave too much tail.
  CHECK(std::pow(gamma, H) / (1 - gamma) > tol);
  const double expect = 0.35 * (1.0 - std::pow(gamma, H + 1)) / (1.0 - gamma);
  CHECK(res.value == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(gcomp_discounted(spec, spec.q0, 0.0, tol), ValidationError);
  CHECK_THROWS_AS(gcomp_discounted(spec, spec.q0, 1.0, tol), ValidationError);
  CHECK_THROWS_AS(gcomp_discounted(household3(), household3().q0, 0.5, 1e-3), UnsupportedError);
}

TEST_CASE("conditional outcome tables: identities and backend agreement") {
  ScenarioSpec spec = cluster4();
  const double psi = gcomp_exact(spec, spec.q0).value;
  auto te = conditional_outcome_tables(spec, spec.q0, 0, "enum");
  auto tc = conditional_outcome_tables(spec, spec.q0, 0, "chain");
  REQUIRE(te.size() == static_cast<std::size_t>(spec.tau * spec.N));
  REQUIRE(tc.size() == te.size());

  for (std::size_t k = 0; k < te.size(); ++k) {
    const auto& e = te[k];
    const auto& c = tc[k];
    CHECK(e.s == c.s);
    CHECK(e.j == c.j);
    double mass = 0.0, tot = 0.0;
    for (const auto& [code, ent] : e.by_context) {
      mass += ent.prob_c;
      tot += ent.prob_c * ent.mean_c;
      // mean_c is the q-weighted average of mean_cl by construction.
      auto row = spec.q0.row(code);
      double m = 0.0;
      for (const auto& [l, v] : ent.mean_cl) m += row[static_cast<std::size_t>(l)] * v;
      CHECK(ent.mean_c == doctest::Approx(m).epsilon(1e-12));
    }
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    // Tower property: E[E[Y | C]] = E[Y].
    CHECK(tot == doctest::Approx(psi).epsilon(1e-10));

    // Chain assembly agrees with the full-joint enumeration (blocks are
    // independent under g* for this scenario).
    REQUIRE(c.by_context.size() == e.by_context.size());
    for (const auto& [code, ent] : e.by_context) {
      auto it = c.by_context.find(code);
      REQUIRE(it != c.by_context.end());
      CHECK(it->second.prob_c == doctest::Approx(ent.prob_c).epsilon(1e-12));
      CHECK(it->second.mean_c == doctest::Approx(ent.mean_c).epsilon(1e-10));
      for (const auto& [l, v] : ent.mean_cl)
        CHECK(it->second.mean_cl.at(l) == doctest::Approx(v).epsilon(1e-10));
    }
  }

  ScenarioSpec plain = spec;
  plain.model_class = "M";
  CHECK_THROWS_AS(conditional_outcome_tables(plain, plain.q0), ModelMismatchError);
}

TEST_CASE("single conditional queries: pooled vs per-unit and model refusal") {
  ScenarioSpec spec = cluster4();
  auto tables = conditional_outcome_tables(spec, spec.q0, 0, "enum");
  const int s = 2, j = 1;
  const auto& tab = tables[static_cast<std::size_t>((s - 1) * spec.N + j - 1)];
  // Pick the heaviest context so Monte Carlo conditioning has mass to hit.
  long long c = -1;
  double best = 0.0;
  for (const auto& [code, ent] : tab.by_context)
    if (ent.prob_c > best) {
      best = ent.prob_c;
      c = code;
    }
  REQUIRE(best > 0.01);
  const int l0 = tab.by_context.at(c).mean_cl.begin()->first;

  const double pooled_enum = conditional_outcome(spec, spec.q0, s, j, c, l0, std::nullopt, "enum");
  CHECK(pooled_enum == doctest::Approx(tab.by_context.at(c).mean_cl.at(l0)).epsilon(1e-12));
  const double pooled_chain = conditional_outcome(spec, spec.q0, s, j, c, l0, std::nullopt, "chain");
  CHECK(pooled_chain == doctest::Approx(pooled_enum).epsilon(1e-10));

  // Pooled outcome = average of single-unit targets; cross-block units are
  // independent of the conditioning event.
  double acc = 0.0;
  for (int k = 1; k <= spec.N; ++k) acc += conditional_outcome(spec, spec.q0, s, j, c, l0, k, "enum");
  CHECK(acc / spec.N == doctest::Approx(pooled_enum).epsilon(1e-10));
  for (int k = 1; k <= spec.N; ++k) {
    const double ce = conditional_outcome(spec, spec.q0, s, j, c, l0, k, "enum");
    const double cc = conditional_outcome(spec, spec.q0, s, j, c, l0, k, "chain");
    CHECK(cc == doctest::Approx(ce).epsilon(1e-10));
  }

  // Context-only query returns the q-mixed mean.
  const double mc_only = conditional_outcome(spec, spec.q0, s, j, c, std::nullopt, std::nullopt, "enum");
  CHECK(mc_only == doctest::Approx(tab.by_context.at(c).mean_c).epsilon(1e-12));

  // Sampled backend lands near the exact value.
  const double samp = conditional_outcome(spec, spec.q0, s, j, c, l0, std::nullopt, "mc", 40000, 3);
  CHECK(samp == doctest::Approx(pooled_chain).epsilon(0.08));

  ScenarioSpec plain = spec;
  plain.model_class = "M";
  CHECK_THROWS_AS(conditional_outcome(plain, plain.q0, s, j, c, l0), ModelMismatchError);
  CHECK_THROWS_AS(conditional_outcome(spec, spec.q0, s, j, -999, std::nullopt, std::nullopt, "enum"),
                  ValidationError);
  CHECK_THROWS_AS(conditional_outcome(spec, spec.q0, 0, j, c), ValidationError);
  CHECK_THROWS_AS(conditional_outcome(spec, spec.q0, s, spec.N + 1, c), ValidationError);
}

TEST_CASE("context marginals: normalization, averages, backend agreement") {
  ScenarioSpec spec = pair2();
  DesignEngine eng = DesignEngine::fixed(DesignRule::uniform(2));
  const int T = 3;
  ContextMarginals mch = context_marginals(spec, spec.q0, eng, T, "chain");
  ContextMarginals men = context_marginals(spec, spec.q0, eng, T, "enum");
  CHECK(mch.backend == "chain");
  CHECK(men.backend == "enum");

  auto mass = [](const std::map<long long, double>& m) {
    double s = 0.0;
    for (const auto& [k, p] : m) s += p;
    return s;
  };
  for (int node = 0; node < T * spec.N; ++node) {
    auto nn = static_cast<std::size_t>(node);
    CHECK(mass(mch.h_l[nn]) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mass(mch.h_a[nn]) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mass(mch.hstar_l[nn]) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mass(mch.hstar_a[nn]) == doctest::Approx(1.0).epsilon(1e-12));
    // Backend agreement entry by entry, both legs and letters.
    for (const auto& [k, p] : men.h_l[nn]) CHECK(mch.h_l[nn].at(k) == doctest::Approx(p).epsilon(1e-12));
    for (const auto& [k, p] : men.h_a[nn]) CHECK(mch.h_a[nn].at(k) == doctest::Approx(p).epsilon(1e-12));
    for (const auto& [k, p] : men.hstar_l[nn])
      CHECK(mch.hstar_l[nn].at(k) == doctest::Approx(p).epsilon(1e-12));
  }

  // hbar is the flat average over all T*N node marginals.
  std::map<long long, double> manual;
  for (int node = 0; node < T * spec.N; ++node)
    for (const auto& [k, p] : mch.h_l[static_cast<std::size_t>(node)]) manual[k] += p / (T * spec.N);
  REQUIRE(manual.size() == mch.hbar_l.size());
  for (const auto& [k, p] : manual) CHECK(mch.hbar_l.at(k) == doctest::Approx(p).epsilon(1e-12));

  // The tail average covers the last quarter of rounds: here one round.
  std::map<long long, double> tail;
  for (int node = (T - 1) * spec.N; node < T * spec.N; ++node)
    for (const auto& [k, p] : mch.h_l[static_cast<std::size_t>(node)]) tail[k] += p / spec.N;
  for (const auto& [k, p] : tail) CHECK(mch.hinf_l.at(k) == doctest::Approx(p).epsilon(1e-12));

  // Prefix averages interpolate: upto(T) is hbar, upto(1) is round 1.
  auto up = mch.hbar_l_upto(T);
  for (const auto& [k, p] : mch.hbar_l) CHECK(up.at(k) == doctest::Approx(p).epsilon(1e-12));
  auto u1 = mch.hbar_a_upto(1);
  std::map<long long, double> r1;
  for (int node = 0; node < spec.N; ++node)
    for (const auto& [k, p] : mch.h_a[static_cast<std::size_t>(node)]) r1[k] += p / spec.N;
  for (const auto& [k, p] : r1) CHECK(u1.at(k) == doctest::Approx(p).epsilon(1e-12));
  CHECK_THROWS_AS(mch.hbar_l_upto(0), ValidationError);
  CHECK_THROWS_AS(mch.hbar_l_upto(T + 1), ValidationError);

  // The g*-leg marginals are the same occupancy the conditional tables see.
  ContextMarginals m2 = context_marginals(spec, spec.q0, DesignEngine::fixed(spec.g_star), spec.tau, "chain");
  auto tabs = conditional_outcome_tables(spec, spec.q0, 0, "chain");
  for (std::size_t k = 0; k < tabs.size(); ++k)
    for (const auto& [code, ent] : tabs[k].by_context)
      CHECK(m2.hstar_l[k].at(code) == doctest::Approx(ent.prob_c).epsilon(1e-12));

  // Sampled backend approximates the exact law.
  ContextMarginals mmc = context_marginals(spec, spec.q0, eng, T, "mc", DEFAULT_ENUM_BUDGET, 4000, 77);
  CHECK(mmc.backend == "mc");
  for (int node = 0; node < T * spec.N; ++node) {
    auto nn = static_cast<std::size_t>(node);
    for (const auto& [k, p] : mch.h_l[nn]) {
      auto it = mmc.h_l[nn].find(k);
      const double q = it == mmc.h_l[nn].end() ? 0.0 : it->second;
      CHECK(std::abs(q - p) < 0.05);
    }
    // g* leg stays exact regardless of the design-leg backend.
    for (const auto& [k, p] : mch.hstar_l[nn]) CHECK(mmc.hstar_l[nn].at(k) == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("context marginals under an adaptive design: enumeration vs sampling") {
  // Memory-0 units: the L-context is the unit's own current arm, so the
  // round-2 context law exposes the bandit's data-dependent assignment.
  // Enumeration recomputes theta per branch; sampling updates it online;
  // the two must meet.
  ScenarioSpec spec = make_best_arm_binary(2, {0.25, 0.75});
  DesignEngine eng = DesignEngine::bandit(DesignRule::eps_greedy(2, 0.3), 1);
  const int T = 2;
  ContextMarginals men = context_marginals(spec, spec.q0, eng, T, "enum");
  CHECK(men.backend == "enum");
  ContextMarginals mmc = context_marginals(spec, spec.q0, eng, T, "mc", DEFAULT_ENUM_BUDGET, 20000, 11);

  // Round 1: optimistic ties pick arm 0 greedily, spread by eps:
  // P(arm 0) = 1 - 0.3 + 0.15 = 0.85.
  for (int node = 0; node < spec.N; ++node) {
    std::vector<double> probs;
    for (const auto& [k, p] : men.h_l[static_cast<std::size_t>(node)]) probs.push_back(p);
    std::sort(probs.begin(), probs.end());
    REQUIRE(probs.size() == 2);
    CHECK(probs[0] == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(probs[1] == doctest::Approx(0.85).epsilon(1e-12));
  }
  for (int node = 0; node < T * spec.N; ++node) {
    auto nn = static_cast<std::size_t>(node);
    for (const auto& [k, p] : men.h_l[nn]) {
      auto it = mmc.h_l[nn].find(k);
      const double q = it == mmc.h_l[nn].end() ? 0.0 : it->second;
      CHECK(std::abs(q - p) < 0.02);
    }
  }

  // auto resolves to enumeration for adaptive engines; chain refuses.
  ContextMarginals mauto = context_marginals(spec, spec.q0, eng, T, "auto");
  CHECK(mauto.backend == "enum");
  CHECK_THROWS_AS(context_marginals(spec, spec.q0, eng, T, "chain"), UnsupportedError);
}

TEST_CASE("mixing coefficients: hand values and brute-force cross-check") {
  // Independent joint: every coefficient vanishes.
  {
    std::vector<double> px{0.3, 0.7}, py{0.2, 0.5, 0.3};
    std::vector<std::vector<double>> p(2, std::vector<double>(3));
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = px[static_cast<std::size_t>(i)] * py[static_cast<std::size_t>(j)];
    MixingReport r = mixing_coefficients(p);
    CHECK(r.phi == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.alpha == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.rho == doctest::Approx(0.0).epsilon(1e-9));
  }

  // Perfectly coupled fair coin: phi = 1/2, alpha = 1/4, rho = 1.
  {
    MixingReport r = mixing_coefficients({{0.5, 0.0}, {0.0, 0.5}});
    CHECK(r.phi == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.alpha == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Random 3x3 joint: compare against exhaustive event-pair suprema.
  {
    std::vector<std::vector<double>> p{{0.05, 0.10, 0.02}, {0.08, 0.20, 0.07}, {0.18, 0.04, 0.26}};
    MixingReport r = mixing_coefficients(p);
    std::vector<double> px(3, 0.0), py(3, 0.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        px[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        py[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      }
    double alpha = 0.0, phi = 0.0;
    for (int A = 1; A < 8; ++A)
      for (int B = 1; B < 8; ++B) {
        double pa = 0.0, pb = 0.0, pab = 0.0;
        for (int i = 0; i < 3; ++i) {
          if (A & (1 << i)) pa += px[static_cast<std::size_t>(i)];
          if (B & (1 << i)) pb += py[static_cast<std::size_t>(i)];
          for (int j = 0; j < 3; ++j)
            if ((A & (1 << i)) && (B & (1 << j))) pab += p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
        alpha = std::max(alpha, std::abs(pab - pa * pb));
        if (pa > 0.0) phi = std::max(phi, std::abs(pab / pa - pb));
      }
    CHECK(r.alpha == doctest::Approx(alpha).epsilon(1e-14));
    CHECK(r.phi == doctest::Approx(phi).epsilon(1e-14));
    CHECK(r.rho <= 1.0 + 1e-12);
    // Indicator correlations bound alpha: rho >= 4 * alpha.
    CHECK(r.rho + 1e-12 >= 4.0 * r.alpha);
  }

  CHECK_THROWS_AS(mixing_coefficients({{0.5, -0.1}, {0.3, 0.3}}), ValidationError);
  CHECK_THROWS_AS(mixing_coefficients({{0.4, 0.3}, {0.1, 0.1}}), ValidationError);
  CHECK_THROWS_AS(mixing_coefficients({}), ValidationError);
  // Exact alpha needs a subset sweep; refuse above 2^22.
  std::vector<std::vector<double>> big(23, std::vector<double>(23, 1.0 / 529.0));
  CHECK_THROWS_AS(mixing_coefficients(big), UnsupportedError);
}
