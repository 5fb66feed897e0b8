#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "nettrial/scenario.hpp"

using namespace nettrial;

TEST_CASE("deterministic_arm is one-hot and range-checked") {
  DesignRule g = deterministic_arm(2, 4);
  auto row = g.dist(0);
  CHECK(row == std::vector<double>{0.0, 0.0, 1.0, 0.0});
  CHECK(!g.is_adaptive());
  CHECK_THROWS_AS(deterministic_arm(4, 4), ValidationError);
  CHECK_THROWS_AS(deterministic_arm(-1, 2), ValidationError);
}

TEST_CASE("cluster_mdp: shape, context space, and zero-dependence row collapse") {
  ScenarioSpec s = make_cluster_mdp(2, 2, 2, 2, 0.0, 7);
  CHECK(s.N == 4);
  CHECK(s.tau == 2);
  CHECK(s.model_class == "M1");
  CHECK(s.gstar_blocks == s.network.clusters);
  // Cluster L-context digits: (size-1, rank) + 1 earlier-state slot + 2 arm
  // slots + 2 previous-state slots, all binary here -> 2^7 codes.
  CHECK(s.q0.n_contexts() == 128);
  CHECK(s.sum_l->code_space().size() == 128);

  // With dependence = 0 the tilt is exp(0) = 1, so the transition row must
  // depend only on (own arm, own previous state).  Group the full table by
  // that pair and demand exact equality within groups.
  const int maxM = 2;
  std::map<std::pair<int, int>, std::vector<double>> first;
  for (long long code : s.q0.codes()) {
    auto d = s.sum_l->features(code);
    const int r = static_cast<int>(d[1]);
    const int a_own = static_cast<int>(d[static_cast<std::size_t>(2 + (maxM - 1) + r)]);
    const int l_own = static_cast<int>(d[static_cast<std::size_t>(2 + (maxM - 1) + maxM + r)]);
    auto row = s.q0.row(code);
    std::vector<double> rv(row.begin(), row.end());
    auto key = std::make_pair(a_own, l_own);
    auto it = first.find(key);
    if (it == first.end())
      first.emplace(key, rv);
    else
      CHECK(it->second == rv);
  }
  CHECK(first.size() == 4);  // 2 arms x 2 previous states

  // Nonzero dependence must actually move some row.
  ScenarioSpec sd = make_cluster_mdp(2, 2, 2, 2, 0.8, 7);
  double max_shift = 0.0;
  for (long long code : s.q0.codes())
    max_shift = std::max(max_shift, std::abs(s.q0.row(code)[1] - sd.q0.row(code)[1]));
  CHECK(max_shift > 0.01);
}

TEST_CASE("cluster_mdp audit: genuinely block-sufficient and block-independent") {
  ScenarioSpec s = make_cluster_mdp(2, 2, 2, 2, 0.8, 19);
  AuditReport rep = audit_model_class(s);
  CHECK(rep.ran);
  CHECK(rep.pass);
  CHECK(rep.context_markov_gap <= 1e-10);
  CHECK(rep.block_tv_gap <= 1e-10);
}

TEST_CASE("audit detects cross-unit dependence when blocks are declared singleton") {
  // One cluster of two units with strong neighbor tilt, but singleton blocks:
  // the joint law cannot factorize across units.
  ScenarioSpec s = make_cluster_mdp(1, 2, 2, 2, 0.8, 19);
  s.gstar_blocks = {{1}, {2}};
  s.validate();
  AuditReport rep = audit_model_class(s);
  CHECK(rep.ran);
  CHECK(!rep.pass);
  CHECK(rep.context_markov_gap <= 1e-10);  // own-unit outcomes stay sufficient
  CHECK(rep.block_tv_gap > 1e-6);

  // With dependence 0 the same declaration is correct: units evolve freely.
  ScenarioSpec s0 = make_cluster_mdp(1, 2, 2, 2, 0.0, 19);
  s0.gstar_blocks = {{1}, {2}};
  AuditReport rep0 = audit_model_class(s0);
  CHECK(rep0.ran);
  CHECK(rep0.pass);
  CHECK(rep0.block_tv_gap <= 1e-10);
}

TEST_CASE("audit detects insufficient contexts for a paired block") {
  // Two independent unit-local chains declared as one block: the pair
  // outcome depends on the partner's past, which the unit-local context
  // never sees, so within-block sufficiency must fail.
  ScenarioSpec s = make_best_arm(2, 2, 2, 1, 11);
  s.tau = 2;
  s.model_class = "M1";
  s.gstar_blocks = {{1, 2}};
  s.validate();
  AuditReport rep = audit_model_class(s);
  CHECK(rep.ran);
  CHECK(!rep.pass);
  CHECK(rep.context_markov_gap > 1e-6);
  CHECK(rep.block_tv_gap <= 1e-10);  // one block: factorization is trivial
}

TEST_CASE("best_arm audit passes as tagged M2") {
  ScenarioSpec s = make_best_arm(2, 2, 2, 1, 11);
  s.tau = 2;
  AuditReport rep = audit_model_class(s);
  CHECK(rep.ran);
  CHECK(rep.pass);
  CHECK(rep.decomposition_ok);
  CHECK(rep.context_markov_gap <= 1e-10);
  CHECK(rep.block_tv_gap <= 1e-10);

  ScenarioSpec b = make_best_arm_binary(3, {0.3, 0.7});
  CHECK(b.q0.row(0)[1] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(b.q0.row(1)[1] == doctest::Approx(0.7).epsilon(1e-15));
  AuditReport repb = audit_model_class(b);
  CHECK(repb.ran);
  CHECK(repb.pass);
}

TEST_CASE("audit budget refusal is explicit") {
  ScenarioSpec s = make_cluster_mdp(2, 2, 2, 2, 0.5, 3);
  AuditReport rep = audit_model_class(s, 100.0);  // 4^8 = 65536 paths > 100
  CHECK(!rep.ran);
  CHECK(!rep.pass);
  CHECK(!rep.skipped_reason.empty());
  // Exactly at the path count the audit still runs.
  AuditReport ok = audit_model_class(s, 65536.0);
  CHECK(ok.ran);
}

TEST_CASE("household scenario: augmentation, intervention, and row structure") {
  // Households {1,2} and {3}; unit 1 additionally meets unit 3 outside.
  ScenarioSpec s = make_household_censoring({{1, 2}, {3}}, {{3}, {}, {}}, 1, 5);
  CHECK(s.N == 3);
  CHECK(s.n_arms == 2);
  CHECK(s.n_states == 2);
  CHECK(s.model_class == "M1");
  CHECK(s.gstar_blocks == std::vector<std::vector<int>>{{1, 2}, {3}});
  // Contacts are augmented with self and household.
  CHECK(s.network.contacts[0] == std::vector<int>{1, 2, 3});
  CHECK(s.network.contacts[1] == std::vector<int>{1, 2});
  CHECK(s.network.contacts[2] == std::vector<int>{3});
  // g* keeps everyone home (arm 0) with probability one.
  CHECK(s.g_star.dist(0) == std::vector<double>{1.0, 0.0});

  // Rows are a clamped logistic in (# visible infected, # visible healthy):
  // codes with identical counts share a row, more visible infections never
  // lower the infection probability, and every probability stays in
  // [0.05, 0.95].
  int maxF = 3;
  const int now_begin = 2, now_end = 2 + maxF;
  const int trt_end = now_end + 2 * maxF;   // t0 + 1 = 2 treatment rounds
  const int past_end = trt_end + 1 * maxF;  // t0 = 1 past-state round
  std::map<std::pair<int, int>, double> p_by_counts;
  for (long long code : s.q0.codes()) {
    auto d = s.sum_l->features(code);
    int inf = 0, clear = 0;
    for (int k = now_begin; k < now_end; ++k) {
      if (d[static_cast<std::size_t>(k)] == 2.0) ++inf;
      if (d[static_cast<std::size_t>(k)] == 1.0) ++clear;
    }
    for (int k = trt_end; k < past_end; ++k) {
      if (d[static_cast<std::size_t>(k)] == 2.0) ++inf;
      if (d[static_cast<std::size_t>(k)] == 1.0) ++clear;
    }
    double p1 = s.q0.row(code)[1];
    CHECK(p1 >= 0.05);
    CHECK(p1 <= 0.95);
    auto [it, fresh] = p_by_counts.emplace(std::make_pair(inf, clear), p1);
    if (!fresh) CHECK(it->second == p1);
  }
  for (const auto& [key, p] : p_by_counts) {
    auto up = p_by_counts.find({key.first + 1, key.second});
    if (up != p_by_counts.end()) CHECK(up->second >= p);
  }

  AuditReport rep = audit_model_class(s);
  CHECK(rep.ran);
  CHECK(rep.pass);
  CHECK(rep.context_markov_gap <= 1e-10);
  CHECK(rep.block_tv_gap <= 1e-10);
}

TEST_CASE("scenario JSON round-trips through text exactly") {
  ScenarioSpec s = make_cluster_mdp(2, 2, 2, 3, 0.7, 23);
  json j = json::parse(s.to_json().dump());
  ScenarioSpec r = ScenarioSpec::from_json(j);
  CHECK(r.name == s.name);
  CHECK(r.N == s.N);
  CHECK(r.tau == s.tau);
  CHECK(r.model_class == s.model_class);
  CHECK(r.f_y == s.f_y);
  CHECK(r.initial_state == s.initial_state);
  CHECK(r.gstar_blocks == s.gstar_blocks);
  CHECK(r.network.clusters == s.network.clusters);
  CHECK(r.q0.codes() == s.q0.codes());
  for (long long code : s.q0.codes()) {
    auto a = s.q0.row(code), b = r.q0.row(code);
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  CHECK(r.g_star.to_json() == s.g_star.to_json());
  CHECK(r.sum_l->descriptor() == s.sum_l->descriptor());
  CHECK(r.sum_a->descriptor() == s.sum_a->descriptor());

  ScenarioSpec h = make_household_censoring({{1, 2}, {3}}, {{3}, {}, {}}, 1, 5);
  ScenarioSpec h2 = ScenarioSpec::from_json(json::parse(h.to_json().dump()));
  CHECK(h2.q0.codes() == h.q0.codes());
  CHECK(h2.network.contacts == h.network.contacts);
  CHECK(h2.network.memory == 1);
}

TEST_CASE("scenario JSON rejects unknown keys and versions") {
  ScenarioSpec s = make_best_arm_binary(2, {0.2, 0.6});
  json j = s.to_json();
  json bad = j;
  bad["surprise"] = 1;
  CHECK_THROWS_AS(ScenarioSpec::from_json(bad), ValidationError);
  json badver = j;
  badver["version"] = 2;
  CHECK_THROWS_AS(ScenarioSpec::from_json(badver), ValidationError);
  json badnet = j;
  badnet["network"]["typo"] = true;
  CHECK_THROWS_AS(ScenarioSpec::from_json(badnet), ValidationError);
}

TEST_CASE("scenario validation rejects structural mistakes") {
  ScenarioSpec s = make_best_arm_binary(2, {0.2, 0.6});
  SUBCASE("M2 demands singleton blocks") {
    s.gstar_blocks = {{1, 2}};
    CHECK_THROWS_AS(s.validate(), ValidationError);
  }
  SUBCASE("outcome map must cover states within [0,1]") {
    s.f_y = {0.0, 1.5};
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s.f_y = {0.0};
    CHECK_THROWS_AS(s.validate(), ValidationError);
  }
  SUBCASE("counterfactual rule must be frozen") {
    s.g_star = DesignRule::eps_greedy(2, 0.1);
    CHECK_THROWS_AS(s.validate(), ValidationError);
  }
  SUBCASE("initial state must live in the support") {
    s.initial_state = {0, 2};
    CHECK_THROWS_AS(s.validate(), ValidationError);
  }
  SUBCASE("blocks must partition the units") {
    s.model_class = "M1";
    s.gstar_blocks = {{1}};
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s.gstar_blocks = {{1}, {1}, {2}};
    CHECK_THROWS_AS(s.validate(), ValidationError);
  }
  SUBCASE("default blocks are one block of all units") {
    s.model_class = "M1";
    s.gstar_blocks.clear();
    CHECK(s.effective_blocks() == std::vector<std::vector<int>>{{1, 2}});
  }
  SUBCASE("constructor argument ranges") {
    CHECK_THROWS_AS(make_cluster_mdp(0, 2, 2, 2, 0.0, 1), ValidationError);
    CHECK_THROWS_AS(make_best_arm(2, 1, 2, 0, 1), ValidationError);
    CHECK_THROWS_AS(make_best_arm_binary(2, {0.5}), ValidationError);
    CHECK_THROWS_AS(make_best_arm_binary(2, {0.5, 1.2}), ValidationError);
    CHECK_THROWS_AS(make_household_censoring({{1, 2}}, {{}, {}}, 0, 1), ValidationError);
  }
}
