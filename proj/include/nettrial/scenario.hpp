#pragma once

// Generative scenarios: a complete discrete specification of how a trial
// evolves — the repeated transition density q0 over context codes, the
// summarizer pair producing those codes, the network, the per-state outcome
// map f_Y, and the counterfactual intervention g*.
//
// A scenario carries a model-class tag:
//   M   — context sufficiency + homogeneity only.
//   M1  — additionally, contexts are forward-sufficient under g* within the
//         declared g*-independence blocks (audited by enumeration).
//   M2  — additionally, trajectories are independent singletons under g*,
//         and the L-context decomposes as (own arm, A-context).
//
// gstar_blocks declares the unit blocks whose trajectories are mutually
// independent under g* (clusters, households, or singletons).  The audit
// verifies both the block factorization and within-block context
// sufficiency exactly on small instances; the efficient simulation and
// conditional-expectation backends rely on exactly these two properties.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nettrial/context.hpp"
#include "nettrial/design.hpp"
#include "nettrial/network.hpp"
#include "nettrial/tables.hpp"

namespace nettrial {

inline constexpr double DEFAULT_ENUM_BUDGET = 1e7;  // weighted paths

struct ScenarioSpec {
  int schema_version = 1;
  std::string name;
  int N = 0;
  int n_arms = 0;
  int n_states = 0;
  int tau = 1;                     // target horizon of the mean outcome
  std::string model_class = "M";   // "M" | "M1" | "M2"
  NetworkStructure network;
  SummarizerPtr sum_l;             // L-context summarizer feeding q0
  SummarizerPtr sum_a;             // A-context summarizer feeding designs
  TransitionTable q0;
  std::vector<double> f_y;         // per-state outcome, values in [0,1]
  DesignRule g_star = DesignRule::uniform(1);
  std::vector<int> initial_state;  // per unit, round-0 padding
  std::vector<std::vector<int>> gstar_blocks;  // partition; empty = one block of all units

  // Blocks as used by the engine: the declared partition, or all units as
  // a single block when none is declared.
  std::vector<std::vector<int>> effective_blocks() const;

  // Structural validation (supports, partition properties, f_Y range,
  // summarizer kinds).  Does not run the enumeration audit.
  void validate() const;

  double outcome(int l) const { return f_y[static_cast<std::size_t>(l)]; }

  json to_json() const;
  static ScenarioSpec from_json(const json& j);
};

// One-hot design assigning arm `arm` deterministically.
DesignRule deterministic_arm(int arm, int n_arms);

// Clustered-MDP scenario: n_clusters disjoint clusters of cluster_size
// units; q0 reads the cluster context (same-round earlier states, cluster
// treatment vector, cluster previous-state vector).  `dependence` scales an
// exponential tilt by a neighbor summary; at 0 the transition rows are
// exactly equal across neighbor configurations.  g* is uniform; tagged M1.
ScenarioSpec make_cluster_mdp(int n_clusters, int cluster_size, int arm_count, int state_count,
                              double dependence, std::uint64_t seed);

// Household-censoring scenario (binary states and treatments): measurements
// depend on contacts' histories through visibility indicators — a contact
// outside the household is visible only while the unit's treatment is 1.
// Contact sets are augmented with the unit itself and its household, so
// censored codes still determine in-household dynamics.  g* assigns arm 0
// ("stay in household") deterministically; tagged M1; blocks = households.
ScenarioSpec make_household_censoring(const std::vector<std::vector<int>>& households,
                                      const std::vector<std::vector<int>>& contacts, int t0,
                                      std::uint64_t seed);

// Best-arm scenario: n_units independent unit-local chains q0(l | a, l_prev)
// (memory 1) or q0(l | a) (memory 0), seeded random rows; counterfactuals
// are the deterministic single-arm designs; tagged M2; blocks = singletons.
ScenarioSpec make_best_arm(int n_units, int arm_count, int state_count, int memory, std::uint64_t seed);

// Memory-0 binary best-arm variant with pinned Bernoulli success
// probabilities per arm: q0(L=1 | a) = p_arm[a], f_Y(l) = l.
ScenarioSpec make_best_arm_binary(int n_units, const std::vector<double>& p_arm);

struct AuditReport {
  bool ran = false;             // false when the enumeration budget refused
  std::string skipped_reason;
  double context_markov_gap = 0.0;  // within-block sufficiency, sup-norm gap
  double block_tv_gap = 0.0;        // g*-law factorization across blocks, TV
  bool decomposition_ok = true;     // M2: c_L = (arm, c_A) structurally
  bool pass = false;
};

// Exact model-class audit by enumeration of all paths over tau rounds under
// (q0, g*):
//   - within-block sufficiency: E[sum of block outcomes | L(s,j)=l, full
//     past] is constant across realizable pasts sharing C(s,j) (<= 1e-10);
//   - block independence: joint g*-law factorizes across effective_blocks
//     (total variation <= 1e-10);
//   - M2 additionally requires singleton blocks and a decomposing L-summarizer.
// Skipped (ran=false) when path count (|A|·|L|)^(N·tau) exceeds the budget.
AuditReport audit_model_class(const ScenarioSpec& spec, double budget = DEFAULT_ENUM_BUDGET);

}  // namespace nettrial
