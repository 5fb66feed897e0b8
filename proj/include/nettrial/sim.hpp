#pragma once

// Simulation and exact computation under a scenario: sequential trial
// simulation with static, scheduled, or bandit designs; counterfactual
// means by exhaustive path enumeration, block-chain recursion, or Monte
// Carlo; conditional outcome tables feeding the influence-function engine;
// context occupancy marginals; and dependence (mixing) coefficients of
// discrete joint laws.
//
// Backends
//   enum   Exhaustive enumeration of every positive-probability path.
//          Always valid; counts completed paths as it goes and refuses
//          with BudgetError once the count exceeds the budget (zero-mass
//          branches are pruned, so deterministic rules cost far less than
//          the nominal (n_arms * n_states)^(N * rounds)).
//   chain  Round-by-round pushforward of per-block state-window
//          distributions.  Exact, and linear in the horizon, but requires
//          the scenario to be block-local: every summarizer read set stays
//          inside the unit's g*-independence block, and the design must
//          not pool information across blocks (static or scheduled rules
//          only).
//   mc     Monte Carlo rollouts with a fixed draw order, so two runs with
//          the same (seed, stream) are identical and paired comparisons
//          share draws (common random numbers).
//   auto   chain when the scenario qualifies, otherwise enum.
//
// All computations here are deterministic given their arguments: map
// iteration everywhere is in sorted key order, so accumulation order (and
// hence floating-point output) is reproducible byte for byte.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nettrial/scenario.hpp"

namespace nettrial {

// ---------------------------------------------------------------------------
// Designs at runtime

// A trial-ready design: which rule is in force at each round, and how
// assignment rows are produced from the history.  Bandit rules read a
// per-arm running summary (DesignTheta) computed from completed rounds
// strictly before the current one; `update_every` freezes that summary
// between scheduled refreshes.
class DesignEngine {
 public:
  enum class Kind { Static, Schedule, Bandit };

  // The same rule every round.
  static DesignEngine fixed(DesignRule rule);
  // One rule per round, 1-based; the trial horizon must not exceed the
  // schedule length.
  static DesignEngine schedule(std::vector<DesignRule> per_round);
  // A bandit rule (eps_greedy / ucb) with its arm summary refreshed at
  // rounds 1, 1+update_every, 1+2*update_every, ...
  static DesignEngine bandit(DesignRule rule, int update_every = 1);

  Kind kind() const { return kind_; }
  bool adaptive() const { return kind_ == Kind::Bandit; }
  int n_arms() const;
  int update_every() const { return update_every_; }
  const DesignRule& rule_at(int t) const;
  void set_rule(DesignRule rule);  // swap the static rule mid-trial (hooks)

  // Assignment row for node A(t,i); reads only data strictly before the
  // node through `v`.  `theta` is consulted by bandit rules only.
  std::vector<double> dist(const ScenarioSpec& spec, const TrialView& v, int t, int i,
                           const DesignTheta& theta) const;

  json descriptor() const;

 private:
  Kind kind_ = Kind::Static;
  DesignRule rule_ = DesignRule::uniform(1);
  std::vector<DesignRule> schedule_;
  int update_every_ = 1;
};

// Arm summary from the completed rounds strictly before round t, honoring
// the update cadence: statistics are taken over rounds < u where u is the
// latest refresh round <= t.  psi_hat is the running mean of f_Y over
// assignments to the arm, sigma_hat the standard error of that mean
// (1 while count < 2), count the number of assignments.
DesignTheta theta_from_prefix(const ScenarioSpec& spec, const TrialView& v, int t, int update_every = 1);

// Called before each round; may inspect the strict prefix and swap the
// engine's rule (design selection at checkpoints).
using AdaptiveHook = std::function<void(const TrialView& prefix, int t, DesignEngine& engine)>;

// Sequentially simulates T rounds of N units under (spec.q0, engine).
// N must equal spec.N.  Draw order is fixed (for each round: one
// categorical draw per treatment node, then one per measurement node), so
// runs with the same (seed, stream) are reproducible and two designs
// compared under the same (seed, stream) share draws.
TrialData simulate_trial(const ScenarioSpec& spec, const DesignEngine& engine, int T, int N, std::uint64_t seed,
                         std::uint64_t stream = 0, const AdaptiveHook& hook = nullptr);

// ---------------------------------------------------------------------------
// Exhaustive path enumeration

// Visits every positive-probability trajectory of the first `rounds`
// rounds under (q, engine): `visit_node`, when given, fires at each node
// with the prefix probability before the node's value is drawn;
// `visit_path` fires once per complete trajectory with its probability.
// Completed paths are counted mid-flight; BudgetError once the count
// exceeds `budget`.
void enumerate_paths(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine, int rounds,
                     double budget,
                     const std::function<void(const TrialView&, int t, int i, ContextSummarizer::Kind, double)>& visit_node,
                     const std::function<void(const TrialView&, double)>& visit_path);

// ---------------------------------------------------------------------------
// Counterfactual means (g-computation)

struct GcompResult {
  double value = 0.0;
  double se = 0.0;        // Monte Carlo standard error; 0 for exact backends
  long long paths = 0;    // paths enumerated or sampled
  std::string backend;
};

// Mean population outcome E[Y(tau)] under (q, spec.g_star), where
// Y(tau) = N^{-1} sum_i f_Y(L(tau,i)).  tau <= 0 means spec.tau.
GcompResult gcomp_exact(const ScenarioSpec& spec, const TransitionTable& q, int tau = 0,
                        double budget = DEFAULT_ENUM_BUDGET);
GcompResult gcomp_chain(const ScenarioSpec& spec, const TransitionTable& q, int tau = 0);
GcompResult gcomp_mc(const ScenarioSpec& spec, const TransitionTable& q, int tau, long long n_paths,
                     std::uint64_t seed, std::uint64_t stream = 0);

// Discounted tail sum_{h >= 0} gamma^h E[Y(tau + h)], truncated once the
// remaining tail bound gamma^{h+1}/(1 - gamma) drops to `tol` (outcomes
// are bounded by 1).  Chain backend; requires a block-local scenario.
struct DiscountedResult {
  double value = 0.0;
  int horizon = 0;          // last absolute round included
  double truncation = 0.0;  // bound on the discarded tail
};
DiscountedResult gcomp_discounted(const ScenarioSpec& spec, const TransitionTable& q, double gamma, double tol);

// ---------------------------------------------------------------------------
// Conditional outcomes under (q, g*)

// For node (s,j): outcome conditionals given the node's L-context code and
// optionally its state.  mean_c is always the q-weighted average of
// mean_cl (states with q(l|c) = 0 are absent), so the conditional-mean
// identity E[ E[Y|C,L] | C ] = E[Y|C] holds by construction.
struct ConditionalEntry {
  double prob_c = 0.0;               // context occupancy under (q, g*)
  double mean_c = 0.0;               // E[Y(tau) | C(s,j) = c]
  std::map<int, double> mean_cl;     // l -> E[Y(tau) | C(s,j) = c, L(s,j) = l]
};

struct NodeConditionals {
  int s = 0, j = 0;
  std::map<long long, ConditionalEntry> by_context;
};

// Tables for every node (s,j), s in 1..tau, j in 1..N (index (s-1)*N+j-1),
// with the pooled outcome Y(tau) as the target.  Backends: enum computes
// all nodes from one enumeration; chain answers by within-block rollout
// plus cross-block unconditional means (block-local scenarios only).
std::vector<NodeConditionals> conditional_outcome_tables(const ScenarioSpec& spec, const TransitionTable& q,
                                                         int tau = 0, const std::string& backend = "auto",
                                                         double budget = DEFAULT_ENUM_BUDGET);

// Single conditional query.  `l` empty conditions on the context alone;
// `unit` selects E[f_Y(L(tau,unit)) | ...] instead of the pooled outcome.
// Supported for M1/M2 scenarios; plain M has no usable conditional
// structure and is refused (ModelMismatchError).  backend "mc" estimates
// by within-block rollouts with common random numbers across the states
// of a paired (c,l) vs (c) query.
double conditional_outcome(const ScenarioSpec& spec, const TransitionTable& q, int s, int j, long long c,
                           std::optional<int> l = std::nullopt, std::optional<int> unit = std::nullopt,
                           const std::string& backend = "auto", long long n_paths = 0, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Context occupancy marginals

// Occupancy distributions of context codes: h per node under (q, engine),
// h* per node under (q, g*), their horizon averages, and tail averages
// over the last quarter of rounds (the stationary proxy).  Both context
// letters are tabulated.
struct ContextMarginals {
  int T = 0, N = 0;
  std::string backend;
  // node index (t-1)*N + i-1
  std::vector<std::map<long long, double>> h_l, h_a;          // under (q, engine)
  std::vector<std::map<long long, double>> hstar_l, hstar_a;  // under (q, g*)
  std::map<long long, double> hbar_l, hbar_a;                 // average over all nodes
  std::map<long long, double> hinf_l, hinf_a;                 // tail-quarter average
  std::map<long long, double> hstar_inf_l, hstar_inf_a;

  std::map<long long, double> hbar_l_upto(int t) const;  // average over rounds 1..t
  std::map<long long, double> hbar_a_upto(int t) const;
};

// backend auto|chain|enum|mc governs the (q, engine) leg; the g* leg is
// always exact (chain when block-local, else enumeration under `budget`).
// mc tabulates frequencies over `mc_reps` simulated trials on streams
// 0..mc_reps-1 of `seed` (use a seed disjoint from analysis streams).
ContextMarginals context_marginals(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine,
                                   int T, const std::string& backend = "auto", double budget = DEFAULT_ENUM_BUDGET,
                                   int mc_reps = 400, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Dependence coefficients

// Mixing coefficients of a discrete joint law p(x,y) given as a row-major
// matrix (rows x, columns y):
//   phi   sup_{A,B} |P(B|A) - P(B)|  = max_x TV(p(.|x), p_Y)
//   alpha sup_{A,B} |P(A n B) - P(A)P(B)|, exact via subset reduction on
//         the smaller axis (refused above 2^22 subsets)
//   rho   maximal correlation: second singular value of the standardized
//         joint D_x^{-1/2} (P - p_x p_y^T) D_y^{-1/2}
struct MixingReport {
  double phi = 0.0;
  double alpha = 0.0;
  double rho = 0.0;
};
MixingReport mixing_coefficients(const std::vector<std::vector<double>>& joint);

// True when every summarizer read set stays inside the unit's block, so
// per-block chain recursion is exact for block-factorizing designs.
bool scenario_block_local(const ScenarioSpec& spec);

}  // namespace nettrial
