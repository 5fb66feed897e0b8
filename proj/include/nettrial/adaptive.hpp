#pragma once

// Design adaptation: assignment from a design state, Neyman allocation
// computed from a fitted transition density, a plug-in variance criterion
// for ranking candidate designs against a counterfactual contrast, and an
// along-the-trial selection loop that re-ranks the candidates at
// checkpoints and swaps the rule in force.
//
// The selection loop preserves the adaptivity contract required by the
// sequential analysis: the design used at round t is a deterministic
// function of the data strictly before t and the seed.  Checkpoint
// decisions therefore happen before the round's assignments, from a prefix
// copy of the data, and the per-round trace records exactly which rule was
// in force when.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "nettrial/eif.hpp"
#include "nettrial/nuisance.hpp"

namespace nettrial {

// A rule in force together with the running per-arm summary that bandit
// families read.  The summary must be computed from data strictly before
// the round being assigned (theta_from_prefix guarantees this).
struct DesignState {
  DesignRule rule;
  DesignTheta theta;
};

// Assignment probabilities at one A-context under the state's rule.
// Bandit families (eps_greedy, ucb) read state.theta; static families
// ignore it.  Throws ValidationError on an empty arm set, PositivityError
// when a fixed table lacks the context's row.
std::vector<double> design_assign(const DesignState& state, long long actx_code);

// Neyman allocation for two-arm scenarios: at each A-context cA, arm a is
// assigned with probability sd(a, cA) / (sd(0, cA) + sd(1, cA)), where
// sd(a, cA) is the standard deviation of the per-state outcome f_Y one
// round ahead under q_hat given own arm a at that A-context — computed
// exactly on the discrete support.  Both sds zero falls back to 1/2; the
// result is clamped to [floor, 1 - floor] so positivity survives
// degenerate outcomes.  Requires the L-context to split as
// (own arm, A-context); UnsupportedError otherwise or when the scenario
// has more than two arms.
DesignRule neyman_from_q(const TransitionTable& q_hat, const ScenarioSpec& spec,
                         double floor = DEFAULT_PROB_FLOOR);

// Plug-in variance of the contrast gradient under a candidate design: the
// variance, under the stationary occupancy of (q_hat, g_k) paired with
// q_hat's transition draw, of the difference between the gradient tables
// for counterfactual legs g1 and g2 (each rescaled to its
// stationary-limit denominator).  This is the asymptotic variance a trial
// run under g_k would pay to estimate the contrast "mean under g2 minus
// mean under g1", so ranking candidates by it picks the design that
// estimates the contrast most precisely.
//
// value is exact when the marginals and gradient tables are; when either
// falls back to Monte Carlo (backend "mc", or "auto" past the enumeration
// budget), the whole computation runs twice on split seeds and se reports
// half the spread.  Identical legs give exactly zero.  rep < 0 resolves
// the gradient representation automatically (path form under adaptive
// candidates, model-class default otherwise).
//
// Errors: PositivityError when g_k has zero mass somewhere a contrast leg
// needs it, or a stationary denominator vanishes at a tabulated context.
struct ContrastVariance {
  double value = 0.0;
  double se = 0.0;
  std::string backend;  // "exact" or "mc"
  json info;
};
ContrastVariance contrast_variance(const ScenarioSpec& spec, const TransitionTable& q_hat,
                                   const DesignEngine& g_k, const DesignRule& g1, const DesignRule& g2,
                                   int horizon = 64, int rep = -1, const std::string& backend = "auto",
                                   double budget = DEFAULT_ENUM_BUDGET, long long mc_paths = 4000,
                                   std::uint64_t seed = 0);

// Index of the smallest criterion value, 1-based to match the candidate
// numbering k = 1..J; ties break to the lowest index.  ValidationError on
// an empty or non-finite list.
int select_design(const std::vector<double>& criteria);

// One row per simulated round: the rule family in force, the running arm
// summary at assignment time, and the candidate selected by the latest
// checkpoint (0 before the first).
struct DesignTraceRow {
  int t = 0;
  std::string family;
  DesignTheta theta;
  int selected_k = 0;
};

// One checkpoint decision: criterion per candidate and the 1-based pick.
struct SelectionCheckpoint {
  int t = 0;
  std::vector<double> criteria;
  int selected = 0;
};

struct SelectionConfig {
  int horizon = 64;              // marginals horizon for the criterion
  double eps0 = 0.5;             // shrinkage of the per-checkpoint density fit
  int rep = -1;                  // gradient representation (-1 = auto)
  std::string backend = "auto";  // criterion backend
  double budget = DEFAULT_ENUM_BUDGET;
  long long mc_paths = 4000;
  std::uint64_t criterion_seed = 0;
};

struct AdaptiveTrialResult {
  TrialData data;
  std::vector<DesignTraceRow> trace;          // rounds 1..T in order
  std::vector<SelectionCheckpoint> checkpoints;
};

// Simulates T rounds under (spec.q0, initial rule), re-ranking the
// candidate rules at each checkpoint round: the transition density is
// refit on the prefix (rounds strictly before the checkpoint), the
// contrast criterion is computed per candidate, and the argmin rule takes
// over from that round on.  Checkpoints must be strictly increasing within
// [2, T]; every candidate must match the scenario's arm count.
AdaptiveTrialResult run_design_selection_trial(const ScenarioSpec& spec, const DesignRule& initial,
                                               const std::vector<DesignRule>& candidates, const DesignRule& g1,
                                               const DesignRule& g2, const std::vector<int>& checkpoints, int T,
                                               int N, std::uint64_t seed, std::uint64_t stream = 0,
                                               const SelectionConfig& cfg = {});

// Trace CSV: t,family,selected_k, then per-arm psi_hat_<a>, sigma_hat_<a>,
// count_<a> columns.  17 significant digits; byte-stable.
void write_design_trace_csv(const std::vector<DesignTraceRow>& trace, int n_arms, std::ostream& os);
void write_design_trace_csv_file(const std::vector<DesignTraceRow>& trace, int n_arms, const std::string& path);

}  // namespace nettrial
