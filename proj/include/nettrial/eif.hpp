#pragma once

// Efficient-influence-function engine: evaluation of the canonical
// gradient of the counterfactual mean in three equivalent representations,
// variance and stationary-limit variance estimates, and the exact
// second-order remainder with its decomposition diagnostics.
//
// The gradient of the target under a transition density q is an average,
// over the observed nodes (t,i), of one fixed function
//   dbar(c, l) = sum over nodes (s,j), s <= tau, of a weighted centered
//                conditional outcome difference,
// evaluated at the node's observed L-context code c and state l.  The
// three representations differ in how the weight and the conditional
// difference are factored:
//   rep 1  importance weighting on the trial's own design g: occupancy
//          h_{s,j}/hbar with conditional means of Y times the cumulative
//          assignment ratio g*/g.  Valid for every model class; evaluated
//          by exhaustive enumeration under (q, engine), and refused with
//          PositivityError when a realized assignment has g = 0.  The
//          largest realized cumulative ratio is logged (it grows
//          exponentially in unfavorable designs, which is why this
//          representation is off by default).
//   rep 2  counterfactual occupancy weights hstar_{s,j}/hbar with
//          conditional outcome means under (q, g*).  Needs within-block
//          context sufficiency (model class M1 or M2).
//   rep 3  the rep-2 weight split into an A-context occupancy ratio
//          omega_{s,j} = hstarA_{s,j}/hbarA times a per-round assignment
//          ratio eta_s = g*/g_s, using the structural decomposition
//          c_L = (own arm, c_A).  Needs model class M2 and a design with
//          per-round assignment tables (bandit engines are refused).
//
// All denominators hbar are horizon averages of actual-design occupancy
// taken from the ContextMarginals argument, which must be computed at the
// same q the gradient is evaluated at.  q must be strictly positive on
// every tabulated context row; the engine never forces zero-probability
// states into rollouts.

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nettrial/sim.hpp"

namespace nettrial {

// One observed node together with the gradient value at its (context,
// state) pair.
struct EifNode {
  int t = 0, i = 0;
  long long ctx = 0;  // L-context code observed at (t,i)
  int lval = 0;       // observed state
  double dbar = 0.0;
};

struct EifBundle {
  int rep = 2;
  std::string backend;  // conditional-expectation backend actually used
  // Per-node values over the whole trial, node order (t-1)*N + i-1.
  std::vector<EifNode> nodes;
  // The gradient as a function: (context, state) -> value, tabulated on
  // every (q, g*)-reachable context; contexts outside the table have
  // gradient zero (their counterfactual occupancy vanishes at every node).
  std::map<std::pair<long long, int>, double> table;
  // Nuisances the table was built from, kept for the variance
  // recomputation: q rows by context, the hbar denominator actually used
  // (L-letter for reps 1-2, A-letter for rep 3), and for each tabulated
  // L-context the code whose marginal is its denominator (itself for reps
  // 1-2, its A-context for rep 3).
  std::map<long long, std::vector<double>> q_rows;
  std::map<long long, double> hbar;
  std::map<long long, long long> denom_ctx;
  int denom_letter = 0;  // 0 = L-letter denominators, 1 = A-letter

  double pn = 0.0;         // empirical mean of the per-node values
  double sigma2 = 0.0;     // empirical variance of the per-node values
  double sigma2_inf = 0.0; // stationary proxy: tail-average weights
  double max_ratio = 1.0;  // rep 1: largest realized cumulative g*/g
  json info;               // provenance: backends, rep, MC error bounds

  // Table lookup; 0 for contexts outside the tabulated support.
  double at(long long c, int l) const;
};

// Evaluates the gradient of the counterfactual mean at q in the requested
// representation (0 picks the model class default: 3 for M2, 2 for M1,
// 1 for plain M) and tabulates it at every observed node of `data`.
//
// `marginals` must be computed at the same q under the same engine, cover
// spec.N units and at least spec.tau rounds; its horizon sets the hbar
// denominator.  backend auto|enum|chain|mc governs the conditional
// expectations inside the gradient: auto uses the exact backend and falls
// back to common-random-number rollouts only when the enumeration budget
// refuses, recording the largest split-half standard error in
// info["mc_max_se"].  Representation 1 is enumeration-only.
//
// Errors: ModelMismatchError when the representation needs a stronger
// model class than the scenario's tag; UnsupportedError for rep 3 on a
// bandit engine or rep 1 on backend mc; PositivityError when a realized
// assignment has zero design probability (rep 1) or a needed denominator
// marginal vanishes; ValidationError for non-positive q rows or
// mismatched marginals.
EifBundle eif_components(const ScenarioSpec& spec, const TransitionTable& q, const TrialData& data,
                         const DesignEngine& engine, const ContextMarginals& marginals, int rep = 0,
                         const std::string& backend = "auto", double budget = DEFAULT_ENUM_BUDGET,
                         long long mc_paths = 4000, std::uint64_t mc_seed = 0);

// The gradient table alone — same construction, representations, backends
// and errors as eif_components, but without observed data: nodes stays
// empty and pn / sigma2 are zero, while sigma2_inf still carries the
// stationary-limit variance of the table.  This is the entry point for
// purely counterfactual variance comparisons between designs.
EifBundle eif_table(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine,
                    const ContextMarginals& marginals, int rep = 0, const std::string& backend = "auto",
                    double budget = DEFAULT_ENUM_BUDGET, long long mc_paths = 4000, std::uint64_t mc_seed = 0);

// (sigma2, sigma2_inf): the empirical variance of the per-node values and
// the stationary-limit proxy, which replaces the bundle's horizon-average
// denominator with the tail-quarter average from `marginals` and takes
// the variance of the rescaled table under (context, state) distributed
// as the tail occupancy times q.  Throws ValidationError on bundles with
// fewer than 2 nodes.
std::pair<double, double> eif_variance(const EifBundle& bundle, const ContextMarginals& marginals);

// Per-node CSV export: header t,i,c,l,dbar then one row per node.
void write_eif_csv(const EifBundle& bundle, std::ostream& os);
void write_eif_csv_file(const EifBundle& bundle, const std::string& path);

// ---------------------------------------------------------------------------
// Exact second-order remainder

// R(q, q0) := Psi(q) - Psi(q0) + E_{P0}[D(q)], every term exact: the
// plug-in means by enumeration, the population mean of the gradient by
// summing the q0-law occupancy against the tabulated gradient at q.
// The decomposition recomputes R from its structural form and reports the
// achieved gap:
//   rep_class 1 (model M1)  marginal-difference part (occupancy-ratio
//     error times transition error) plus telescoping part (transition
//     error at a node times the downstream product difference);
//   rep_class 2 (model M2)  single integral of the A-occupancy-ratio
//     error times the transition error times per-unit conditional means.
// R vanishes when q = q0, and in rep_class 2 whenever the A-context
// occupancy ratios under q and q0 coincide.
struct RemainderReport {
  int rep_class = 1;
  double r = 0.0;
  double psi_q = 0.0, psi_q0 = 0.0, mean_d = 0.0;  // r = psi_q - psi_q0 + mean_d
  double part_marginal = 0.0;   // rep_class 1
  double part_telescope = 0.0;  // rep_class 1
  double part_single = 0.0;     // rep_class 2
  double parts_gap = 0.0;       // |decomposition - r|
};

// T is the sampling horizon the gradient's hbar denominator averages
// over (the trial length, not the target horizon tau).  rep_class 0
// picks the model default: 2 for M2 scenarios, 1 for M1.
RemainderReport remainder_exact(const ScenarioSpec& spec, const DesignEngine& engine, int T,
                                const TransitionTable& q, int rep_class = 0,
                                double budget = DEFAULT_ENUM_BUDGET);

// |R| along the mixture path q_eps = (1-eps) q0 + eps q1, with the
// log-log least-squares slope across the grid (second-order behavior
// shows as a slope near 2).  Throws ValidationError when some |R| on the
// grid is too small for its logarithm to be meaningful.
struct RemainderSweep {
  std::vector<double> eps;
  std::vector<double> r_abs;
  double slope = 0.0;
};
RemainderSweep remainder_sweep(const ScenarioSpec& spec, const DesignEngine& engine, int T,
                               const TransitionTable& q1, const std::vector<double>& eps,
                               int rep_class = 0, double budget = DEFAULT_ENUM_BUDGET);

// ---------------------------------------------------------------------------
// Gradient norm audit

// Certifies the gradient bound max |dbar(q0)| <= 2 tau B phi, where
//   B   = the largest counterfactual-to-average occupancy ratio
//         hstar_{s,j}(c) / hbar(c) over nodes and contexts, and
//   phi = the largest over nodes (s,j) of the sum over units k of the
//         phi-mixing coefficient between the node pair O(s,j) = (A,L)
//         and the unit outcome Y(k) under (q0, g*)
// (each conditional outcome difference inside the gradient is bounded by
// twice the corresponding mixing coefficient, outcomes living in [0,1]).
// Exact joints by enumeration; model class M1 or M2.
struct GradientBoundReport {
  double b_hat = 0.0;
  double phi_hat = 0.0;
  double max_abs = 0.0;  // largest |dbar(q0)| over the tabulated support
  double bound = 0.0;    // 2 * tau * b_hat * phi_hat
  bool ok = false;
};
GradientBoundReport gradient_bound_audit(const ScenarioSpec& spec, const DesignEngine& engine, int T,
                                         double budget = DEFAULT_ENUM_BUDGET);

// Cross-round consistency of the rep-3 pieces: integrating the per-node
// conditional means against their own occupancy reproduces the same
// scalar (the counterfactual mean) at every node, which is exactly the
// cancellation that collapses the telescoping sum in the rep-3 algebra.
// Returns the largest gap between the integrated first piece of round
// s-1 and the integrated second piece of round s (and, at the ends,
// against the counterfactual mean itself).
double rep3_cross_term_gap(const ScenarioSpec& spec, const TransitionTable& q,
                           double budget = DEFAULT_ENUM_BUDGET);

}  // namespace nettrial
