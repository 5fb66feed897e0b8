#pragma once

// Debiased estimators of the counterfactual mean from one trial
// realization, built on the gradient engine: the one-step correction, the
// targeted (tilt-and-refit) estimator, the exact finite-sample expansion
// of the estimation error, and the per-checkpoint estimate sequence used
// by sequential studies.
//
// The one-step estimator adds the empirical mean of the gradient to the
// plug-in mean.  The targeted estimator instead moves the fitted density
// along the exponential tilt q_eps(l|c) proportional to
// q(l|c) exp(eps dbar(c,l)) — one global eps per iteration, rows
// renormalized — choosing eps as the root of the empirical score of the
// tilt and iterating with fresh gradients until the empirical gradient
// mean is below tol / sqrt(TN); each accepted step must strictly shrink
// |P_n dbar| (backtracking halves eps otherwise), so the trace of
// achieved values is monotone.  Plug-in means use the exact backends and
// fall back to sampling, with the standard error recorded, only when the
// enumeration budget refuses.

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "nettrial/eif.hpp"
#include "nettrial/nuisance.hpp"

namespace nettrial {

struct EstimateRecord {
  int checkpoint = 0;      // last data round the estimate uses
  std::string estimator;   // "one-step" | "tmle"
  double psi_hat = 0.0;
  double sigma_hat = 0.0;      // sqrt of the per-node gradient variance at the final density
  double sigma_hat_inf = 0.0;  // stationary counterpart
  double psi_plugin = 0.0;     // plug-in mean at the initial fit
  double plugin_se = 0.0;      // nonzero when a plug-in mean had to sample
  double pn_init = 0.0;        // P_n dbar at the initial fit
  double pn_final = 0.0;       // P_n dbar at the final density (== pn_init for one-step)
  int iterations = 0;          // accepted targeting steps
  bool converged = true;       // false when max_iter ran out above tolerance
  double rescaled = 0.0;       // estimate_sequence only: partial-sum rescaling
  TransitionTable q_star;      // final density (the tilted fit for tmle)
  std::vector<double> pn_trace;  // |P_n dbar| initially and after each accepted step
};

// psi_hat = plug-in(q_hat) + bundle.pn.  `bundle` must have been computed
// at q_hat; sigma fields are copied from it.
EstimateRecord one_step(const ScenarioSpec& spec, const TransitionTable& q_hat, const EifBundle& bundle,
                        double budget = DEFAULT_ENUM_BUDGET, long long mc_paths = 100000,
                        std::uint64_t mc_seed = 0);

// Iterative targeting from q_hat.  Per iteration: build the gradient at
// the current density (marginals recomputed at it), solve the tilt's
// one-dimensional score equation by safeguarded Newton, accept the step
// only if |P_n dbar| strictly decreases (halving eps up to 40 times),
// stop once |P_n dbar| <= tol / sqrt(TN) or after max_iter iterations.
// Non-convergence is flagged on the record, with the estimate still
// returned at the last accepted density.  rep/backend/budget are passed
// through to the gradient engine.
EstimateRecord tmle(const ScenarioSpec& spec, const TransitionTable& q_hat, const TrialData& data,
                    const DesignEngine& engine, double tol = 0.1, int max_iter = 20, int rep = 0,
                    const std::string& backend = "auto", double budget = DEFAULT_ENUM_BUDGET,
                    long long mc_paths = 4000, std::uint64_t mc_seed = 0);

// Exact decomposition of the estimation error of the corrected estimate
// at q_star against the known truth:
//   psi_hat - Psi(q0) = m1 + m2_term + r + residual,
// with psi_hat = Psi(q_star) + P_n dbar(q_star), m1 the empirical mean of
// the truth's gradient, m2_term the empirical-process term with its
// population mean removed exactly, and r the exact second-order
// remainder.  residual collects pure floating-point cancellation (and
// any defect of the truth's conditional centering), so it is at machine
// scale for every q_star, targeted or not.
struct ExpansionDiagnostics {
  double psi_hat = 0.0;
  double psi_q0 = 0.0;
  double m1 = 0.0;
  double m2_term = 0.0;
  double r = 0.0;
  double residual = 0.0;
  double pn_star = 0.0;  // achieved P_n dbar at q_star
};
ExpansionDiagnostics expansion_diagnostics(const ScenarioSpec& spec, const TransitionTable& q_star,
                                           const TrialData& data, const DesignEngine& engine, int rep = 0,
                                           double budget = DEFAULT_ENUM_BUDGET);

// One simulated trial to T_max; at each checkpoint t the density is refit
// on the data up to t and both estimators run on that prefix.  Records
// come in (one-step, tmle) pairs per checkpoint, each carrying the
// rescaled partial-sum statistic
//   (t / T_max) sqrt(T_max N) (psi_hat_t - psi_ref) / sigma_hat_t,
// zero when sigma_hat_t vanishes.  psi_ref defaults to the exact mean at
// the scenario's truth.  Checkpoints must be strictly increasing in
// [tau, T_max].
struct SequenceConfig {
  double tol = 0.1;
  int max_iter = 20;
  int rep = 0;
  std::string backend = "auto";
  double budget = DEFAULT_ENUM_BUDGET;
  double eps0 = -1.0;     // shrinkage for the per-checkpoint refit; <0 = fitter default
  double psi_ref = std::numeric_limits<double>::quiet_NaN();  // NaN = exact mean at q0
  std::uint64_t stream = 0;  // simulation stream
};
std::vector<EstimateRecord> estimate_sequence(const ScenarioSpec& spec, const DesignEngine& engine, int T_max,
                                              int N, const std::vector<int>& checkpoints,
                                              const SequenceConfig& cfg, std::uint64_t seed);

// One row per checkpoint: checkpoint,psi_onestep,psi_tmle,sigma,pn_eif,
// iterations — sigma, pn_eif and iterations from the targeted record.
void write_sequence_csv(const std::vector<EstimateRecord>& records, std::ostream& os);
void write_sequence_csv_file(const std::vector<EstimateRecord>& records, const std::string& path);

}  // namespace nettrial
