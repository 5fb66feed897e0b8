#pragma once

// Sequential monitoring of the estimate sequence: simulation-calibrated
// crossing bands for the rescaled deviation process, the stopping rule
// that applies a band to a sequence of per-checkpoint estimates, and
// replicated error-rate studies under a known truth.
//
// At checkpoint T out of T_max planned rounds the monitored deviation is
// psi_hat_T - psi0, compared against the boundary
//
//     sigma * sqrt(T_max / T) * a(T / T_max) / sqrt(N T),
//
// with sigma frozen at the burn-in checkpoint's stationary scale.  Under
// the null the normalized partial sums of the gradient behave like a
// Wiener process in trial fraction t = T / T_max, so the trial stops the
// first time that process leaves the band a(.) on [t0, 1], and the band
// is calibrated by direct path simulation so a null trajectory escapes
// anywhere on the monitored window with probability alpha.  Checkpoints
// before the burn-in round t0 * T_max are never tested.

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "nettrial/estimators.hpp"

namespace nettrial {

// Standard normal quantile (Acklam's rational approximation, |error|
// < 1.2e-9) and distribution function; shared by band validation,
// confidence intervals and distribution-shape statistics.
double normal_quantile(double p);
double normal_cdf(double x);

// A calibrated stopping band.  `u` is the single free parameter: the flat
// level for the constant family, the coefficient of sqrt(t) for the sqrt
// family.  `grid` / `band` tabulate a(t) on the simulation grid restricted
// to [t0, 1]; coverage fields record the simulated non-crossing
// probability at `u` and its binomial Monte Carlo standard error.  T_max
// is the planned trial horizon in rounds; wiener_band leaves it 0 (the
// band itself lives on the unit interval) and it must be set before the
// plan is applied to data.
struct StopPlan {
  double alpha = 0.05;
  double t0 = 0.25;          // burn-in fraction; monitoring starts at t0 * T_max
  int T_max = 0;             // planned horizon in rounds; 0 = not yet bound to a trial
  std::string family = "constant";  // "constant" | "sqrt"
  double u = 0.0;
  std::vector<double> grid;  // time fractions in [t0, 1]
  std::vector<double> band;  // a(t) at each grid fraction
  double coverage = 0.0;
  double coverage_se = 0.0;
  long long mc_paths = 0;
  int grid_size = 0;
  std::uint64_t seed = 0;

  // Band value at time fraction `frac`; ValidationError outside
  // [t0, 1] (up to slack) or for an unknown family tag.
  double a_of(double frac) const;

  // Structural checks for a calibrated plan: parameter ranges, matching
  // positive finite grid/band arrays, and the single-look floor
  // a(t) >= sqrt(t0) z_{1-alpha/2} (with a small Monte Carlo allowance).
  void validate() const;

  json to_json() const;
  // Strict inverse of to_json: every field required, unknown keys
  // rejected, the result validated.
  static StopPlan from_json(const json& j);
};

// Calibrates the band of the requested family at level alpha on [t0, 1]
// by simulating `mc_paths` Gaussian random-walk approximations of a
// standard Wiener process on an equispaced grid of `grid_size` steps:
// for the constant family, u is the smallest level whose simulated
// probability of sup_{t in [t0,1]} |W(t)| <= u reaches 1 - alpha (the
// empirical quantile of the per-path suprema); for the sqrt family the
// per-path statistic is sup |W(t)| / sqrt(t).  t0 = 1 degenerates to a
// single look at t = 1, so u approaches the two-sided normal quantile
// z_{1-alpha/2}.  Deterministic in (mc_paths, grid_size, seed).
StopPlan wiener_band(double alpha, double t0, const std::string& family = "constant",
                     long long mc_paths = 100000, int grid_size = 2048,
                     std::uint64_t seed = 2026);

// The rejection boundary for |psi_hat_T - psi0| at checkpoint T:
// sigma * sqrt(T_max / T) * a(T / T_max) / sqrt(N T).  Requires the
// plan's T_max to be set and T to lie in the monitored window
// [t0 * T_max, T_max].
double stop_boundary(const StopPlan& plan, int T, double sigma, int N);

// Outcome of applying a plan to one estimate sequence.  `trajectory`
// holds one entry per tested checkpoint in order — the signed deviation
// divided by the boundary, so the rule rejects exactly when |stat| > 1 —
// and ends at the stopping checkpoint when the trial stops early.
struct SequentialDecision {
  struct StatPoint {
    int checkpoint = 0;
    double stat = 0.0;
  };
  int stop_time = -1;  // first rejecting checkpoint; -1 = no rejection
  std::vector<StatPoint> trajectory;
};

// Applies the plan to the records of the chosen estimator family
// ("one-step" | "tmle"): checkpoints must be strictly increasing and
// reach plan.T_max; those before t0 * T_max are skipped, the rest are
// tested in order until the first boundary crossing.  `sigma` is the
// frozen scale (callers freeze it at the burn-in checkpoint's
// sigma_hat_inf).  The decision is a deterministic function of the
// records and the plan.
SequentialDecision sequential_test(const std::vector<EstimateRecord>& records, double sigma, int N,
                                   const StopPlan& plan, double psi0,
                                   const std::string& estimator = "tmle");

// Replicated stopping study under a known data-generating truth.
//
// Each replication r simulates a fresh trial on stream stream0 + r of
// `seed`, forms the estimate at every checkpoint, and applies the plan
// with the scale frozen at the burn-in checkpoint.  With `oracle` true
// the estimate is the one-step correction at the scenario's true density
// — psi_hat_T = Psi(q0) + P_n dbar(q0) with the gradient tables built
// once per checkpoint and shared across replications — so the study
// isolates the stopping rule from nuisance fitting; otherwise each
// replication runs the full per-checkpoint refit sequence and monitors
// the chosen estimator's records.
//
// psi0 defaults to the exact mean at the truth, making the rejection
// rate a type-one error estimate; overriding it to a shifted value turns
// the same machinery into a power study against that alternative.
struct StopStudyConfig {
  std::vector<int> checkpoints;    // empty = every round from the burn-in round to T_max
  bool oracle = true;
  std::string estimator = "tmle";  // monitored record family when oracle is false
  SequenceConfig est;              // estimator settings for the fitted path
  int rep = 0;                     // gradient representation for the oracle path
  std::string backend = "auto";
  double budget = DEFAULT_ENUM_BUDGET;
  double psi0 = std::numeric_limits<double>::quiet_NaN();  // NaN = exact mean at the truth
  std::uint64_t stream0 = 0;
};

struct StopStudyRow {
  int rep = 0;
  int stop_time = -1;          // -1 = ran to the horizon without rejecting
  double terminal_stat = 0.0;  // boundary ratio at the stop, or at the final checkpoint
};

struct StopStudyReport {
  double rate = 0.0;  // fraction of replications that rejected
  double se = 0.0;    // binomial standard error of the rate
  int replications = 0;
  double psi0 = 0.0;   // the tested null value
  double sigma = 0.0;  // frozen scale, averaged over replications (constant under oracle)
  std::vector<StopStudyRow> rows;
  json info;  // mode, burn-in checkpoint, checkpoint count, exact truth
};

StopStudyReport type_one_error_study(const ScenarioSpec& spec, const DesignEngine& engine, int T_max,
                                     int N, const StopPlan& plan, int replications,
                                     std::uint64_t seed, const StopStudyConfig& cfg = {});

// One row per replication: rep,stop_time,terminal_stat (stop_time -1
// when the trial never rejected).
void write_stop_study_csv(const std::vector<StopStudyRow>& rows, std::ostream& os);
void write_stop_study_csv_file(const std::vector<StopStudyRow>& rows, const std::string& path);

}  // namespace nettrial
