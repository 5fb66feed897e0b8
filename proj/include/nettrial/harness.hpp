#pragma once

// Experiment orchestration: a versioned JSON configuration schema, the
// five replication studies (coverage, type1, fclt, design-adapt,
// mle-rate), and persistence of their outputs.
//
// Every emitted number is a pure function of (config, seed): replication
// r always simulates on stream r of the configured seed, results are
// merged in replication order, and shared precomputations are
// read-only, so reports are byte-identical across reruns and worker
// counts.  A failed replication aborts the study with the replication
// index prepended to the underlying error; with skip_failed the failure
// is recorded in the summary and the study continues without it.
//
// Study kinds and their headline outputs:
//   coverage     — two-sided confidence-interval hit rate for the true
//                  counterfactual mean;
//   type1        — rejection rate of the sequential stopping rule under
//                  the null (a shifted null turns it into power);
//   fclt         — Kolmogorov-Smirnov distance of terminal standardized
//                  estimates from the standard normal, plus the
//                  correlation matrix of partial-sum increments over
//                  disjoint checkpoint windows;
//   design-adapt — per-checkpoint frequency of selecting the
//                  lowest-variance candidate design, and the realized
//                  across-replication estimator variance against the
//                  selected design's variance criterion;
//   mle-rate     — log-log slope of the median occupancy-weighted total
//                  variation error of the fitted density over a grid of
//                  sample sizes.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nettrial/adaptive.hpp"
#include "nettrial/stopping.hpp"

namespace nettrial {

// Nuisance and estimator settings shared by the studies.  nuisance
// "oracle" evaluates the gradient at the scenario's true density (no
// fitting); "tabular" refits the shrunken empirical density per
// replication; "hal" is accepted by the mle-rate study only.
struct EstimatorSettings {
  std::string nuisance = "oracle";  // "oracle" | "tabular" | "hal"
  double eps0 = -1.0;               // tabular shrinkage; < 0 = fitter default
  std::string estimator = "tmle";   // "tmle" | "one-step" (fitted paths)
  double tol = 0.1;
  int max_iter = 20;
  int rep = 0;                      // gradient representation; 0 = model default
  std::string backend = "auto";
  double budget = DEFAULT_ENUM_BUDGET;
};

// Design under study: a fixed rule, or adaptive selection among
// candidates at the given checkpoints (design-adapt study).
struct DesignSettings {
  std::string kind = "fixed";  // "fixed" | "adaptive"
  DesignRule rule = DesignRule::uniform(1);      // fixed
  DesignRule initial = DesignRule::uniform(1);   // adaptive: rule before the first checkpoint
  std::vector<DesignRule> candidates;            // adaptive
  std::vector<int> checkpoints;                  // adaptive: selection rounds
  SelectionConfig selection;                     // adaptive: criterion settings
};

// Band calibration parameters for the type1 study.
struct StoppingSettings {
  double alpha = 0.05;
  double t0 = 0.25;
  std::string family = "constant";
  long long mc_paths = 100000;
  int grid_size = 2048;
  std::uint64_t seed = 2026;
};

// One experiment, reproducible from this object alone.  from_json is
// strict: the version must be 1 and unknown keys are rejected at every
// level the schema owns.  The scenario is either a named factory with
// its arguments or an inline serialized specification.
struct ExperimentConfig {
  int version = 1;
  std::string study;  // coverage | type1 | fclt | design-adapt | mle-rate
  ScenarioSpec scenario;
  DesignSettings design;
  EstimatorSettings estimator;
  StoppingSettings stopping;
  int horizon = 0;               // trial rounds T (T_max for sequential kinds)
  std::vector<int> checkpoints;  // optional; empty = kind-specific default
  int replications = 0;
  std::uint64_t seed = 0;
  std::string out;               // output directory for run_experiment
  std::vector<long long> n_grid;  // mle-rate: transition-count grid
  double ci_level = 0.95;        // coverage
  double psi0_shift = 0.0;       // type1: tested null = truth + shift

  json to_json() const;
  static ExperimentConfig from_json(const json& j);
};

// A finished study: the deterministic summary and the output files
// (name -> bytes) ready to persist.  Byte-identical for identical
// (config, seed) regardless of `workers`.
struct StudyReport {
  std::string kind;
  json summary;
  std::map<std::string, std::string> files;
};

// Runs the configured study with replication-level parallelism.
// Throws ValidationError on schema-level problems; per-replication
// errors (budget refusals included) carry the replication index and
// abort unless skip_failed.
StudyReport replication_study(const ExperimentConfig& cfg, int workers = 1, bool skip_failed = false);

// Runs the study and persists everything under cfg.out: scenario.json,
// config.json, summary.json, the study's CSV files, and timing.json
// (wall-clock seconds; kept out of summary.json so the summary is
// byte-identical across reruns).  Directories are created as needed.
void run_experiment(const ExperimentConfig& cfg, int workers = 1, bool skip_failed = false);

}  // namespace nettrial
