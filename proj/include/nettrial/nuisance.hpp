#pragma once

// Estimation of the shared transition density from one trial realization,
// empirical-risk helpers, and the entropy fixed point that calibrates how
// fast such estimators converge.
//
// Two fitters are provided.  The tabular MLE is the exact empirical
// maximizer on the saturated discrete model, with an additive shrinkage
// floor so every cell stays positive (downstream density ratios and
// log-likelihoods must be finite).  The lasso fitter is a practical
// surrogate for variation-norm-constrained estimation: multinomial
// logistic regression over zero-order indicator basis functions (knots at
// observed feature points, tensorized over coordinate subsets) with an
// l1 penalty, the level chosen by blocked cross-validation on contiguous
// time segments so the dependence structure is never interleaved.

#include <cstdint>
#include <string>
#include <vector>

#include "nettrial/scenario.hpp"

namespace nettrial {

struct FittedDensity {
  std::string estimator;  // "tabular-mle" | "hal-lasso"
  TransitionTable q_hat;
  json metadata;          // counts / penalty path / CV folds, per estimator
};

// Average negative log-likelihood (1/n) sum_k -log q(l_k | c_k) over every
// measurement node of `data`, contexts computed by spec.sum_l.
double log_loss(const ScenarioSpec& spec, const TrialData& data, const TransitionTable& q);

// Exact discrete MLE with additive shrinkage:
//   q_hat(l | c) = (count(c,l) + eps0) / (count(c) + eps0 * n_states).
// Rows cover the scenario's context grid plus any observed codes; with
// eps0 = 0 an unvisited context falls back to the uniform row (it carries
// no likelihood either way).
FittedDensity fit_tabular_mle(const TrialData& data, const ScenarioSpec& spec, double eps0 = 0.5);

// l1-penalized multinomial logistic fit over the indicator basis induced
// by the L-summarizer's ordinal feature embedding (UnsupportedError when
// none is declared).  `lambda_grid` is searched by `folds`-fold blocked
// cross-validation (contiguous segments in node order); ties prefer the
// stronger penalty.  Metadata records the per-lambda path (l1 norm of the
// penalized coefficients, CV loss) and the fold boundaries.
FittedDensity fit_hal_lasso(const TrialData& data, const ScenarioSpec& spec, const std::vector<double>& lambda_grid,
                            int folds = 5, std::uint64_t seed = 0);

// Fixed point of the empirical-process rate equation
//   r^2 / 3 = phi_n(r),
//   phi_n(r) = r^alpha / sqrt(n) + log(n) r^{1-p/2} / sqrt(n)
//            + log(n)^2 r^{alpha-p} / n,
// solved by bisection to residual <= 1e-12.  alpha in (0,1) is the
// smoothness exponent, p in (0,2) the entropy exponent.  `headline` is the
// closed-form comparison rate n^{-1/(4-2*alpha)}.
struct ErmRateInputs {
  long long n = 0;
  double alpha = 0.0;
  double p = 0.0;
};

struct ErmRate {
  double r_n = 0.0;
  double residual = 0.0;
  double headline = 0.0;
};

// `lo`/`hi` seed the bracket; it is widened automatically until the sign
// change is enclosed, so any positive pair converges to the same root.
ErmRate erm_rate_rn(const ErmRateInputs& in, double lo = 1e-8, double hi = 10.0);

}  // namespace nettrial
