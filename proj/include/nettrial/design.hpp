#pragma once

// Treatment assignment rules g(a | A-context).
//
// A DesignRule is the per-round randomization: given a unit's A-context
// code it yields a probability row over arms.  Two families are static
// (uniform, fixed table); two are bandit-style and additionally read a
// running per-arm summary (DesignTheta) computed from data strictly before
// the current round:
//
//   eps_greedy — probability (1-eps) on the arm with the best running mean
//                (ties to the lowest arm index), eps spread uniformly.
//   ucb        — probability mass floor on every arm, remainder on the arm
//                maximizing mean + c * standard error; unvisited arms score
//                optimistically (mean 1, se 1).
//
// Both bandit rules ignore the A-context (they act on pooled arm
// statistics), so their assignment probabilities never drop below an
// analytic floor: eps/K for eps_greedy, the configured floor for ucb.
// check_positivity uses exactly that floor for adaptive rules and an
// explicit enumeration over reachable A-contexts for static ones.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nettrial/context.hpp"
#include "nettrial/errors.hpp"

namespace nettrial {

inline constexpr double DEFAULT_EPS_GREEDY = 0.1;
inline constexpr double DEFAULT_UCB_BONUS = 2.0;
inline constexpr double DEFAULT_PROB_FLOOR = 0.05;

// Per-arm running summary driving the bandit families.  psi_hat is the
// running mean of the per-unit outcome f_Y, sigma_hat its standard error;
// arms with count 0 carry the optimistic initialization (1, 1).
struct DesignTheta {
  std::vector<double> psi_hat;
  std::vector<double> sigma_hat;
  std::vector<long long> count;

  explicit DesignTheta(int n_arms = 0)
      : psi_hat(static_cast<std::size_t>(n_arms), 1.0),
        sigma_hat(static_cast<std::size_t>(n_arms), 1.0),
        count(static_cast<std::size_t>(n_arms), 0) {}
};

class DesignRule {
 public:
  enum class Family { Uniform, FixedTable, EpsGreedy, Ucb };

  static DesignRule uniform(int n_arms);
  // One probability row per A-context code; every reachable code must be
  // present at evaluation time.
  static DesignRule fixed_table(int n_arms, std::map<long long, std::vector<double>> rows);
  // Context-free single row.
  static DesignRule fixed_row(std::vector<double> row);
  static DesignRule eps_greedy(int n_arms, double eps = DEFAULT_EPS_GREEDY);
  static DesignRule ucb(int n_arms, double bonus = DEFAULT_UCB_BONUS, double floor = DEFAULT_PROB_FLOOR);

  Family family() const { return family_; }
  int n_arms() const { return n_arms_; }
  // True for families whose row depends on DesignTheta.
  bool is_adaptive() const { return family_ == Family::EpsGreedy || family_ == Family::Ucb; }
  // True when the row does not depend on the A-context code.
  bool is_context_free() const;
  double eps() const { return eps_; }
  double ucb_bonus() const { return ucb_bonus_; }
  double prob_floor() const { return floor_; }
  const std::map<long long, std::vector<double>>& rows() const { return rows_; }

  // Assignment row for a static rule; throws if the rule is adaptive.
  std::vector<double> dist(long long actx_code) const;
  // Assignment row in general; theta is ignored by static rules.
  std::vector<double> dist(long long actx_code, const DesignTheta& theta) const;

  // Smallest assignment probability this rule can ever emit, over all
  // contexts and theta values (analytic for bandit rules, table minimum
  // for static ones).
  double guaranteed_floor() const;

  json to_json() const;
  static DesignRule from_json(const json& j);

 private:
  DesignRule() = default;

  Family family_ = Family::Uniform;
  int n_arms_ = 0;
  double eps_ = DEFAULT_EPS_GREEDY;
  double ucb_bonus_ = DEFAULT_UCB_BONUS;
  double floor_ = DEFAULT_PROB_FLOOR;
  std::map<long long, std::vector<double>> rows_;  // FixedTable; key -1 = context-free
};

struct PositivityReport {
  bool pass = false;
  double min_prob = 0.0;
  long long argmin_context = -1;  // -1 when the bound is context-independent
  int argmin_arm = -1;
  std::string context_source;  // "reachable", "full-space", or "analytic"
};

// Verifies the design keeps every arm's assignment probability at or above
// `threshold` on every A-context it can encounter.  Static rules are
// checked over the reachable A-context set (falling back to the full code
// space if the reachability probe exceeds its budget — conservative, since
// the full space only adds contexts); bandit rules use their analytic
// floor.  Throws PositivityError when a reachable context has no row in a
// fixed table.
PositivityReport check_positivity(const DesignRule& g, const ContextSummarizer& actx, int N, int n_arms,
                                  int n_states, const std::vector<int>& initial_state, double threshold);

}  // namespace nettrial
