#pragma once

// TransitionTable: the single repeated conditional density q(l | c) shared
// by every measurement node, stored as dense probability rows keyed by
// integer context codes.
//
// Rows are validated at construction: nonnegative entries summing to 1
// within PROB_TOL.  Violations are hard errors — silent renormalization
// would mask scenario-generation bugs.

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nettrial/errors.hpp"

namespace nettrial {

inline constexpr double PROB_TOL = 1e-12;

// Throws ValidationError unless `row` is a probability vector within
// PROB_TOL.  `what` names the offending object in the message.
void validate_probability_row(std::span<const double> row, const std::string& what);

class TransitionTable {
 public:
  TransitionTable() = default;

  // `codes` lists the context codes (any order, duplicates rejected);
  // `rows[k]` is the distribution of L given context codes[k].
  TransitionTable(int n_states, std::vector<long long> codes, std::vector<std::vector<double>> rows);

  int n_states() const { return n_states_; }
  std::size_t n_contexts() const { return codes_.size(); }
  const std::vector<long long>& codes() const { return codes_; }

  bool has(long long code) const { return index_.count(code) != 0; }
  int row_index(long long code) const;
  std::span<const double> row(long long code) const;
  std::span<const double> row_at(int idx) const {
    return {p_.data() + static_cast<std::size_t>(idx) * n_states_, static_cast<std::size_t>(n_states_)};
  }
  double prob(long long code, int l) const { return row(code)[static_cast<std::size_t>(l)]; }

  // Returns a copy with row `code` replaced (revalidated).
  TransitionTable with_row(long long code, std::vector<double> new_row) const;

 private:
  int n_states_ = 0;
  std::vector<long long> codes_;
  std::unordered_map<long long, int> index_;
  std::vector<double> p_;  // row-major, n_contexts x n_states
};

}  // namespace nettrial
