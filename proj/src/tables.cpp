#include "nettrial/tables.hpp"

#include <cmath>

namespace nettrial {

void validate_probability_row(std::span<const double> row, const std::string& what) {
  double total = 0.0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    const double v = row[k];
    if (!(v >= 0.0) || std::isnan(v))
      throw ValidationError(what + ": entry " + std::to_string(k) + " is negative or NaN (" + std::to_string(v) + ")");
    total += v;
  }
  if (std::abs(total - 1.0) > PROB_TOL)
    throw ValidationError(what + ": row sums to " + std::to_string(total) + ", off by more than 1e-12");
}

TransitionTable::TransitionTable(int n_states, std::vector<long long> codes, std::vector<std::vector<double>> rows)
    : n_states_(n_states), codes_(std::move(codes)) {
  if (n_states_ < 1) throw ValidationError("TransitionTable: need at least one state");
  if (rows.size() != codes_.size()) throw ValidationError("TransitionTable: codes/rows size mismatch");
  p_.reserve(codes_.size() * static_cast<std::size_t>(n_states_));
  for (std::size_t k = 0; k < codes_.size(); ++k) {
    if (!index_.emplace(codes_[k], static_cast<int>(k)).second)
      throw ValidationError("TransitionTable: duplicate context code " + std::to_string(codes_[k]));
    if (rows[k].size() != static_cast<std::size_t>(n_states_))
      throw ValidationError("TransitionTable: row " + std::to_string(k) + " has wrong width");
    validate_probability_row(rows[k], "TransitionTable row for context " + std::to_string(codes_[k]));
    p_.insert(p_.end(), rows[k].begin(), rows[k].end());
  }
}

int TransitionTable::row_index(long long code) const {
  auto it = index_.find(code);
  if (it == index_.end())
    throw ModelMismatchError("TransitionTable: context code " + std::to_string(code) + " not in table");
  return it->second;
}

std::span<const double> TransitionTable::row(long long code) const { return row_at(row_index(code)); }

TransitionTable TransitionTable::with_row(long long code, std::vector<double> new_row) const {
  TransitionTable out = *this;
  const int idx = out.row_index(code);
  if (new_row.size() != static_cast<std::size_t>(n_states_))
    throw ValidationError("TransitionTable::with_row: wrong width");
  validate_probability_row(new_row, "TransitionTable::with_row for context " + std::to_string(code));
  for (int l = 0; l < n_states_; ++l) out.p_[static_cast<std::size_t>(idx) * n_states_ + l] = new_row[static_cast<std::size_t>(l)];
  return out;
}

}  // namespace nettrial
