#include "nettrial/design.hpp"

#include <algorithm>
#include <limits>

#include "nettrial/tables.hpp"

namespace nettrial {

namespace {

// Lowest arm index among those attaining the maximum score.
int argmax_lowest(const std::vector<double>& score) {
  int best = 0;
  for (int a = 1; a < static_cast<int>(score.size()); ++a)
    if (score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(best)]) best = a;
  return best;
}

}  // namespace

DesignRule DesignRule::uniform(int n_arms) {
  if (n_arms < 1) throw ValidationError("uniform design: n_arms must be >= 1");
  DesignRule g;
  g.family_ = Family::Uniform;
  g.n_arms_ = n_arms;
  return g;
}

DesignRule DesignRule::fixed_table(int n_arms, std::map<long long, std::vector<double>> rows) {
  if (n_arms < 1) throw ValidationError("fixed design: n_arms must be >= 1");
  if (rows.empty()) throw ValidationError("fixed design: table must contain at least one row");
  for (const auto& [code, row] : rows) {
    if (static_cast<int>(row.size()) != n_arms)
      throw ValidationError("fixed design: row for context " + std::to_string(code) + " has wrong arm count");
    validate_probability_row(row, "fixed design row for context " + std::to_string(code));
  }
  DesignRule g;
  g.family_ = Family::FixedTable;
  g.n_arms_ = n_arms;
  g.rows_ = std::move(rows);
  return g;
}

DesignRule DesignRule::fixed_row(std::vector<double> row) {
  if (row.empty()) throw ValidationError("fixed design: row must be non-empty");
  int n_arms = static_cast<int>(row.size());
  std::map<long long, std::vector<double>> rows;
  rows.emplace(-1, std::move(row));
  return fixed_table(n_arms, std::move(rows));
}

DesignRule DesignRule::eps_greedy(int n_arms, double eps) {
  if (n_arms < 1) throw ValidationError("eps_greedy design: n_arms must be >= 1");
  if (eps <= 0.0 || eps > 1.0) throw ValidationError("eps_greedy design: eps must lie in (0, 1]");
  DesignRule g;
  g.family_ = Family::EpsGreedy;
  g.n_arms_ = n_arms;
  g.eps_ = eps;
  return g;
}

DesignRule DesignRule::ucb(int n_arms, double bonus, double floor) {
  if (n_arms < 1) throw ValidationError("ucb design: n_arms must be >= 1");
  if (bonus < 0.0) throw ValidationError("ucb design: bonus must be >= 0");
  if (floor <= 0.0 || floor * n_arms > 1.0)
    throw ValidationError("ucb design: floor must be positive with floor * n_arms <= 1");
  DesignRule g;
  g.family_ = Family::Ucb;
  g.n_arms_ = n_arms;
  g.ucb_bonus_ = bonus;
  g.floor_ = floor;
  return g;
}

bool DesignRule::is_context_free() const {
  switch (family_) {
    case Family::Uniform:
    case Family::EpsGreedy:
    case Family::Ucb:
      return true;
    case Family::FixedTable:
      return rows_.size() == 1 && rows_.begin()->first == -1;
  }
  return false;
}

std::vector<double> DesignRule::dist(long long actx_code) const {
  if (is_adaptive())
    throw ValidationError("adaptive design rule queried without arm statistics");
  return dist(actx_code, DesignTheta(n_arms_));
}

std::vector<double> DesignRule::dist(long long actx_code, const DesignTheta& theta) const {
  switch (family_) {
    case Family::Uniform:
      return std::vector<double>(static_cast<std::size_t>(n_arms_), 1.0 / n_arms_);
    case Family::FixedTable: {
      auto it = rows_.find(is_context_free() ? -1 : actx_code);
      if (it == rows_.end())
        throw PositivityError("fixed design has no row for A-context " + std::to_string(actx_code));
      return it->second;
    }
    case Family::EpsGreedy: {
      if (static_cast<int>(theta.psi_hat.size()) != n_arms_)
        throw ValidationError("eps_greedy design: arm statistics have wrong arm count");
      int best = argmax_lowest(theta.psi_hat);
      std::vector<double> row(static_cast<std::size_t>(n_arms_), eps_ / n_arms_);
      row[static_cast<std::size_t>(best)] += 1.0 - eps_;
      return row;
    }
    case Family::Ucb: {
      if (static_cast<int>(theta.psi_hat.size()) != n_arms_)
        throw ValidationError("ucb design: arm statistics have wrong arm count");
      std::vector<double> score(static_cast<std::size_t>(n_arms_));
      for (int a = 0; a < n_arms_; ++a)
        score[static_cast<std::size_t>(a)] =
            theta.psi_hat[static_cast<std::size_t>(a)] + ucb_bonus_ * theta.sigma_hat[static_cast<std::size_t>(a)];
      int best = argmax_lowest(score);
      std::vector<double> row(static_cast<std::size_t>(n_arms_), floor_);
      row[static_cast<std::size_t>(best)] += 1.0 - floor_ * n_arms_;
      return row;
    }
  }
  throw ValidationError("unreachable design family");
}

double DesignRule::guaranteed_floor() const {
  switch (family_) {
    case Family::Uniform:
      return 1.0 / n_arms_;
    case Family::EpsGreedy:
      return eps_ / n_arms_;
    case Family::Ucb:
      return floor_;
    case Family::FixedTable: {
      double m = std::numeric_limits<double>::infinity();
      for (const auto& [code, row] : rows_)
        for (double p : row) m = std::min(m, p);
      return m;
    }
  }
  return 0.0;
}

json DesignRule::to_json() const {
  switch (family_) {
    case Family::Uniform:
      return json{{"family", "uniform"}, {"n_arms", n_arms_}};
    case Family::EpsGreedy:
      return json{{"family", "eps_greedy"}, {"n_arms", n_arms_}, {"eps", eps_}};
    case Family::Ucb:
      return json{{"family", "ucb"}, {"n_arms", n_arms_}, {"bonus", ucb_bonus_}, {"floor", floor_}};
    case Family::FixedTable: {
      json rows = json::array();
      for (const auto& [code, row] : rows_) rows.push_back(json::array({code, row}));
      return json{{"family", "fixed_table"}, {"n_arms", n_arms_}, {"rows", rows}};
    }
  }
  throw ValidationError("unreachable design family");
}

DesignRule DesignRule::from_json(const json& j) {
  const std::string family = j.at("family").get<std::string>();
  if (family == "uniform") return uniform(j.at("n_arms").get<int>());
  if (family == "eps_greedy") return eps_greedy(j.at("n_arms").get<int>(), j.at("eps").get<double>());
  if (family == "ucb")
    return ucb(j.at("n_arms").get<int>(), j.at("bonus").get<double>(), j.at("floor").get<double>());
  if (family == "fixed_table") {
    std::map<long long, std::vector<double>> rows;
    for (const auto& pair : j.at("rows")) {
      long long code = pair.at(0).get<long long>();
      auto row = pair.at(1).get<std::vector<double>>();
      if (!rows.emplace(code, std::move(row)).second)
        throw ValidationError("fixed design: duplicate context " + std::to_string(code));
    }
    return fixed_table(j.at("n_arms").get<int>(), std::move(rows));
  }
  throw UnsupportedError("unknown design family: " + family);
}

PositivityReport check_positivity(const DesignRule& g, const ContextSummarizer& actx, int N, int n_arms,
                                  int n_states, const std::vector<int>& initial_state, double threshold) {
  if (g.n_arms() != n_arms)
    throw ValidationError("check_positivity: design arm count does not match the trial");
  PositivityReport rep;
  if (g.is_adaptive()) {
    rep.min_prob = g.guaranteed_floor();
    rep.context_source = "analytic";
    rep.pass = rep.min_prob >= threshold;
    return rep;
  }
  std::vector<long long> codes;
  try {
    codes = enumerate_reachable_codes(actx, N, n_arms, n_states, initial_state);
    rep.context_source = "reachable";
  } catch (const BudgetError&) {
    codes = actx.code_space();
    rep.context_source = "full-space";
  }
  rep.min_prob = std::numeric_limits<double>::infinity();
  for (long long c : codes) {
    std::vector<double> row;
    try {
      row = g.dist(c);
    } catch (const PositivityError&) {
      if (rep.context_source == "reachable") throw;
      continue;  // full-space scan may visit codes the trial never produces
    }
    for (int a = 0; a < n_arms; ++a) {
      if (row[static_cast<std::size_t>(a)] < rep.min_prob) {
        rep.min_prob = row[static_cast<std::size_t>(a)];
        rep.argmin_context = c;
        rep.argmin_arm = a;
      }
    }
  }
  rep.pass = rep.min_prob >= threshold;
  return rep;
}

}  // namespace nettrial
