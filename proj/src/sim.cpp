#include "nettrial/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "nettrial/rng.hpp"

namespace nettrial {

// ---------------------------------------------------------------------------
// DesignEngine

DesignEngine DesignEngine::fixed(DesignRule rule) {
  if (rule.is_adaptive()) throw ValidationError("fixed engine requires a non-adaptive rule");
  DesignEngine e;
  e.kind_ = Kind::Static;
  e.rule_ = std::move(rule);
  return e;
}

DesignEngine DesignEngine::schedule(std::vector<DesignRule> per_round) {
  if (per_round.empty()) throw ValidationError("schedule engine requires at least one rule");
  for (const auto& g : per_round) {
    if (g.is_adaptive()) throw ValidationError("schedule entries must be frozen (non-adaptive) rules");
    if (g.n_arms() != per_round.front().n_arms())
      throw ValidationError("schedule entries must share the arm count");
  }
  DesignEngine e;
  e.kind_ = Kind::Schedule;
  e.rule_ = per_round.front();
  e.schedule_ = std::move(per_round);
  return e;
}

DesignEngine DesignEngine::bandit(DesignRule rule, int update_every) {
  if (!rule.is_adaptive()) throw ValidationError("bandit engine requires an adaptive rule");
  if (update_every < 1) throw ValidationError("bandit engine: update_every must be >= 1");
  DesignEngine e;
  e.kind_ = Kind::Bandit;
  e.rule_ = std::move(rule);
  e.update_every_ = update_every;
  return e;
}

int DesignEngine::n_arms() const { return rule_.n_arms(); }

const DesignRule& DesignEngine::rule_at(int t) const {
  if (kind_ == Kind::Schedule) {
    if (t < 1 || t > static_cast<int>(schedule_.size()))
      throw ValidationError("schedule does not cover round " + std::to_string(t));
    return schedule_[static_cast<std::size_t>(t - 1)];
  }
  return rule_;
}

void DesignEngine::set_rule(DesignRule rule) {
  if (kind_ == Kind::Schedule) throw UnsupportedError("cannot swap rules on a schedule engine");
  if (rule.n_arms() != rule_.n_arms()) throw ValidationError("set_rule: arm count mismatch");
  if (rule.is_adaptive() != rule_.is_adaptive())
    throw UnsupportedError("set_rule: cannot change between adaptive and static families");
  rule_ = std::move(rule);
}

std::vector<double> DesignEngine::dist(const ScenarioSpec& spec, const TrialView& v, int t, int i,
                                       const DesignTheta& theta) const {
  const DesignRule& g = rule_at(t);
  const long long actx = spec.sum_a->code(v, t, i);
  return g.is_adaptive() ? g.dist(actx, theta) : g.dist(actx);
}

json DesignEngine::descriptor() const {
  json j;
  switch (kind_) {
    case Kind::Static:
      j["kind"] = "static";
      j["rule"] = rule_.to_json();
      break;
    case Kind::Schedule: {
      j["kind"] = "schedule";
      json rules = json::array();
      for (const auto& g : schedule_) rules.push_back(g.to_json());
      j["rules"] = rules;
      break;
    }
    case Kind::Bandit:
      j["kind"] = "bandit";
      j["rule"] = rule_.to_json();
      j["update_every"] = update_every_;
      break;
  }
  return j;
}

DesignTheta theta_from_prefix(const ScenarioSpec& spec, const TrialView& v, int t, int update_every) {
  if (update_every < 1) throw ValidationError("theta_from_prefix: update_every must be >= 1");
  const int K = spec.n_arms;
  DesignTheta th(K);
  const int cutoff = ((t - 1) / update_every) * update_every + 1;  // stats over rounds < cutoff
  std::vector<double> mean(static_cast<std::size_t>(K), 0.0), m2(static_cast<std::size_t>(K), 0.0);
  std::vector<long long> n(static_cast<std::size_t>(K), 0);
  for (int s = 1; s < cutoff; ++s)
    for (int i = 1; i <= spec.N; ++i) {
      const int a = v.a(s, i);
      const double y = spec.outcome(v.l(s, i));
      auto ai = static_cast<std::size_t>(a);
      ++n[ai];
      const double d = y - mean[ai];
      mean[ai] += d / static_cast<double>(n[ai]);
      m2[ai] += d * (y - mean[ai]);
    }
  for (int a = 0; a < K; ++a) {
    auto ai = static_cast<std::size_t>(a);
    if (n[ai] == 0) continue;
    th.count[ai] = n[ai];
    th.psi_hat[ai] = mean[ai];
    th.sigma_hat[ai] = n[ai] >= 2 ? std::sqrt(m2[ai] / static_cast<double>(n[ai] - 1) / static_cast<double>(n[ai]))
                                  : 1.0;
  }
  return th;
}

// ---------------------------------------------------------------------------
// Sequential simulation

namespace {

TrialData simulate_with(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine0, int T,
                        std::uint64_t seed, std::uint64_t stream, const AdaptiveHook& hook) {
  if (T < 1) throw ValidationError("simulate: T must be >= 1");
  if (engine0.n_arms() != spec.n_arms) throw ValidationError("simulate: design arm count mismatch");
  DesignEngine engine = engine0;
  TrialData data(spec.N, T);
  TrialView v{&data, &spec.initial_state};
  Rng rng(seed, stream);
  DesignTheta theta(spec.n_arms);
  // Arm summaries maintained incrementally; snapshots refresh on the
  // engine's cadence so `theta` always reflects rounds strictly before the
  // latest refresh.
  const int K = spec.n_arms;
  std::vector<double> mean(static_cast<std::size_t>(K), 0.0), m2(static_cast<std::size_t>(K), 0.0);
  std::vector<long long> cnt(static_cast<std::size_t>(K), 0);
  for (int t = 1; t <= T; ++t) {
    if (hook) hook(v, t, engine);
    if (engine.adaptive() && (t - 1) % engine.update_every() == 0) {
      for (int a = 0; a < K; ++a) {
        auto ai = static_cast<std::size_t>(a);
        if (cnt[ai] == 0) continue;
        theta.count[ai] = cnt[ai];
        theta.psi_hat[ai] = mean[ai];
        theta.sigma_hat[ai] =
            cnt[ai] >= 2 ? std::sqrt(m2[ai] / static_cast<double>(cnt[ai] - 1) / static_cast<double>(cnt[ai])) : 1.0;
      }
    }
    for (int i = 1; i <= spec.N; ++i) {
      auto row = engine.dist(spec, v, t, i, theta);
      data.set_a(t, i, rng.categorical(row));
    }
    for (int i = 1; i <= spec.N; ++i) {
      auto row = q.row(spec.sum_l->code(v, t, i));
      data.set_l(t, i, rng.categorical(row));
    }
    for (int i = 1; i <= spec.N; ++i) {
      auto ai = static_cast<std::size_t>(data.a(t, i));
      const double y = spec.outcome(data.l(t, i));
      ++cnt[ai];
      const double d = y - mean[ai];
      mean[ai] += d / static_cast<double>(cnt[ai]);
      m2[ai] += d * (y - mean[ai]);
    }
  }
  return data;
}

}  // namespace

TrialData simulate_trial(const ScenarioSpec& spec, const DesignEngine& engine, int T, int N, std::uint64_t seed,
                         std::uint64_t stream, const AdaptiveHook& hook) {
  spec.validate();
  if (N != spec.N) throw ValidationError("simulate_trial: N must match the scenario's unit count");
  return simulate_with(spec, spec.q0, engine, T, seed, stream, hook);
}

// ---------------------------------------------------------------------------
// Path enumeration

namespace {

struct EnumState {
  const ScenarioSpec* spec;
  const TransitionTable* q;
  const DesignEngine* engine;
  int rounds;
  long long budget;
  long long visited = 0;
  TrialData data;
  std::vector<DesignTheta> theta_by_round;  // bandit summaries along the current branch
  const std::function<void(const TrialView&, int, int, ContextSummarizer::Kind, double)>* visit_node;
  const std::function<void(const TrialView&, double)>* visit_path;
};

void enum_rec(EnumState& st, int pos, double prob) {
  const ScenarioSpec& sp = *st.spec;
  const int N = sp.N;
  TrialView v{&st.data, &sp.initial_state};
  if (pos == 2 * N * st.rounds) {
    if (++st.visited > st.budget)
      throw BudgetError("path enumeration exceeds the budget of " + std::to_string(st.budget) + " paths");
    if (*st.visit_path) (*st.visit_path)(v, prob);
    return;
  }
  const int half = pos / N;
  const int t = half / 2 + 1;
  const bool is_treatment = (half % 2 == 0);
  const int i = pos % N + 1;
  if (is_treatment) {
    if (i == 1 && st.engine->adaptive())
      st.theta_by_round[static_cast<std::size_t>(t)] = theta_from_prefix(sp, v, t, st.engine->update_every());
    if (*st.visit_node) (*st.visit_node)(v, t, i, ContextSummarizer::Kind::A, prob);
    auto row = st.engine->dist(sp, v, t, i, st.theta_by_round[static_cast<std::size_t>(t)]);
    for (int a = 0; a < sp.n_arms; ++a) {
      const double p = row[static_cast<std::size_t>(a)];
      if (p <= 0.0) continue;
      st.data.set_a(t, i, a);
      enum_rec(st, pos + 1, prob * p);
    }
  } else {
    if (*st.visit_node) (*st.visit_node)(v, t, i, ContextSummarizer::Kind::L, prob);
    auto row = st.q->row(sp.sum_l->code(v, t, i));
    for (int l = 0; l < sp.n_states; ++l) {
      const double p = row[static_cast<std::size_t>(l)];
      if (p <= 0.0) continue;
      st.data.set_l(t, i, l);
      enum_rec(st, pos + 1, prob * p);
    }
  }
}

}  // namespace

void enumerate_paths(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine, int rounds,
                     double budget,
                     const std::function<void(const TrialView&, int, int, ContextSummarizer::Kind, double)>& visit_node,
                     const std::function<void(const TrialView&, double)>& visit_path) {
  if (rounds < 1) throw ValidationError("enumerate_paths: rounds must be >= 1");
  if (engine.n_arms() != spec.n_arms) throw ValidationError("enumerate_paths: design arm count mismatch");
  if (q.n_states() != spec.n_states) throw ValidationError("enumerate_paths: table state count mismatch");
  EnumState st;
  st.spec = &spec;
  st.q = &q;
  st.engine = &engine;
  st.rounds = rounds;
  st.budget = budget >= 9e18 ? (1LL << 62) : static_cast<long long>(budget);
  st.data = TrialData(spec.N, rounds);
  st.theta_by_round.assign(static_cast<std::size_t>(rounds) + 1, DesignTheta(spec.n_arms));
  st.visit_node = &visit_node;
  st.visit_path = &visit_path;
  enum_rec(st, 0, 1.0);
}

// ---------------------------------------------------------------------------
// Block structure helpers

bool scenario_block_local(const ScenarioSpec& spec) {
  auto blocks = spec.effective_blocks();
  std::vector<int> block_of(static_cast<std::size_t>(spec.N), -1);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int u : blocks[b]) block_of[static_cast<std::size_t>(u - 1)] = static_cast<int>(b);
  for (int i = 1; i <= spec.N; ++i) {
    for (int u : spec.sum_l->read_units(i))
      if (block_of[static_cast<std::size_t>(u - 1)] != block_of[static_cast<std::size_t>(i - 1)]) return false;
    for (int u : spec.sum_a->read_units(i))
      if (block_of[static_cast<std::size_t>(u - 1)] != block_of[static_cast<std::size_t>(i - 1)]) return false;
  }
  return true;
}

namespace {

int window_rounds(const ScenarioSpec& spec) { return std::max(spec.sum_l->memory(), spec.sum_a->memory()); }

// Per-block pushforward of the distribution over the last `m` rounds of
// (treatment, state) values.  Exact and linear in the horizon.
struct BlockWindow {
  const ScenarioSpec* spec;
  const TransitionTable* q;
  std::vector<int> members;
  int m;
  MixedRadix radix;                 // per round (oldest first), per member: a, l
  std::map<long long, double> dist;

  BlockWindow(const ScenarioSpec& sp, const TransitionTable& qq, std::vector<int> mem)
      : spec(&sp), q(&qq), members(std::move(mem)), m(window_rounds(sp)) {
    for (int r = 0; r < m; ++r)
      for (std::size_t k = 0; k < members.size(); ++k) {
        radix.radix.push_back(sp.n_arms);
        radix.radix.push_back(sp.n_states);
      }
    std::vector<int> init;
    for (int r = 0; r < m; ++r)
      for (int u : members) {
        init.push_back(0);  // pre-trial treatment padding
        init.push_back(sp.initial_state[static_cast<std::size_t>(u - 1)]);
      }
    dist[radix.encode(init)] = 1.0;
  }

  void fill_scratch(TrialData& d, long long key) const {
    auto digits = radix.decode(key);
    std::size_t pos = 0;
    for (int r = 1; r <= m; ++r)
      for (int u : members) {
        d.set_a(r, u, digits[pos++]);
        d.set_l(r, u, digits[pos++]);
      }
  }

  long long next_key(const TrialData& d) const {
    std::vector<int> digits;
    for (int r = 2; r <= m + 1; ++r)
      for (int u : members) {
        digits.push_back(d.a(r, u));
        digits.push_back(d.l(r, u));
      }
    return radix.encode(digits);
  }
};

struct ChainCollect {
  // Node index (t-1)*N + i-1; null members are skipped.
  std::vector<std::map<long long, double>>* h_l = nullptr;
  std::vector<std::map<long long, double>>* h_a = nullptr;
  std::vector<double>* ey_round = nullptr;  // 1-based absolute round -> E[Y(t)]
};

// Advances one block by one absolute round under the static rule `g`.
void block_step(BlockWindow& bw, const DesignRule& g, int abs_t, ChainCollect& out) {
  const ScenarioSpec& sp = *bw.spec;
  const int N = sp.N;
  TrialData scratch(N, bw.m + 1);
  TrialView v{&scratch, &sp.initial_state};
  std::map<long long, double> next;
  const int t_rel = bw.m + 1;
  const int nb = static_cast<int>(bw.members.size());

  // Recursion over the round's nodes for this block: treatments of all
  // members in unit order, then measurements.
  std::function<void(int, double)> rec = [&](int slot, double p) {
    if (slot == 2 * nb) {
      next[bw.next_key(scratch)] += p;
      if (out.ey_round)
        for (int u : bw.members)
          (*out.ey_round)[static_cast<std::size_t>(abs_t)] += p * sp.outcome(scratch.l(t_rel, u)) / N;
      return;
    }
    const bool is_treatment = slot < nb;
    const int u = bw.members[static_cast<std::size_t>(is_treatment ? slot : slot - nb)];
    const std::size_t node = static_cast<std::size_t>((abs_t - 1) * N + u - 1);
    if (is_treatment) {
      const long long ca = sp.sum_a->code(v, t_rel, u);
      if (out.h_a) (*out.h_a)[node][ca] += p;
      auto row = g.dist(ca);
      for (int a = 0; a < sp.n_arms; ++a) {
        const double pa = row[static_cast<std::size_t>(a)];
        if (pa <= 0.0) continue;
        scratch.set_a(t_rel, u, a);
        rec(slot + 1, p * pa);
      }
    } else {
      const long long cl = sp.sum_l->code(v, t_rel, u);
      if (out.h_l) (*out.h_l)[node][cl] += p;
      auto row = bw.q->row(cl);
      for (int l = 0; l < sp.n_states; ++l) {
        const double pl = row[static_cast<std::size_t>(l)];
        if (pl <= 0.0) continue;
        scratch.set_l(t_rel, u, l);
        rec(slot + 1, p * pl);
      }
    }
  };

  for (const auto& [key, p] : bw.dist) {
    bw.fill_scratch(scratch, key);
    rec(0, p);
  }
  bw.dist = std::move(next);
}

void require_chain_ready(const ScenarioSpec& spec, const char* what) {
  if (!scenario_block_local(spec))
    throw UnsupportedError(std::string(what) + ": chain backend requires a block-local scenario");
}

// Runs the chain over rounds 1..T for every block under per-round static
// rules.
void run_chain(const ScenarioSpec& spec, const TransitionTable& q, const std::function<const DesignRule&(int)>& rule_at,
               int T, ChainCollect& out) {
  std::vector<BlockWindow> windows;
  for (auto& b : spec.effective_blocks()) windows.emplace_back(spec, q, b);
  for (int t = 1; t <= T; ++t) {
    const DesignRule& g = rule_at(t);
    if (g.is_adaptive()) throw UnsupportedError("chain backend cannot drive adaptive rules");
    for (auto& bw : windows) block_step(bw, g, t, out);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// G-computation

GcompResult gcomp_exact(const ScenarioSpec& spec, const TransitionTable& q, int tau, double budget) {
  spec.validate();
  if (tau <= 0) tau = spec.tau;
  double value = 0.0;
  long long paths = 0;
  enumerate_paths(spec, q, DesignEngine::fixed(spec.g_star), tau, budget, nullptr,
                  [&](const TrialView& v, double p) {
                    double y = 0.0;
                    for (int i = 1; i <= spec.N; ++i) y += spec.outcome(v.l(tau, i));
                    value += p * y / spec.N;
                    ++paths;
                  });
  return {value, 0.0, paths, "enum"};
}

GcompResult gcomp_chain(const ScenarioSpec& spec, const TransitionTable& q, int tau) {
  spec.validate();
  require_chain_ready(spec, "gcomp_chain");
  if (tau <= 0) tau = spec.tau;
  std::vector<double> ey(static_cast<std::size_t>(tau) + 1, 0.0);
  ChainCollect out;
  out.ey_round = &ey;
  run_chain(spec, q, [&](int) -> const DesignRule& { return spec.g_star; }, tau, out);
  return {ey[static_cast<std::size_t>(tau)], 0.0, 0, "chain"};
}

GcompResult gcomp_mc(const ScenarioSpec& spec, const TransitionTable& q, int tau, long long n_paths,
                     std::uint64_t seed, std::uint64_t stream) {
  spec.validate();
  if (tau <= 0) tau = spec.tau;
  if (n_paths < 2) throw ValidationError("gcomp_mc: need at least two paths");
  double mean = 0.0, m2 = 0.0;
  Rng rng(seed, stream);
  for (long long r = 0; r < n_paths; ++r) {
    // One contiguous draw stream: each path consumes exactly 2*N*tau draws,
    // so paired runs against another table share path-by-path draws.
    TrialData data(spec.N, tau);
    TrialView v{&data, &spec.initial_state};
    for (int t = 1; t <= tau; ++t) {
      for (int i = 1; i <= spec.N; ++i) {
        auto row = spec.g_star.dist(spec.sum_a->code(v, t, i));
        data.set_a(t, i, rng.categorical(row));
      }
      for (int i = 1; i <= spec.N; ++i) data.set_l(t, i, rng.categorical(q.row(spec.sum_l->code(v, t, i))));
    }
    double y = 0.0;
    for (int i = 1; i <= spec.N; ++i) y += spec.outcome(data.l(tau, i));
    y /= spec.N;
    const double d = y - mean;
    mean += d / static_cast<double>(r + 1);
    m2 += d * (y - mean);
  }
  const double se = std::sqrt(m2 / static_cast<double>(n_paths - 1) / static_cast<double>(n_paths));
  return {mean, se, n_paths, "mc"};
}

DiscountedResult gcomp_discounted(const ScenarioSpec& spec, const TransitionTable& q, double gamma, double tol) {
  spec.validate();
  require_chain_ready(spec, "gcomp_discounted");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("gcomp_discounted: gamma must lie in (0,1)");
  if (!(tol > 0.0)) throw ValidationError("gcomp_discounted: tol must be positive");
  int H = 0;
  while (std::pow(gamma, H + 1) / (1.0 - gamma) > tol) {
    ++H;
    if (H > 1000000) throw BudgetError("gcomp_discounted: horizon exceeds 1e6 rounds");
  }
  const int T = spec.tau + H;
  std::vector<double> ey(static_cast<std::size_t>(T) + 1, 0.0);
  ChainCollect out;
  out.ey_round = &ey;
  run_chain(spec, q, [&](int) -> const DesignRule& { return spec.g_star; }, T, out);
  double value = 0.0;
  for (int h = H; h >= 0; --h) value = ey[static_cast<std::size_t>(spec.tau + h)] + gamma * value;
  DiscountedResult res;
  res.value = value;
  res.horizon = T;
  res.truncation = std::pow(gamma, H + 1) / (1.0 - gamma);
  return res;
}

// ---------------------------------------------------------------------------
// Conditional outcomes

namespace {

// Enumerates every positive-probability trajectory of one block over
// rounds 1..tau under (q, g*); other units stay at padding values and are
// never read (block-local scenarios only).
void enum_block_paths(const ScenarioSpec& spec, const TransitionTable& q, const std::vector<int>& members, int tau,
                      double budget, const std::function<void(const TrialView&, double)>& visit) {
  TrialData data(spec.N, tau);
  TrialView v{&data, &spec.initial_state};
  const int nb = static_cast<int>(members.size());
  const long long cap = budget >= 9e18 ? (1LL << 62) : static_cast<long long>(budget);
  long long visited = 0;
  std::function<void(int, double)> rec = [&](int slot, double p) {
    if (slot == 2 * nb * tau) {
      if (++visited > cap) throw BudgetError("block path enumeration exceeds the budget");
      visit(v, p);
      return;
    }
    const int within = slot % (2 * nb);
    const int t = slot / (2 * nb) + 1;
    const bool is_treatment = within < nb;
    const int u = members[static_cast<std::size_t>(is_treatment ? within : within - nb)];
    if (is_treatment) {
      auto row = spec.g_star.dist(spec.sum_a->code(v, t, u));
      for (int a = 0; a < spec.n_arms; ++a) {
        const double pa = row[static_cast<std::size_t>(a)];
        if (pa <= 0.0) continue;
        data.set_a(t, u, a);
        rec(slot + 1, p * pa);
      }
    } else {
      auto row = q.row(spec.sum_l->code(v, t, u));
      for (int l = 0; l < spec.n_states; ++l) {
        const double pl = row[static_cast<std::size_t>(l)];
        if (pl <= 0.0) continue;
        data.set_l(t, u, l);
        rec(slot + 1, p * pl);
      }
    }
  };
  rec(0, 1.0);
}

struct CondAcc {
  double p = 0.0;
  double py = 0.0;
};

void check_conditional_supported(const ScenarioSpec& spec, int s, int j, int tau) {
  if (spec.model_class == "M")
    throw ModelMismatchError("conditional outcomes need within-block context sufficiency (M1 or M2)");
  if (s < 1 || s > tau || j < 1 || j > spec.N)
    throw ValidationError("conditional outcome: node out of range");
}

std::vector<NodeConditionals> tables_from_enum(const ScenarioSpec& spec, const TransitionTable& q, int tau,
                                               double budget) {
  // One ambient enumeration under (q, g*); paths grouped at every node by
  // (context, state).
  std::vector<std::map<std::pair<long long, int>, CondAcc>> acc(static_cast<std::size_t>(tau) * spec.N);
  enumerate_paths(spec, q, DesignEngine::fixed(spec.g_star), tau, budget, nullptr,
                  [&](const TrialView& v, double p) {
                    double y = 0.0;
                    for (int i = 1; i <= spec.N; ++i) y += spec.outcome(v.l(tau, i));
                    y /= spec.N;
                    for (int s = 1; s <= tau; ++s)
                      for (int j = 1; j <= spec.N; ++j) {
                        auto& slot = acc[static_cast<std::size_t>((s - 1) * spec.N + j - 1)]
                                        [{spec.sum_l->code(v, s, j), v.l(s, j)}];
                        slot.p += p;
                        slot.py += p * y;
                      }
                  });
  std::vector<NodeConditionals> tables(static_cast<std::size_t>(tau) * spec.N);
  for (int s = 1; s <= tau; ++s)
    for (int j = 1; j <= spec.N; ++j) {
      auto& tab = tables[static_cast<std::size_t>((s - 1) * spec.N + j - 1)];
      tab.s = s;
      tab.j = j;
      for (const auto& [key, slot] : acc[static_cast<std::size_t>((s - 1) * spec.N + j - 1)]) {
        auto& entry = tab.by_context[key.first];
        entry.prob_c += slot.p;
        entry.mean_cl[key.second] = slot.py / slot.p;
      }
      for (auto& [c, entry] : tab.by_context) {
        auto row = q.row(c);
        double m = 0.0;
        for (const auto& [l, v] : entry.mean_cl) m += row[static_cast<std::size_t>(l)] * v;
        entry.mean_c = m;
      }
    }
  return tables;
}

std::vector<NodeConditionals> tables_from_chain(const ScenarioSpec& spec, const TransitionTable& q, int tau,
                                                double budget) {
  require_chain_ready(spec, "conditional_outcome_tables");
  auto blocks = spec.effective_blocks();
  std::vector<int> block_of(static_cast<std::size_t>(spec.N), -1);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int u : blocks[b]) block_of[static_cast<std::size_t>(u - 1)] = static_cast<int>(b);

  // Per block: unconditional E[S_B(tau)] and per-node (c,l) groups of the
  // block outcome.
  std::vector<double> block_ey(blocks.size(), 0.0);
  std::vector<std::map<std::pair<long long, int>, CondAcc>> acc(static_cast<std::size_t>(tau) * spec.N);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    enum_block_paths(spec, q, blocks[b], tau, budget, [&](const TrialView& v, double p) {
      double sb = 0.0;
      for (int u : blocks[b]) sb += spec.outcome(v.l(tau, u));
      block_ey[b] += p * sb;
      for (int s = 1; s <= tau; ++s)
        for (int u : blocks[b]) {
          auto& slot =
              acc[static_cast<std::size_t>((s - 1) * spec.N + u - 1)][{spec.sum_l->code(v, s, u), v.l(s, u)}];
          slot.p += p;
          slot.py += p * sb;
        }
    });
  }
  const double total_ey = std::accumulate(block_ey.begin(), block_ey.end(), 0.0);

  std::vector<NodeConditionals> tables(static_cast<std::size_t>(tau) * spec.N);
  for (int s = 1; s <= tau; ++s)
    for (int j = 1; j <= spec.N; ++j) {
      auto& tab = tables[static_cast<std::size_t>((s - 1) * spec.N + j - 1)];
      tab.s = s;
      tab.j = j;
      const double other_ey = total_ey - block_ey[static_cast<std::size_t>(block_of[static_cast<std::size_t>(j - 1)])];
      for (const auto& [key, slot] : acc[static_cast<std::size_t>((s - 1) * spec.N + j - 1)]) {
        auto& entry = tab.by_context[key.first];
        entry.prob_c += slot.p;
        entry.mean_cl[key.second] = (slot.py / slot.p + other_ey) / spec.N;
      }
      for (auto& [c, entry] : tab.by_context) {
        auto row = q.row(c);
        double m = 0.0;
        for (const auto& [l, v] : entry.mean_cl) m += row[static_cast<std::size_t>(l)] * v;
        entry.mean_c = m;
      }
    }
  return tables;
}

}  // namespace

std::vector<NodeConditionals> conditional_outcome_tables(const ScenarioSpec& spec, const TransitionTable& q, int tau,
                                                         const std::string& backend, double budget) {
  spec.validate();
  if (tau <= 0) tau = spec.tau;
  check_conditional_supported(spec, 1, 1, tau);
  if (backend == "chain") return tables_from_chain(spec, q, tau, budget);
  if (backend == "enum") return tables_from_enum(spec, q, tau, budget);
  if (backend == "auto")
    return scenario_block_local(spec) ? tables_from_chain(spec, q, tau, budget) : tables_from_enum(spec, q, tau, budget);
  throw ValidationError("conditional_outcome_tables: unknown backend '" + backend + "'");
}

double conditional_outcome(const ScenarioSpec& spec, const TransitionTable& q, int s, int j, long long c,
                           std::optional<int> l, std::optional<int> unit, const std::string& backend,
                           long long n_paths, std::uint64_t seed) {
  spec.validate();
  const int tau = spec.tau;
  check_conditional_supported(spec, s, j, tau);
  if (unit && (*unit < 1 || *unit > spec.N)) throw ValidationError("conditional_outcome: unit out of range");

  std::string be = backend;
  if (be == "auto") be = scenario_block_local(spec) ? "chain" : "enum";

  // Target per complete trajectory.
  auto target = [&](const TrialView& v) {
    if (unit) return spec.outcome(v.l(tau, *unit));
    double y = 0.0;
    for (int i = 1; i <= spec.N; ++i) y += spec.outcome(v.l(tau, i));
    return y / spec.N;
  };

  if (be == "enum") {
    // Group the ambient paths by the conditioning event.
    std::map<int, CondAcc> by_l;  // state at (s,j) within context c
    enumerate_paths(spec, q, DesignEngine::fixed(spec.g_star), tau, DEFAULT_ENUM_BUDGET, nullptr,
                    [&](const TrialView& v, double p) {
                      if (spec.sum_l->code(v, s, j) != c) return;
                      auto& slot = by_l[v.l(s, j)];
                      slot.p += p;
                      slot.py += p * target(v);
                    });
    if (by_l.empty()) throw ValidationError("conditional_outcome: context has zero probability under (q, g*)");
    if (l) {
      auto it = by_l.find(*l);
      if (it == by_l.end())
        throw ValidationError("conditional_outcome: state has zero probability in this context");
      return it->second.py / it->second.p;
    }
    auto row = q.row(c);
    double m = 0.0;
    for (const auto& [lv, slot] : by_l) m += row[static_cast<std::size_t>(lv)] * (slot.py / slot.p);
    return m;
  }

  if (be == "chain" || be == "mc") {
    require_chain_ready(spec, "conditional_outcome");
    auto blocks = spec.effective_blocks();
    std::size_t bj = 0;
    for (std::size_t b = 0; b < blocks.size(); ++b)
      if (std::find(blocks[b].begin(), blocks[b].end(), j) != blocks[b].end()) bj = b;
    const bool target_in_block =
        !unit || std::find(blocks[bj].begin(), blocks[bj].end(), *unit) != blocks[bj].end();

    // Cross-block pieces are unconditional.
    double other = 0.0;
    if (!unit) {
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (b == bj) continue;
        double ey = 0.0;
        enum_block_paths(spec, q, blocks[b], tau, DEFAULT_ENUM_BUDGET, [&](const TrialView& v, double p) {
          for (int u : blocks[b]) ey += p * spec.outcome(v.l(tau, u));
        });
        other += ey;
      }
    } else if (!target_in_block) {
      // The target unit is independent of the conditioning event.
      double ey = 0.0;
      std::size_t bu = 0;
      for (std::size_t b = 0; b < blocks.size(); ++b)
        if (std::find(blocks[b].begin(), blocks[b].end(), *unit) != blocks[b].end()) bu = b;
      enum_block_paths(spec, q, blocks[bu], tau, DEFAULT_ENUM_BUDGET,
                       [&](const TrialView& v, double p) { ey += p * spec.outcome(v.l(tau, *unit)); });
      return ey;
    }

    // Within-block target: f of the chosen unit, or the block outcome sum.
    auto block_target = [&](const TrialView& v) {
      if (unit) return spec.outcome(v.l(tau, *unit));
      double sb = 0.0;
      for (int u : blocks[bj]) sb += spec.outcome(v.l(tau, u));
      return sb;
    };

    std::map<int, CondAcc> by_l;
    if (be == "chain") {
      enum_block_paths(spec, q, blocks[bj], tau, DEFAULT_ENUM_BUDGET, [&](const TrialView& v, double p) {
        if (spec.sum_l->code(v, s, j) != c) return;
        auto& slot = by_l[v.l(s, j)];
        slot.p += p;
        slot.py += p * block_target(v);
      });
    } else {
      if (n_paths < 1) throw ValidationError("conditional_outcome: mc backend needs n_paths >= 1");
      // Sampled block rollouts; conditioning by selection keeps draws
      // common between the (c,l) and (c) estimates.
      Rng rng(seed, 0);
      TrialData data(spec.N, tau);
      TrialView v{&data, &spec.initial_state};
      for (long long r = 0; r < n_paths; ++r) {
        for (int t = 1; t <= tau; ++t) {
          for (int u : blocks[bj]) {
            auto row = spec.g_star.dist(spec.sum_a->code(v, t, u));
            data.set_a(t, u, rng.categorical(row));
          }
          for (int u : blocks[bj]) data.set_l(t, u, rng.categorical(q.row(spec.sum_l->code(v, t, u))));
        }
        if (spec.sum_l->code(v, s, j) != c) continue;
        auto& slot = by_l[data.l(s, j)];
        slot.p += 1.0;
        slot.py += block_target(v);
      }
      if (by_l.empty()) throw ValidationError("conditional_outcome: no sampled path realized the context");
    }
    if (by_l.empty()) throw ValidationError("conditional_outcome: context has zero probability under (q, g*)");

    auto finish = [&](double within) { return unit ? within : (within + other) / spec.N; };
    if (l) {
      auto it = by_l.find(*l);
      if (it == by_l.end())
        throw ValidationError("conditional_outcome: state has zero probability in this context");
      return finish(it->second.py / it->second.p);
    }
    auto row = q.row(c);
    double m = 0.0;
    for (const auto& [lv, slot] : by_l) m += row[static_cast<std::size_t>(lv)] * (slot.py / slot.p);
    return finish(m);
  }

  throw ValidationError("conditional_outcome: unknown backend '" + backend + "'");
}

// ---------------------------------------------------------------------------
// Context marginals

namespace {

void average_nodes(const std::vector<std::map<long long, double>>& per_node, int from_node, int to_node,
                   std::map<long long, double>& out) {
  out.clear();
  const int n = to_node - from_node;
  for (int k = from_node; k < to_node; ++k)
    for (const auto& [c, p] : per_node[static_cast<std::size_t>(k)]) out[c] += p / n;
}

}  // namespace

std::map<long long, double> ContextMarginals::hbar_l_upto(int t) const {
  if (t < 1 || t > T) throw ValidationError("hbar_l_upto: round out of range");
  std::map<long long, double> out;
  average_nodes(h_l, 0, t * N, out);
  return out;
}

std::map<long long, double> ContextMarginals::hbar_a_upto(int t) const {
  if (t < 1 || t > T) throw ValidationError("hbar_a_upto: round out of range");
  std::map<long long, double> out;
  average_nodes(h_a, 0, t * N, out);
  return out;
}

ContextMarginals context_marginals(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine,
                                   int T, const std::string& backend, double budget, int mc_reps,
                                   std::uint64_t seed) {
  spec.validate();
  if (T < 1) throw ValidationError("context_marginals: T must be >= 1");
  if (engine.n_arms() != spec.n_arms) throw ValidationError("context_marginals: design arm count mismatch");
  ContextMarginals M;
  M.T = T;
  M.N = spec.N;
  const std::size_t nodes = static_cast<std::size_t>(T) * spec.N;
  M.h_l.assign(nodes, {});
  M.h_a.assign(nodes, {});
  M.hstar_l.assign(nodes, {});
  M.hstar_a.assign(nodes, {});

  // g* leg: always exact.
  if (scenario_block_local(spec)) {
    ChainCollect out;
    out.h_l = &M.hstar_l;
    out.h_a = &M.hstar_a;
    run_chain(spec, q, [&](int) -> const DesignRule& { return spec.g_star; }, T, out);
  } else {
    enumerate_paths(spec, q, DesignEngine::fixed(spec.g_star), T, budget,
                    [&](const TrialView& v, int t, int i, ContextSummarizer::Kind k, double p) {
                      const std::size_t node = static_cast<std::size_t>((t - 1) * spec.N + i - 1);
                      if (k == ContextSummarizer::Kind::L)
                        M.hstar_l[node][spec.sum_l->code(v, t, i)] += p;
                      else
                        M.hstar_a[node][spec.sum_a->code(v, t, i)] += p;
                    },
                    nullptr);
  }

  // Design leg.
  std::string be = backend;
  if (be == "auto") be = (scenario_block_local(spec) && !engine.adaptive()) ? "chain" : "enum";
  if (be == "chain") {
    require_chain_ready(spec, "context_marginals");
    if (engine.adaptive()) throw UnsupportedError("context_marginals: chain backend cannot drive adaptive designs");
    ChainCollect out;
    out.h_l = &M.h_l;
    out.h_a = &M.h_a;
    run_chain(spec, q, [&](int t) -> const DesignRule& { return engine.rule_at(t); }, T, out);
  } else if (be == "enum") {
    enumerate_paths(spec, q, engine, T, budget,
                    [&](const TrialView& v, int t, int i, ContextSummarizer::Kind k, double p) {
                      const std::size_t node = static_cast<std::size_t>((t - 1) * spec.N + i - 1);
                      if (k == ContextSummarizer::Kind::L)
                        M.h_l[node][spec.sum_l->code(v, t, i)] += p;
                      else
                        M.h_a[node][spec.sum_a->code(v, t, i)] += p;
                    },
                    nullptr);
  } else if (be == "mc") {
    if (mc_reps < 1) throw ValidationError("context_marginals: mc backend needs mc_reps >= 1");
    for (int r = 0; r < mc_reps; ++r) {
      TrialData data = simulate_with(spec, q, engine, T, seed, static_cast<std::uint64_t>(r), nullptr);
      TrialView v{&data, &spec.initial_state};
      for (int t = 1; t <= T; ++t)
        for (int i = 1; i <= spec.N; ++i) {
          const std::size_t node = static_cast<std::size_t>((t - 1) * spec.N + i - 1);
          M.h_a[node][spec.sum_a->code(v, t, i)] += 1.0 / mc_reps;
          M.h_l[node][spec.sum_l->code(v, t, i)] += 1.0 / mc_reps;
        }
    }
  } else {
    throw ValidationError("context_marginals: unknown backend '" + backend + "'");
  }
  M.backend = be;

  const int n_tail = (T + 3) / 4;  // last quarter of rounds, at least one
  average_nodes(M.h_l, 0, T * spec.N, M.hbar_l);
  average_nodes(M.h_a, 0, T * spec.N, M.hbar_a);
  average_nodes(M.h_l, (T - n_tail) * spec.N, T * spec.N, M.hinf_l);
  average_nodes(M.h_a, (T - n_tail) * spec.N, T * spec.N, M.hinf_a);
  average_nodes(M.hstar_l, (T - n_tail) * spec.N, T * spec.N, M.hstar_inf_l);
  average_nodes(M.hstar_a, (T - n_tail) * spec.N, T * spec.N, M.hstar_inf_a);
  return M;
}

// ---------------------------------------------------------------------------
// Mixing coefficients

MixingReport mixing_coefficients(const std::vector<std::vector<double>>& joint) {
  if (joint.empty() || joint.front().empty()) throw ValidationError("mixing_coefficients: empty joint");
  const std::size_t nx = joint.size(), ny = joint.front().size();
  double total = 0.0;
  for (const auto& row : joint) {
    if (row.size() != ny) throw ValidationError("mixing_coefficients: ragged joint");
    for (double p : row) {
      if (p < -PROB_TOL) throw ValidationError("mixing_coefficients: negative probability");
      total += std::max(p, 0.0);
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("mixing_coefficients: joint must sum to 1");
  std::vector<std::vector<double>> p(nx, std::vector<double>(ny, 0.0));
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) p[i][j] = std::max(joint[i][j], 0.0) / total;

  std::vector<double> px(nx, 0.0), py(ny, 0.0);
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) {
      px[i] += p[i][j];
      py[j] += p[i][j];
    }

  MixingReport rep;

  // phi: worst conditional row in total variation.
  for (std::size_t i = 0; i < nx; ++i) {
    if (px[i] <= 0.0) continue;
    double tv = 0.0;
    for (std::size_t j = 0; j < ny; ++j) tv += std::abs(p[i][j] / px[i] - py[j]);
    rep.phi = std::max(rep.phi, 0.5 * tv);
  }

  // alpha: exact event-pair supremum.  For a fixed row set A, the best
  // column set takes the positive part of m_j = sum_{i in A} d(i,j); since
  // the m_j sum to zero this equals half the l1 norm of m.
  std::vector<std::vector<double>> d(nx, std::vector<double>(ny, 0.0));
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) d[i][j] = p[i][j] - px[i] * py[j];
  const bool over_rows = nx <= ny;
  const std::size_t small = over_rows ? nx : ny, big = over_rows ? ny : nx;
  if (small > 22) throw UnsupportedError("mixing_coefficients: alpha enumeration above 2^22 subsets");
  for (std::size_t mask = 1; mask < (1ull << small); ++mask) {
    double l1 = 0.0;
    for (std::size_t j = 0; j < big; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < small; ++i)
        if (mask & (1ull << i)) m += over_rows ? d[i][j] : d[j][i];
      l1 += std::abs(m);
    }
    rep.alpha = std::max(rep.alpha, 0.5 * l1);
  }

  // rho: top singular value of the standardized centered joint.
  std::vector<std::size_t> ix, jy;
  for (std::size_t i = 0; i < nx; ++i)
    if (px[i] > 0.0) ix.push_back(i);
  for (std::size_t j = 0; j < ny; ++j)
    if (py[j] > 0.0) jy.push_back(j);
  if (ix.size() >= 2 && jy.size() >= 2) {
    Eigen::MatrixXd Q(static_cast<Eigen::Index>(ix.size()), static_cast<Eigen::Index>(jy.size()));
    for (std::size_t a = 0; a < ix.size(); ++a)
      for (std::size_t b = 0; b < jy.size(); ++b)
        Q(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
            d[ix[a]][jy[b]] / std::sqrt(px[ix[a]] * py[jy[b]]);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Q);
    rep.rho = svd.singularValues()(0);
  }
  return rep;
}

}  // namespace nettrial
