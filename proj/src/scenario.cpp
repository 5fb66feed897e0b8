#include "nettrial/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <unordered_map>

#include "nettrial/rng.hpp"

namespace nettrial {

namespace {

void require_partition(const std::vector<std::vector<int>>& blocks, int N, const std::string& what) {
  std::vector<int> seen(static_cast<std::size_t>(N), 0);
  for (const auto& b : blocks) {
    if (b.empty()) throw ValidationError(what + ": empty block");
    if (!std::is_sorted(b.begin(), b.end())) throw ValidationError(what + ": block members must be sorted");
    for (int u : b) {
      if (u < 1 || u > N) throw ValidationError(what + ": unit out of range");
      if (seen[static_cast<std::size_t>(u - 1)]++) throw ValidationError(what + ": unit in two blocks");
    }
  }
  for (int i = 1; i <= N; ++i)
    if (!seen[static_cast<std::size_t>(i - 1)]) throw ValidationError(what + ": unit " + std::to_string(i) + " missing");
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ValidationError(what + ": unknown key '" + it.key() + "'");
}

}  // namespace

std::vector<std::vector<int>> ScenarioSpec::effective_blocks() const {
  if (!gstar_blocks.empty()) return gstar_blocks;
  std::vector<int> all(static_cast<std::size_t>(N));
  for (int i = 1; i <= N; ++i) all[static_cast<std::size_t>(i - 1)] = i;
  return {all};
}

void ScenarioSpec::validate() const {
  if (N < 1 || n_arms < 1 || n_states < 1) throw ValidationError("scenario: N, n_arms, n_states must be >= 1");
  if (tau < 1) throw ValidationError("scenario: tau must be >= 1");
  if (model_class != "M" && model_class != "M1" && model_class != "M2")
    throw ValidationError("scenario: model_class must be M, M1 or M2");
  if (network.N != N) throw ValidationError("scenario: network unit count does not match N");
  network.validate();
  if (!sum_l || sum_l->kind() != ContextSummarizer::Kind::L)
    throw ValidationError("scenario: missing or mis-kinded L summarizer");
  if (!sum_a || sum_a->kind() != ContextSummarizer::Kind::A)
    throw ValidationError("scenario: missing or mis-kinded A summarizer");
  if (static_cast<int>(f_y.size()) != n_states) throw ValidationError("scenario: f_y must have one value per state");
  for (double y : f_y)
    if (!(y >= 0.0 && y <= 1.0)) throw ValidationError("scenario: f_y values must lie in [0,1]");
  if (static_cast<int>(initial_state.size()) != N)
    throw ValidationError("scenario: initial_state must have one entry per unit");
  for (int v : initial_state)
    if (v < 0 || v >= n_states) throw ValidationError("scenario: initial state outside the state support");
  if (g_star.n_arms() != n_arms) throw ValidationError("scenario: g_star arm count mismatch");
  if (g_star.is_adaptive()) throw ValidationError("scenario: g_star must be a frozen (non-adaptive) rule");
  if (q0.n_states() != n_states) throw ValidationError("scenario: q0 state count mismatch");
  if (!gstar_blocks.empty()) require_partition(gstar_blocks, N, "scenario gstar_blocks");
  if (model_class == "M2") {
    if (!sum_l->decomposes())
      throw ValidationError("scenario: M2 requires an L-summarizer decomposing as (arm, A-context)");
    for (const auto& b : effective_blocks())
      if (b.size() != 1) throw ValidationError("scenario: M2 requires singleton g*-independence blocks");
  }
}

json ScenarioSpec::to_json() const {
  json j;
  j["version"] = schema_version;
  j["name"] = name;
  j["N"] = N;
  j["n_arms"] = n_arms;
  j["n_states"] = n_states;
  j["tau"] = tau;
  j["model_class"] = model_class;
  j["initial_state"] = initial_state;
  j["f_y"] = f_y;
  j["network"] = json{{"N", network.N}, {"clusters", network.clusters}, {"contacts", network.contacts},
                      {"memory", network.memory}};
  j["summarizer_l"] = sum_l->descriptor();
  j["summarizer_a"] = sum_a->descriptor();
  json rows = json::array();
  for (std::size_t k = 0; k < q0.n_contexts(); ++k) {
    auto r = q0.row_at(static_cast<int>(k));
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  j["q0"] = json{{"n_states", q0.n_states()}, {"codes", q0.codes()}, {"rows", rows}};
  j["g_star"] = g_star.to_json();
  j["gstar_blocks"] = gstar_blocks;
  return j;
}

ScenarioSpec ScenarioSpec::from_json(const json& j) {
  check_keys(j,
             {"version", "name", "N", "n_arms", "n_states", "tau", "model_class", "initial_state", "f_y", "network",
              "summarizer_l", "summarizer_a", "q0", "g_star", "gstar_blocks"},
             "scenario json");
  ScenarioSpec s;
  s.schema_version = j.at("version").get<int>();
  if (s.schema_version != 1) throw ValidationError("scenario json: unsupported version");
  s.name = j.at("name").get<std::string>();
  s.N = j.at("N").get<int>();
  s.n_arms = j.at("n_arms").get<int>();
  s.n_states = j.at("n_states").get<int>();
  s.tau = j.at("tau").get<int>();
  s.model_class = j.at("model_class").get<std::string>();
  s.initial_state = j.at("initial_state").get<std::vector<int>>();
  s.f_y = j.at("f_y").get<std::vector<double>>();
  const json& nj = j.at("network");
  check_keys(nj, {"N", "clusters", "contacts", "memory"}, "scenario json network");
  s.network.N = nj.at("N").get<int>();
  s.network.clusters = nj.at("clusters").get<std::vector<std::vector<int>>>();
  s.network.contacts = nj.at("contacts").get<std::vector<std::vector<int>>>();
  s.network.memory = nj.at("memory").get<int>();
  s.sum_l = summarizer_from_json(j.at("summarizer_l"), s.network);
  s.sum_a = summarizer_from_json(j.at("summarizer_a"), s.network);
  const json& qj = j.at("q0");
  check_keys(qj, {"n_states", "codes", "rows"}, "scenario json q0");
  s.q0 = TransitionTable(qj.at("n_states").get<int>(), qj.at("codes").get<std::vector<long long>>(),
                         qj.at("rows").get<std::vector<std::vector<double>>>());
  s.g_star = DesignRule::from_json(j.at("g_star"));
  s.gstar_blocks = j.at("gstar_blocks").get<std::vector<std::vector<int>>>();
  s.validate();
  return s;
}

DesignRule deterministic_arm(int arm, int n_arms) {
  if (n_arms < 1 || arm < 0 || arm >= n_arms) throw ValidationError("deterministic_arm: arm out of range");
  std::vector<double> row(static_cast<std::size_t>(n_arms), 0.0);
  row[static_cast<std::size_t>(arm)] = 1.0;
  return DesignRule::fixed_row(std::move(row));
}

namespace {

std::vector<double> graded_outcomes(int n_states) {
  std::vector<double> f(static_cast<std::size_t>(n_states), 0.0);
  for (int l = 1; l < n_states; ++l) f[static_cast<std::size_t>(l)] = static_cast<double>(l) / (n_states - 1);
  return f;
}

}  // namespace

ScenarioSpec make_cluster_mdp(int n_clusters, int cluster_size, int arm_count, int state_count, double dependence,
                              std::uint64_t seed) {
  if (n_clusters < 1 || cluster_size < 1) throw ValidationError("make_cluster_mdp: cluster counts must be >= 1");
  if (arm_count < 1 || state_count < 1) throw ValidationError("make_cluster_mdp: arm/state counts must be >= 1");
  ScenarioSpec s;
  s.name = "cluster_mdp";
  s.N = n_clusters * cluster_size;
  s.n_arms = arm_count;
  s.n_states = state_count;
  s.tau = 2;
  s.model_class = "M1";
  s.network.N = s.N;
  for (int c = 0; c < n_clusters; ++c) {
    std::vector<int> members;
    for (int k = 0; k < cluster_size; ++k) members.push_back(c * cluster_size + k + 1);
    s.network.clusters.push_back(std::move(members));
  }
  s.network.memory = 1;
  s.sum_l = make_cluster_l(arm_count, state_count, s.network);
  s.sum_a = make_cluster_a(arm_count, state_count, s.network);
  s.f_y = graded_outcomes(state_count);
  s.g_star = DesignRule::uniform(arm_count);
  s.initial_state.assign(static_cast<std::size_t>(s.N), 0);
  s.gstar_blocks = s.network.clusters;

  // Transition rows: a seeded base distribution per (own arm, own previous
  // state), tilted by exp(dependence * z(l', neighbor summary)).  With
  // dependence = 0 the tilt is identically 1, making rows exactly equal
  // across neighbor configurations.
  Rng rng(seed, 0);
  std::vector<double> base(static_cast<std::size_t>(arm_count) * state_count * state_count);
  for (auto& v : base) v = 0.25 + rng.uniform();
  constexpr int kTiltBuckets = 16;
  std::vector<double> tilt(static_cast<std::size_t>(state_count) * kTiltBuckets);
  for (auto& v : tilt) v = 2.0 * rng.uniform() - 1.0;

  const int maxM = cluster_size;
  std::vector<long long> codes = s.sum_l->code_space();
  std::vector<std::vector<double>> rows;
  rows.reserve(codes.size());
  for (long long code : codes) {
    auto d = s.sum_l->features(code);  // digits: size-1, rank, now, a-vec, lprev-vec
    const int r = static_cast<int>(d[1]);
    const int a_own = static_cast<int>(d[static_cast<std::size_t>(2 + (maxM - 1) + r)]);
    const int l_own = static_cast<int>(d[static_cast<std::size_t>(2 + (maxM - 1) + maxM + r)]);
    int nf = 0;  // neighbor summary: everything in the context except own slots
    for (int k = 0; k < maxM - 1; ++k) nf += static_cast<int>(d[static_cast<std::size_t>(2 + k)]);
    for (int k = 0; k < maxM; ++k) {
      if (k == r) continue;
      nf += static_cast<int>(d[static_cast<std::size_t>(2 + (maxM - 1) + k)]);
      nf += static_cast<int>(d[static_cast<std::size_t>(2 + (maxM - 1) + maxM + k)]);
    }
    std::vector<double> row(static_cast<std::size_t>(state_count));
    double total = 0.0;
    for (int l = 0; l < state_count; ++l) {
      double w = base[(static_cast<std::size_t>(a_own) * state_count + l_own) * state_count + l] *
                 std::exp(dependence * tilt[static_cast<std::size_t>(l) * kTiltBuckets + nf % kTiltBuckets]);
      row[static_cast<std::size_t>(l)] = w;
      total += w;
    }
    for (double& w : row) w /= total;
    rows.push_back(std::move(row));
  }
  s.q0 = TransitionTable(state_count, std::move(codes), std::move(rows));
  s.validate();
  return s;
}

ScenarioSpec make_household_censoring(const std::vector<std::vector<int>>& households,
                                      const std::vector<std::vector<int>>& contacts, int t0, std::uint64_t seed) {
  int N = 0;
  for (const auto& h : households) N += static_cast<int>(h.size());
  if (N < 1) throw ValidationError("make_household_censoring: households must cover at least one unit");
  require_partition(households, N, "make_household_censoring households");
  if (static_cast<int>(contacts.size()) != N)
    throw ValidationError("make_household_censoring: one contact set per unit required");
  if (t0 < 1) throw ValidationError("make_household_censoring: memory t0 must be >= 1");

  ScenarioSpec s;
  s.name = "household_censoring";
  s.N = N;
  s.n_arms = 2;
  s.n_states = 2;
  s.tau = 2;
  s.model_class = "M1";
  s.network.N = N;
  s.network.clusters = households;
  s.network.memory = t0;
  // Augment each unit's contacts with itself and its whole household so the
  // censored code always determines the in-household dynamics.
  std::vector<int> household_of(static_cast<std::size_t>(N), -1);
  for (std::size_t b = 0; b < households.size(); ++b)
    for (int u : households[b]) household_of[static_cast<std::size_t>(u - 1)] = static_cast<int>(b);
  s.network.contacts.resize(static_cast<std::size_t>(N));
  for (int i = 1; i <= N; ++i) {
    std::set<int> f(contacts[static_cast<std::size_t>(i - 1)].begin(), contacts[static_cast<std::size_t>(i - 1)].end());
    f.insert(i);
    for (int u : households[static_cast<std::size_t>(household_of[static_cast<std::size_t>(i - 1)])]) f.insert(u);
    for (int u : f)
      if (u < 1 || u > N) throw ValidationError("make_household_censoring: contact out of range");
    s.network.contacts[static_cast<std::size_t>(i - 1)].assign(f.begin(), f.end());
  }
  s.sum_l = make_household_l(2, s.network);
  s.sum_a = make_trivial_a();
  s.f_y = {0.0, 1.0};
  s.g_star = deterministic_arm(0, 2);
  s.initial_state.assign(static_cast<std::size_t>(N), 0);
  s.gstar_blocks = households;

  // Infection-flavored rows over the reachable codes: p(state 1) is a
  // logistic in (# visible contacts in state 1, # visible in state 0),
  // clamped away from 0 and 1.
  Rng rng(seed, 0);
  const double alpha = rng.uniform() - 1.2;
  const double beta = 0.6 + 0.8 * rng.uniform();
  const double gamma = 0.1 + 0.3 * rng.uniform();
  std::vector<long long> codes = enumerate_reachable_codes(*s.sum_l, N, 2, 2, s.initial_state);
  int maxF = 0;
  for (const auto& f : s.network.contacts) maxF = std::max(maxF, static_cast<int>(f.size()));
  const int now_begin = 2, now_end = 2 + maxF;
  const int trt_end = now_end + (t0 + 1) * maxF;
  const int past_end = trt_end + t0 * maxF;
  std::vector<std::vector<double>> rows;
  rows.reserve(codes.size());
  for (long long code : codes) {
    // Count visible infected / visible healthy contacts across the
    // state-valued slots (same-round block and the past-state block);
    // censored slots carry digit 0 and contribute to neither count.
    auto d = s.sum_l->features(code);
    int inf = 0, clear = 0;
    for (int k = now_begin; k < now_end; ++k) {
      if (d[static_cast<std::size_t>(k)] == 2.0) ++inf;
      if (d[static_cast<std::size_t>(k)] == 1.0) ++clear;
    }
    for (int k = trt_end; k < past_end; ++k) {
      if (d[static_cast<std::size_t>(k)] == 2.0) ++inf;
      if (d[static_cast<std::size_t>(k)] == 1.0) ++clear;
    }
    double p1 = 1.0 / (1.0 + std::exp(-(alpha + beta * inf - gamma * clear)));
    p1 = std::min(0.95, std::max(0.05, p1));
    rows.push_back({1.0 - p1, p1});
  }
  s.q0 = TransitionTable(2, std::move(codes), std::move(rows));
  s.validate();
  return s;
}

ScenarioSpec make_best_arm(int n_units, int arm_count, int state_count, int memory, std::uint64_t seed) {
  if (n_units < 1) throw ValidationError("make_best_arm: n_units must be >= 1");
  if (arm_count < 2) throw ValidationError("make_best_arm: arm_count must be >= 2");
  if (state_count < 2) throw ValidationError("make_best_arm: state_count must be >= 2");
  if (memory != 0 && memory != 1) throw ValidationError("make_best_arm: memory must be 0 or 1");
  ScenarioSpec s;
  s.name = "best_arm";
  s.N = n_units;
  s.n_arms = arm_count;
  s.n_states = state_count;
  s.tau = 1;
  s.model_class = "M2";
  s.network.N = n_units;
  for (int i = 1; i <= n_units; ++i) s.network.clusters.push_back({i});
  s.network.memory = memory;
  s.sum_l = make_unit_local_l(arm_count, state_count, memory);
  s.sum_a = make_unit_local_a(state_count, memory);
  s.f_y = graded_outcomes(state_count);
  s.g_star = deterministic_arm(0, arm_count);
  s.initial_state.assign(static_cast<std::size_t>(n_units), 0);
  s.gstar_blocks = s.network.clusters;

  Rng rng(seed, 0);
  std::vector<long long> codes = s.sum_l->code_space();
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < codes.size(); ++k) {
    std::vector<double> row(static_cast<std::size_t>(state_count));
    double total = 0.0;
    for (double& w : row) total += (w = 0.2 + rng.uniform());
    for (double& w : row) w /= total;
    rows.push_back(std::move(row));
  }
  s.q0 = TransitionTable(state_count, std::move(codes), std::move(rows));
  s.validate();
  return s;
}

ScenarioSpec make_best_arm_binary(int n_units, const std::vector<double>& p_arm) {
  if (n_units < 1) throw ValidationError("make_best_arm_binary: n_units must be >= 1");
  if (p_arm.size() < 2) throw ValidationError("make_best_arm_binary: need at least two arms");
  ScenarioSpec s;
  s.name = "best_arm_binary";
  s.N = n_units;
  s.n_arms = static_cast<int>(p_arm.size());
  s.n_states = 2;
  s.tau = 1;
  s.model_class = "M2";
  s.network.N = n_units;
  for (int i = 1; i <= n_units; ++i) s.network.clusters.push_back({i});
  s.network.memory = 0;
  s.sum_l = make_unit_local_l(s.n_arms, 2, 0);
  s.sum_a = make_unit_local_a(2, 0);
  s.f_y = {0.0, 1.0};
  s.g_star = deterministic_arm(0, s.n_arms);
  s.initial_state.assign(static_cast<std::size_t>(n_units), 0);
  s.gstar_blocks = s.network.clusters;
  std::vector<long long> codes;
  std::vector<std::vector<double>> rows;
  for (int a = 0; a < s.n_arms; ++a) {
    double p = p_arm[static_cast<std::size_t>(a)];
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("make_best_arm_binary: p_arm entries must lie in [0,1]");
    codes.push_back(a);
    rows.push_back({1.0 - p, p});
  }
  s.q0 = TransitionTable(2, std::move(codes), std::move(rows));
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Model-class audit

namespace {

struct AuditState {
  const ScenarioSpec* spec = nullptr;
  int nodes = 0;
  long long base = 1;
  std::vector<long long> pow_base;  // base^k, k = 0..nodes
  std::vector<std::vector<int>> blocks;
  std::vector<int> block_of;  // unit (0-based) -> block index

  TrialData data{1, 1};
  std::vector<int> init;
  // Full-path joint law and per-block projections under (q0, g*).
  std::unordered_map<long long, double> joint;
  std::vector<std::unordered_map<long long, double>> block_marg;
  // Per (s,j): prefix-of-L(s,j) -> (probability, probability * block outcome).
  std::vector<std::unordered_map<long long, std::pair<double, double>>> prefix_acc;

  int prefix_len(int s, int j) const { return (s - 1) * 2 * spec->N + spec->N + j; }
};

void audit_rec(AuditState& st, int pos, double prob, long long key) {
  const ScenarioSpec& sp = *st.spec;
  const int N = sp.N;
  if (pos == st.nodes) {
    st.joint[key] += prob;
    return;
  }
  const int half = pos / N;
  const int t = half / 2 + 1;
  const bool is_treatment = (half % 2 == 0);
  const int i = pos % N + 1;
  TrialView v{&st.data, &st.init};
  if (is_treatment) {
    auto row = sp.g_star.dist(sp.sum_a->code(v, t, i));
    for (int a = 0; a < sp.n_arms; ++a) {
      const double p = row[static_cast<std::size_t>(a)];
      if (p <= 0.0) continue;
      st.data.set_a(t, i, a);
      audit_rec(st, pos + 1, prob * p, key * st.base + a);
    }
  } else {
    auto row = sp.q0.row(sp.sum_l->code(v, t, i));
    for (int l = 0; l < sp.n_states; ++l) {
      const double p = row[static_cast<std::size_t>(l)];
      if (p <= 0.0) continue;
      st.data.set_l(t, i, l);
      audit_rec(st, pos + 1, prob * p, key * st.base + l);
    }
  }
}

std::vector<int> decode_path(const AuditState& st, long long key, int len) {
  std::vector<int> vals(static_cast<std::size_t>(len));
  for (int k = 0; k < len; ++k)
    vals[static_cast<std::size_t>(k)] = static_cast<int>(key / st.pow_base[static_cast<std::size_t>(len - 1 - k)] %
                                                         st.base);
  return vals;
}

void fill_from_values(const ScenarioSpec& sp, TrialData& d, const std::vector<int>& vals) {
  const int N = sp.N;
  for (std::size_t k = 0; k < vals.size(); ++k) {
    const int half = static_cast<int>(k) / N;
    const int t = half / 2 + 1;
    const int i = static_cast<int>(k) % N + 1;
    if (half % 2 == 0)
      d.set_a(t, i, vals[k]);
    else
      d.set_l(t, i, vals[k]);
  }
}

}  // namespace

AuditReport audit_model_class(const ScenarioSpec& spec, double budget) {
  spec.validate();
  AuditReport rep;
  const int nodes = 2 * spec.N * spec.tau;
  const double paths = std::pow(static_cast<double>(spec.n_arms) * spec.n_states,
                                static_cast<double>(spec.N) * spec.tau);
  const long long base = std::max(spec.n_arms, spec.n_states);
  if (paths > budget) {
    rep.skipped_reason = "path count " + std::to_string(paths) + " exceeds the audit budget";
    return rep;
  }
  if (nodes * std::log2(static_cast<double>(base)) > 62.0) {
    rep.skipped_reason = "path keys would overflow 63 bits";
    return rep;
  }

  AuditState st;
  st.spec = &spec;
  st.nodes = nodes;
  st.base = base;
  st.pow_base.resize(static_cast<std::size_t>(nodes) + 1);
  st.pow_base[0] = 1;
  for (int k = 1; k <= nodes; ++k) st.pow_base[static_cast<std::size_t>(k)] = st.pow_base[static_cast<std::size_t>(k - 1)] * base;
  st.blocks = spec.effective_blocks();
  st.block_of.assign(static_cast<std::size_t>(spec.N), -1);
  for (std::size_t b = 0; b < st.blocks.size(); ++b)
    for (int u : st.blocks[b]) st.block_of[static_cast<std::size_t>(u - 1)] = static_cast<int>(b);
  st.data = TrialData(spec.N, spec.tau);
  st.init = spec.initial_state;
  audit_rec(st, 0, 1.0, 0);

  // Block projections and per-(s,j) prefix accumulators from the joint law.
  st.block_marg.resize(st.blocks.size());
  st.prefix_acc.resize(static_cast<std::size_t>(spec.tau) * spec.N);
  for (const auto& [key, p] : st.joint) {
    auto vals = decode_path(st, key, nodes);
    std::vector<long long> bkey(st.blocks.size(), 0);
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const int i = static_cast<int>(k) % spec.N + 1;
      const int b = st.block_of[static_cast<std::size_t>(i - 1)];
      bkey[static_cast<std::size_t>(b)] = bkey[static_cast<std::size_t>(b)] * base + vals[k];
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) st.block_marg[b][bkey[b]] += p;

    std::vector<double> block_y(st.blocks.size(), 0.0);
    for (int i = 1; i <= spec.N; ++i) {
      const int l_tau = vals[static_cast<std::size_t>((spec.tau - 1) * 2 * spec.N + spec.N + i - 1)];
      block_y[static_cast<std::size_t>(st.block_of[static_cast<std::size_t>(i - 1)])] += spec.outcome(l_tau);
    }
    for (int s = 1; s <= spec.tau; ++s)
      for (int j = 1; j <= spec.N; ++j) {
        const int len = st.prefix_len(s, j);
        const long long pk = key / st.pow_base[static_cast<std::size_t>(nodes - len)];
        auto& acc = st.prefix_acc[static_cast<std::size_t>((s - 1) * spec.N + j - 1)][pk];
        acc.first += p;
        acc.second += p * block_y[static_cast<std::size_t>(st.block_of[static_cast<std::size_t>(j - 1)])];
      }
  }

  // Within-block sufficiency: conditional block-outcome means must agree
  // across all realizable pasts sharing (C(s,j), l).
  double markov_gap = 0.0;
  TrialData scratch(spec.N, spec.tau);
  TrialView v{&scratch, &st.init};
  for (int s = 1; s <= spec.tau; ++s)
    for (int j = 1; j <= spec.N; ++j) {
      std::map<std::pair<long long, int>, std::pair<double, double>> range;  // (c,l) -> (min,max)
      const auto& acc = st.prefix_acc[static_cast<std::size_t>((s - 1) * spec.N + j - 1)];
      const int len = st.prefix_len(s, j);
      for (const auto& [pk, pv] : acc) {
        auto vals = decode_path(st, pk, len);
        fill_from_values(spec, scratch, vals);
        const long long c = spec.sum_l->code(v, s, j);
        const int l = vals.back();
        const double m = pv.second / pv.first;
        auto it = range.find({c, l});
        if (it == range.end())
          range.emplace(std::make_pair(c, l), std::make_pair(m, m));
        else {
          it->second.first = std::min(it->second.first, m);
          it->second.second = std::max(it->second.second, m);
        }
      }
      for (const auto& [cl, mm] : range) markov_gap = std::max(markov_gap, mm.second - mm.first);
    }

  // Cross-block independence of the full g*-law.
  double tv = 0.0;
  for (const auto& [key, p] : st.joint) {
    auto vals = decode_path(st, key, nodes);
    double prod = 1.0;
    std::vector<long long> bkey(st.blocks.size(), 0);
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const int i = static_cast<int>(k) % spec.N + 1;
      const int b = st.block_of[static_cast<std::size_t>(i - 1)];
      bkey[static_cast<std::size_t>(b)] = bkey[static_cast<std::size_t>(b)] * base + vals[k];
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) prod *= st.block_marg[b].at(bkey[b]);
    tv += 0.5 * std::abs(p - prod);
  }

  rep.ran = true;
  rep.context_markov_gap = markov_gap;
  rep.block_tv_gap = tv;
  rep.decomposition_ok = true;
  if (spec.model_class == "M2") {
    rep.decomposition_ok = spec.sum_l->decomposes();
    for (const auto& b : st.blocks) rep.decomposition_ok = rep.decomposition_ok && b.size() == 1;
  }
  if (spec.model_class == "M")
    rep.pass = true;  // no sufficiency requirement in the largest model
  else
    rep.pass = markov_gap <= 1e-10 && tv <= 1e-10 && rep.decomposition_ok;
  return rep;
}

}  // namespace nettrial
