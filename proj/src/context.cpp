#include "nettrial/context.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace nettrial {

namespace {

std::string join_ints(const std::vector<int>& v, std::size_t begin, std::size_t count) {
  std::ostringstream os;
  os << "(";
  for (std::size_t k = 0; k < count; ++k) {
    if (k) os << ",";
    os << v[begin + k];
  }
  os << ")";
  return os.str();
}

// Censored-slot rendering: digit 0 is "not visible", digit 1+v is value v.
std::string join_censored(const std::vector<int>& v, std::size_t begin, std::size_t count) {
  std::ostringstream os;
  os << "(";
  for (std::size_t k = 0; k < count; ++k) {
    if (k) os << ",";
    int d = v[begin + k];
    if (d == 0)
      os << "x";
    else
      os << (d - 1);
  }
  os << ")";
  return os.str();
}

}  // namespace

long long MixedRadix::size() const {
  long long s = 1;
  for (int r : radix) {
    if (r <= 0) throw ValidationError("MixedRadix: radix entries must be positive");
    if (s > (1LL << 62) / r) throw ValidationError("MixedRadix: code space overflows 63 bits");
    s *= r;
  }
  return s;
}

long long MixedRadix::encode(std::span<const int> digits) const {
  if (digits.size() != radix.size()) throw ValidationError("MixedRadix: digit count does not match radix count");
  long long code = 0;
  for (std::size_t k = 0; k < radix.size(); ++k) {
    int d = digits[k];
    if (d < 0 || d >= radix[k])
      throw ValidationError("MixedRadix: digit " + std::to_string(d) + " out of range for radix " +
                            std::to_string(radix[k]));
    code = code * radix[k] + d;
  }
  return code;
}

std::vector<int> MixedRadix::decode(long long code) const {
  if (code < 0 || code >= size()) throw ValidationError("MixedRadix: code out of range");
  std::vector<int> digits(radix.size(), 0);
  for (std::size_t k = radix.size(); k-- > 0;) {
    digits[k] = static_cast<int>(code % radix[k]);
    code /= radix[k];
  }
  return digits;
}

std::vector<double> ContextSummarizer::features(long long) const {
  throw UnsupportedError("this summarizer declares no feature embedding");
}
int ContextSummarizer::arm_of(long long) const {
  throw UnsupportedError("this summarizer does not decompose into (arm, A-context)");
}
long long ContextSummarizer::actx_of(long long) const {
  throw UnsupportedError("this summarizer does not decompose into (arm, A-context)");
}
long long ContextSummarizer::compose(int, long long) const {
  throw UnsupportedError("this summarizer does not decompose into (arm, A-context)");
}

namespace {

// ---------------------------------------------------------------------------
// unit_local

class UnitLocalL final : public ContextSummarizer {
 public:
  UnitLocalL(int n_arms, int n_states, int memory) : n_arms_(n_arms), n_states_(n_states), memory_(memory) {
    if (n_arms < 1 || n_states < 1) throw ValidationError("unit_local: n_arms and n_states must be >= 1");
    if (memory != 0 && memory != 1) throw ValidationError("unit_local: memory must be 0 or 1");
  }

  Kind kind() const override { return Kind::L; }
  int memory() const override { return memory_; }
  std::vector<int> read_units(int i) const override { return {i}; }

  long long code(const TrialView& v, int t, int i) const override {
    if (memory_ == 0) return v.a(t, i);
    return static_cast<long long>(v.l(t - 1, i)) * n_arms_ + v.a(t, i);
  }

  std::vector<long long> code_space() const override {
    long long n = memory_ == 0 ? n_arms_ : static_cast<long long>(n_states_) * n_arms_;
    std::vector<long long> out(static_cast<std::size_t>(n));
    for (long long c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] = c;
    return out;
  }

  std::string decode(long long c) const override {
    std::ostringstream os;
    if (memory_ == 0) {
      os << "a=" << c;
    } else {
      os << "lprev=" << c / n_arms_ << " a=" << c % n_arms_;
    }
    return os.str();
  }

  int feature_dim() const override { return memory_ == 0 ? 1 : 2; }
  std::vector<double> features(long long c) const override {
    if (memory_ == 0) return {static_cast<double>(c)};
    return {static_cast<double>(c / n_arms_), static_cast<double>(c % n_arms_)};
  }

  bool decomposes() const override { return true; }
  int arm_of(long long c) const override { return static_cast<int>(memory_ == 0 ? c : c % n_arms_); }
  long long actx_of(long long c) const override { return memory_ == 0 ? 0 : c / n_arms_; }
  long long compose(int arm, long long actx) const override {
    if (arm < 0 || arm >= n_arms_) throw ValidationError("unit_local: arm out of range");
    if (memory_ == 0) {
      if (actx != 0) throw ValidationError("unit_local: memory-0 A-context must be 0");
      return arm;
    }
    if (actx < 0 || actx >= n_states_) throw ValidationError("unit_local: A-context out of range");
    return actx * n_arms_ + arm;
  }

  json descriptor() const override {
    return json{{"family", "unit_local"}, {"kind", "L"}, {"n_arms", n_arms_}, {"n_states", n_states_}, {"memory", memory_}};
  }

 private:
  int n_arms_;
  int n_states_;
  int memory_;
};

class UnitLocalA final : public ContextSummarizer {
 public:
  UnitLocalA(int n_states, int memory) : n_states_(n_states), memory_(memory) {
    if (n_states < 1) throw ValidationError("unit_local: n_states must be >= 1");
    if (memory != 0 && memory != 1) throw ValidationError("unit_local: memory must be 0 or 1");
  }

  Kind kind() const override { return Kind::A; }
  int memory() const override { return memory_; }
  std::vector<int> read_units(int i) const override { return memory_ == 0 ? std::vector<int>{} : std::vector<int>{i}; }

  long long code(const TrialView& v, int t, int i) const override {
    return memory_ == 0 ? 0 : v.l(t - 1, i);
  }

  std::vector<long long> code_space() const override {
    long long n = memory_ == 0 ? 1 : n_states_;
    std::vector<long long> out(static_cast<std::size_t>(n));
    for (long long c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] = c;
    return out;
  }

  std::string decode(long long c) const override {
    if (memory_ == 0) return "const";
    return "lprev=" + std::to_string(c);
  }

  int feature_dim() const override { return memory_ == 0 ? 0 : 1; }
  std::vector<double> features(long long c) const override {
    if (memory_ == 0) throw UnsupportedError("constant A-context has no features");
    return {static_cast<double>(c)};
  }

  json descriptor() const override {
    return json{{"family", "unit_local"}, {"kind", "A"}, {"n_states", n_states_}, {"memory", memory_}};
  }

 private:
  int n_states_;
  int memory_;
};

// ---------------------------------------------------------------------------
// cluster

struct ClusterIndex {
  std::vector<int> cluster_of;        // unit (0-based) -> cluster id
  std::vector<int> rank_of;           // unit (0-based) -> position within cluster
  std::vector<std::vector<int>> members;  // sorted unit ids (1-based)
  int max_size = 0;

  explicit ClusterIndex(const NetworkStructure& net) {
    if (net.clusters.empty())
      throw ValidationError("cluster summarizer requires a declared cluster partition");
    net.validate();
    members = net.clusters;
    cluster_of.assign(static_cast<std::size_t>(net.N), -1);
    rank_of.assign(static_cast<std::size_t>(net.N), -1);
    for (std::size_t b = 0; b < members.size(); ++b) {
      max_size = std::max(max_size, static_cast<int>(members[b].size()));
      for (std::size_t k = 0; k < members[b].size(); ++k) {
        cluster_of[static_cast<std::size_t>(members[b][k] - 1)] = static_cast<int>(b);
        rank_of[static_cast<std::size_t>(members[b][k] - 1)] = static_cast<int>(k);
      }
    }
  }
};

class ClusterL final : public ContextSummarizer {
 public:
  ClusterL(int n_arms, int n_states, const NetworkStructure& net)
      : n_arms_(n_arms), n_states_(n_states), idx_(net) {
    if (n_arms < 1 || n_states < 1) throw ValidationError("cluster: n_arms and n_states must be >= 1");
    int m = idx_.max_size;
    radix_.radix.assign(2, m);                                    // size-1, rank
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>(m - 1), n_states);  // same-round states
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>(m), n_arms);        // treatment vector
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>(m), n_states);      // previous-state vector
  }

  Kind kind() const override { return Kind::L; }
  int memory() const override { return 1; }
  std::vector<int> read_units(int i) const override {
    return idx_.members[static_cast<std::size_t>(idx_.cluster_of[static_cast<std::size_t>(i - 1)])];
  }

  long long code(const TrialView& v, int t, int i) const override {
    const auto& ms = idx_.members[static_cast<std::size_t>(idx_.cluster_of[static_cast<std::size_t>(i - 1)])];
    int m = static_cast<int>(ms.size());
    int r = idx_.rank_of[static_cast<std::size_t>(i - 1)];
    int maxM = idx_.max_size;
    std::vector<int> d;
    d.reserve(radix_.radix.size());
    d.push_back(m - 1);
    d.push_back(r);
    for (int k = 0; k < maxM - 1; ++k) d.push_back(k < r ? v.l(t, ms[static_cast<std::size_t>(k)]) : 0);
    for (int k = 0; k < maxM; ++k) d.push_back(k < m ? v.a(t, ms[static_cast<std::size_t>(k)]) : 0);
    for (int k = 0; k < maxM; ++k) d.push_back(k < m ? v.l(t - 1, ms[static_cast<std::size_t>(k)]) : 0);
    return radix_.encode(d);
  }

  std::vector<long long> code_space() const override {
    long long n = radix_.size();
    std::vector<long long> out(static_cast<std::size_t>(n));
    for (long long c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] = c;
    return out;
  }

  std::string decode(long long c) const override {
    auto d = radix_.decode(c);
    int m = d[0] + 1;
    int r = d[1];
    int maxM = idx_.max_size;
    std::ostringstream os;
    os << "size=" << m << " rank=" << r << " now=" << join_ints(d, 2, static_cast<std::size_t>(r)) << " a="
       << join_ints(d, static_cast<std::size_t>(2 + (maxM - 1)), static_cast<std::size_t>(m)) << " lprev="
       << join_ints(d, static_cast<std::size_t>(2 + (maxM - 1) + maxM), static_cast<std::size_t>(m));
    return os.str();
  }

  int feature_dim() const override { return static_cast<int>(radix_.radix.size()); }
  std::vector<double> features(long long c) const override {
    auto d = radix_.decode(c);
    return std::vector<double>(d.begin(), d.end());
  }

  json descriptor() const override {
    return json{{"family", "cluster"}, {"kind", "L"}, {"n_arms", n_arms_}, {"n_states", n_states_}};
  }

 private:
  int n_arms_;
  int n_states_;
  ClusterIndex idx_;
  MixedRadix radix_;
};

class ClusterA final : public ContextSummarizer {
 public:
  ClusterA(int n_arms, int n_states, const NetworkStructure& net)
      : n_arms_(n_arms), n_states_(n_states), idx_(net) {
    if (n_arms < 1 || n_states < 1) throw ValidationError("cluster: n_arms and n_states must be >= 1");
    int m = idx_.max_size;
    radix_.radix.assign(2, m);  // size-1, rank
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>(m), n_states);  // previous-state vector
  }

  Kind kind() const override { return Kind::A; }
  int memory() const override { return 1; }
  std::vector<int> read_units(int i) const override {
    return idx_.members[static_cast<std::size_t>(idx_.cluster_of[static_cast<std::size_t>(i - 1)])];
  }

  long long code(const TrialView& v, int t, int i) const override {
    const auto& ms = idx_.members[static_cast<std::size_t>(idx_.cluster_of[static_cast<std::size_t>(i - 1)])];
    int m = static_cast<int>(ms.size());
    int r = idx_.rank_of[static_cast<std::size_t>(i - 1)];
    int maxM = idx_.max_size;
    std::vector<int> d;
    d.reserve(radix_.radix.size());
    d.push_back(m - 1);
    d.push_back(r);
    for (int k = 0; k < maxM; ++k) d.push_back(k < m ? v.l(t - 1, ms[static_cast<std::size_t>(k)]) : 0);
    return radix_.encode(d);
  }

  std::vector<long long> code_space() const override {
    long long n = radix_.size();
    std::vector<long long> out(static_cast<std::size_t>(n));
    for (long long c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] = c;
    return out;
  }

  std::string decode(long long c) const override {
    auto d = radix_.decode(c);
    int m = d[0] + 1;
    std::ostringstream os;
    os << "size=" << m << " rank=" << d[1] << " lprev=" << join_ints(d, 2, static_cast<std::size_t>(m));
    return os.str();
  }

  int feature_dim() const override { return static_cast<int>(radix_.radix.size()); }
  std::vector<double> features(long long c) const override {
    auto d = radix_.decode(c);
    return std::vector<double>(d.begin(), d.end());
  }

  json descriptor() const override {
    return json{{"family", "cluster"}, {"kind", "A"}, {"n_arms", n_arms_}, {"n_states", n_states_}};
  }

 private:
  int n_arms_;
  int n_states_;
  ClusterIndex idx_;
  MixedRadix radix_;
};

// ---------------------------------------------------------------------------
// household with censoring

class HouseholdL final : public ContextSummarizer {
 public:
  HouseholdL(int n_states, const NetworkStructure& net) : n_states_(n_states), net_(net) {
    if (n_states < 1) throw ValidationError("household: n_states must be >= 1");
    if (net.clusters.empty()) throw ValidationError("household summarizer requires a household partition");
    if (net.contacts.empty()) throw ValidationError("household summarizer requires contact lists");
    if (net.memory < 1) throw ValidationError("household summarizer requires memory >= 1");
    net.validate();
    t0_ = net.memory;
    household_of_.assign(static_cast<std::size_t>(net.N), -1);
    for (std::size_t b = 0; b < net.clusters.size(); ++b)
      for (int u : net.clusters[b]) household_of_[static_cast<std::size_t>(u - 1)] = static_cast<int>(b);
    max_f_ = 0;
    for (const auto& f : net.contacts) max_f_ = std::max(max_f_, static_cast<int>(f.size()));
    radix_.radix.assign(2, max_f_ + 1);  // contact count, count of earlier contacts
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>(max_f_), n_states + 1);  // same-round states
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>((t0_ + 1) * max_f_), 3);  // treatments (binary, censored)
    radix_.radix.insert(radix_.radix.end(), static_cast<std::size_t>(t0_ * max_f_), n_states + 1);  // past states
  }

  Kind kind() const override { return Kind::L; }
  int memory() const override { return t0_; }
  std::vector<int> read_units(int i) const override { return net_.contacts[static_cast<std::size_t>(i - 1)]; }

  long long code(const TrialView& v, int t, int i) const override {
    const auto& F = net_.contacts[static_cast<std::size_t>(i - 1)];
    int f = static_cast<int>(F.size());
    int r = static_cast<int>(std::lower_bound(F.begin(), F.end(), i) - F.begin());
    std::vector<int> d;
    d.reserve(radix_.radix.size());
    d.push_back(f);
    d.push_back(r);
    for (int k = 0; k < max_f_; ++k)
      d.push_back(k < r && visible(v, t, i, F[static_cast<std::size_t>(k)]) ? v.l(t, F[static_cast<std::size_t>(k)]) + 1 : 0);
    for (int s = t - t0_; s <= t; ++s)
      for (int k = 0; k < max_f_; ++k)
        d.push_back(k < f && visible(v, s, i, F[static_cast<std::size_t>(k)]) ? v.a(s, F[static_cast<std::size_t>(k)]) + 1 : 0);
    for (int s = t - t0_; s <= t - 1; ++s)
      for (int k = 0; k < max_f_; ++k)
        d.push_back(k < f && visible(v, s, i, F[static_cast<std::size_t>(k)]) ? v.l(s, F[static_cast<std::size_t>(k)]) + 1 : 0);
    return radix_.encode(d);
  }

  std::vector<long long> code_space() const override {
    long long n = radix_.size();
    std::vector<long long> out(static_cast<std::size_t>(n));
    for (long long c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] = c;
    return out;
  }

  std::string decode(long long c) const override {
    auto d = radix_.decode(c);
    int f = d[0];
    std::ostringstream os;
    os << "f=" << f << " r=" << d[1] << " now=" << join_censored(d, 2, static_cast<std::size_t>(d[1]));
    std::size_t base = static_cast<std::size_t>(2 + max_f_);
    for (int s = -t0_; s <= 0; ++s) {
      os << " a[" << s << "]=" << join_censored(d, base, static_cast<std::size_t>(f));
      base += static_cast<std::size_t>(max_f_);
    }
    for (int s = -t0_; s <= -1; ++s) {
      os << " l[" << s << "]=" << join_censored(d, base, static_cast<std::size_t>(f));
      base += static_cast<std::size_t>(max_f_);
    }
    return os.str();
  }

  int feature_dim() const override { return static_cast<int>(radix_.radix.size()); }
  std::vector<double> features(long long c) const override {
    auto d = radix_.decode(c);
    return std::vector<double>(d.begin(), d.end());
  }

  json descriptor() const override {
    return json{{"family", "household"}, {"kind", "L"}, {"n_states", n_states_}, {"memory", t0_}};
  }

 private:
  // A contact's round-s value is visible iff this unit mixes beyond its
  // household that round (treatment 1) or the contact shares its household.
  bool visible(const TrialView& v, int s, int i, int j) const {
    if (v.a(s, i) == 1) return true;
    return household_of_[static_cast<std::size_t>(i - 1)] == household_of_[static_cast<std::size_t>(j - 1)];
  }

  int n_states_;
  NetworkStructure net_;
  int t0_ = 1;
  int max_f_ = 0;
  std::vector<int> household_of_;
  MixedRadix radix_;
};

// ---------------------------------------------------------------------------
// trivial A-context

class TrivialA final : public ContextSummarizer {
 public:
  Kind kind() const override { return Kind::A; }
  int memory() const override { return 0; }
  std::vector<int> read_units(int) const override { return {}; }
  long long code(const TrialView&, int, int) const override { return 0; }
  std::vector<long long> code_space() const override { return {0}; }
  std::string decode(long long) const override { return "const"; }
  json descriptor() const override { return json{{"family", "trivial"}, {"kind", "A"}}; }
};

}  // namespace

SummarizerPtr make_unit_local_l(int n_arms, int n_states, int memory) {
  return std::make_shared<UnitLocalL>(n_arms, n_states, memory);
}
SummarizerPtr make_unit_local_a(int n_states, int memory) {
  return std::make_shared<UnitLocalA>(n_states, memory);
}
SummarizerPtr make_cluster_l(int n_arms, int n_states, const NetworkStructure& net) {
  return std::make_shared<ClusterL>(n_arms, n_states, net);
}
SummarizerPtr make_cluster_a(int n_arms, int n_states, const NetworkStructure& net) {
  return std::make_shared<ClusterA>(n_arms, n_states, net);
}
SummarizerPtr make_household_l(int n_states, const NetworkStructure& net) {
  return std::make_shared<HouseholdL>(n_states, net);
}
SummarizerPtr make_trivial_a() { return std::make_shared<TrivialA>(); }

json summarizer_to_json(const ContextSummarizer& s) { return s.descriptor(); }

SummarizerPtr summarizer_from_json(const json& j, const NetworkStructure& net) {
  const std::string family = j.at("family").get<std::string>();
  const std::string kind = j.at("kind").get<std::string>();
  if (family == "unit_local" && kind == "L")
    return make_unit_local_l(j.at("n_arms").get<int>(), j.at("n_states").get<int>(), j.at("memory").get<int>());
  if (family == "unit_local" && kind == "A")
    return make_unit_local_a(j.at("n_states").get<int>(), j.at("memory").get<int>());
  if (family == "cluster" && kind == "L")
    return make_cluster_l(j.at("n_arms").get<int>(), j.at("n_states").get<int>(), net);
  if (family == "cluster" && kind == "A")
    return make_cluster_a(j.at("n_arms").get<int>(), j.at("n_states").get<int>(), net);
  if (family == "household" && kind == "L") return make_household_l(j.at("n_states").get<int>(), net);
  if (family == "trivial" && kind == "A") return make_trivial_a();
  throw UnsupportedError("unknown summarizer family/kind: " + family + "/" + kind);
}

namespace {

void probe_rec(const ContextSummarizer& s, TrialData& data, const TrialView& v, int pos, int N, int T, int n_arms,
               int n_states, std::set<long long>& out) {
  if (pos == 2 * N * T) return;
  int half = pos / N;
  int t = half / 2 + 1;
  bool is_treatment = (half % 2 == 0);
  int i = pos % N + 1;
  if ((is_treatment && s.kind() == ContextSummarizer::Kind::A) ||
      (!is_treatment && s.kind() == ContextSummarizer::Kind::L))
    out.insert(s.code(v, t, i));
  int support = is_treatment ? n_arms : n_states;
  for (int val = 0; val < support; ++val) {
    if (is_treatment)
      data.set_a(t, i, val);
    else
      data.set_l(t, i, val);
    probe_rec(s, data, v, pos + 1, N, T, n_arms, n_states, out);
  }
}

}  // namespace

std::vector<long long> enumerate_reachable_codes(const ContextSummarizer& s, int N, int n_arms, int n_states,
                                                 const std::vector<int>& initial_state) {
  if (static_cast<int>(initial_state.size()) != N)
    throw ValidationError("enumerate_reachable_codes: initial state must have one entry per unit");
  for (int v : initial_state)
    if (v < 0 || v >= n_states) throw ValidationError("enumerate_reachable_codes: initial state out of support");
  int T = s.memory() + 2;
  double branches = std::pow(static_cast<double>(n_arms) * n_states, static_cast<double>(N) * T);
  if (branches > 2e7)
    throw BudgetError("enumerate_reachable_codes: probe would branch over " + std::to_string(branches) +
                      " assignments; enumerate on a reduced network instead");
  TrialData data(N, T);
  TrialView view{&data, &initial_state};
  std::set<long long> codes;
  probe_rec(s, data, view, 0, N, T, n_arms, n_states, codes);
  return std::vector<long long>(codes.begin(), codes.end());
}

}  // namespace nettrial
