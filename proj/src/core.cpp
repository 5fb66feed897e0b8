#include "nettrial/core.hpp"

#include <fstream>
#include <sstream>

namespace nettrial {

long long column_index(NodeId node, int N) {
  if (N < 1) throw ValidationError("column_index: N must be >= 1");
  if (node.t < 1 || node.i < 1 || node.i > N)
    throw ValidationError("column_index: node (" + std::to_string(node.t) + "," + std::to_string(node.i) +
                          ") out of range for N=" + std::to_string(N));
  return static_cast<long long>(node.t - 1) * N + node.i;
}

NodeId node_from_index(long long k, int N) {
  if (N < 1) throw ValidationError("node_from_index: N must be >= 1");
  if (k < 1) throw ValidationError("node_from_index: k must be >= 1");
  NodeId node;
  node.t = static_cast<int>((k - 1) / N) + 1;
  node.i = static_cast<int>((k - 1) % N) + 1;
  return node;
}

void TrialData::validate_supports(int n_arms, int n_states) const {
  for (int t = 1; t <= T; ++t) {
    for (int i = 1; i <= N; ++i) {
      const int av = a(t, i);
      const int lv = l(t, i);
      if (av < 0 || av >= n_arms)
        throw ModelMismatchError("treatment value " + std::to_string(av) + " at (" + std::to_string(t) + "," +
                                 std::to_string(i) + ") outside arm support of size " + std::to_string(n_arms));
      if (lv < 0 || lv >= n_states)
        throw ModelMismatchError("measurement value " + std::to_string(lv) + " at (" + std::to_string(t) + "," +
                                 std::to_string(i) + ") outside state support of size " + std::to_string(n_states));
    }
  }
}

std::vector<HistoryEntry> history_views(const TrialData& data, NodeId node, HistoryKind kind) {
  if (node.t < 1 || node.t > data.T || node.i < 1 || node.i > data.N)
    throw ValidationError("history_views: node out of range");
  std::vector<HistoryEntry> out;
  // Full rounds before t.
  for (int t = 1; t < node.t; ++t) {
    for (int i = 1; i <= data.N; ++i) out.push_back({true, t, i, data.a(t, i)});
    for (int i = 1; i <= data.N; ++i) out.push_back({false, t, i, data.l(t, i)});
  }
  if (kind == HistoryKind::APast) {
    for (int i = 1; i < node.i; ++i) out.push_back({true, node.t, i, data.a(node.t, i)});
  } else {
    for (int i = 1; i <= data.N; ++i) out.push_back({true, node.t, i, data.a(node.t, i)});
    for (int i = 1; i < node.i; ++i) out.push_back({false, node.t, i, data.l(node.t, i)});
  }
  return out;
}

void write_trial_csv(const TrialData& data, std::ostream& os) {
  os << "t,i,a,l\n";
  for (int t = 1; t <= data.T; ++t)
    for (int i = 1; i <= data.N; ++i)
      os << t << ',' << i << ',' << data.a(t, i) << ',' << data.l(t, i) << '\n';
}

TrialData read_trial_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("trial csv: empty input");
  if (line != "t,i,a,l" && line != "t,i,a,l\r")
    throw ValidationError("trial csv: unexpected header '" + line + "'");
  struct Row {
    int t, i, a, l;
  };
  std::vector<Row> rows;
  int maxT = 0, maxN = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    Row r{};
    char c1, c2, c3;
    std::istringstream ss(line);
    if (!(ss >> r.t >> c1 >> r.i >> c2 >> r.a >> c3 >> r.l) || c1 != ',' || c2 != ',' || c3 != ',')
      throw ValidationError("trial csv: malformed row '" + line + "'");
    rows.push_back(r);
    maxT = std::max(maxT, r.t);
    maxN = std::max(maxN, r.i);
  }
  if (rows.empty()) throw ValidationError("trial csv: no data rows");
  TrialData data(maxN, maxT);
  std::vector<char> seen(rows.size(), 0);
  std::vector<char> filled(static_cast<std::size_t>(maxT) * maxN, 0);
  for (const auto& r : rows) {
    if (r.t < 1 || r.t > maxT || r.i < 1 || r.i > maxN)
      throw ValidationError("trial csv: node out of range");
    const std::size_t f = static_cast<std::size_t>(r.t - 1) * maxN + (r.i - 1);
    if (filled[f]) throw ValidationError("trial csv: duplicate node row");
    filled[f] = 1;
    data.set_a(r.t, r.i, r.a);
    data.set_l(r.t, r.i, r.l);
  }
  for (char f : filled)
    if (!f) throw ValidationError("trial csv: missing node rows (array must be fully populated)");
  return data;
}

void write_trial_csv_file(const TrialData& data, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot open for writing: " + path);
  write_trial_csv(data, os);
}

TrialData read_trial_csv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open for reading: " + path);
  return read_trial_csv(is);
}

}  // namespace nettrial
