#pragma once

// Trial data model: node indexing, the observed array, history slicing.
//
// A trial over N units and T rounds observes, in column order,
//   A(1,1..N), L(1,1..N), A(2,1..N), L(2,1..N), ..., A(T,1..N), L(T,1..N):
// all treatments of a round precede all measurements of that round, and
// units are visited in index order within each half-round.  Everything
// downstream (context summaries, enumeration, likelihood factorization)
// depends on this ordering, so it is fixed here once.
//
// Conventions:
//   - t and i are 1-based throughout the public interface.
//   - Treatments take values in {0, ..., n_arms-1}, measurements in
//     {0, ..., n_states-1}.
//   - Round-1 histories are padded with a declared per-unit initial state:
//     l(0,i) reads as the initial state, a(0,i) reads as arm 0.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "nettrial/errors.hpp"

namespace nettrial {

struct NodeId {
  int t = 1;  // round, 1..T
  int i = 1;  // unit, 1..N
};

// Linear index of a node within one letter's sequence: k = (t-1)*N + i,
// 1-based, so A(t,i) is the k-th treatment node and L(t,i) the k-th
// measurement node.
long long column_index(NodeId node, int N);
NodeId node_from_index(long long k, int N);

// The observed array O^{T,N}.  A and L are stored row-major over (t,i).
struct TrialData {
  int N = 0;
  int T = 0;
  std::vector<int> A;  // size T*N
  std::vector<int> L;  // size T*N

  TrialData() = default;
  TrialData(int N_, int T_) : N(N_), T(T_), A(static_cast<std::size_t>(N_) * T_, 0), L(static_cast<std::size_t>(N_) * T_, 0) {
    if (N_ <= 0 || T_ < 0) throw ValidationError("TrialData: N must be >= 1 and T >= 0");
  }

  int a(int t, int i) const { return A[flat(t, i)]; }
  int l(int t, int i) const { return L[flat(t, i)]; }
  void set_a(int t, int i, int v) { A[flat(t, i)] = v; }
  void set_l(int t, int i, int v) { L[flat(t, i)] = v; }

  std::size_t flat(int t, int i) const {
    if (t < 1 || t > T || i < 1 || i > N)
      throw ValidationError("TrialData: node (" + std::to_string(t) + "," + std::to_string(i) + ") out of range");
    return static_cast<std::size_t>(t - 1) * N + (i - 1);
  }

  // Verifies every value lies in the declared supports.
  void validate_supports(int n_arms, int n_states) const;
};

// Read-only window over a trial prefix with round-0 padding.  Summarizers
// and simulators read history exclusively through this view, so the padding
// rule lives in exactly one place.  `upto_t`/`upto_half`/`upto_i` record how
// much of the trial is filled in (used by enumeration over partial paths);
// accessors trust the caller to respect column order and only bound-check
// the round range.
struct TrialView {
  const TrialData* data = nullptr;
  const std::vector<int>* initial_state = nullptr;  // per unit, round-0 L

  int l(int t, int i) const {
    if (t <= 0) return (*initial_state)[static_cast<std::size_t>(i - 1)];
    return data->l(t, i);
  }
  int a(int t, int i) const {
    if (t <= 0) return 0;  // pre-trial padding: no-treatment arm
    return data->a(t, i);
  }
};

// History slices per the column order:
//   A-past of (t,i): all of rounds 1..t-1 plus A(t,1..i-1).
//   L-past of (t,i): all of rounds 1..t-1 plus A(t,1..N) plus L(t,1..i-1).
// Returned as (is_treatment, t, i, value) tuples in column order; mainly a
// test and audit surface — hot paths read through TrialView directly.
struct HistoryEntry {
  bool is_treatment = false;
  int t = 0;
  int i = 0;
  int value = 0;
};
enum class HistoryKind { APast, LPast };
std::vector<HistoryEntry> history_views(const TrialData& data, NodeId node, HistoryKind kind);

// CSV serialization with columns (t,i,a,l), one row per node pair, written
// in column order.  Round-trips exactly (values are small integers).
void write_trial_csv(const TrialData& data, std::ostream& os);
TrialData read_trial_csv(std::istream& is);
void write_trial_csv_file(const TrialData& data, const std::string& path);
TrialData read_trial_csv_file(const std::string& path);

}  // namespace nettrial
