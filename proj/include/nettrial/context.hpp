#pragma once

// Context summarizers: deterministic maps from a node's strictly-preceding
// history to an integer code in a finite context set.
//
// An L-kind summarizer feeds the transition density q(l | c): its code for
// node (t,i) may read all rounds before t, all treatments of round t, and
// the round-t measurements of units before i.  An A-kind summarizer feeds a
// design g(a | c): its code may additionally read only round-t treatments
// of units before i.  Summarizers never look ahead; simulation, exact
// enumeration and data evaluation all read history through the same code
// path, which is what makes contexts deterministic by construction.
//
// Codes are mixed-radix encodings of slot values, so every family can
// decode a code back into its slots (audit surface) and expose the slots
// as an ordinal feature vector (used by the lasso nuisance estimator).
//
// Families:
//   unit_local  — own treatment and (optionally) own previous state; the
//                 L-kind code factors as (arm, A-context), which is the
//                 structural decomposition scenario class M2 relies on.
//   cluster     — same-round earlier states within the unit's cluster, the
//                 cluster's round-t treatment vector, and the cluster's
//                 previous-round state vector.
//   household   — contact-set history passed through censoring indicators:
//                 a contact's value is visible only if the unit may meet
//                 them (own treatment = 1, or same household).
//   trivial_a   — constant A-context for context-free designs.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nettrial/core.hpp"
#include "nettrial/errors.hpp"
#include "nettrial/network.hpp"

namespace nettrial {

using json = nlohmann::json;

// Mixed-radix code <-> digit vector (digit 0 most significant).
struct MixedRadix {
  std::vector<int> radix;

  long long size() const;
  long long encode(std::span<const int> digits) const;
  std::vector<int> decode(long long code) const;
};

class ContextSummarizer {
 public:
  enum class Kind { L, A };

  virtual ~ContextSummarizer() = default;
  virtual Kind kind() const = 0;

  // Context code of node (t,i); reads only history preceding the node.
  virtual long long code(const TrialView& v, int t, int i) const = 0;

  // The full (finite) code set, a superset of what is reachable.
  virtual std::vector<long long> code_space() const = 0;

  // History depth: how many previous rounds the code may read (0 or more).
  virtual int memory() const = 0;

  virtual json descriptor() const = 0;

  // Human-readable slot decode, e.g. "size=2 rank=1 a=(0,1) lprev=(1,0)".
  virtual std::string decode(long long code) const = 0;

  // Units whose trajectories the code of node (t,i) may read (any round,
  // either letter).  Exact backends use this to decide whether a block
  // factorizes: a summarizer is block-local when read_units(i) stays
  // inside unit i's block for every i.
  virtual std::vector<int> read_units(int i) const = 0;

  // Ordinal feature embedding for nuisance regression; dim 0 = undeclared.
  virtual int feature_dim() const { return 0; }
  virtual std::vector<double> features(long long code) const;

  // L-kind structural decomposition c_L = (arm, c_A), available only for
  // families where the own arm is a dedicated slot (unit_local).
  virtual bool decomposes() const { return false; }
  virtual int arm_of(long long code) const;
  virtual long long actx_of(long long code) const;
  virtual long long compose(int arm, long long actx) const;
};

using SummarizerPtr = std::shared_ptr<const ContextSummarizer>;

// unit_local L-kind: code = l(t-1,i) * n_arms + a(t,i) with memory 1, or
// just a(t,i) with memory 0.
SummarizerPtr make_unit_local_l(int n_arms, int n_states, int memory);
// unit_local A-kind: code = l(t-1,i) with memory 1, constant 0 with memory 0.
SummarizerPtr make_unit_local_a(int n_states, int memory);

// cluster L-kind: slots (cluster size, rank, same-round states of earlier
// cluster members, cluster treatment vector, cluster previous-state
// vector), padded to the largest cluster.
SummarizerPtr make_cluster_l(int n_arms, int n_states, const NetworkStructure& net);
// cluster A-kind: slots (cluster size, rank, cluster previous-state vector).
SummarizerPtr make_cluster_a(int n_arms, int n_states, const NetworkStructure& net);

// household L-kind with censoring; treatments are binary (1 = may meet
// contacts outside the household).  memory depth is net.memory.
SummarizerPtr make_household_l(int n_states, const NetworkStructure& net);

// constant A-context.
SummarizerPtr make_trivial_a();

json summarizer_to_json(const ContextSummarizer& s);
SummarizerPtr summarizer_from_json(const json& j, const NetworkStructure& net);

// Enumerates every context code reachable at any node and any horizon, by
// driving the summarizer over all value assignments of a probe window long
// enough to contain every padding pattern (memory + 2 rounds).
std::vector<long long> enumerate_reachable_codes(const ContextSummarizer& s, int N, int n_arms, int n_states,
                                                 const std::vector<int>& initial_state);

}  // namespace nettrial
