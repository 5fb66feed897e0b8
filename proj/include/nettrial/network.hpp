#pragma once

// Network structure over units: clusters (a partition used by cluster-MDP
// and household scenarios), optional per-unit contact sets, and the history
// memory depth shared by the scenario's summarizers.

#include <string>
#include <vector>

#include "nettrial/errors.hpp"

namespace nettrial {

struct NetworkStructure {
  int N = 0;
  // Partition of {1..N}; may be empty when the scenario has no cluster
  // structure.  Member lists are kept sorted ascending.
  std::vector<std::vector<int>> clusters;
  // Per-unit contact sets F(i) (sorted ascending, 1-based), empty when
  // unused.  contacts[i-1] lists the units whose history unit i's
  // measurement may depend on.
  std::vector<std::vector<int>> contacts;
  // History depth t0 of the summarizers built on this network.
  int memory = 1;

  // Validates the partition property (every unit in exactly one cluster)
  // when clusters are declared, contact-set ranges, and the cluster size
  // bound when one is given (0 = unbounded).
  void validate(int max_cluster_size = 0) const;

  // Cluster id (0-based) of unit i; requires clusters declared.
  int cluster_of(int i) const;
};

}  // namespace nettrial
