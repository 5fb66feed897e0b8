#include "nettrial/network.hpp"

#include <algorithm>

namespace nettrial {

void NetworkStructure::validate(int max_cluster_size) const {
  if (N < 1) throw ValidationError("NetworkStructure: N must be >= 1");
  if (!clusters.empty()) {
    std::vector<int> seen(static_cast<std::size_t>(N), 0);
    for (const auto& c : clusters) {
      if (c.empty()) throw ValidationError("NetworkStructure: empty cluster");
      if (max_cluster_size > 0 && static_cast<int>(c.size()) > max_cluster_size)
        throw ValidationError("NetworkStructure: cluster of size " + std::to_string(c.size()) +
                              " exceeds declared bound " + std::to_string(max_cluster_size));
      if (!std::is_sorted(c.begin(), c.end())) throw ValidationError("NetworkStructure: cluster members must be sorted");
      for (int i : c) {
        if (i < 1 || i > N) throw ValidationError("NetworkStructure: unit " + std::to_string(i) + " out of range");
        if (seen[static_cast<std::size_t>(i - 1)]++)
          throw ValidationError("NetworkStructure: unit " + std::to_string(i) + " appears in two clusters");
      }
    }
    for (int i = 1; i <= N; ++i)
      if (!seen[static_cast<std::size_t>(i - 1)])
        throw ValidationError("NetworkStructure: unit " + std::to_string(i) + " missing from the cluster partition");
  }
  if (!contacts.empty()) {
    if (static_cast<int>(contacts.size()) != N)
      throw ValidationError("NetworkStructure: contacts must list one set per unit");
    for (const auto& f : contacts) {
      if (!std::is_sorted(f.begin(), f.end()))
        throw ValidationError("NetworkStructure: contact sets must be sorted");
      for (int j : f)
        if (j < 1 || j > N) throw ValidationError("NetworkStructure: contact " + std::to_string(j) + " out of range");
    }
  }
  if (memory < 0) throw ValidationError("NetworkStructure: memory must be >= 0");
}

int NetworkStructure::cluster_of(int i) const {
  for (std::size_t k = 0; k < clusters.size(); ++k)
    for (int m : clusters[k])
      if (m == i) return static_cast<int>(k);
  throw ValidationError("NetworkStructure::cluster_of: unit " + std::to_string(i) + " not in any cluster");
}

}  // namespace nettrial
