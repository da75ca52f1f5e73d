#pragma once

// Identity-balanced P x K mini-batches.

#include "agreid/core.hpp"

#include <map>
#include <random>

namespace agreid::harness {

class TooFewIdentities : public DataError {
 public:
  using DataError::DataError;
};

/// Sample indices grouped by identity, identities ascending.
inline std::map<int, std::vector<int>> group_by_identity(const std::vector<PersonSample>& data) {
  std::map<int, std::vector<int>> g;
  for (size_t i = 0; i < data.size(); ++i) g[data[i].identity].push_back(static_cast<int>(i));
  return g;
}

/// Batches of one epoch. Identities are shuffled and cut into groups of P;
/// the last group is topped up with other identities. Each identity draws
/// K_inst images, without replacement when it has enough.
inline std::vector<std::vector<int>> pk_sample(const std::map<int, std::vector<int>>& by_identity, int P, int K_inst,
                                               std::uint64_t seed, std::int64_t epoch) {
  if (static_cast<int>(by_identity.size()) < P)
    throw TooFewIdentities("need at least " + std::to_string(P) + " identities, have " +
                           std::to_string(by_identity.size()));
  std::mt19937_64 rng(derive_seed(seed, "pk", epoch));
  std::vector<int> ids;
  for (const auto& [id, _] : by_identity) ids.push_back(id);
  for (size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);

  std::vector<std::vector<int>> batches;
  for (size_t start = 0; start < ids.size(); start += static_cast<size_t>(P)) {
    std::vector<int> chosen(ids.begin() + static_cast<long>(start),
                            ids.begin() + static_cast<long>(std::min(ids.size(), start + static_cast<size_t>(P))));
    while (static_cast<int>(chosen.size()) < P) {
      const int candidate = ids[rng() % ids.size()];
      if (std::find(chosen.begin(), chosen.end(), candidate) == chosen.end()) chosen.push_back(candidate);
    }
    std::vector<int> batch;
    for (int id : chosen) {
      std::vector<int> pool = by_identity.at(id);
      if (static_cast<int>(pool.size()) >= K_inst) {
        for (int k = 0; k < K_inst; ++k) {
          const size_t j = static_cast<size_t>(k) + rng() % (pool.size() - static_cast<size_t>(k));
          std::swap(pool[static_cast<size_t>(k)], pool[j]);
          batch.push_back(pool[static_cast<size_t>(k)]);
        }
      } else {
        for (int k = 0; k < K_inst; ++k) batch.push_back(pool[rng() % pool.size()]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

inline std::vector<std::vector<int>> pk_sample(const std::vector<PersonSample>& data, int P, int K_inst,
                                               std::uint64_t seed, std::int64_t epoch) {
  return pk_sample(group_by_identity(data), P, K_inst, seed, epoch);
}

inline std::int64_t batches_per_epoch(std::size_t n_identities, int P) {
  return static_cast<std::int64_t>((n_identities + static_cast<std::size_t>(P) - 1) / static_cast<std::size_t>(P));
}

}  // namespace agreid::harness
