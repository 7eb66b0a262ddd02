#pragma once

#include <random>
#include <vector>

#include "mmpid/info.hpp"

namespace mmpid::testing {

// Random joint with exponential weights; about one cell in `sparsity` is zero.
inline JointPmf random_joint(std::mt19937_64& rng, std::size_t n1, std::size_t n2, std::size_t k,
                             int sparsity = 0) {
  std::exponential_distribution<double> w(1.0);
  std::uniform_int_distribution<int> drop(0, sparsity > 0 ? sparsity - 1 : 0);
  std::vector<double> t(n1 * n2 * k);
  for (auto& v : t) v = (sparsity > 0 && drop(rng) == 0) ? 0.0 : w(rng);
  t[0] += 1e-3;
  return JointPmf::from_weights(n1, n2, k, std::move(t));
}

// Same joint with Y labels relabelled by perm.
inline JointPmf permute_labels(const JointPmf& p, const std::vector<std::size_t>& perm) {
  std::vector<double> t(p.table().size());
  for (std::size_t a = 0; a < p.n1(); ++a)
    for (std::size_t b = 0; b < p.n2(); ++b)
      for (std::size_t y = 0; y < p.k(); ++y) t[p.index(a, b, perm[y])] = p(a, b, y);
  return JointPmf(p.n1(), p.n2(), p.k(), std::move(t));
}

}  // namespace mmpid::testing
