#pragma once

#include <stdexcept>

#include "compdis/tensor.hpp"

namespace compdis {

// K latent slots of dimension D; the first M slots carry attribute factors,
// the remaining K-M carry object factors. M=K is a pure attribute layout,
// M=0 a pure object layout.
struct FactorLayout {
  int K = 1;
  int M = 1;
  int D = 1;

  void validate() const {
    if (K < 1 || D < 1 || M < 0 || M > K)
      throw std::invalid_argument("FactorLayout: need K>=1, D>=1, 0<=M<=K");
  }
  bool operator==(const FactorLayout& o) const { return K == o.K && M == o.M && D == o.D; }
  int object_slots() const { return K - M; }
};

struct LatentSet {
  Tensor vectors;  // (K, D)
  FactorLayout layout;

  void validate() const {
    layout.validate();
    if (vectors.rank() != 2 || vectors.dim(0) != layout.K || vectors.dim(1) != layout.D)
      throw std::invalid_argument("LatentSet: vectors must be (K,D)");
    if (!vectors.all_finite()) throw std::invalid_argument("LatentSet: non-finite entries");
  }
};

}  // namespace compdis
