#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace broil {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Every stochastic component draws from an explicitly passed engine so that
// runs are reproducible from a single seed.
using Rng = std::mt19937_64;

// Derives an independent child seed (splitmix64 finaliser).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace broil
