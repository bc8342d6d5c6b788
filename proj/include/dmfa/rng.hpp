#pragma once

// Seeded random streams. Every consumer derives its own engine from the
// user seed plus a stream name, so adding a consumer never shifts the draws
// seen by another.

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace dmfa {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char ch : stream) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + splitmix64(index));
}

inline Engine make_engine(std::uint64_t seed, std::string_view stream,
                          std::uint64_t index = 0) {
  return Engine(derive_seed(seed, stream, index));
}

inline Eigen::VectorXd standard_normal_vector(Engine& rng, Eigen::Index n) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

/// Fills a rows x cols matrix in row-major draw order.
inline Eigen::MatrixXd standard_normal_matrix(Engine& rng, Eigen::Index rows,
                                              Eigen::Index cols) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

}  // namespace dmfa
