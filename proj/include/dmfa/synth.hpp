#pragma once

// Ground-truth generators for recovery and likelihood experiments.

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dmfa/dataset.hpp"
#include "dmfa/deep.hpp"
#include "dmfa/model.hpp"
#include "dmfa/rng.hpp"

namespace dmfa {

/// Shape of a random two-layer generator. children == 0 gives a plain MFA.
struct HierRecipe {
  int dim = 16;
  int components = 3;
  int factors = 4;
  int children = 3;        // K per first-layer component
  int child_factors = 1;
  double mean_spread = 4.0;    // std of first-layer means
  double loading_scale = 1.0;  // std of first-layer loading entries
  double noise = 0.1;          // first-layer noise variance (jittered by U[0.5, 1.5])
  double child_spread = 2.5;   // std of child means in factor space
  double child_loading = 0.4;
  double child_noise = 0.05;
};

inline DmfaNodePtr make_ground_truth(const HierRecipe& r, std::uint64_t seed) {
  if (r.dim < 1 || r.components < 1 || r.factors < 1 || r.children < 0 || r.child_factors < 1)
    throw std::invalid_argument("make_ground_truth: invalid recipe");
  Engine rng = make_engine(seed, "ground-truth");
  std::uniform_real_distribution<double> jitter(0.5, 1.5);
  auto jittered = [&](Index n, double base) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = base * jitter(rng);
    return v;
  };
  std::vector<FactorAnalyser> top;
  std::vector<DmfaNodePtr> children;
  for (int c = 0; c < r.components; ++c) {
    Matrix w = r.loading_scale * standard_normal_matrix(rng, r.dim, r.factors);
    Vector mu = r.mean_spread * standard_normal_vector(rng, r.dim);
    top.emplace_back(std::move(w), std::move(mu), jittered(r.dim, r.noise));
    if (r.children == 0) {
      children.push_back(nullptr);
      continue;
    }
    std::vector<FactorAnalyser> sub;
    for (int k = 0; k < r.children; ++k) {
      Matrix w2 = r.child_loading * standard_normal_matrix(rng, r.factors, r.child_factors);
      Vector mu2 = r.child_spread * standard_normal_vector(rng, r.factors);
      sub.emplace_back(std::move(w2), std::move(mu2), jittered(r.factors, r.child_noise));
    }
    children.push_back(std::make_shared<const DmfaNode>(
        MfaModel::from_weights(std::move(sub), Vector::Ones(r.children))));
  }
  MfaModel layer = MfaModel::from_weights(std::move(top), Vector::Ones(r.components));
  return std::make_shared<const DmfaNode>(std::move(layer), std::move(children));
}

struct HierSample {
  Dataset data;
  DmfaNodePtr truth;
};

/// Ancestral samples from a known tree, returned with the generator.
inline HierSample synth_hier(DmfaNodePtr truth, Index n, std::uint64_t seed) {
  if (!truth) throw std::invalid_argument("synth_hier: null generator");
  Dataset data = sample(*truth, n, derive_seed(seed, "synth-hier"));
  return {std::move(data), std::move(truth)};
}

inline HierSample synth_hier(const HierRecipe& recipe, Index n, std::uint64_t seed) {
  return synth_hier(make_ground_truth(recipe, seed), n, seed);
}

}  // namespace dmfa
