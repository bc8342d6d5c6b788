#pragma once

// Deep mixtures of factor analysers.
//
// A DmfaNode is an MFA whose component c may replace its N(0, I) factor
// prior with a child MFA over the component's d-dimensional factor space,
// recursively. Trees are built greedily one layer at a time: the parent is
// frozen, each training row is hard-assigned to its most responsible
// component, a factor vector is drawn from that component's posterior, and
// a child MFA is fit to the vectors collected for each component.
//
// Any tree collapses exactly to a shallow MFA. For a flat component
// s = (c, k) with child parameters (W2, mu2, Psi2):
//
//   mean  = W1 mu2 + mu1
//   cov   = Psi1 + W1 (Psi2 + W2 W2') W1'
//         = Psi1 + [W1 W2 | W1 Psi2^1/2] [W1 W2 | W1 Psi2^1/2]'
//
// so the collapsed component keeps diagonal noise Psi1 and a widened
// loading. Components of different widths are padded with zero columns,
// which leaves their covariance unchanged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmfa/dataset.hpp"
#include "dmfa/em.hpp"
#include "dmfa/model.hpp"
#include "dmfa/parallel.hpp"
#include "dmfa/rng.hpp"

namespace dmfa {

class DmfaNode;
using DmfaNodePtr = std::shared_ptr<const DmfaNode>;

class DmfaNode {
 public:
  explicit DmfaNode(MfaModel layer, std::vector<DmfaNodePtr> children = {})
      : layer_(std::move(layer)), children_(std::move(children)) {
    if (children_.empty()) children_.resize(layer_.size());
    if (children_.size() != layer_.size())
      throw std::invalid_argument("DmfaNode: one child slot per component");
    for (std::size_t c = 0; c < children_.size(); ++c) {
      if (children_[c] && children_[c]->layer().dim() != layer_.factors())
        throw std::invalid_argument("DmfaNode: child of component " + std::to_string(c) +
                                    " must model the parent's " +
                                    std::to_string(layer_.factors()) + "-dim factor space");
    }
  }

  const MfaModel& layer() const { return layer_; }
  const std::vector<DmfaNodePtr>& children() const { return children_; }
  const DmfaNode* child(std::size_t c) const { return children_[c].get(); }
  bool has_child(std::size_t c) const { return children_[c] != nullptr; }
  bool is_leaf() const {
    return std::none_of(children_.begin(), children_.end(), [](const auto& p) { return p != nullptr; });
  }
  Index dim() const { return layer_.dim(); }

  /// Number of MFA layers along the deepest path.
  int depth() const {
    int deepest = 0;
    for (const auto& ch : children_)
      if (ch) deepest = std::max(deepest, ch->depth());
    return 1 + deepest;
  }

 private:
  MfaModel layer_;
  std::vector<DmfaNodePtr> children_;
};

/// Enumeration of the flat components of a tree: s <-> path (c, k_c, ...).
/// A path stops at the first component without a child.
class FlatIndexMap {
 public:
  explicit FlatIndexMap(const DmfaNode& node) {
    std::vector<std::size_t> prefix;
    build(node, prefix, 0.0);
    for (std::size_t s = 0; s < paths_.size(); ++s) index_.emplace(paths_[s], s);
  }

  std::size_t size() const { return paths_.size(); }
  const std::vector<std::size_t>& path(std::size_t s) const { return paths_.at(s); }
  const std::vector<std::vector<std::size_t>>& paths() const { return paths_; }
  const Vector& log_weights() const { return log_weights_; }

  std::size_t index(const std::vector<std::size_t>& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw std::out_of_range("FlatIndexMap: unknown path");
    return it->second;
  }

 private:
  void build(const DmfaNode& node, std::vector<std::size_t>& prefix, double log_w) {
    for (std::size_t c = 0; c < node.layer().size(); ++c) {
      prefix.push_back(c);
      const double w = log_w + node.layer().log_weights()(static_cast<Index>(c));
      if (node.has_child(c)) {
        build(*node.child(c), prefix, w);
      } else {
        paths_.push_back(prefix);
        log_weights_.conservativeResize(log_weights_.size() + 1);
        log_weights_(log_weights_.size() - 1) = w;
      }
      prefix.pop_back();
    }
  }

  std::vector<std::vector<std::size_t>> paths_;
  Vector log_weights_;
  std::map<std::vector<std::size_t>, std::size_t> index_;
};

/// Number of second-layer components per first-layer component: k_min each,
/// plus the remaining slots split in proportion to the weights by largest
/// remainder (ties to the lower index).
inline std::vector<int> allocate_components(const Vector& weights, int total, int k_min) {
  const auto n = static_cast<int>(weights.size());
  if (n < 1) throw std::invalid_argument("allocate_components: no weights");
  if (k_min < 1) throw std::invalid_argument("allocate_components: k_min must be >= 1");
  if (total < n * k_min)
    throw std::invalid_argument("allocate_components: total " + std::to_string(total) +
                                " < components * k_min = " + std::to_string(n * k_min));
  if ((weights.array() < 0.0).any() || !(weights.sum() > 0.0))
    throw std::invalid_argument("allocate_components: weights must be a nonnegative simplex");
  const Vector p = weights / weights.sum();
  const int extras = total - n * k_min;
  std::vector<int> out(static_cast<std::size_t>(n), k_min);
  std::vector<std::int64_t> remainder(static_cast<std::size_t>(n));
  int assigned = 0;
  for (int c = 0; c < n; ++c) {
    const double quota = p(c) * extras;
    const int whole = static_cast<int>(std::floor(quota + 1e-9));
    out[static_cast<std::size_t>(c)] += whole;
    assigned += whole;
    // Quantised so that remainders equal up to rounding tie exactly.
    remainder[static_cast<std::size_t>(c)] = std::llround(std::max(0.0, quota - whole) * 1e9);
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) order[static_cast<std::size_t>(c)] = c;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return remainder[static_cast<std::size_t>(a)] > remainder[static_cast<std::size_t>(b)];
  });
  for (int i = 0; assigned < extras; ++i, ++assigned) ++out[static_cast<std::size_t>(order[static_cast<std::size_t>(i % n)])];
  return out;
}

enum class ExtractMode { sample, posterior_mean };

/// Hard-assigns each row to argmax_c p(c|x) (ties to the lowest index) and
/// emits one factor vector per row into that component's dataset.
inline std::vector<Dataset> extract_layer_dataset(const MfaModel& m, const Dataset& data,
                                                  std::uint64_t seed, ExtractMode mode,
                                                  unsigned threads = 1) {
  if (data.dim() != m.dim())
    throw std::invalid_argument("extract_layer_dataset: data has " + std::to_string(data.dim()) +
                                " columns, model expects " + std::to_string(m.dim()));
  const Index n = data.size();
  const Index d = m.factors();
  std::vector<Index> assign(static_cast<std::size_t>(n));
  RowMatrix factors(n, d);
  parallel_for(static_cast<std::size_t>(row_block_count(n)), threads, [&](std::size_t b) {
    const Index lo = static_cast<Index>(b) * kRowBlock;
    const Index len = std::min(kRowBlock, n - lo);
    const auto rows = data.rows().middleRows(lo, len);
    std::vector<Matrix> means(m.size());
    Matrix joint(len, static_cast<Index>(m.size()));
    for (std::size_t c = 0; c < m.size(); ++c)
      joint.col(static_cast<Index>(c)) =
          component_log_density_rows(m.component(c), rows, &means[c]).array() +
          m.log_weights()(static_cast<Index>(c));
    for (Index i = 0; i < len; ++i) {
      Index best = 0;
      joint.row(i).maxCoeff(&best);  // first maximum
      assign[static_cast<std::size_t>(lo + i)] = best;
      factors.row(lo + i) = means[static_cast<std::size_t>(best)].row(i);
    }
  });
  if (mode == ExtractMode::sample) {
    // Serial so that the draws are independent of the thread count.
    Engine rng = make_engine(seed, "extract");
    std::vector<Matrix> chol_cov(m.size());
    for (std::size_t c = 0; c < m.size(); ++c)
      chol_cov[c] = m.component(c).gamma().posterior_covariance.llt().matrixL();
    for (Index i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]);
      factors.row(i) += (chol_cov[c] * standard_normal_vector(rng, d)).transpose();
    }
  }
  std::vector<std::vector<Index>> members(m.size());
  for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<Dataset> out;
  out.reserve(m.size());
  for (std::size_t c = 0; c < m.size(); ++c) {
    RowMatrix y(static_cast<Index>(members[c].size()), d);
    for (std::size_t j = 0; j < members[c].size(); ++j) y.row(static_cast<Index>(j)) = factors.row(members[c][j]);
    out.emplace_back(std::move(y));
  }
  return out;
}

struct AllocationPolicy {
  enum class Kind { fixed, proportional };
  Kind kind = Kind::fixed;
  int k_per = 5;    // fixed: components per child
  int k_total = 0;  // proportional: sum of K_c over the layer being stacked
  int k_min = 2;    // proportional: lower bound per child

  static AllocationPolicy fixed(int k) { return {Kind::fixed, k, 0, 2}; }
  static AllocationPolicy proportional(int total, int k_min) {
    return {Kind::proportional, 0, total, k_min};
  }

  std::vector<int> allocate(const MfaModel& parent) const {
    if (kind == Kind::fixed) {
      if (k_per < 1) throw std::invalid_argument("k_per must be >= 1");
      return std::vector<int>(parent.size(), k_per);
    }
    return allocate_components(parent.weights(), k_total, k_min);
  }
};

/// How a new child MFA starts. `data` uses init_mfa on the child's rows;
/// `near_prior` keeps the child close to the N(0, I) prior it replaces
/// (means and loadings 0.01 N(0, 1), unit noise, uniform weights), so the
/// unfitted tree is almost the parent model.
enum class ChildInit { data, near_prior };

inline MfaModel init_near_prior(Index dim, int components, int factors, std::uint64_t seed) {
  Engine rng = make_engine(seed, "near-prior");
  std::vector<FactorAnalyser> comps;
  for (int k = 0; k < components; ++k) {
    Matrix w = 0.01 * standard_normal_matrix(rng, dim, factors);
    Vector mu = 0.01 * standard_normal_vector(rng, dim);
    comps.emplace_back(std::move(w), std::move(mu), Vector::Ones(dim));
  }
  return MfaModel::from_weights(std::move(comps), Vector::Ones(components));
}

struct StackConfig {
  int factors = 1;                 // d of the new layer
  AllocationPolicy allocation;
  EmConfig em;                     // template for the child fits; components/factors/seed are set per child
  ExtractMode extract = ExtractMode::sample;
  bool fit_children = true;        // false: children are initialised but not trained
  ChildInit child_init = ChildInit::data;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct StackResult {
  DmfaNodePtr node;
  std::vector<std::vector<std::size_t>> failed;  // paths of components whose child fit threw
  std::vector<std::string> errors;
  std::vector<std::vector<std::size_t>> skipped;  // too few rows for a child
  std::vector<TrainingTrace> traces;              // one per newly fit child
};

namespace detail {

inline DmfaNodePtr stack_into(const DmfaNode& node, const Dataset& data, const StackConfig& cfg,
                              std::uint64_t seed, std::vector<std::size_t>& path,
                              StackResult& result) {
  const MfaModel& layer = node.layer();
  const std::vector<Dataset> ys =
      extract_layer_dataset(layer, data, derive_seed(seed, "extract"), cfg.extract, cfg.threads);
  std::vector<DmfaNodePtr> children = node.children();

  // Descend into existing children first.
  for (std::size_t c = 0; c < layer.size(); ++c) {
    if (!children[c]) continue;
    path.push_back(c);
    if (!ys[c].empty())
      children[c] = stack_into(*children[c], ys[c], cfg, derive_seed(seed, "child", c), path, result);
    path.pop_back();
  }

  if (node.is_leaf()) {
    if (cfg.factors > layer.factors())
      throw std::invalid_argument("stack: new layer factors (" + std::to_string(cfg.factors) +
                                  ") exceed parent factors (" + std::to_string(layer.factors()) + ")");
    const std::vector<int> ks = cfg.allocation.allocate(layer);
    std::vector<DmfaNodePtr> fresh(layer.size());
    std::vector<std::string> errors(layer.size());
    std::vector<TrainingTrace> traces(layer.size());
    std::vector<char> skipped(layer.size(), 0);
    parallel_for(layer.size(), cfg.threads, [&](std::size_t c) {
      const int k = ks[c];
      if (ys[c].size() < static_cast<Index>((cfg.factors + 2) * k)) {
        skipped[c] = 1;
        return;
      }
      EmConfig em = cfg.em;
      em.components = k;
      em.factors = cfg.factors;
      em.seed = derive_seed(seed, "child-fit", c);
      em.threads = 1;
      try {
        if (cfg.child_init == ChildInit::near_prior) {
          MfaModel start = init_near_prior(layer.factors(), k, cfg.factors, em.seed);
          if (cfg.fit_children) {
            FitResult fit = continue_em(std::move(start), ys[c], em);
            traces[c] = std::move(fit.trace);
            fresh[c] = std::make_shared<const DmfaNode>(std::move(fit.model));
          } else {
            fresh[c] = std::make_shared<const DmfaNode>(std::move(start));
          }
        } else if (cfg.fit_children) {
          FitResult fit = fit_mfa(ys[c], em);
          traces[c] = std::move(fit.trace);
          fresh[c] = std::make_shared<const DmfaNode>(std::move(fit.model));
        } else {
          fresh[c] = std::make_shared<const DmfaNode>(init_mfa(ys[c], em));
        }
      } catch (const std::exception& e) {
        errors[c] = e.what();
      }
    });
    for (std::size_t c = 0; c < layer.size(); ++c) {
      path.push_back(c);
      if (fresh[c]) {
        children[c] = fresh[c];
        if (cfg.fit_children) result.traces.push_back(std::move(traces[c]));
      } else if (skipped[c]) {
        result.skipped.push_back(path);
      } else {
        result.failed.push_back(path);
        result.errors.push_back(errors[c]);
      }
      path.pop_back();
    }
  }
  return std::make_shared<const DmfaNode>(layer, std::move(children));
}

}  // namespace detail

/// Adds one layer below every leaf of the tree, keeping all existing
/// parameters frozen. On a node without children this trains the second
/// layer; on a two-layer tree it trains the third, and so on.
inline StackResult stack_layer(const DmfaNode& node, const Dataset& data, const StackConfig& cfg) {
  if (data.dim() != node.dim())
    throw std::invalid_argument("stack_layer: data dimension does not match the model");
  if (cfg.factors < 1) throw std::invalid_argument("stack_layer: factors must be >= 1");
  StackResult result;
  std::vector<std::size_t> path;
  result.node = detail::stack_into(node, data, cfg, cfg.seed, path, result);
  return result;
}

/// Exact shallow equivalent of a tree.
inline MfaModel collapse(const DmfaNode& node) {
  const MfaModel& layer = node.layer();
  if (node.is_leaf()) return layer;
  struct Flat {
    Matrix loading;
    Vector mean;
    Vector noise;
    double log_w;
  };
  std::vector<Flat> flat;
  Index width = 0;
  for (std::size_t c = 0; c < layer.size(); ++c) {
    const FactorAnalyser& fa = layer.component(c);
    const double lw = layer.log_weights()(static_cast<Index>(c));
    if (!node.has_child(c)) {
      flat.push_back({fa.loading(), fa.mean(), fa.noise(), lw});
      width = std::max(width, fa.factors());
      continue;
    }
    const MfaModel sub = collapse(*node.child(c));
    for (std::size_t s = 0; s < sub.size(); ++s) {
      const FactorAnalyser& inner = sub.component(s);
      Matrix loading(fa.dim(), inner.factors() + fa.factors());
      loading.leftCols(inner.factors()) = fa.loading() * inner.loading();
      loading.rightCols(fa.factors()) = fa.loading() * inner.noise().cwiseSqrt().asDiagonal();
      flat.push_back({std::move(loading), fa.loading() * inner.mean() + fa.mean(), fa.noise(),
                      lw + sub.log_weights()(static_cast<Index>(s))});
      width = std::max(width, flat.back().loading.cols());
    }
  }
  std::vector<FactorAnalyser> comps;
  Vector log_w(static_cast<Index>(flat.size()));
  for (std::size_t s = 0; s < flat.size(); ++s) {
    Flat& f = flat[s];
    if (f.loading.cols() < width) {
      Matrix padded = Matrix::Zero(f.loading.rows(), width);
      padded.leftCols(f.loading.cols()) = f.loading;
      f.loading = std::move(padded);
    }
    comps.emplace_back(std::move(f.loading), std::move(f.mean), std::move(f.noise));
    log_w(static_cast<Index>(s)) = f.log_w;
  }
  return MfaModel::from_log_weights(std::move(comps), log_w);
}

struct LabeledSample {
  Dataset data;
  std::vector<std::size_t> flat_component;  // index into FlatIndexMap(node)
};

namespace detail {

inline std::size_t draw_categorical(const Vector& weights, Engine& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double target = u(rng) * weights.sum();
  for (Index c = 0; c < weights.size(); ++c) {
    target -= weights(c);
    if (target < 0.0) return static_cast<std::size_t>(c);
  }
  for (Index c = weights.size() - 1; c > 0; --c)
    if (weights(c) > 0.0) return static_cast<std::size_t>(c);
  return 0;
}

/// Ancestral draws; `forced` (if non-empty) pins the component at each level.
inline RowMatrix draw(const DmfaNode& node, Index n, Engine& rng,
                      std::vector<std::vector<std::size_t>>* paths,
                      std::span<const std::size_t> forced) {
  const MfaModel& layer = node.layer();
  std::vector<std::size_t> label(static_cast<std::size_t>(n));
  const Vector w = layer.weights();
  for (auto& l : label) l = forced.empty() ? draw_categorical(w, rng) : forced.front();
  if (!forced.empty() && forced.front() >= layer.size())
    throw std::out_of_range("sample: forced component out of range");

  RowMatrix out(n, layer.dim());
  if (paths) paths->assign(static_cast<std::size_t>(n), {});
  std::normal_distribution<double> normal;
  for (std::size_t c = 0; c < layer.size(); ++c) {
    std::vector<Index> rows;
    for (Index i = 0; i < n; ++i)
      if (label[static_cast<std::size_t>(i)] == c) rows.push_back(i);
    if (rows.empty()) continue;
    const auto m = static_cast<Index>(rows.size());
    const FactorAnalyser& fa = layer.component(c);
    RowMatrix z;
    std::vector<std::vector<std::size_t>> sub_paths;
    if (node.has_child(c)) {
      z = draw(*node.child(c), m, rng, paths ? &sub_paths : nullptr,
               forced.empty() ? forced : forced.subspan(1));
    } else {
      if (forced.size() > 1) throw std::out_of_range("sample: forced path is too long");
      z = standard_normal_matrix(rng, m, fa.factors());
    }
    RowMatrix x = z * fa.loading().transpose();
    x.rowwise() += fa.mean().transpose();
    const Vector sd = fa.noise().cwiseSqrt();
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < fa.dim(); ++j) x(i, j) += sd(j) * normal(rng);
    for (Index i = 0; i < m; ++i) {
      out.row(rows[static_cast<std::size_t>(i)]) = x.row(i);
      if (paths) {
        auto& p = (*paths)[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
        p.push_back(c);
        if (!sub_paths.empty()) {
          const auto& tail = sub_paths[static_cast<std::size_t>(i)];
          p.insert(p.end(), tail.begin(), tail.end());
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// Ancestral samples with the flat component each row came from.
inline LabeledSample sample_labeled(const DmfaNode& node, Index n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  Engine rng = make_engine(seed, "sample");
  std::vector<std::vector<std::size_t>> paths;
  RowMatrix x = detail::draw(node, n, rng, &paths, {});
  const FlatIndexMap map(node);
  LabeledSample out{Dataset(std::move(x)), {}};
  out.flat_component.reserve(paths.size());
  for (const auto& p : paths) out.flat_component.push_back(map.index(p));
  return out;
}

inline Dataset sample(const DmfaNode& node, Index n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  Engine rng = make_engine(seed, "sample");
  return Dataset(detail::draw(node, n, rng, nullptr, {}));
}

/// Ancestral samples conditioned on one flat component.
inline Dataset sample_component(const DmfaNode& node, std::size_t flat_index, Index n,
                                std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  const FlatIndexMap map(node);
  Engine rng = make_engine(seed, "sample-component", flat_index);
  const auto& path = map.path(flat_index);
  return Dataset(detail::draw(node, n, rng, nullptr, path));
}

struct InferenceOptions {
  bool weight_by_prior = false;  // argmax p(c) p(c|x) instead of argmax p(c|x)
  ExtractMode mode = ExtractMode::posterior_mean;
  std::uint64_t seed = 0;        // used in sample mode
};

struct InferencePath {
  std::vector<std::size_t> components;      // chosen component per level
  std::vector<FactorPosterior> posteriors;  // factor posterior per level
  std::size_t density_evaluations = 0;
};

/// Greedy top-down inference: pick the most probable component, take its
/// factor posterior, feed the factors to that component's child, repeat.
/// Costs sum over levels of that level's component count.
inline InferencePath hard_inference(const DmfaNode& node, const Eigen::Ref<const Vector>& x,
                                    const InferenceOptions& opts = {}) {
  if (x.size() != node.dim())
    throw std::invalid_argument("hard_inference: point has length " + std::to_string(x.size()) +
                                ", model expects " + std::to_string(node.dim()));
  InferencePath path;
  Engine rng = make_engine(opts.seed, "inference");
  const DmfaNode* level = &node;
  Vector input = x;
  while (level != nullptr) {
    const MfaModel& m = level->layer();
    Vector joint(static_cast<Index>(m.size()));
    for (std::size_t c = 0; c < m.size(); ++c) {
      joint(static_cast<Index>(c)) =
          m.log_weights()(static_cast<Index>(c)) + component_log_density(m.component(c), input);
      ++path.density_evaluations;
    }
    Vector score = normalize_log_joint(joint).probabilities.array().log().matrix();
    if (opts.weight_by_prior) score += m.log_weights();
    Index best = 0;
    score.maxCoeff(&best);
    const auto c = static_cast<std::size_t>(best);
    FactorPosterior post = factor_posterior(m.component(c), input);
    path.components.push_back(c);
    if (opts.mode == ExtractMode::sample) {
      const Matrix l = post.covariance.llt().matrixL();
      input = post.mean + l * standard_normal_vector(rng, post.mean.size());
    } else {
      input = post.mean;
    }
    path.posteriors.push_back(std::move(post));
    level = level->child(c);
  }
  return path;
}

/// Sum of count_parameters over every MFA in the tree.
inline std::int64_t count_parameters_deep(const DmfaNode& node) {
  std::int64_t total = count_parameters(node.layer());
  for (const auto& ch : node.children())
    if (ch) total += count_parameters_deep(*ch);
  return total;
}

}  // namespace dmfa
