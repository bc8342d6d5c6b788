#pragma once

// Maximum-likelihood training of a mixture of factor analysers by EM.
//
// The M-step solves for the loading and mean jointly through the augmented
// factor z~ = [z; 1]:
//
//   [W_c mu_c] = (sum_n r_nc x_n E[z~]') (sum_n r_nc E[z~ z~'])^-1
//   Psi_c      = diag(sum_n r_nc x_n x_n' - [W_c mu_c] sum_n r_nc E[z~] x_n') / N_c
//
// with E[z] = m_c and E[z z'] = V_c^-1 + m_c m_c' from the factor posterior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dmfa/dataset.hpp"
#include "dmfa/model.hpp"
#include "dmfa/parallel.hpp"
#include "dmfa/rng.hpp"

namespace dmfa {

struct EmConfig {
  int components = 1;
  int factors = 1;
  int max_iters = 200;
  double rel_tol = 1e-4;  // stop when the average LL moves by less than 0.01%
  std::uint64_t seed = 0;
  std::optional<double> min_effective_count;  // defaults to factors + 2
  double variance_floor = kDefaultVarianceFloor;
  int max_reseeds = 3;
  unsigned threads = 1;

  double min_count() const {
    return min_effective_count.value_or(static_cast<double>(factors) + 2.0);
  }

  void validate() const {
    if (components < 1) throw std::invalid_argument("EmConfig: components must be >= 1");
    if (factors < 1) throw std::invalid_argument("EmConfig: factors must be >= 1");
    if (max_iters < 1) throw std::invalid_argument("EmConfig: max_iters must be >= 1");
    if (!(rel_tol > 0.0)) throw std::invalid_argument("EmConfig: rel_tol must be > 0");
    if (!(variance_floor > 0.0))
      throw std::invalid_argument("EmConfig: variance_floor must be > 0");
  }
};

/// Per-component responsibility-weighted moments.
struct ComponentStats {
  double mass = 0.0;  // N_c
  Matrix x_z;         // sum r x z~', D x (d+1); last column is sum r x
  Matrix z_z;         // sum r E[z~ z~'], (d+1) x (d+1); corner is N_c
  Vector x_sq;        // sum r x.^2

  ComponentStats() = default;
  ComponentStats(Index dim, Index d)
      : x_z(Matrix::Zero(dim, d + 1)), z_z(Matrix::Zero(d + 1, d + 1)), x_sq(Vector::Zero(dim)) {}

  auto x_sum() const { return x_z.col(x_z.cols() - 1); }

  void merge(const ComponentStats& other) {
    mass += other.mass;
    x_z += other.x_z;
    z_z += other.z_z;
    x_sq += other.x_sq;
  }
};

struct SufficientStats {
  std::vector<ComponentStats> components;
  double rows = 0.0;

  SufficientStats() = default;
  SufficientStats(std::size_t c, Index dim, Index d) : components(c, ComponentStats(dim, d)) {}

  void merge(const SufficientStats& other) {
    rows += other.rows;
    for (std::size_t c = 0; c < components.size(); ++c) components[c].merge(other.components[c]);
  }
};

struct EStepResult {
  SufficientStats stats;
  double avg_log_likelihood = 0.0;
};

namespace detail {

inline double accumulate_block(const MfaModel& m, const Eigen::Ref<const RowMatrix>& x,
                               SufficientStats& stats) {
  const auto n_comp = static_cast<Index>(m.size());
  const Index d = m.factors();
  std::vector<Matrix> means(m.size());
  Matrix joint(x.rows(), n_comp);
  for (Index c = 0; c < n_comp; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    joint.col(c) = component_log_density_rows(m.component(cu), x, &means[cu]).array() +
                   m.log_weights()(c);
  }
  double ll = 0.0;
  Matrix resp(x.rows(), n_comp);
  for (Index n = 0; n < x.rows(); ++n) {
    const Vector row = joint.row(n).transpose();
    const double norm = log_sum_exp(row);
    ll += norm;
    if (std::isfinite(norm))
      resp.row(n) = (row.array() - norm).exp().matrix().transpose();
    else
      resp.row(n).setConstant(1.0 / static_cast<double>(n_comp));
  }
  const Matrix x_sq = x.array().square().matrix();
  for (Index c = 0; c < n_comp; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    ComponentStats& s = stats.components[cu];
    const Vector r = resp.col(c);
    const Matrix& mc = means[cu];
    const double mass = r.sum();
    const Matrix weighted = mc.array().colwise() * r.array();
    s.mass += mass;
    s.x_z.leftCols(d).noalias() += x.transpose() * weighted;
    s.x_z.col(d).noalias() += x.transpose() * r;
    s.z_z.topLeftCorner(d, d).noalias() += mc.transpose() * weighted;
    s.z_z.topLeftCorner(d, d) += mass * m.component(cu).gamma().posterior_covariance;
    const Vector z_sum = weighted.colwise().sum().transpose();
    s.z_z.topRightCorner(d, 1) += z_sum;
    s.z_z.bottomLeftCorner(1, d) += z_sum.transpose();
    s.z_z(d, d) += mass;
    s.x_sq.noalias() += x_sq.transpose() * r;
  }
  stats.rows += static_cast<double>(x.rows());
  return ll;
}

}  // namespace detail

/// Responsibilities and factor posteriors for every row, folded into
/// sufficient statistics; also returns the average log-likelihood of `m`.
/// Blocks are merged in row order, so the result does not depend on threads.
inline EStepResult e_step(const MfaModel& m, const Dataset& data, unsigned threads = 1) {
  if (data.dim() != m.dim())
    throw std::invalid_argument("e_step: data has " + std::to_string(data.dim()) +
                                " columns, model expects " + std::to_string(m.dim()));
  if (data.empty()) throw std::invalid_argument("e_step: empty dataset");
  const Index n_blocks = row_block_count(data.size());
  std::vector<SufficientStats> partial(static_cast<std::size_t>(n_blocks),
                                       SufficientStats(m.size(), m.dim(), m.factors()));
  std::vector<double> ll(static_cast<std::size_t>(n_blocks), 0.0);
  parallel_for(static_cast<std::size_t>(n_blocks), threads, [&](std::size_t b) {
    const Index lo = static_cast<Index>(b) * kRowBlock;
    const Index len = std::min(kRowBlock, data.size() - lo);
    ll[b] = detail::accumulate_block(m, data.rows().middleRows(lo, len), partial[b]);
  });
  EStepResult out{SufficientStats(m.size(), m.dim(), m.factors()), 0.0};
  double total = 0.0;
  for (std::size_t b = 0; b < partial.size(); ++b) {
    out.stats.merge(partial[b]);
    total += ll[b];
  }
  for (std::size_t c = 0; c < out.stats.components.size(); ++c) {
    const ComponentStats& s = out.stats.components[c];
    if (!std::isfinite(s.mass) || !all_finite(s.x_z) || !all_finite(s.z_z) ||
        !all_finite(s.x_sq))
      throw NumericError("e_step: non-finite statistics in component " + std::to_string(c));
  }
  out.avg_log_likelihood = total / static_cast<double>(data.size());
  return out;
}

struct MStepDiagnostics {
  std::vector<std::size_t> regularized;  // components whose moment matrix needed a ridge
};

inline MfaModel m_step(const SufficientStats& stats, const EmConfig& cfg,
                       MStepDiagnostics* diagnostics = nullptr) {
  std::vector<FactorAnalyser> comps;
  comps.reserve(stats.components.size());
  Vector log_w(static_cast<Index>(stats.components.size()));
  for (std::size_t c = 0; c < stats.components.size(); ++c) {
    const ComponentStats& s = stats.components[c];
    if (!(s.mass > 0.0))
      throw std::invalid_argument("m_step: component " + std::to_string(c) +
                                  " has zero responsibility mass");
    const Index d = s.z_z.rows() - 1;
    Eigen::LLT<Matrix> llt(s.z_z);
    if (llt.info() != Eigen::Success) {
      llt.compute(s.z_z + 1e-8 * Matrix::Identity(d + 1, d + 1));
      if (diagnostics) diagnostics->regularized.push_back(c);
      if (llt.info() != Eigen::Success)
        throw NumericError("m_step: moment matrix of component " + std::to_string(c) +
                           " is singular");
    }
    const Matrix aug = llt.solve(s.x_z.transpose()).transpose();  // D x (d+1)
    Vector noise = (s.x_sq - aug.cwiseProduct(s.x_z).rowwise().sum()) / s.mass;
    noise = noise.cwiseMax(cfg.variance_floor);
    comps.emplace_back(aug.leftCols(d), aug.col(d), std::move(noise));
    log_w(static_cast<Index>(c)) = std::log(s.mass);
  }
  return MfaModel::from_log_weights(std::move(comps), log_w);
}

/// k-means++ seeded means, small random loadings, per-dimension data
/// variance as noise, uniform weights.
inline MfaModel init_mfa(const Dataset& data, const EmConfig& cfg) {
  cfg.validate();
  const Index n = data.size();
  const Index dim = data.dim();
  if (n < cfg.components)
    throw std::invalid_argument("init_mfa: need at least as many rows (" + std::to_string(n) +
                                ") as components (" + std::to_string(cfg.components) + ")");
  if (cfg.factors > dim)
    throw std::invalid_argument("init_mfa: factors (" + std::to_string(cfg.factors) +
                                ") exceed data dimension (" + std::to_string(dim) + ")");
  Engine rng = make_engine(cfg.seed, "init");

  std::vector<Index> centres;
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  centres.push_back(pick(rng));
  chosen[static_cast<std::size_t>(centres.back())] = true;
  Vector dist2 = (data.rows().rowwise() - data.row(centres.back())).rowwise().squaredNorm();
  // Greedy k-means++: draw a few distance-weighted candidates per step and
  // keep the one that lowers the total squared distance most.
  const int trials = 2 + static_cast<int>(std::log(static_cast<double>(cfg.components)));
  while (static_cast<int>(centres.size()) < cfg.components) {
    const double total = dist2.sum();
    Index next = -1;
    Vector next_dist2;
    double best_potential = std::numeric_limits<double>::infinity();
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      for (int t = 0; t < trials; ++t) {
        double target = u(rng);
        Index cand = -1;
        for (Index i = 0; i < n; ++i) {
          if (chosen[static_cast<std::size_t>(i)] || dist2(i) <= 0.0) continue;
          cand = i;
          target -= dist2(i);
          if (target <= 0.0) break;
        }
        if (cand < 0) break;
        Vector d2 = dist2.cwiseMin((data.rows().rowwise() - data.row(cand)).rowwise().squaredNorm());
        const double potential = d2.sum();
        if (potential < best_potential) {
          best_potential = potential;
          next = cand;
          next_dist2 = std::move(d2);
        }
      }
    }
    if (next < 0) {
      // All remaining rows coincide with a centre; take any unused row.
      std::vector<Index> unused;
      for (Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) unused.push_back(i);
      std::uniform_int_distribution<std::size_t> pick_unused(0, unused.size() - 1);
      next = unused[pick_unused(rng)];
      next_dist2 = dist2.cwiseMin((data.rows().rowwise() - data.row(next)).rowwise().squaredNorm());
    }
    centres.push_back(next);
    chosen[static_cast<std::size_t>(next)] = true;
    dist2 = std::move(next_dist2);
  }

  const Vector mean = data.rows().colwise().mean().transpose();
  const Vector var = ((data.rows().rowwise() - mean.transpose()).array().square().colwise().sum() /
                      static_cast<double>(n))
                         .transpose()
                         .cwiseMax(cfg.variance_floor);
  std::vector<FactorAnalyser> comps;
  for (const Index centre : centres) {
    Matrix loading = 0.01 * standard_normal_matrix(rng, dim, cfg.factors);
    comps.emplace_back(std::move(loading), data.row(centre).transpose(), var);
  }
  return MfaModel::from_weights(std::move(comps), Vector::Ones(cfg.components));
}

enum class Termination { converged, max_iters, degenerate_restart_limit, early_stopped };

inline std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::converged: return "converged";
    case Termination::max_iters: return "max_iters";
    case Termination::degenerate_restart_limit: return "degenerate_restart_limit";
    case Termination::early_stopped: return "early_stopped";
  }
  return "unknown";
}

/// Average log-likelihood (nats per example) at every EM iteration. Entry t
/// is the likelihood of the model entering iteration t.
struct TrainingTrace {
  std::vector<double> train_ll;
  std::vector<double> valid_ll;  // empty unless a validation set was given
  Termination reason = Termination::max_iters;
  std::vector<int> reseed_iterations;
  bool regularized = false;
  int best_iteration = 0;  // iteration of the returned model

  int iterations() const { return static_cast<int>(train_ll.size()); }

  /// True when no step decreased the training LL by more than `slack`
  /// (relative). Steps that follow a reseed are exempt.
  bool monotone(double slack = 1e-8) const {
    for (std::size_t t = 1; t < train_ll.size(); ++t) {
      const bool after_reseed =
          std::find(reseed_iterations.begin(), reseed_iterations.end(),
                    static_cast<int>(t) - 1) != reseed_iterations.end();
      if (after_reseed) continue;
      if (train_ll[t] < train_ll[t - 1] - slack * std::abs(train_ll[t - 1])) return false;
    }
    return true;
  }
};

struct FitOptions {
  const Dataset* validation = nullptr;
  int early_stop_patience = 0;  // > 0: stop after this many non-improving validation scores
};

struct FitResult {
  MfaModel model;
  TrainingTrace trace;
};

namespace detail {

/// Moves each starved component next to the heaviest one: same loading and
/// noise, mean nudged by 0.1 noise-std along a random direction, and the
/// donor's weight split between the two.
inline MfaModel reseed(const MfaModel& m, const SufficientStats& stats,
                       const std::vector<std::size_t>& starved, Engine& rng) {
  std::vector<FactorAnalyser> comps = m.components();
  Vector mass(static_cast<Index>(m.size()));
  for (std::size_t c = 0; c < m.size(); ++c)
    mass(static_cast<Index>(c)) = stats.components[c].mass;
  Vector w = m.weights();
  for (const std::size_t c : starved) mass(static_cast<Index>(c)) = -1.0;
  for (const std::size_t c : starved) {
    Index donor = 0;
    mass.maxCoeff(&donor);
    const FactorAnalyser& big = comps[static_cast<std::size_t>(donor)];
    Vector dir = standard_normal_vector(rng, big.dim());
    dir /= std::max(dir.norm(), 1e-300);
    Vector mean = big.mean() + 0.1 * dir.cwiseProduct(big.noise().cwiseSqrt());
    comps[c] = FactorAnalyser(big.loading(), std::move(mean), big.noise());
    w(static_cast<Index>(c)) = 0.5 * w(donor);
    w(donor) *= 0.5;
    mass(donor) *= 0.5;
  }
  return MfaModel::from_weights(std::move(comps), w);
}

}  // namespace detail

/// EM from a given starting model.
inline FitResult continue_em(MfaModel model, const Dataset& data, const EmConfig& cfg,
                             const FitOptions& options = {}) {
  cfg.validate();
  if (options.early_stop_patience > 0 && options.validation == nullptr)
    throw std::invalid_argument("early stopping needs a validation set");
  TrainingTrace trace;
  std::optional<MfaModel> best;
  double best_score = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<int> reseeds(model.size(), 0);
  Engine reseed_rng = make_engine(cfg.seed, "reseed");
  bool just_reseeded = false;
  double prev_delta = std::numeric_limits<double>::infinity();
  const double min_count = cfg.min_count();

  for (int it = 0; it < cfg.max_iters; ++it) {
    EStepResult e = e_step(model, data, cfg.threads);
    if (!std::isfinite(e.avg_log_likelihood))
      throw NumericError("EM: log-likelihood is not finite at iteration " + std::to_string(it));
    trace.train_ll.push_back(e.avg_log_likelihood);
    double score = e.avg_log_likelihood;
    if (options.validation != nullptr) {
      const double v =
          per_row_log_likelihood(model, options.validation->rows(), cfg.threads).mean();
      trace.valid_ll.push_back(v);
      if (options.early_stop_patience > 0) score = v;
    }
    if (score > best_score || !best) {
      best_score = score;
      best = model;
      trace.best_iteration = it;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (options.early_stop_patience > 0 && since_best >= options.early_stop_patience) {
      trace.reason = Termination::early_stopped;
      return {*best, trace};
    }
    if (it > 0) {
      // While the loadings grow away from their small start the increments
      // are tiny but increasing, so a small step only counts when it follows
      // another small step and is no larger than it.
      const double prev = trace.train_ll[static_cast<std::size_t>(it - 1)];
      const double delta = std::abs(e.avg_log_likelihood - prev);
      const bool small = !just_reseeded && delta / std::abs(prev) < cfg.rel_tol;
      if (small && prev_delta < std::numeric_limits<double>::infinity() && delta <= prev_delta) {
        trace.reason = Termination::converged;
        break;
      }
      prev_delta = small ? delta : std::numeric_limits<double>::infinity();
    }
    if (it == cfg.max_iters - 1) {
      trace.reason = Termination::max_iters;
      break;
    }

    std::vector<std::size_t> starved;
    for (std::size_t c = 0; c < model.size(); ++c)
      if (e.stats.components[c].mass < min_count) starved.push_back(c);
    if (!starved.empty() && starved.size() < model.size()) {
      for (const std::size_t c : starved) {
        if (reseeds[c] >= cfg.max_reseeds) {
          trace.reason = Termination::degenerate_restart_limit;
          return {*best, trace};
        }
      }
      model = detail::reseed(model, e.stats, starved, reseed_rng);
      for (const std::size_t c : starved) ++reseeds[c];
      trace.reseed_iterations.push_back(it);
      just_reseeded = true;
      continue;
    }
    just_reseeded = false;
    MStepDiagnostics diag;
    model = m_step(e.stats, cfg, &diag);
    if (!diag.regularized.empty()) trace.regularized = true;
  }
  if (options.early_stop_patience > 0) return {*best, trace};
  trace.best_iteration = trace.iterations() - 1;
  return {model, trace};
}

/// init_mfa followed by EM until the relative LL change drops below rel_tol.
inline FitResult fit_mfa(const Dataset& data, const EmConfig& cfg,
                         const FitOptions& options = {}) {
  return continue_em(init_mfa(data, cfg), data, cfg, options);
}

}  // namespace dmfa
