#pragma once

// Mixture of factor analysers: parameter types and the read-only density,
// responsibility and factor-posterior math.
//
// A component is x = W z + mu + e with z ~ N(0, I_d) and e ~ N(0, Psi),
// Psi diagonal, so marginally x ~ N(mu, Gamma) with Gamma = W W' + Psi.
// Densities are evaluated through the Woodbury identity and the matrix
// determinant lemma using the d x d matrix V = I + W' Psi^-1 W:
//
//   Gamma^-1    = Psi^-1 - Psi^-1 W V^-1 W' Psi^-1
//   log|Gamma|  = sum_i log Psi_ii + log|V|
//
// so the D x D covariance is never formed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dmfa/parallel.hpp"

namespace dmfa {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline constexpr double kLog2Pi = 1.83787706640934548356065947281;
inline constexpr double kDefaultVarianceFloor = 1e-6;
inline constexpr double kSimplexTolerance = 1e-12;

/// Non-finite input or a non-finite intermediate result.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

/// log(sum(exp(v))), -inf for an empty or all -inf argument.
inline double log_sum_exp(const Eigen::Ref<const Vector>& v) {
  if (v.size() == 0) return -std::numeric_limits<double>::infinity();
  const double top = v.maxCoeff();
  if (!std::isfinite(top)) return top;
  return top + std::log((v.array() - top).exp().sum());
}

/// Cached decomposition of Gamma = W W' + Psi for one component.
struct GammaFactors {
  Matrix weighted_loading_t;    // W' Psi^-1, d x D
  Matrix precision;             // V = I + W' Psi^-1 W
  Eigen::LLT<Matrix> chol;      // V = L L'
  Matrix posterior_covariance;  // V^-1
  Vector inv_noise;             // 1 / Psi_ii
  double log_det_gamma = 0.0;
};

class FactorAnalyser {
 public:
  FactorAnalyser(Matrix loading, Vector mean, Vector noise)
      : loading_(std::move(loading)),
        mean_(std::move(mean)),
        noise_(std::move(noise)) {
    const Index dim = mean_.size();
    if (loading_.rows() != dim || noise_.size() != dim)
      throw std::invalid_argument(
          "FactorAnalyser: loading rows, mean and noise must share D");
    if (!all_finite(loading_) || !all_finite(mean_) || !all_finite(noise_))
      throw NumericError("FactorAnalyser: non-finite parameter");
    if (dim > 0 && noise_.minCoeff() <= 0.0)
      throw std::invalid_argument("FactorAnalyser: noise variances must be > 0");
  }

  Index dim() const { return mean_.size(); }
  Index factors() const { return loading_.cols(); }
  const Matrix& loading() const { return loading_; }
  const Vector& mean() const { return mean_; }
  const Vector& noise() const { return noise_; }
  /// Factorised on first use and shared between copies; a collapsed model
  /// that is only counted or saved never pays for it.
  const GammaFactors& gamma() const {
    std::call_once(cache_->once, [this] { factorize(cache_->factors); });
    return cache_->factors;
  }

  /// Dense Gamma; only for small D (tests, diagnostics).
  Matrix covariance() const {
    Matrix cov = loading_ * loading_.transpose();
    cov.diagonal() += noise_;
    return cov;
  }

 private:
  void factorize(GammaFactors& g) const {
    const Index d = factors();
    g.inv_noise = noise_.cwiseInverse();
    g.weighted_loading_t =
        loading_.transpose() * g.inv_noise.asDiagonal();
    g.precision = Matrix::Identity(d, d);
    g.precision.noalias() += g.weighted_loading_t * loading_;
    g.chol.compute(g.precision);
    if (g.chol.info() != Eigen::Success)
      throw NumericError("FactorAnalyser: I + W' Psi^-1 W is not positive definite");
    const Matrix& lower = g.chol.matrixLLT();
    g.log_det_gamma = noise_.array().log().sum() +
                           2.0 * lower.diagonal().array().log().sum();
    g.posterior_covariance = g.chol.solve(Matrix::Identity(d, d));
    g.posterior_covariance =
        0.5 * (g.posterior_covariance +
               g.posterior_covariance.transpose());
  }

  Matrix loading_;
  Vector mean_;
  Vector noise_;
  struct Cache {
    std::once_flag once;
    GammaFactors factors;
  };
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

/// Weighted list of factor analysers. Weights are stored as logs and must
/// already lie on the simplex; use from_weights to normalise.
class MfaModel {
 public:
  MfaModel(std::vector<FactorAnalyser> components, Vector log_weights)
      : components_(std::move(components)), log_weights_(std::move(log_weights)) {
    if (components_.empty())
      throw std::invalid_argument("MfaModel: needs at least one component");
    if (log_weights_.size() != static_cast<Index>(components_.size()))
      throw std::invalid_argument("MfaModel: one log weight per component");
    for (const auto& c : components_) {
      if (c.dim() != dim() || c.factors() != factors())
        throw std::invalid_argument(
            "MfaModel: components must share D and d");
    }
    if ((log_weights_.array() == std::numeric_limits<double>::infinity()).any() ||
        log_weights_.hasNaN())
      throw NumericError("MfaModel: invalid log weight");
    const double total = log_weights_.array().exp().sum();
    if (std::abs(total - 1.0) > kSimplexTolerance)
      throw std::invalid_argument("MfaModel: weights do not sum to one");
  }

  static MfaModel from_weights(std::vector<FactorAnalyser> components,
                               const Vector& weights) {
    if ((weights.array() < 0.0).any() || weights.sum() <= 0.0)
      throw std::invalid_argument("MfaModel: weights must be nonnegative");
    return from_log_weights(std::move(components), weights.array().log().matrix());
  }

  static MfaModel from_log_weights(std::vector<FactorAnalyser> components,
                                   const Vector& log_weights) {
    const double norm = log_sum_exp(log_weights);
    if (!std::isfinite(norm))
      throw NumericError("MfaModel: cannot normalise log weights");
    return MfaModel(std::move(components),
                    (log_weights.array() - norm).matrix());
  }

  std::size_t size() const { return components_.size(); }
  Index dim() const { return components_.front().dim(); }
  Index factors() const { return components_.front().factors(); }
  const FactorAnalyser& component(std::size_t c) const { return components_[c]; }
  const std::vector<FactorAnalyser>& components() const { return components_; }
  const Vector& log_weights() const { return log_weights_; }
  Vector weights() const { return log_weights_.array().exp().matrix(); }

 private:
  std::vector<FactorAnalyser> components_;
  Vector log_weights_;
};

struct FactorPosterior {
  Vector mean;        // m = V^-1 W' Psi^-1 (x - mu)
  Matrix covariance;  // V^-1
};

struct Responsibilities {
  Vector probabilities;
  bool all_zero = false;  // every joint density underflowed; output is uniform
};

namespace detail {

inline void check_point(const FactorAnalyser& fa, const Eigen::Ref<const Vector>& x) {
  if (x.size() != fa.dim())
    throw std::invalid_argument("point has length " + std::to_string(x.size()) +
                                ", component expects " +
                                std::to_string(fa.dim()));
  if (!all_finite(x)) throw NumericError("non-finite input point");
}

}  // namespace detail

/// log N(x; mu, W W' + Psi).
inline double component_log_density(const FactorAnalyser& fa,
                                    const Eigen::Ref<const Vector>& x) {
  detail::check_point(fa, x);
  const GammaFactors& g = fa.gamma();
  const Vector r = x - fa.mean();
  const Vector b = g.weighted_loading_t * r;
  const Vector y = g.chol.matrixL().solve(b);
  const double quad = r.cwiseProduct(r).dot(g.inv_noise) - y.squaredNorm();
  return -0.5 * (static_cast<double>(fa.dim()) * kLog2Pi + g.log_det_gamma + quad);
}

/// Row-wise log densities of a block of points. When posterior_means is
/// given it receives the N x d matrix of factor posterior means.
inline Vector component_log_density_rows(const FactorAnalyser& fa,
                                         const Eigen::Ref<const RowMatrix>& rows,
                                         Matrix* posterior_means = nullptr) {
  if (rows.cols() != fa.dim())
    throw std::invalid_argument("data has " + std::to_string(rows.cols()) +
                                " columns, component expects " +
                                std::to_string(fa.dim()));
  const GammaFactors& g = fa.gamma();
  const RowMatrix centred = rows.rowwise() - fa.mean().transpose();
  const Matrix b_t = g.weighted_loading_t * centred.transpose();  // d x N
  const Matrix y = g.chol.matrixL().solve(b_t);
  const Vector quad = centred.array().square().matrix() * g.inv_noise -
                      y.colwise().squaredNorm().transpose();
  if (posterior_means != nullptr)
    *posterior_means = g.chol.matrixU().solve(y).transpose();
  const double constant =
      static_cast<double>(fa.dim()) * kLog2Pi + g.log_det_gamma;
  return (-0.5 * (quad.array() + constant)).matrix();
}

/// N x C matrix of log pi_c + log N(x_n; mu_c, Gamma_c).
inline Matrix log_joint_rows(const MfaModel& m,
                             const Eigen::Ref<const RowMatrix>& rows) {
  Matrix out(rows.rows(), static_cast<Index>(m.size()));
  for (std::size_t c = 0; c < m.size(); ++c) {
    out.col(static_cast<Index>(c)) =
        component_log_density_rows(m.component(c), rows).array() +
        m.log_weights()(static_cast<Index>(c));
  }
  return out;
}

inline Vector mixture_log_density_rows(const MfaModel& m,
                                       const Eigen::Ref<const RowMatrix>& rows) {
  const Matrix joint = log_joint_rows(m, rows);
  Vector out(joint.rows());
  for (Index n = 0; n < joint.rows(); ++n) out(n) = log_sum_exp(joint.row(n).transpose());
  return out;
}

inline double mixture_log_density(const MfaModel& m,
                                  const Eigen::Ref<const Vector>& x) {
  Vector joint(static_cast<Index>(m.size()));
  for (std::size_t c = 0; c < m.size(); ++c)
    joint(static_cast<Index>(c)) =
        m.log_weights()(static_cast<Index>(c)) +
        component_log_density(m.component(c), x);
  return log_sum_exp(joint);
}

/// Normalises a vector of log joint densities into posterior probabilities.
inline Responsibilities normalize_log_joint(const Eigen::Ref<const Vector>& joint) {
  Responsibilities out;
  const double norm = log_sum_exp(joint);
  if (!std::isfinite(norm)) {
    out.probabilities = Vector::Constant(joint.size(), 1.0 / static_cast<double>(joint.size()));
    out.all_zero = true;
    return out;
  }
  out.probabilities = (joint.array() - norm).exp().matrix();
  out.probabilities /= out.probabilities.sum();
  return out;
}

/// p(c | x) by Bayes' rule in log space.
inline Responsibilities responsibilities(const MfaModel& m,
                                         const Eigen::Ref<const Vector>& x) {
  Vector joint(static_cast<Index>(m.size()));
  for (std::size_t c = 0; c < m.size(); ++c)
    joint(static_cast<Index>(c)) =
        m.log_weights()(static_cast<Index>(c)) +
        component_log_density(m.component(c), x);
  return normalize_log_joint(joint);
}

/// p(z | x, c) = N(m, V^-1).
inline FactorPosterior factor_posterior(const FactorAnalyser& fa,
                                        const Eigen::Ref<const Vector>& x) {
  detail::check_point(fa, x);
  const GammaFactors& g = fa.gamma();
  FactorPosterior post;
  post.mean = g.chol.solve(g.weighted_loading_t * (x - fa.mean()));
  post.covariance = g.posterior_covariance;
  return post;
}

/// Rows per work item in batched evaluation. Fixed so that per-row results
/// and reductions do not depend on the thread count.
inline constexpr Index kRowBlock = 512;

inline Index row_block_count(Index n) { return (n + kRowBlock - 1) / kRowBlock; }

/// log p(x_n) for every row, evaluated in fixed-size blocks.
inline Vector per_row_log_likelihood(const MfaModel& m, const RowMatrix& rows,
                                     unsigned threads = 1) {
  if (rows.cols() != m.dim())
    throw std::invalid_argument("data has " + std::to_string(rows.cols()) +
                                " columns, model expects " + std::to_string(m.dim()));
  Vector out(rows.rows());
  parallel_for(static_cast<std::size_t>(row_block_count(rows.rows())), threads,
               [&](std::size_t b) {
                 const Index lo = static_cast<Index>(b) * kRowBlock;
                 const Index len = std::min(kRowBlock, rows.rows() - lo);
                 out.segment(lo, len) = mixture_log_density_rows(m, rows.middleRows(lo, len));
               });
  return out;
}

/// Loadings + means + noise diagonals + free mixing weights.
inline std::int64_t count_parameters(const MfaModel& m) {
  const auto c = static_cast<std::int64_t>(m.size());
  const auto dim = static_cast<std::int64_t>(m.dim());
  const auto d = static_cast<std::int64_t>(m.factors());
  return c * (dim * d + 2 * dim) + (c - 1);
}

}  // namespace dmfa
