#pragma once

// Held-out scoring and the dense reference evaluators used to cross-check
// the low-rank code paths.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmfa/binary_io.hpp"
#include "dmfa/dataset.hpp"
#include "dmfa/deep.hpp"
#include "dmfa/em.hpp"
#include "dmfa/matrix_io.hpp"
#include "dmfa/model.hpp"

namespace dmfa {

/// Average log-likelihood in nats per example, on the preprocessed scale.
struct EvalReport {
  double avg_log_likelihood = 0.0;
  double std_error = 0.0;  // sample std of per-row LL / sqrt(N)
  Index n = 0;
  std::int64_t parameters = 0;
  PreprocessKind preprocessing = PreprocessKind::none;
  double seconds = 0.0;
  Vector per_row;
};

struct EvalOptions {
  const PreprocessRecord* model_preprocessing = nullptr;  // align data to this record first
  unsigned threads = 1;
};

inline double standard_error(const Vector& v) {
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  const double var = (v.array() - mean).square().sum() / static_cast<double>(v.size() - 1);
  return std::sqrt(var / static_cast<double>(v.size()));
}

namespace detail {

inline EvalReport evaluate_flat(const MfaModel& m, const Dataset& raw, std::int64_t parameters,
                                const EvalOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  const Dataset data = opts.model_preprocessing ? align_preprocessing(*opts.model_preprocessing, raw)
                                                : raw;
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalReport r;
  r.per_row = per_row_log_likelihood(m, data.rows(), opts.threads);
  r.n = data.size();
  r.avg_log_likelihood = r.per_row.mean();
  r.std_error = standard_error(r.per_row);
  r.parameters = parameters;
  r.preprocessing = data.preprocessing().kind;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace detail

inline EvalReport evaluate(const MfaModel& m, const Dataset& data, const EvalOptions& opts = {}) {
  return detail::evaluate_flat(m, data, count_parameters(m), opts);
}

/// Trees are collapsed first; the likelihood is exact.
inline EvalReport evaluate(const DmfaNode& node, const Dataset& data, const EvalOptions& opts = {}) {
  return detail::evaluate_flat(collapse(node), data, count_parameters_deep(node), opts);
}

/// Explicit N(x; mean, cov) through a dense Cholesky factorisation.
inline double dense_oracle_log_density(const Vector& mean, const Matrix& cov, const Vector& x) {
  const Index dim = mean.size();
  if (dim > 64) throw std::invalid_argument("dense oracle is limited to D <= 64");
  if (cov.rows() != dim || cov.cols() != dim || x.size() != dim)
    throw std::invalid_argument("dense oracle: dimension mismatch");
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericError("dense oracle: covariance is singular");
  const Matrix l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  const Vector y = llt.matrixL().solve(x - mean);
  return -0.5 * (static_cast<double>(dim) * kLog2Pi + log_det + y.squaredNorm());
}

inline double dense_oracle_log_density(const FactorAnalyser& fa, const Vector& x) {
  return dense_oracle_log_density(fa.mean(), fa.covariance(), x);
}

struct DenseGaussian {
  double log_weight;
  Vector mean;
  Matrix cov;
};

/// Flat Gaussians of a tree built directly from the nested marginals:
/// a component with child Gaussians N(m, S) in its factor space becomes
/// N(W m + mu, W S W' + Psi).
inline std::vector<DenseGaussian> dense_flat_components(const DmfaNode& node) {
  std::vector<DenseGaussian> out;
  const MfaModel& layer = node.layer();
  for (std::size_t c = 0; c < layer.size(); ++c) {
    const FactorAnalyser& fa = layer.component(c);
    const double lw = layer.log_weights()(static_cast<Index>(c));
    std::vector<DenseGaussian> inner;
    if (node.has_child(c)) {
      inner = dense_flat_components(*node.child(c));
    } else {
      inner.push_back({0.0, Vector::Zero(fa.factors()), Matrix::Identity(fa.factors(), fa.factors())});
    }
    for (const DenseGaussian& g : inner) {
      Matrix cov = fa.loading() * g.cov * fa.loading().transpose();
      cov.diagonal() += fa.noise();
      out.push_back({lw + g.log_weight, fa.loading() * g.mean + fa.mean(), std::move(cov)});
    }
  }
  return out;
}

inline double dense_mixture_log_density(const std::vector<DenseGaussian>& comps, const Vector& x) {
  Vector terms(static_cast<Index>(comps.size()));
  for (std::size_t s = 0; s < comps.size(); ++s)
    terms(static_cast<Index>(s)) =
        comps[s].log_weight + dense_oracle_log_density(comps[s].mean, comps[s].cov, x);
  return log_sum_exp(terms);
}

/// iteration,train_ll[,valid_ll] for plotting.
inline void emit_trace_csv(const TrainingTrace& trace, const std::string& path) {
  const bool with_valid = !trace.valid_ll.empty();
  RowMatrix table(trace.iterations(), with_valid ? 3 : 2);
  for (int t = 0; t < trace.iterations(); ++t) {
    table(t, 0) = t;
    table(t, 1) = trace.train_ll[static_cast<std::size_t>(t)];
    if (with_valid) table(t, 2) = trace.valid_ll[static_cast<std::size_t>(t)];
  }
  std::vector<std::string> header{"iteration", "train_ll"};
  if (with_valid) header.emplace_back("valid_ll");
  save_matrix(path, table, MatrixFormat::csv, header);
}

}  // namespace dmfa
