#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "dmfa/em.hpp"
#include "test_util.hpp"

using namespace dmfa;
using dmfa::testing::LMatrix;
using dmfa::testing::LVector;

namespace {

Dataset gaussian_rows(std::mt19937_64& rng, Index n, const Vector& mean, const Matrix& chol) {
  std::normal_distribution<double> normal;
  RowMatrix x(n, mean.size());
  for (Index i = 0; i < n; ++i) {
    Vector e(mean.size());
    for (Index j = 0; j < e.size(); ++j) e(j) = normal(rng);
    x.row(i) = (mean + chol * e).transpose();
  }
  return Dataset(std::move(x));
}

Dataset two_clusters(std::uint64_t seed, Index n_a, Index n_b) {
  std::mt19937_64 rng(seed);
  const Matrix chol = Matrix{{1.0, 0.0}, {0.6, 0.4}};
  const Dataset a = gaussian_rows(rng, n_a, Vector{{-4.0, 0.0}}, chol);
  const Dataset b = gaussian_rows(rng, n_b, Vector{{4.0, 1.0}}, chol);
  RowMatrix x(n_a + n_b, 2);
  x << a.rows(), b.rows();
  return Dataset(std::move(x));
}

/// Data whose sample mean and (population) covariance are exactly the
/// given ones.
Dataset exact_moment_rows(std::mt19937_64& rng, Index n, const Vector& mean, const Matrix& cov) {
  Dataset raw = gaussian_rows(rng, n, Vector::Zero(mean.size()), Matrix::Identity(mean.size(), mean.size()));
  RowMatrix x = raw.rows().rowwise() - raw.rows().colwise().mean();
  const Matrix sample = (x.transpose() * x) / static_cast<double>(n);
  const Matrix whiten = Eigen::LLT<Matrix>(sample).matrixL().solve(Matrix::Identity(mean.size(), mean.size()));
  const Matrix colour = Eigen::LLT<Matrix>(cov).matrixL();
  RowMatrix y = (x * whiten.transpose() * colour.transpose()).rowwise() + mean.transpose();
  return Dataset(std::move(y));
}

double max_principal_angle(const Matrix& a, const Matrix& b) {
  const Matrix qa = Eigen::HouseholderQR<Matrix>(a).householderQ() * Matrix::Identity(a.rows(), a.cols());
  const Matrix qb = Eigen::HouseholderQR<Matrix>(b).householderQ() * Matrix::Identity(b.rows(), b.cols());
  const Eigen::JacobiSVD<Matrix> svd(qa.transpose() * qb);
  return std::acos(std::min(1.0, svd.singularValues().minCoeff()));
}

double rel_diff(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace

TEST(InitMfa, SingleComponent) {
  const Dataset data = two_clusters(1, 30, 20);
  EmConfig cfg;
  cfg.components = 1;
  cfg.seed = 7;
  const MfaModel m = init_mfa(data, cfg);
  EXPECT_EQ(m.weights()(0), 1.0);
  bool is_row = false;
  for (Index i = 0; i < data.size(); ++i)
    is_row = is_row || (data.rows().row(i).transpose() == m.component(0).mean());
  EXPECT_TRUE(is_row);
  EXPECT_LT(m.component(0).loading().cwiseAbs().maxCoeff(), 0.1);
}

TEST(InitMfa, SameSeedIsBitwiseIdentical) {
  const Dataset data = two_clusters(2, 40, 40);
  EmConfig cfg;
  cfg.components = 4;
  cfg.seed = 99;
  const MfaModel a = init_mfa(data, cfg);
  const MfaModel b = init_mfa(data, cfg);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(a.component(c).mean(), b.component(c).mean());
    EXPECT_EQ(a.component(c).loading(), b.component(c).loading());
    EXPECT_EQ(a.component(c).noise(), b.component(c).noise());
  }
  EXPECT_EQ(a.log_weights(), b.log_weights());
}

TEST(InitMfa, AllRowsChosenWhenCEqualsN) {
  const Dataset data = two_clusters(3, 6, 5);
  EmConfig cfg;
  cfg.components = 11;
  const MfaModel m = init_mfa(data, cfg);
  std::set<Index> rows;
  for (std::size_t c = 0; c < m.size(); ++c)
    for (Index i = 0; i < data.size(); ++i)
      if (data.rows().row(i).transpose() == m.component(c).mean()) rows.insert(i);
  EXPECT_EQ(rows.size(), 11u);
}

TEST(InitMfa, SeedsOneCentrePerSeparatedCluster) {
  // Eight tight clusters on a ring; greedy seeding should almost never put
  // two centres in one cluster.
  std::mt19937_64 rng(12);
  const Matrix chol = 0.3 * Matrix::Identity(2, 2);
  RowMatrix x(8 * 50, 2);
  for (int k = 0; k < 8; ++k) {
    const double a = 2.0 * 3.141592653589793 * k / 8.0;
    x.middleRows(50 * k, 50) = gaussian_rows(rng, 50, Vector{{10 * std::cos(a), 10 * std::sin(a)}}, chol).rows();
  }
  const Dataset data(std::move(x));
  int covered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    EmConfig cfg;
    cfg.components = 8;
    cfg.seed = seed;
    const MfaModel m = init_mfa(data, cfg);
    std::set<long> clusters;
    for (std::size_t c = 0; c < m.size(); ++c) {
      const Vector mu = m.component(c).mean();
      clusters.insert(std::lround(std::atan2(mu(1), mu(0)) / (2.0 * 3.141592653589793 / 8.0) + 8) % 8);
    }
    if (clusters.size() == 8) ++covered;
  }
  EXPECT_GE(covered, 95);
}

TEST(InitMfa, Errors) {
  const Dataset data = two_clusters(4, 2, 1);
  EmConfig cfg;
  cfg.components = 4;
  EXPECT_THROW(init_mfa(data, cfg), std::invalid_argument);
  cfg.components = 1;
  cfg.factors = 3;
  EXPECT_THROW(init_mfa(data, cfg), std::invalid_argument);
  cfg.factors = 1;
  cfg.rel_tol = 0.0;
  EXPECT_THROW(init_mfa(data, cfg), std::invalid_argument);
}

TEST(EStep, ZeroLoadingSingleComponent) {
  const Dataset data = two_clusters(5, 20, 10);
  const MfaModel m({FactorAnalyser(Matrix::Zero(2, 1), Vector::Zero(2), Vector::Ones(2))}, Vector::Zero(1));
  const auto e = e_step(m, data);
  const ComponentStats& s = e.stats.components[0];
  EXPECT_NEAR(s.mass, 30.0, 1e-12);
  EXPECT_EQ(s.x_z.col(0).norm(), 0.0);
  EXPECT_NEAR(s.z_z(0, 0), 30.0, 1e-12);  // sum of E[z z'] = N * I
  EXPECT_EQ(s.z_z(0, 1), 0.0);
}

TEST(EStep, MirroredDataSplitsEvenly) {
  std::mt19937_64 rng(6);
  const Dataset half = gaussian_rows(rng, 50, Vector{{2.0, 1.0}}, Matrix::Identity(2, 2));
  RowMatrix x(100, 2);
  x << half.rows(), -half.rows();
  const Matrix w{{0.3}, {0.1}};
  const MfaModel m = MfaModel::from_weights(
      {FactorAnalyser(w, Vector{{1.0, 0.5}}, Vector::Ones(2)),
       FactorAnalyser(-w, Vector{{-1.0, -0.5}}, Vector::Ones(2))},
      Vector::Ones(2));
  const auto e = e_step(m, Dataset(std::move(x)));
  EXPECT_NEAR(e.stats.components[0].mass, e.stats.components[1].mass, 1e-9 * 100);
}

TEST(EStep, MatchesRowByRowOracle) {
  std::mt19937_64 rng(7);
  const MfaModel m = dmfa::testing::random_mfa(rng, 3, 5, 2);
  RowMatrix x(50, 5);
  for (Index i = 0; i < 50; ++i)
    x.row(i) = dmfa::testing::random_point(rng, m.component(static_cast<std::size_t>(i % 3)), 1.0).transpose();
  const Dataset data(x);

  const Index d = 2;
  std::vector<long double> mass(3, 0.0L);
  std::vector<LMatrix> xz(3, LMatrix::Zero(5, d + 1)), zz(3, LMatrix::Zero(d + 1, d + 1));
  std::vector<LVector> xsq(3, LVector::Zero(5));
  long double ll = 0.0L;
  for (Index i = 0; i < 50; ++i) {
    const Vector row = x.row(i).transpose();
    std::vector<long double> joint(3);
    long double total = 0.0L;
    for (std::size_t c = 0; c < 3; ++c) {
      joint[c] = std::exp(static_cast<long double>(m.log_weights()(static_cast<Index>(c))) +
                          dmfa::testing::brute_component_log_density(m.component(c), row));
      total += joint[c];
    }
    ll += std::log(total);
    for (std::size_t c = 0; c < 3; ++c) {
      const FactorAnalyser& fa = m.component(c);
      const long double r = joint[c] / total;
      const LMatrix w = fa.loading().cast<long double>();
      const LMatrix gamma_inv = dmfa::testing::dense_gamma(fa).cast<long double>().inverse();
      const LVector resid = (row - fa.mean()).cast<long double>();
      LVector zt(d + 1);
      zt.head(d) = w.transpose() * gamma_inv * resid;
      zt(d) = 1.0L;
      LMatrix ezz = zt * zt.transpose();
      ezz.topLeftCorner(d, d) += LMatrix::Identity(d, d) - w.transpose() * gamma_inv * w;
      const LVector xl = row.cast<long double>();
      mass[c] += r;
      xz[c] += r * xl * zt.transpose();
      zz[c] += r * ezz;
      xsq[c] += r * xl.cwiseProduct(xl);
    }
  }
  const auto e = e_step(m, data);
  EXPECT_NEAR(e.avg_log_likelihood, static_cast<double>(ll / 50.0L), 1e-9 * std::abs(static_cast<double>(ll / 50.0L)));
  for (std::size_t c = 0; c < 3; ++c) {
    const ComponentStats& s = e.stats.components[c];
    EXPECT_NEAR(s.mass, static_cast<double>(mass[c]), 1e-9 * static_cast<double>(mass[c]));
    EXPECT_LT(rel_diff(s.x_z, xz[c].cast<double>()), 1e-9);
    EXPECT_LT(rel_diff(s.z_z, zz[c].cast<double>()), 1e-9);
    EXPECT_LT(rel_diff(s.x_sq, xsq[c].cast<double>()), 1e-9);
  }
}

TEST(EStep, MassSumsToNAndMomentsArePsd) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + static_cast<std::size_t>(trial % 5);
    const MfaModel m = dmfa::testing::random_mfa(rng, c, 4, 2);
    const Index n = 10 + 97 * trial;
    RowMatrix x(n, 4);
    for (Index i = 0; i < n; ++i)
      x.row(i) = dmfa::testing::random_point(rng, m.component(static_cast<std::size_t>(i) % c)).transpose();
    const auto e = e_step(m, Dataset(std::move(x)), 3);
    double total = 0.0;
    for (const ComponentStats& s : e.stats.components) {
      total += s.mass;
      EXPECT_LT((s.z_z - s.z_z.transpose()).norm(), 1e-12 * s.z_z.norm() + 1e-300);
      const Eigen::SelfAdjointEigenSolver<Matrix> eig(s.z_z);
      EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-9 * s.z_z.norm());
    }
    EXPECT_NEAR(total, static_cast<double>(n), 1e-8);
  }
}

TEST(EStep, ThreadCountDoesNotChangeBits) {
  std::mt19937_64 rng(9);
  const MfaModel m = dmfa::testing::random_mfa(rng, 3, 4, 2);
  RowMatrix x(3000, 4);
  for (Index i = 0; i < x.rows(); ++i)
    x.row(i) = dmfa::testing::random_point(rng, m.component(static_cast<std::size_t>(i % 3))).transpose();
  const Dataset data(std::move(x));
  const auto one = e_step(m, data, 1);
  const auto four = e_step(m, data, 4);
  EXPECT_EQ(one.avg_log_likelihood, four.avg_log_likelihood);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(one.stats.components[c].x_z, four.stats.components[c].x_z);
    EXPECT_EQ(one.stats.components[c].z_z, four.stats.components[c].z_z);
  }
}

TEST(EStep, Errors) {
  const MfaModel m({FactorAnalyser(Matrix::Zero(2, 1), Vector::Zero(2), Vector::Ones(2))}, Vector::Zero(1));
  EXPECT_THROW(e_step(m, Dataset(RowMatrix::Zero(3, 3))), std::invalid_argument);
  RowMatrix huge = RowMatrix::Zero(3, 2);
  huge(1, 0) = 1e200;
  try {
    e_step(m, Dataset(huge));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("component 0"), std::string::npos);
  }
}

TEST(MStep, ZeroLoadingRecoversDataMean) {
  const Dataset data = two_clusters(10, 25, 25);
  const MfaModel m({FactorAnalyser(Matrix::Zero(2, 1), Vector::Zero(2), Vector::Ones(2))}, Vector::Zero(1));
  const MfaModel next = m_step(e_step(m, data).stats, EmConfig{});
  const Vector mean = data.rows().colwise().mean().transpose();
  EXPECT_LT((next.component(0).mean() - mean).norm(), 1e-12);
  EXPECT_EQ(next.weights()(0), 1.0);
}

TEST(MStep, SimplexAndFloorOnRandomStats) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  EmConfig cfg;
  cfg.variance_floor = 0.05;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + static_cast<std::size_t>(trial % 4);
    const MfaModel m = dmfa::testing::random_mfa(rng, c, 3, 1);
    RowMatrix x(40, 3);
    for (Index i = 0; i < 40; ++i) {
      x.row(i) = dmfa::testing::random_point(rng, m.component(static_cast<std::size_t>(i) % c), u(rng)).transpose();
      if (trial % 2 == 0) x(i, 2) = 1.5;  // constant column drives Psi to the floor
    }
    const MfaModel next = m_step(e_step(m, Dataset(std::move(x))).stats, cfg);
    EXPECT_NEAR(next.weights().sum(), 1.0, 1e-12);
    for (const FactorAnalyser& fa : next.components()) EXPECT_GE(fa.noise().minCoeff(), cfg.variance_floor);
  }
}

TEST(MStep, SingularMomentsAreRidged) {
  SufficientStats stats(1, 2, 1);
  ComponentStats& s = stats.components[0];
  s.mass = 10.0;
  s.z_z(1, 1) = 10.0;  // factor block is zero
  s.x_z.col(1) = Vector{{10.0, 20.0}};
  s.x_sq = Vector{{20.0, 50.0}};
  stats.rows = 10.0;
  MStepDiagnostics diag;
  const MfaModel m = m_step(stats, EmConfig{}, &diag);
  ASSERT_EQ(diag.regularized.size(), 1u);
  EXPECT_EQ(diag.regularized[0], 0u);
  EXPECT_NEAR(m.component(0).mean()(1), 2.0, 1e-6);
}

TEST(MStep, RecoversLoadingSubspace) {
  std::mt19937_64 rng(12);
  const FactorAnalyser truth = dmfa::testing::random_component(rng, 6, 2);
  const Dataset data = gaussian_rows(rng, 100000, truth.mean(),
                                     Eigen::LLT<Matrix>(truth.covariance()).matrixL());
  EmConfig cfg;
  cfg.components = 1;
  cfg.factors = 2;
  cfg.seed = 3;
  cfg.rel_tol = 1e-8;  // run EM to its fixed point; the default stops early on slow tails
  cfg.max_iters = 3000;
  const FitResult fit = fit_mfa(data, cfg);
  EXPECT_LT(max_principal_angle(fit.model.component(0).loading(), truth.loading()), 0.1);
}

TEST(MStep, FixedPointAtExactMoments) {
  std::mt19937_64 rng(13);
  const FactorAnalyser truth = dmfa::testing::random_component(rng, 5, 2);
  const Dataset data = exact_moment_rows(rng, 100000, truth.mean(), truth.covariance());
  const MfaModel m({truth}, Vector::Zero(1));
  const MfaModel next = m_step(e_step(m, data).stats, EmConfig{});
  const FactorAnalyser& fa = next.component(0);
  EXPECT_LT(rel_diff(fa.loading(), truth.loading()), 1e-3);
  EXPECT_LT(rel_diff(fa.mean(), truth.mean()), 1e-3);
  EXPECT_LT(rel_diff(fa.noise(), truth.noise()), 1e-3);
}

TEST(FitMfa, SingleGaussianConverges) {
  std::mt19937_64 rng(14);
  const Dataset data = gaussian_rows(rng, 1000, Vector{{1.0, -1.0, 0.5}},
                                     Matrix{{1.0, 0.0, 0.0}, {0.5, 1.0, 0.0}, {0.2, 0.3, 0.5}});
  EmConfig cfg;
  cfg.components = 1;
  cfg.factors = 1;
  const FitResult fit = fit_mfa(data, cfg);
  EXPECT_EQ(fit.trace.reason, Termination::converged);
  EXPECT_LE(fit.trace.iterations(), cfg.max_iters);
  EXPECT_TRUE(fit.trace.monotone());
}

TEST(FitMfa, TwoClustersImprove) {
  const Dataset data = two_clusters(15, 1000, 1000);
  EmConfig cfg;
  cfg.components = 2;
  cfg.factors = 1;
  cfg.seed = 4;
  const FitResult fit = fit_mfa(data, cfg);
  EXPECT_GT(fit.trace.train_ll.back(), fit.trace.train_ll.front());
  EXPECT_TRUE(fit.trace.reseed_iterations.empty());
  EXPECT_TRUE(fit.trace.monotone());
  EXPECT_NEAR(fit.model.weights().minCoeff(), 0.5, 0.02);
}

TEST(FitMfa, MonotoneOnRandomProblems) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const MfaModel truth = dmfa::testing::random_mfa(rng, 3, 5, 2);
    RowMatrix x(600, 5);
    for (Index i = 0; i < x.rows(); ++i)
      x.row(i) = dmfa::testing::random_point(rng, truth.component(static_cast<std::size_t>(i % 3)), 0.7).transpose();
    EmConfig cfg;
    cfg.components = 1 + static_cast<int>(seed % 4);
    cfg.factors = 1 + static_cast<int>(seed % 3);
    cfg.seed = seed;
    cfg.max_iters = 60;
    const FitResult fit = fit_mfa(Dataset(std::move(x)), cfg);
    if (fit.trace.reseed_iterations.empty()) EXPECT_TRUE(fit.trace.monotone()) << "seed " << seed;
  }
}

TEST(FitMfa, RerunIsIdentical) {
  const Dataset data = two_clusters(16, 700, 300);
  EmConfig cfg;
  cfg.components = 3;
  cfg.factors = 1;
  cfg.seed = 21;
  const FitResult a = fit_mfa(data, cfg);
  cfg.threads = 3;
  const FitResult b = fit_mfa(data, cfg);
  EXPECT_EQ(a.trace.train_ll, b.trace.train_ll);
  EXPECT_EQ(a.model.log_weights(), b.model.log_weights());
}

TEST(FitMfa, StarvedComponentHitsReseedLimit) {
  const Dataset data = two_clusters(17, 800, 200);
  EmConfig cfg;
  cfg.components = 2;
  cfg.factors = 1;
  cfg.min_effective_count = 500.0;
  const FitResult fit = fit_mfa(data, cfg);
  EXPECT_EQ(fit.trace.reason, Termination::degenerate_restart_limit);
  // Either component may be the starved one; each is reseeded at most 3 times.
  EXPECT_GE(fit.trace.reseed_iterations.size(), 3u);
  EXPECT_LE(fit.trace.reseed_iterations.size(), 6u);
  EXPECT_TRUE(fit.trace.monotone());
  EXPECT_EQ(fit.model.size(), 2u);
}

TEST(FitMfa, EarlyStoppingReturnsBestValidationModel) {
  const Dataset train = two_clusters(18, 40, 30);
  const Dataset valid = two_clusters(19, 400, 300);
  EmConfig cfg;
  cfg.components = 6;
  cfg.factors = 2;
  cfg.min_effective_count = 0.5;
  const FitResult fit = fit_mfa(train, cfg, {&valid, 2});
  ASSERT_EQ(fit.trace.valid_ll.size(), fit.trace.train_ll.size());
  const auto best = static_cast<std::size_t>(fit.trace.best_iteration);
  for (double v : fit.trace.valid_ll) EXPECT_LE(v, fit.trace.valid_ll[best]);
  EXPECT_NEAR(per_row_log_likelihood(fit.model, valid.rows(), 1).mean(), fit.trace.valid_ll[best], 1e-12);
  EXPECT_THROW(fit_mfa(train, cfg, {nullptr, 2}), std::invalid_argument);
}
