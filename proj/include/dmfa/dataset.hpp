#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "dmfa/model.hpp"
#include "dmfa/rng.hpp"

namespace dmfa {

enum class PreprocessKind : std::uint32_t { none = 0, dc_removed = 1, standardized = 2 };

inline std::string_view to_string(PreprocessKind kind) {
  switch (kind) {
    case PreprocessKind::none: return "none";
    case PreprocessKind::dc_removed: return "dc_removed";
    case PreprocessKind::standardized: return "standardized";
  }
  return "unknown";
}

/// How a dataset was transformed before modelling. For standardized data
/// x_out = (x - shift) / scale; dc_removed subtracts each row's own mean and
/// cannot be inverted for a single sample.
struct PreprocessRecord {
  PreprocessKind kind = PreprocessKind::none;
  Vector shift;
  double scale = 1.0;

  bool invertible() const { return kind != PreprocessKind::dc_removed; }

  friend bool operator==(const PreprocessRecord& a, const PreprocessRecord& b) {
    return a.kind == b.kind && a.scale == b.scale && a.shift.size() == b.shift.size() &&
           (a.shift.size() == 0 || a.shift == b.shift);
  }
};

/// N x D matrix of finite reals plus its preprocessing record.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(RowMatrix rows, PreprocessRecord record = {})
      : rows_(std::move(rows)), record_(std::move(record)) {
    if (!all_finite(rows_)) {
      for (Index r = 0; r < rows_.rows(); ++r)
        for (Index c = 0; c < rows_.cols(); ++c)
          if (!std::isfinite(rows_(r, c)))
            throw NumericError("non-finite value at row " + std::to_string(r + 1) +
                               ", column " + std::to_string(c + 1));
    }
    if (record_.scale <= 0.0 || !std::isfinite(record_.scale))
      throw std::invalid_argument("preprocessing scale must be positive");
  }

  Index size() const { return rows_.rows(); }
  Index dim() const { return rows_.cols(); }
  bool empty() const { return rows_.rows() == 0; }
  const RowMatrix& rows() const { return rows_; }
  auto row(Index n) const { return rows_.row(n); }
  const PreprocessRecord& preprocessing() const { return record_; }

 private:
  RowMatrix rows_;
  PreprocessRecord record_;
};

/// x <- x - mean(x), row by row.
inline Dataset preprocess_dc_remove(const Dataset& data) {
  if (data.dim() < 2) throw std::invalid_argument("DC removal needs D >= 2");
  RowMatrix out = data.rows().colwise() - data.rows().rowwise().mean();
  PreprocessRecord rec;
  rec.kind = PreprocessKind::dc_removed;
  return Dataset(std::move(out), rec);
}

/// Subtracts per-dimension means and divides everything by the average of the
/// per-dimension standard deviations.
inline Dataset preprocess_standardize(const Dataset& data) {
  if (data.size() < 2) throw std::invalid_argument("standardization needs N >= 2");
  const Vector mean = data.rows().colwise().mean().transpose();
  const RowMatrix centred = data.rows().rowwise() - mean.transpose();
  const Vector stds =
      (centred.array().square().colwise().sum() / static_cast<double>(data.size()))
          .sqrt()
          .transpose();
  const double scale = stds.mean();
  if (!(scale > 0.0)) throw std::invalid_argument("standardization: data are constant");
  PreprocessRecord rec;
  rec.kind = PreprocessKind::standardized;
  rec.shift = mean;
  rec.scale = scale;
  return Dataset(centred / scale, rec);
}

/// Applies a recorded transform to raw data.
inline Dataset apply_preprocessing(const PreprocessRecord& record, const Dataset& raw) {
  if (raw.preprocessing().kind != PreprocessKind::none)
    throw std::invalid_argument("apply_preprocessing expects raw data");
  switch (record.kind) {
    case PreprocessKind::none: return raw;
    case PreprocessKind::dc_removed: return preprocess_dc_remove(raw);
    case PreprocessKind::standardized: {
      if (record.shift.size() != raw.dim())
        throw std::invalid_argument("preprocessing record dimension mismatch");
      RowMatrix out = (raw.rows().rowwise() - record.shift.transpose()) / record.scale;
      return Dataset(std::move(out), record);
    }
  }
  throw std::invalid_argument("unknown preprocessing kind");
}

/// Maps preprocessed rows (e.g. model samples) back to the raw scale.
inline Dataset invert_preprocessing(const Dataset& data) {
  const PreprocessRecord& rec = data.preprocessing();
  if (!rec.invertible())
    throw std::invalid_argument("per-row DC removal cannot be inverted");
  if (rec.kind == PreprocessKind::none) return data;
  RowMatrix out = (data.rows() * rec.scale).rowwise() + rec.shift.transpose();
  return Dataset(std::move(out));
}

/// Brings `data` onto the scale a model was trained on. Raw data are
/// transformed; already-preprocessed data must carry the same record.
inline Dataset align_preprocessing(const PreprocessRecord& model_record, const Dataset& data) {
  const PreprocessRecord& have = data.preprocessing();
  if (have.kind == PreprocessKind::none) return apply_preprocessing(model_record, data);
  if (have.kind != model_record.kind)
    throw std::invalid_argument(std::string("preprocessing mismatch: data is ") +
                                std::string(to_string(have.kind)) + ", model expects " +
                                std::string(to_string(model_record.kind)));
  if (!(have == model_record))
    throw std::invalid_argument("preprocessing mismatch: different transform parameters");
  return data;
}

inline Dataset select_rows(const Dataset& data, const std::vector<Index>& idx) {
  RowMatrix out(static_cast<Index>(idx.size()), data.dim());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = data.row(idx[i]);
  return Dataset(std::move(out), data.preprocessing());
}

struct Split {
  Dataset train;
  Dataset valid;
  Dataset test;
};

/// Seeded permutation, then contiguous train/valid/test blocks.
inline Split split(const Dataset& data, const std::array<double, 3>& fractions,
                   std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 ||
      std::any_of(fractions.begin(), fractions.end(), [](double f) { return f < 0.0; }))
    throw std::invalid_argument("split fractions must be nonnegative and sum to 1");
  const auto n = static_cast<double>(data.size());
  const auto b1 = static_cast<Index>(std::llround(fractions[0] * n));
  const auto b2 = static_cast<Index>(std::llround((fractions[0] + fractions[1]) * n));
  if (b1 <= 0 || b2 <= b1 || b2 >= data.size())
    throw std::invalid_argument("split would leave a partition empty");

  std::vector<Index> perm(static_cast<std::size_t>(data.size()));
  std::iota(perm.begin(), perm.end(), Index{0});
  Engine rng = make_engine(seed, "split");
  std::shuffle(perm.begin(), perm.end(), rng);

  auto part = [&](Index lo, Index hi) {
    return select_rows(data, std::vector<Index>(perm.begin() + lo, perm.begin() + hi));
  };
  return {part(0, b1), part(b1, b2), part(b2, data.size())};
}

/// Points (t, t^2 + noise * e) with t ~ U[-2, 2]: a curved one-dimensional
/// manifold whose single-FA aggregated posterior is far from Gaussian.
inline Dataset synth_curved(Index n, std::uint64_t seed, double noise) {
  if (n < 1) throw std::invalid_argument("synth_curved: n must be >= 1");
  if (noise < 0.0) throw std::invalid_argument("synth_curved: noise must be >= 0");
  Engine rng = make_engine(seed, "synth_curved");
  std::uniform_real_distribution<double> uniform(-2.0, 2.0);
  std::normal_distribution<double> normal;
  RowMatrix rows(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double t = uniform(rng);
    const double e = normal(rng);
    rows(i, 0) = t;
    rows(i, 1) = t * t + noise * e;
  }
  return Dataset(std::move(rows));
}

}  // namespace dmfa
