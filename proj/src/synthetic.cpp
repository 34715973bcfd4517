#include "mlsae/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mlsae/errors.hpp"

namespace mlsae {
namespace {

void normalize_columns(ColMatrix<double>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double norm = m.col(j).norm();
    if (!(norm > 0.0)) throw NumericError("synthetic: degenerate dictionary column");
    m.col(j) /= norm;
  }
}

ColMatrix<double> gaussian(std::uint32_t rows, std::uint32_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ColMatrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

}  // namespace

ColMatrix<float> random_unit_dictionary(std::uint32_t d, std::uint32_t n_atoms, std::uint64_t seed) {
  if (d < 1 || n_atoms < 1) throw RangeError("synthetic: dictionary needs d, n_atoms >= 1");
  std::mt19937_64 rng(seed);
  ColMatrix<double> m = gaussian(d, n_atoms, rng);
  normalize_columns(m);
  return m.cast<float>();
}

SparseCodeSampler::SparseCodeSampler(ColMatrix<float> dictionary, SparseCodeOptions options,
                                     std::uint64_t seed)
    : dict_(std::move(dictionary)), options_(options), rng_(seed) {
  if (options_.sparsity < 1 || options_.sparsity > dict_.cols()) {
    throw RangeError("synthetic: sparsity must be in [1, n_atoms]");
  }
  if (!(options_.min_coef >= 0.0 && options_.max_coef >= options_.min_coef)) {
    throw RangeError("synthetic: need 0 <= min_coef <= max_coef");
  }
}

RowMatrix<float> SparseCodeSampler::sample(std::size_t rows, std::vector<std::uint32_t>* support) {
  const auto d = dict_.rows();
  const auto n = static_cast<std::uint32_t>(dict_.cols());
  const std::uint32_t s = options_.sparsity;
  std::uniform_real_distribution<double> coef(options_.min_coef, options_.max_coef);
  std::normal_distribution<double> noise(0.0, options_.noise_std > 0 ? options_.noise_std : 1.0);
  std::vector<std::uint32_t> atoms(n);
  RowMatrix<float> x(static_cast<Eigen::Index>(rows), d);
  if (support) support->assign(rows * s, 0);
  Vector<double> acc(d);
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(atoms.begin(), atoms.end(), 0u);
    // Partial Fisher-Yates for s distinct atoms.
    for (std::uint32_t i = 0; i < s; ++i) {
      std::uniform_int_distribution<std::uint32_t> pick(i, n - 1);
      std::swap(atoms[i], atoms[pick(rng_)]);
    }
    acc.setZero();
    for (std::uint32_t i = 0; i < s; ++i) {
      acc += coef(rng_) * dict_.col(atoms[i]).cast<double>();
      if (support) (*support)[r * s + i] = atoms[i];
    }
    if (options_.noise_std > 0) {
      for (Eigen::Index c = 0; c < d; ++c) acc[c] += noise(rng_);
    }
    x.row(static_cast<Eigen::Index>(r)) = acc.cast<float>().transpose();
  }
  return x;
}

SyntheticBatchSource::SyntheticBatchSource(SparseCodeSampler sampler, std::size_t batch_rows,
                                           std::uint64_t max_batches)
    : sampler_(std::move(sampler)), rows_(batch_rows), max_batches_(max_batches) {
  if (rows_ < 2) throw RangeError("synthetic: batches need at least 2 rows");
}

std::optional<TrainingBatch> SyntheticBatchSource::next() {
  if (max_batches_ > 0 && produced_ >= max_batches_) return std::nullopt;
  TrainingBatch b;
  b.x = sampler_.sample(rows_);
  b.n_tokens = rows_;
  b.n_layers = 1;
  b.rows.reserve(rows_);
  for (std::size_t r = 0; r < rows_; ++r) b.rows.push_back({produced_ * rows_ + r, 0});
  ++produced_;
  return b;
}

std::vector<ActivationRecord> synthetic_layered_records(const LayeredStreamOptions& o) {
  if (o.n_layers < 1) throw RangeError("synthetic: n_layers must be >= 1");
  std::mt19937_64 rng(o.seed);
  ColMatrix<double> base = gaussian(o.d, o.n_atoms, rng);
  normalize_columns(base);
  std::vector<ColMatrix<double>> dicts;
  for (std::uint32_t l = 0; l < o.n_layers; ++l) {
    ColMatrix<double> m = base + (o.layer_drift * l) * gaussian(o.d, o.n_atoms, rng) /
                                     std::sqrt(static_cast<double>(o.d));
    normalize_columns(m);
    dicts.push_back(std::move(m));
  }
  if (o.codes.sparsity < 1 || o.codes.sparsity > o.n_atoms) {
    throw RangeError("synthetic: sparsity must be in [1, n_atoms]");
  }
  std::uniform_real_distribution<double> coef(o.codes.min_coef, o.codes.max_coef);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::uint32_t> atoms(o.n_atoms);
  std::vector<double> c(o.codes.sparsity);
  std::vector<ActivationRecord> records;
  records.reserve(o.n_tokens);
  for (std::uint64_t t = 0; t < o.n_tokens; ++t) {
    std::iota(atoms.begin(), atoms.end(), 0u);
    for (std::uint32_t i = 0; i < o.codes.sparsity; ++i) {
      std::uniform_int_distribution<std::uint32_t> pick(i, o.n_atoms - 1);
      std::swap(atoms[i], atoms[pick(rng)]);
      c[i] = coef(rng);
    }
    ActivationRecord rec;
    rec.token_id = atoms[0];
    rec.vectors.resize(std::size_t{o.d} * o.n_layers);
    for (std::uint32_t l = 0; l < o.n_layers; ++l) {
      Vector<double> v = Vector<double>::Zero(o.d);
      for (std::uint32_t i = 0; i < o.codes.sparsity; ++i) v += c[i] * dicts[l].col(atoms[i]);
      for (std::uint32_t k = 0; k < o.d; ++k) {
        if (o.codes.noise_std > 0) v[k] += o.codes.noise_std * noise(rng);
        rec.vectors[std::size_t{l} * o.d + k] = static_cast<float>(v[k]);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace mlsae
