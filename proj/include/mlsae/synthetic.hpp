#pragma once

// Synthetic sparse-dictionary data: x = D c with unit-norm atoms and
// s-sparse non-negative codes.

#include <cstdint>
#include <random>
#include <vector>

#include "mlsae/activation_stream.hpp"
#include "mlsae/trainer.hpp"
#include "mlsae/types.hpp"

namespace mlsae {

/// d x n_atoms, columns i.i.d. uniform on the unit sphere.
ColMatrix<float> random_unit_dictionary(std::uint32_t d, std::uint32_t n_atoms, std::uint64_t seed);

struct SparseCodeOptions {
  std::uint32_t sparsity = 4;
  /// Coefficients ~ U[min_coef, max_coef].
  double min_coef = 0.5;
  double max_coef = 1.5;
  double noise_std = 0.0;
};

class SparseCodeSampler {
 public:
  SparseCodeSampler(ColMatrix<float> dictionary, SparseCodeOptions options, std::uint64_t seed);

  /// rows x d samples; `support` (rows x sparsity, optional) receives the atoms used.
  RowMatrix<float> sample(std::size_t rows, std::vector<std::uint32_t>* support = nullptr);
  const ColMatrix<float>& dictionary() const { return dict_; }

 private:
  ColMatrix<float> dict_;
  SparseCodeOptions options_;
  std::mt19937_64 rng_;
};

/// Endless (or `max_batches`-bounded) single-layer batches from a sampler.
class SyntheticBatchSource : public BatchSource {
 public:
  SyntheticBatchSource(SparseCodeSampler sampler, std::size_t batch_rows, std::uint64_t max_batches = 0);
  std::optional<TrainingBatch> next() override;

 private:
  SparseCodeSampler sampler_;
  std::size_t rows_;
  std::uint64_t max_batches_;
  std::uint64_t produced_ = 0;
};

/// Multi-layer stream records: layer l uses dictionary D_l, a perturbation of
/// D_0 that grows with l, and each token's code is shared across layers.
struct LayeredStreamOptions {
  std::uint32_t d = 16;
  std::uint32_t n_layers = 4;
  std::uint32_t n_atoms = 32;
  std::uint64_t n_tokens = 1000;
  double layer_drift = 0.3;
  SparseCodeOptions codes;
  std::uint64_t seed = 0;
};

std::vector<ActivationRecord> synthetic_layered_records(const LayeredStreamOptions& options);

}  // namespace mlsae
