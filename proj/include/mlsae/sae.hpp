#pragma once

// k-sparse autoencoder shared across layers.
//
//   z     = W_enc (x - b_dec)
//   h     = ReLU(TopK(z))
//   x_hat = W_dec h + b_dec
//
// A single bias vector b_dec is stored: it is added after the decoder and
// subtracted before the encoder, so the pre-encoder bias is its negative.
// W_enc is stored n x d (one row per latent); W_dec is stored d x n
// column-major so each latent's decoder vector is contiguous.
//
// All templates are instantiated for float (training) and double
// (gradient checks).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "mlsae/binary_io.hpp"
#include "mlsae/types.hpp"

namespace mlsae {

inline constexpr io::Magic kCheckpointMagic{'M', 'L', 'S', 'C'};

struct SaeConfig {
  std::uint32_t d = 0;
  std::uint32_t expansion_factor = 1;
  std::uint32_t k = 1;
  std::uint32_t k_aux = 1;
  double alpha = 1.0 / 32.0;

  std::uint32_t n() const { return d * expansion_factor; }
  void validate() const;
  bool operator==(const SaeConfig&) const = default;
};

/// Power of two closest to d/2 (ties resolve downwards), at least 1.
std::uint32_t default_k_aux(std::uint32_t d);

template <typename T>
struct SaeParams {
  RowMatrix<T> encoder;  // n x d
  ColMatrix<T> decoder;  // d x n
  Vector<T> bias;        // d (post-decoder bias)

  Eigen::Index d() const { return bias.size(); }
  Eigen::Index n() const { return encoder.rows(); }
  void validate(const SaeConfig& config) const;

  template <typename U>
  SaeParams<U> cast() const {
    return {encoder.template cast<U>(), decoder.template cast<U>(), bias.template cast<U>()};
  }
};

/// Exactly `k` (index, value) pairs per row, indices strictly increasing.
template <typename T>
struct SparseLatents {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<LatentIndex> indices;  // rows * k
  std::vector<T> values;             // rows * k, >= 0

  std::span<const LatentIndex> row_indices(std::size_t r) const {
    return std::span<const LatentIndex>(indices).subspan(r * k, k);
  }
  std::span<const T> row_values(std::size_t r) const {
    return std::span<const T>(values).subspan(r * k, k);
  }
};

/// true = dead. An empty mask means no latent is dead.
using DeadMask = std::vector<bool>;

template <typename T>
RowMatrix<T> pre_activations(const RowMatrix<T>& x, const SaeParams<T>& params);

/// k largest entries per row (ties: lower index), ReLU applied to the values.
/// When `candidates` is non-empty only those latent indices compete, and at
/// most min(k, candidates.size()) entries are kept.
template <typename T>
SparseLatents<T> top_k(const RowMatrix<T>& pre, std::size_t k,
                       std::span<const LatentIndex> candidates = {});

template <typename T>
SparseLatents<T> encode(const RowMatrix<T>& x, const SaeParams<T>& params, const SaeConfig& config);

template <typename T>
RowMatrix<T> decode(const SparseLatents<T>& latents, const SaeParams<T>& params);

/// Sum over rows of squared distance to the batch mean.
template <typename T>
double total_variance(const RowMatrix<T>& x);

/// sum ||x - x_hat||^2 / sum ||x - mean(x)||^2 over the batch.
template <typename T>
double fvu(const RowMatrix<T>& x, const RowMatrix<T>& x_hat);

template <typename T>
struct AuxTerm {
  bool active = false;  // false when no latent is dead
  double loss = 0.0;
  SparseLatents<T> latents;
  RowMatrix<T> reconstruction;  // e_hat
};

/// Auxiliary reconstruction of e = x - x_hat from the k_aux largest dead
/// pre-activations; loss is sum ||e - e_hat||^2 / batch.
template <typename T>
AuxTerm<T> aux_term(const RowMatrix<T>& x, const RowMatrix<T>& x_hat, const RowMatrix<T>& pre,
                    const DeadMask& dead, const SaeParams<T>& params, const SaeConfig& config);

template <typename T>
double aux_loss(const RowMatrix<T>& x, const RowMatrix<T>& x_hat, const RowMatrix<T>& pre,
                const DeadMask& dead, const SaeParams<T>& params, const SaeConfig& config) {
  return aux_term(x, x_hat, pre, dead, params, config).loss;
}

template <typename T>
struct ForwardOutput {
  SparseLatents<T> latents;
  RowMatrix<T> reconstruction;
  RowMatrix<T> pre;
  AuxTerm<T> aux;
  double variance = 0.0;  // FVU denominator
  double fvu = 0.0;
  double aux_loss = 0.0;
  double total_loss = 0.0;
};

template <typename T>
ForwardOutput<T> forward_loss(const RowMatrix<T>& x, const SaeParams<T>& params,
                              const SaeConfig& config, const DeadMask& dead = {});

template <typename T>
struct SaeGradients {
  RowMatrix<T> encoder;
  ColMatrix<T> decoder;
  Vector<T> bias;

  bool all_finite() const { return encoder.allFinite() && decoder.allFinite() && bias.allFinite(); }
};

/// Gradient of total_loss with the TopK and dead selections and the FVU
/// denominator held fixed.
template <typename T>
SaeGradients<T> backward(const RowMatrix<T>& x, const ForwardOutput<T>& fwd,
                         const SaeParams<T>& params, const SaeConfig& config);

/// g_j <- g_j - (g_j . w_j) w_j for every decoder column w_j.
template <typename T>
void project_decoder_gradient(ColMatrix<T>& grad, const SaeParams<T>& params);

/// Scales every decoder column to unit norm. Throws NumericError on a zero column.
template <typename T>
void renormalize_decoder(SaeParams<T>& params);

struct GeometricMedianOptions {
  double relative_tolerance = 1e-6;
  int max_iterations = 100;
};

struct GeometricMedianResult {
  Vector<double> median;
  int iterations = 0;
  bool converged = false;
};

/// Weiszfeld iteration started from the mean. Convergence: step norm
/// <= tol * max(||y||, 1).
template <typename T>
GeometricMedianResult geometric_median(const RowMatrix<T>& points,
                                       const GeometricMedianOptions& options = {});

template <typename T>
struct InitResult {
  SaeParams<T> params;
  GeometricMedianResult median;  // converged == false is a warning, not an error
};

/// Encoder ~ U[-1/sqrt(d), 1/sqrt(d)], decoder = encoder^T with unit columns,
/// bias = geometric median of `first_batch`.
template <typename T>
InitResult<T> init_params(const RowMatrix<T>& first_batch, const SaeConfig& config,
                          std::uint64_t seed);

// MLSC checkpoint: "MLSC" | u32 version=1 | u32 d | u32 expansion_factor |
// u32 n | u32 k | u32 k_aux | f64 alpha | W_enc (n rows of d f32) |
// b_dec (d f32) | W_dec (n columns of d f32) | optional trainer state.
void write_sae(std::ostream& out, const SaeConfig& config, const SaeParams<float>& params);
/// Reads config and parameters, leaving `in` positioned at the trainer state.
void read_sae(std::istream& in, SaeConfig& config, SaeParams<float>& params);

}  // namespace mlsae
