#pragma once

// Latent activity by layer.
//
// S[j][l] is kept as exact fixed point (2^-64 resolution, 128-bit) so that
// totals do not depend on accumulation order; C and token counts are exact
// integers. Everything derived is computed in double.
//
// MLAN v1: "MLAN" | u32 version=1 | u32 n | u32 n_layers | S (n*n_layers f64,
//   latent-major) | C (n*n_layers u64) | per-token variance sums (n f64) |
//   per-token counts (n u64) | u64 tokens_processed

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mlsae/activation_stream.hpp"
#include "mlsae/binary_io.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/types.hpp"

namespace mlsae {

class BatchSource;

inline constexpr io::Magic kAnalyticsMagic{'M', 'L', 'A', 'N'};

class LatentLayerTotals {
 public:
  LatentLayerTotals() = default;
  LatentLayerTotals(std::uint32_t n_latents, std::uint32_t n_layers);

  std::uint32_t n_latents() const { return n_; }
  std::uint32_t n_layers() const { return layers_; }
  std::uint64_t tokens_processed() const { return tokens_; }

  /// Adds one activation value (must be finite and >= 0).
  void add(LatentIndex j, LayerIndex l, float value);
  void add_tokens(std::uint64_t count) { tokens_ += count; }

  double sum(LatentIndex j, LayerIndex l) const;
  std::uint64_t count(LatentIndex j, LayerIndex l) const { return c_[index(j, l)]; }
  /// Sum over layers of S[j]; 0 means never active.
  double latent_total(LatentIndex j) const;
  bool active(LatentIndex j) const;

  void merge(const LatentLayerTotals& other);
  bool operator==(const LatentLayerTotals& other) const;

  /// Raw setters used by snapshot loading.
  void set_sum(LatentIndex j, LayerIndex l, double value);
  void set_count(LatentIndex j, LayerIndex l, std::uint64_t c) { c_[index(j, l)] = c; }
  void set_tokens(std::uint64_t t) { tokens_ = t; }

 private:
  std::size_t index(LatentIndex j, LayerIndex l) const { return std::size_t{j} * layers_ + l; }

  std::uint32_t n_ = 0;
  std::uint32_t layers_ = 0;
  std::uint64_t tokens_ = 0;
  std::vector<__int128> s_;
  std::vector<std::uint64_t> c_;
};

class PerTokenVarianceAccumulator {
 public:
  PerTokenVarianceAccumulator() = default;
  explicit PerTokenVarianceAccumulator(std::uint32_t n_latents)
      : sums_(n_latents, 0.0), counts_(n_latents, 0) {}

  void add(LatentIndex j, double variance);
  std::uint32_t n_latents() const { return static_cast<std::uint32_t>(sums_.size()); }
  double sum(LatentIndex j) const { return sums_[j]; }
  std::uint64_t count(LatentIndex j) const { return counts_[j]; }
  /// Mean single-token variance for latent j; nullopt if it was never active.
  std::optional<double> mean(LatentIndex j) const;
  void merge(const PerTokenVarianceAccumulator& other);

  std::vector<double>& sums() { return sums_; }
  std::vector<std::uint64_t>& counts() { return counts_; }
  const std::vector<double>& sums() const { return sums_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

 private:
  std::vector<double> sums_;
  std::vector<std::uint64_t> counts_;
};

struct AnalyticsSnapshot {
  LatentLayerTotals totals;
  PerTokenVarianceAccumulator per_token;

  void merge(const AnalyticsSnapshot& other);
};

/// Mean and variance of the layer index under a distribution over layers.
struct LayerMoments {
  double mean = 0.0;
  double variance = 0.0;
};
LayerMoments layer_moments(std::span<const double> p);

/// Accumulates encoded latents. Rows sharing a token_index must cover every
/// layer exactly once; an incomplete token throws.
void accumulate(const SparseLatents<float>& latents, std::span<const RowProvenance> rows,
                AnalyticsSnapshot& snapshot);

/// P(L = l | J = j); nullopt for a never-active latent.
std::optional<std::vector<double>> layer_distribution(const LatentLayerTotals& totals, LatentIndex j);
std::optional<double> expected_layer(const LatentLayerTotals& totals, LatentIndex j);

struct VarianceDecomposition {
  double total = 0.0;                  // Var(L)
  double within_latent = 0.0;          // E[Var(L|J)]
  double between_latent = 0.0;         // Var(E[L|J])
  double within_token = 0.0;           // E[Var(L|J,T)]
  double ratio_latent = 0.0;           // E[Var(L|J)] / Var(L)
  double ratio_token = 0.0;            // E[Var(L|J,T)] / E[Var(L|J)]
  std::uint32_t active_latents = 0;
  std::uint32_t dead_latents = 0;
};

/// Expectations over J are uniform over active latents. A ratio whose
/// denominator is zero is reported as 0.
VarianceDecomposition variance_decomposition(const AnalyticsSnapshot& snapshot);

struct PerLatentValues {
  std::vector<std::optional<double>> values;  // nullopt = never active
  double mean = 0.0;                          // over active latents
};

/// Fraction of layers with C[j][l] > threshold_fraction * tokens_processed.
PerLatentValues active_layers(const LatentLayerTotals& totals, double threshold_fraction = 0.001);
/// H(P(L|J=j)) / ln(n_layers); 0 when n_layers == 1.
PerLatentValues normalized_entropy(const LatentLayerTotals& totals);
double normalized_entropy(std::span<const double> p);

enum class MmcsMode { Cross, Self };

/// Mean over columns of A of the max cosine similarity to columns of B. In
/// Self mode B must be A and the identical column is skipped.
double mmcs(const ColMatrix<float>& a, const ColMatrix<float>& b, MmcsMode mode = MmcsMode::Cross);
double mmcs_self(const ColMatrix<float>& a);

struct Histogram {
  double lo = -1.0;
  double hi = 1.0;
  std::vector<std::uint64_t> counts;
  double mean = 0.0;
  double variance = 0.0;  // population variance of the values
  std::uint64_t total = 0;

  /// Fraction of values in bins whose lower edge is >= `threshold`.
  double mass_above(double threshold) const;
};

/// Cosine similarities of all unordered pairs of columns.
std::vector<double> pairwise_cosines(const ColMatrix<double>& columns);
Histogram histogram(std::span<const double> values, std::size_t bins, double lo = -1.0, double hi = 1.0);

/// n i.i.d. standard normal d-vectors.
ColMatrix<double> negative_control(std::uint32_t d, std::uint32_t n, std::uint64_t seed);
/// n / n_layers standard normal vectors, each copied n_layers times with
/// unit-variance noise added to every copy.
ColMatrix<double> positive_control(std::uint32_t d, std::uint32_t n, std::uint32_t n_layers,
                                   std::uint64_t seed);

struct CosineHistograms {
  Histogram decoder;
  Histogram negative;
  Histogram positive;
};

CosineHistograms pairwise_cos_histogram(const ColMatrix<float>& decoder, std::size_t bins,
                                        std::uint32_t n_layers, std::uint64_t seed);

struct DriftStats {
  std::vector<double> pair_cosine;    // n_layers - 1 entries
  std::vector<double> pair_relative;  // l / (n_layers - 1)
  std::vector<std::uint64_t> skipped_pairs;
  std::vector<double> mean_norm;      // n_layers entries, raw space
  std::vector<double> norm_relative;  // l / n_layers
  std::uint64_t tokens = 0;
};

/// Two passes over the non-special tokens of a stream: per-layer means, then
/// centered adjacent-layer cosines and raw norms.
DriftStats residual_drift(const std::filesystem::path& stream, std::uint64_t max_tokens = 0);
DriftStats residual_drift(std::span<const ActivationRecord> records, std::uint32_t d,
                          std::uint32_t n_layers);

/// Encodes every batch of `source` and accumulates it.
AnalyticsSnapshot analyze(BatchSource& source, const SaeConfig& config, const SaeParams<float>& params,
                          std::uint32_t n_layers);

void write_snapshot(const AnalyticsSnapshot& snapshot, std::ostream& out);
AnalyticsSnapshot read_snapshot(std::istream& in);
void save_snapshot(const AnalyticsSnapshot& snapshot, const std::filesystem::path& path);
AnalyticsSnapshot load_snapshot(const std::filesystem::path& path);

}  // namespace mlsae
