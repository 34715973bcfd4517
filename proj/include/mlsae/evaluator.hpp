#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlsae/activation_stream.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/toy_transformer.hpp"
#include "mlsae/tuned_lens.hpp"

namespace mlsae {

class BatchSource;

struct LayerMetrics {
  double fvu = 0.0;
  /// Per-element mean squared error after destandardization.
  double mse = 0.0;
  double l1_per_token = 0.0;
  /// Selected latents per token (k by construction).
  double l0_per_token = 0.0;
  /// Selected latents with a nonzero value per token.
  double l0_nonzero_per_token = 0.0;
  std::optional<double> delta_ce;
  std::optional<double> kl;
};

struct EvalReport {
  std::vector<LayerMetrics> layers;
  LayerMetrics mean;  // unweighted mean over layers
  double dead_fraction = 0.0;
  std::uint64_t tokens_evaluated = 0;

  void compute_mean();
  std::string to_csv() const;
  std::string to_json() const;
};

/// Per-layer reconstruction sums. Inputs are in the standardized space the
/// SAE sees; `stds` converts squared errors back to raw (or lens-space) units.
class ReconstructionAccumulator {
 public:
  ReconstructionAccumulator(std::uint32_t d, std::uint32_t n_layers, std::uint32_t n_latents);

  void add(const RowMatrix<float>& x, const RowMatrix<float>& x_hat, const SparseLatents<float>& latents,
           std::span<const RowProvenance> rows);
  /// One std per layer; empty means the inputs are already raw.
  EvalReport report(std::span<const float> stds = {}) const;

 private:
  struct Layer {
    std::uint64_t rows = 0;
    double sse = 0.0;
    double sum_sq = 0.0;
    std::vector<double> sum;
    double l1 = 0.0;
    std::uint64_t selected = 0;
    std::uint64_t nonzero = 0;
  };
  std::uint32_t d_;
  std::vector<Layer> layers_;
  std::vector<char> fired_;
  std::uint64_t tokens_ = 0;
  std::uint64_t last_token_ = ~std::uint64_t{0};
};

/// Reconstruction metrics over every batch of `source`.
EvalReport eval_reconstruction(BatchSource& source, const SaeConfig& config, const SaeParams<float>& params,
                               const LayerStats& stats);
/// Reads up to `n_tokens` non-special tokens (0 = all) from an MLSA stream.
EvalReport eval_reconstruction(const std::filesystem::path& stream, const SaeConfig& config,
                               const SaeParams<float>& params, const LayerStats& stats,
                               const TunedLens* lens, std::uint64_t n_tokens,
                               std::size_t tokens_per_batch = 4096);

/// Maps the raw residual rows of one layer (non-special positions) to their
/// replacements.
using Reconstructor = std::function<RowMatrix<float>(const RowMatrix<float>& raw, std::size_t layer)>;

/// lens apply -> standardize -> encode/decode -> destandardize -> lens invert.
Reconstructor sae_reconstructor(const SaeConfig& config, const SaeParams<float>& params,
                                const LayerStats& stats, const TunedLens* lens);

struct DownstreamMetrics {
  double clean_ce = 0.0;
  double patched_ce = 0.0;
  double delta_ce = 0.0;
  double kl = 0.0;
  std::uint64_t positions = 0;
};

/// CE is averaged over next-token predictions and KL over positions, both
/// pooled across sequences.
DownstreamMetrics eval_downstream(const toy::ModelWeights& weights,
                                  const std::vector<std::vector<TokenId>>& sequences, std::size_t layer,
                                  const Reconstructor& reconstruct);

struct EvalMatrix {
  std::vector<std::uint32_t> train_layers;   // one row per single-layer SAE
  std::uint32_t n_eval_layers = 0;
  std::vector<std::vector<double>> fvu;       // [row][eval layer]
  std::vector<std::vector<double>> delta_ce;  // empty unless downstream was run
  std::optional<std::vector<double>> mlsae_fvu;
  std::optional<std::vector<double>> mlsae_delta_ce;

  std::string to_csv(const std::string& metric = "fvu") const;
};

struct SaeModel {
  SaeConfig config;
  SaeParams<float> params;
  std::uint32_t train_layer = 0;
};

struct MatrixInputs {
  std::filesystem::path stream;
  const LayerStats* stats = nullptr;
  const TunedLens* lens = nullptr;
  std::uint64_t n_tokens = 0;
  const toy::ModelWeights* model = nullptr;  // enables delta_ce
  const std::vector<std::vector<TokenId>>* sequences = nullptr;
};

EvalMatrix eval_matrix(const std::vector<SaeModel>& single_layer, const SaeModel* mlsae,
                       const MatrixInputs& inputs);

}  // namespace mlsae
