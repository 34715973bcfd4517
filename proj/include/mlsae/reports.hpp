#pragma once

// Heatmaps of latent activity by layer and the CSV tables behind them.
// Images are plain PGM (P2), one cell_size x cell_size block per
// (latent, layer) cell, rows ordered by expected layer then latent index.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mlsae/evaluator.hpp"
#include "mlsae/layer_analytics.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/toy_transformer.hpp"
#include "mlsae/tuned_lens.hpp"

namespace mlsae {

inline constexpr std::string_view kDefaultPrompt = "When John and Mary went to the store, John gave";

enum class HeatmapMode { Aggregate, SinglePrompt, Totals };
enum class HeatmapNormalization { PerLatent, PowerLaw };

struct HeatmapSpec {
  HeatmapMode mode = HeatmapMode::Aggregate;
  HeatmapNormalization normalization = HeatmapNormalization::PerLatent;
  double gamma = 1.0;
  /// Single-prompt mode drops latents whose maximum activation is below this.
  double min_activation = 1e-3;
  std::uint32_t cell_size = 1;

  void validate() const;
};

/// Activation of every latent at every layer summed over one prompt's
/// non-special tokens, plus each latent's maximum single activation.
struct PromptActivations {
  std::uint32_t n_latents = 0;
  std::uint32_t n_layers = 0;
  std::vector<double> sums;    // n_latents * n_layers
  std::vector<double> maxima;  // n_latents
};

PromptActivations prompt_activations(std::span<const TokenId> tokens, const toy::ModelWeights& model,
                                     const SaeConfig& config, const SaeParams<float>& params,
                                     const LayerStats& stats, const TunedLens* lens = nullptr);

struct Heatmap {
  std::vector<LatentIndex> latents;      // row order
  std::vector<double> expected_layer;    // per row
  std::uint32_t n_layers = 0;
  std::vector<double> values;            // rows * n_layers, exact (pre-gamma)
  std::vector<std::uint8_t> pixels;      // rows * n_layers grey levels

  std::size_t rows() const { return latents.size(); }
};

Heatmap build_heatmap(const LatentLayerTotals& totals, const HeatmapSpec& spec);
Heatmap build_heatmap(const PromptActivations& prompt, const HeatmapSpec& spec);

std::string heatmap_csv(const Heatmap& map);
std::string heatmap_pgm(const Heatmap& map, std::uint32_t cell_size = 1);

/// Writes `<stem>.pgm` and `<stem>.csv`.
void emit_heatmap(const Heatmap& map, const HeatmapSpec& spec, const std::filesystem::path& stem);

/// latent,active,total,expected_layer,layer_variance,entropy,active_layers,per_token_variance,S_0..
std::string latent_table_csv(const AnalyticsSnapshot& snapshot, double threshold_fraction = 0.001);
/// Variance decomposition, mean entropy and mean active layers.
std::string summary_json(const AnalyticsSnapshot& snapshot, double threshold_fraction = 0.001);
std::string drift_csv(const DriftStats& drift);
std::string histogram_csv(const CosineHistograms& hist);

void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace mlsae
