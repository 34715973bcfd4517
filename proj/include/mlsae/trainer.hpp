#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mlsae/activation_stream.hpp"
#include "mlsae/sae.hpp"
#include "mlsae/tuned_lens.hpp"

namespace mlsae {

/// Training hyperparameters. The JSON config file uses exactly these key
/// names; `sae` holds expansion_factor, k and k_aux.
struct TrainConfig {
  std::uint64_t tokens_per_batch = 131072;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 6.25e-10;
  double alpha = 1.0 / 32.0;
  std::uint64_t dead_window_tokens = 10'000'000;
  /// Stop once this many tokens have been used; 0 = run until the source ends.
  std::uint64_t total_tokens = 0;
  std::uint64_t seed = 0;
  bool lens_enabled = false;
  /// Single-layer mode: train only on this layer's vectors.
  std::optional<std::uint32_t> layer_subset;

  std::uint64_t checkpoint_every = 100;
  std::uint64_t log_every = 10;
  std::uint64_t shuffle_buffer = 65536;
  std::uint64_t stats_tokens = 100'000;

  std::uint32_t expansion_factor = 8;
  std::uint32_t k = 8;
  /// 0 selects default_k_aux(d).
  std::uint32_t k_aux = 0;

  void validate() const;
  SaeConfig sae_config(std::uint32_t d) const;
};

TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string train_config_to_json(const TrainConfig& config);

struct AdamState {
  RowMatrix<float> m_encoder, v_encoder;
  ColMatrix<float> m_decoder, v_decoder;
  Vector<float> m_bias, v_bias;
  std::uint64_t step = 0;

  static AdamState zeros_like(const SaeParams<float>& params);
};

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 6.25e-10;
};

/// One bias-corrected Adam update of `param` at step `step` (1-based).
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::uint64_t step, const AdamHyper& hyper);

/// Adam on every parameter block followed by decoder renormalization.
/// Returns false (and leaves everything untouched) on a non-finite gradient.
bool adam_step(SaeParams<float>& params, const SaeGradients<float>& grads, AdamState& state,
               const AdamHyper& hyper);

/// Token-count timestamp of each latent's last firing at any layer.
class DeadTracker {
 public:
  DeadTracker() = default;
  DeadTracker(std::size_t n_latents, std::uint64_t window_tokens)
      : last_fired_(n_latents, 0), window_(window_tokens) {}

  /// Advances the token counter, then stamps every fired latent.
  DeadMask update(std::span<const LatentIndex> fired, std::uint64_t tokens_advanced);
  /// dead[j] = (current - last_fired[j]) > window. Empty when none are dead.
  DeadMask mask() const;
  double dead_fraction() const;

  std::uint64_t current() const { return current_; }
  std::uint64_t window() const { return window_; }
  const std::vector<std::uint64_t>& last_fired() const { return last_fired_; }
  void restore(std::uint64_t current, std::vector<std::uint64_t> last_fired);

 private:
  std::vector<std::uint64_t> last_fired_;
  std::uint64_t window_ = 0;
  std::uint64_t current_ = 0;
};

/// Standardized (lens-space when enabled) SAE inputs, rows ordered token-major.
struct TrainingBatch {
  RowMatrix<float> x;
  std::vector<RowProvenance> rows;
  std::size_t n_tokens = 0;
  std::uint32_t n_layers = 0;  // layers per token present in the batch
};

/// One row per (token, layer), or per token for `layer_subset`. The lens is
/// applied to the raw vector before standardization.
TrainingBatch assemble_batch(const TokenBatch& batch, const LayerStats& stats,
                             const TunedLens* lens = nullptr,
                             std::optional<std::uint32_t> layer_subset = std::nullopt);

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::optional<TrainingBatch> next() = 0;
};

/// MLSA file -> BatchReader -> assemble_batch.
class StreamBatchSource : public BatchSource {
 public:
  StreamBatchSource(const std::filesystem::path& path, LayerStats stats, const TunedLens* lens,
                    BatchOptions options, std::optional<std::uint32_t> layer_subset = std::nullopt);
  std::optional<TrainingBatch> next() override;
  const StreamHeader& header() const { return file_.header(); }

 private:
  StreamFile file_;
  LayerStats stats_;
  const TunedLens* lens_;
  BatchReader reader_;
  std::optional<std::uint32_t> layer_subset_;
};

/// Produces batches from `inner` on a worker thread through a bounded FIFO.
class PrefetchSource : public BatchSource {
 public:
  PrefetchSource(BatchSource& inner, std::size_t capacity = 2);
  ~PrefetchSource() override;
  PrefetchSource(const PrefetchSource&) = delete;
  PrefetchSource& operator=(const PrefetchSource&) = delete;
  std::optional<TrainingBatch> next() override;

 private:
  void run();

  BatchSource& inner_;
  std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable not_empty_, not_full_;
  std::deque<TrainingBatch> queue_;
  bool done_ = false;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

struct StepReport {
  std::uint64_t step = 0;         // steps completed after this one
  std::uint64_t tokens_seen = 0;  // after this step
  double fvu = 0.0;
  double aux_loss = 0.0;
  double total_loss = 0.0;
  double dead_fraction = 0.0;
  double l1_mean = 0.0;
  /// max_j |g'_j . w_j| after projection, before the update.
  double max_projection_residual = 0.0;
  /// max_j | ||w_j|| - 1 | after the update.
  double max_norm_deviation = 0.0;
  bool applied = true;
};

class Trainer {
 public:
  Trainer(SaeConfig sae, TrainConfig config);

  /// Runs one optimizer step; the first call initializes the parameters
  /// from `batch`.
  StepReport step(const TrainingBatch& batch);

  bool initialized() const { return initialized_; }
  const SaeConfig& sae_config() const { return sae_; }
  const TrainConfig& config() const { return config_; }
  const SaeParams<float>& params() const { return params_; }
  const AdamState& adam() const { return adam_; }
  const DeadTracker& dead_tracker() const { return tracker_; }
  std::uint64_t steps() const { return steps_; }
  std::uint64_t tokens_seen() const { return tokens_seen_; }
  std::uint64_t batches_consumed() const { return batches_; }
  const GeometricMedianResult& init_median() const { return median_; }

  void write_checkpoint(std::ostream& out) const;
  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters and optimizer state; `config` supplies hyperparameters.
  static Trainer resume(const std::filesystem::path& path, TrainConfig config);

 private:
  SaeConfig sae_;
  TrainConfig config_;
  SaeParams<float> params_;
  AdamState adam_;
  DeadTracker tracker_;
  GeometricMedianResult median_;
  bool initialized_ = false;
  std::uint64_t steps_ = 0;
  std::uint64_t tokens_seen_ = 0;
  std::uint64_t batches_ = 0;
};

/// Trainer state stored after the parameters in an MLSC checkpoint.
struct CheckpointInfo {
  SaeConfig sae;
  SaeParams<float> params;
  bool has_trainer_state = false;
  std::uint64_t steps = 0;
  std::uint64_t tokens_seen = 0;
  bool lens_enabled = false;
  std::optional<std::uint32_t> layer_subset;
};

CheckpointInfo load_checkpoint(const std::filesystem::path& path);
void save_sae_checkpoint(const std::filesystem::path& path, const SaeConfig& sae,
                         const SaeParams<float>& params);

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> metrics_path;
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepReport&)> on_step;
  bool prefetch = true;
};

struct TrainResult {
  SaeConfig sae;
  SaeParams<float> params;
  std::vector<StepReport> steps;
  bool source_exhausted = false;
  GeometricMedianResult init_median;
};

/// Full loop: assemble -> forward_loss -> backward -> project -> Adam ->
/// renormalize, with logging and periodic atomic checkpoints.
TrainResult train(BatchSource& source, std::uint32_t d, const TrainConfig& config,
                  const TrainOptions& options = {});

/// Appends metrics rows (tokens_seen,fvu,aux_loss,total_loss,dead_fraction,l1_mean).
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void append(const StepReport& r);

 private:
  std::ofstream out_;
};

}  // namespace mlsae
