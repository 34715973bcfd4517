#include "mlsae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mlsae/errors.hpp"
#include "mlsae/parallel.hpp"

namespace mlsae {
namespace {

using nlohmann::json;

constexpr io::Magic kTrainerStateMagic{'T', 'R', 'S', 'T'};

template <typename T>
T get_key(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(std::string("train config: bad value for '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw Error(std::string("train config: unknown key '") + key + "' in " + where);
    }
  }
}

template <typename M>
std::span<float> flat(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename M>
std::span<const float> cflat(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace

void TrainConfig::validate() const {
  if (tokens_per_batch < 1) throw RangeError("train config: tokens_per_batch must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw RangeError("train config: learning_rate must be > 0");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw RangeError("train config: adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw RangeError("train config: adam_beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw RangeError("train config: adam_eps must be > 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw RangeError("train config: alpha must be >= 0");
  if (checkpoint_every < 1) throw RangeError("train config: checkpoint_every must be >= 1");
  if (log_every < 1) throw RangeError("train config: log_every must be >= 1");
  if (expansion_factor < 1) throw RangeError("train config: sae.expansion_factor must be >= 1");
  if (k < 1) throw RangeError("train config: sae.k must be >= 1");
}

SaeConfig TrainConfig::sae_config(std::uint32_t d) const {
  SaeConfig c;
  c.d = d;
  c.expansion_factor = expansion_factor;
  c.k = k;
  c.k_aux = k_aux == 0 ? std::min(default_k_aux(d), c.n()) : k_aux;
  c.alpha = alpha;
  c.validate();
  return c;
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw Error("train config: top level must be an object");
  reject_unknown(j,
                 {"tokens_per_batch", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "alpha",
                  "dead_window_tokens", "total_tokens", "seed", "lens_enabled", "layer_subset",
                  "checkpoint_every", "log_every", "shuffle_buffer", "stats_tokens", "sae"},
                 "top level");
  TrainConfig c;
  c.tokens_per_batch = get_key(j, "tokens_per_batch", c.tokens_per_batch);
  c.learning_rate = get_key(j, "learning_rate", c.learning_rate);
  c.adam_beta1 = get_key(j, "adam_beta1", c.adam_beta1);
  c.adam_beta2 = get_key(j, "adam_beta2", c.adam_beta2);
  c.adam_eps = get_key(j, "adam_eps", c.adam_eps);
  c.alpha = get_key(j, "alpha", c.alpha);
  c.dead_window_tokens = get_key(j, "dead_window_tokens", c.dead_window_tokens);
  c.total_tokens = get_key(j, "total_tokens", c.total_tokens);
  c.seed = get_key(j, "seed", c.seed);
  c.lens_enabled = get_key(j, "lens_enabled", c.lens_enabled);
  if (j.contains("layer_subset") && !j["layer_subset"].is_null()) {
    c.layer_subset = get_key<std::uint32_t>(j, "layer_subset", 0);
  }
  c.checkpoint_every = get_key(j, "checkpoint_every", c.checkpoint_every);
  c.log_every = get_key(j, "log_every", c.log_every);
  c.shuffle_buffer = get_key(j, "shuffle_buffer", c.shuffle_buffer);
  c.stats_tokens = get_key(j, "stats_tokens", c.stats_tokens);
  if (j.contains("sae")) {
    const auto& s = j["sae"];
    if (!s.is_object()) throw Error("train config: 'sae' must be an object");
    reject_unknown(s, {"expansion_factor", "k", "k_aux"}, "sae");
    c.expansion_factor = get_key(s, "expansion_factor", c.expansion_factor);
    c.k = get_key(s, "k", c.k);
    c.k_aux = get_key(s, "k_aux", c.k_aux);
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in;
  io::open_for_read(in, path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["tokens_per_batch"] = c.tokens_per_batch;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["alpha"] = c.alpha;
  j["dead_window_tokens"] = c.dead_window_tokens;
  j["total_tokens"] = c.total_tokens;
  j["seed"] = c.seed;
  j["lens_enabled"] = c.lens_enabled;
  j["layer_subset"] = c.layer_subset ? json(*c.layer_subset) : json(nullptr);
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_every"] = c.log_every;
  j["shuffle_buffer"] = c.shuffle_buffer;
  j["stats_tokens"] = c.stats_tokens;
  j["sae"] = {{"expansion_factor", c.expansion_factor}, {"k", c.k}, {"k_aux", c.k_aux}};
  return j.dump(2);
}

AdamState AdamState::zeros_like(const SaeParams<float>& p) {
  AdamState s;
  s.m_encoder = RowMatrix<float>::Zero(p.encoder.rows(), p.encoder.cols());
  s.v_encoder = s.m_encoder;
  s.m_decoder = ColMatrix<float>::Zero(p.decoder.rows(), p.decoder.cols());
  s.v_decoder = s.m_decoder;
  s.m_bias = Vector<float>::Zero(p.bias.size());
  s.v_bias = s.m_bias;
  return s;
}

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::uint64_t step, const AdamHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam: moment shapes do not match parameters");
  }
  if (step < 1) throw RangeError("adam: step must be >= 1");
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = static_cast<T>(h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g);
    v[i] = static_cast<T>(h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g);
    const double m_hat = static_cast<double>(m[i]) / bc1;
    const double v_hat = static_cast<double>(v[i]) / bc2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) -
                              h.learning_rate * m_hat / (std::sqrt(v_hat) + h.eps));
  }
}

template void adam_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                 std::span<float>, std::uint64_t, const AdamHyper&);
template void adam_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                  std::span<double>, std::uint64_t, const AdamHyper&);

bool adam_step(SaeParams<float>& params, const SaeGradients<float>& grads, AdamState& state,
               const AdamHyper& hyper) {
  if (grads.encoder.rows() != params.encoder.rows() || grads.encoder.cols() != params.encoder.cols() ||
      grads.decoder.rows() != params.decoder.rows() || grads.decoder.cols() != params.decoder.cols() ||
      grads.bias.size() != params.bias.size() || state.m_encoder.size() != params.encoder.size() ||
      state.m_decoder.size() != params.decoder.size() || state.m_bias.size() != params.bias.size()) {
    throw DimensionError("adam: gradient or state shapes do not match parameters");
  }
  if (!grads.all_finite()) return false;
  const std::uint64_t t = state.step + 1;
  adam_update(flat(params.encoder), cflat(grads.encoder), flat(state.m_encoder), flat(state.v_encoder), t,
              hyper);
  adam_update(flat(params.decoder), cflat(grads.decoder), flat(state.m_decoder), flat(state.v_decoder), t,
              hyper);
  adam_update(flat(params.bias), cflat(grads.bias), flat(state.m_bias), flat(state.v_bias), t, hyper);
  state.step = t;
  renormalize_decoder(params);
  return true;
}

DeadMask DeadTracker::update(std::span<const LatentIndex> fired, std::uint64_t tokens_advanced) {
  current_ += tokens_advanced;
  for (const auto j : fired) {
    if (j >= last_fired_.size()) throw RangeError("dead tracker: latent index out of range");
    last_fired_[j] = current_;
  }
  return mask();
}

DeadMask DeadTracker::mask() const {
  DeadMask dead(last_fired_.size(), false);
  bool any = false;
  for (std::size_t j = 0; j < last_fired_.size(); ++j) {
    if (current_ - last_fired_[j] > window_) {
      dead[j] = true;
      any = true;
    }
  }
  if (!any) dead.clear();
  return dead;
}

double DeadTracker::dead_fraction() const {
  if (last_fired_.empty()) return 0.0;
  std::size_t dead = 0;
  for (const auto t : last_fired_) dead += (current_ - t > window_) ? 1 : 0;
  return static_cast<double>(dead) / static_cast<double>(last_fired_.size());
}

void DeadTracker::restore(std::uint64_t current, std::vector<std::uint64_t> last_fired) {
  if (last_fired.size() != last_fired_.size()) throw DimensionError("dead tracker: latent count mismatch");
  for (const auto t : last_fired) {
    if (t > current) throw FormatError("dead tracker: timestamp after current counter");
  }
  current_ = current;
  last_fired_ = std::move(last_fired);
}

TrainingBatch assemble_batch(const TokenBatch& batch, const LayerStats& stats, const TunedLens* lens,
                             std::optional<std::uint32_t> layer_subset) {
  if (stats.d != batch.d || stats.n_layers != batch.n_layers) {
    throw DimensionError("assemble_batch: stats shape (d=" + std::to_string(stats.d) + ", layers=" +
                         std::to_string(stats.n_layers) + ") does not match the stream (d=" +
                         std::to_string(batch.d) + ", layers=" + std::to_string(batch.n_layers) + ")");
  }
  if (lens && (lens->d() != batch.d || lens->n_layers() != batch.n_layers)) {
    throw DimensionError("assemble_batch: lens shape does not match the stream");
  }
  if (layer_subset && *layer_subset >= batch.n_layers) {
    throw RangeError("assemble_batch: layer " + std::to_string(*layer_subset) + " out of range");
  }
  std::vector<std::size_t> kept;
  for (std::size_t t = 0; t < batch.n_tokens(); ++t) {
    if ((batch.flags[t] & kFlagSpecial) == 0) kept.push_back(t);
  }
  if (kept.empty()) throw Error("assemble_batch: empty batch");

  const std::uint32_t first = layer_subset.value_or(0);
  const std::uint32_t count = layer_subset ? 1 : batch.n_layers;
  TrainingBatch out;
  out.n_tokens = kept.size();
  out.n_layers = count;
  out.x.resize(static_cast<Eigen::Index>(kept.size() * count), batch.d);
  out.rows.reserve(kept.size() * count);
  std::vector<float> tmp(batch.d);
  Eigen::Index row = 0;
  for (const auto t : kept) {
    for (std::uint32_t l = first; l < first + count; ++l) {
      auto v = batch.vector(t, l);
      std::span<float> dst(out.x.row(row).data(), batch.d);
      if (lens) {
        lens->apply(l, v, tmp);
        standardize(tmp, l, stats, dst);
      } else {
        standardize(v, l, stats, dst);
      }
      out.rows.push_back({batch.token_index[t], l});
      ++row;
    }
  }
  return out;
}

StreamBatchSource::StreamBatchSource(const std::filesystem::path& path, LayerStats stats,
                                     const TunedLens* lens, BatchOptions options,
                                     std::optional<std::uint32_t> layer_subset)
    : file_(path),
      stats_(std::move(stats)),
      lens_(lens),
      reader_(file_.reader(), options),
      layer_subset_(layer_subset) {
  if (stats_.d != file_.header().d || stats_.n_layers != file_.header().n_layers) {
    throw DimensionError("stream " + path.string() + " does not match its layer statistics");
  }
}

std::optional<TrainingBatch> StreamBatchSource::next() {
  auto batch = reader_.next();
  if (!batch) return std::nullopt;
  return assemble_batch(*batch, stats_, lens_, layer_subset_);
}

PrefetchSource::PrefetchSource(BatchSource& inner, std::size_t capacity)
    : inner_(inner), capacity_(std::max<std::size_t>(capacity, 1)) {
  worker_ = std::thread([this] { run(); });
}

PrefetchSource::~PrefetchSource() {
  {
    std::lock_guard lock(mutex_);
    stop_ = true;
  }
  not_full_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void PrefetchSource::run() {
  try {
    for (;;) {
      {
        std::unique_lock lock(mutex_);
        not_full_.wait(lock, [&] { return stop_ || queue_.size() < capacity_; });
        if (stop_) break;
      }
      auto batch = inner_.next();
      std::lock_guard lock(mutex_);
      if (!batch) break;
      queue_.push_back(std::move(*batch));
      not_empty_.notify_one();
    }
  } catch (...) {
    std::lock_guard lock(mutex_);
    error_ = std::current_exception();
  }
  std::lock_guard lock(mutex_);
  done_ = true;
  not_empty_.notify_all();
}

std::optional<TrainingBatch> PrefetchSource::next() {
  std::unique_lock lock(mutex_);
  not_empty_.wait(lock, [&] { return !queue_.empty() || done_; });
  if (!queue_.empty()) {
    TrainingBatch b = std::move(queue_.front());
    queue_.pop_front();
    not_full_.notify_one();
    return b;
  }
  if (error_) std::rethrow_exception(error_);
  return std::nullopt;
}

Trainer::Trainer(SaeConfig sae, TrainConfig config) : sae_(sae), config_(std::move(config)) {
  sae_.validate();
  config_.validate();
  tracker_ = DeadTracker(sae_.n(), config_.dead_window_tokens);
}

StepReport Trainer::step(const TrainingBatch& batch) {
  if (batch.x.cols() != sae_.d) {
    throw DimensionError("trainer: batch has d=" + std::to_string(batch.x.cols()) + ", SAE has d=" +
                         std::to_string(sae_.d));
  }
  if (batch.x.rows() < 2) throw Error("trainer: a batch needs at least 2 rows");
  if (!initialized_) {
    auto init = init_params(batch.x, sae_, config_.seed);
    params_ = std::move(init.params);
    median_ = std::move(init.median);
    adam_ = AdamState::zeros_like(params_);
    initialized_ = true;
    if (!median_.converged) {
      std::cerr << "warning: geometric median did not converge in " << median_.iterations
                << " iterations\n";
    }
  }

  const DeadMask dead = tracker_.mask();
  const auto fwd = forward_loss(batch.x, params_, sae_, dead);
  auto grads = backward(batch.x, fwd, params_, sae_);
  project_decoder_gradient(grads.decoder, params_);

  StepReport r;
  r.fvu = fwd.fvu;
  r.aux_loss = fwd.aux_loss;
  r.total_loss = fwd.total_loss;
  for (Eigen::Index j = 0; j < params_.decoder.cols(); ++j) {
    const double dot =
        grads.decoder.col(j).cast<double>().dot(params_.decoder.col(j).cast<double>());
    r.max_projection_residual = std::max(r.max_projection_residual, std::abs(dot));
  }
  double l1 = 0.0;
  for (const auto v : fwd.latents.values) l1 += v;
  r.l1_mean = l1 / static_cast<double>(batch.x.rows());

  const AdamHyper hyper{config_.learning_rate, config_.adam_beta1, config_.adam_beta2, config_.adam_eps};
  r.applied = adam_step(params_, grads, adam_, hyper);
  if (r.applied) ++steps_;

  for (Eigen::Index j = 0; j < params_.decoder.cols(); ++j) {
    r.max_norm_deviation =
        std::max(r.max_norm_deviation, std::abs(params_.decoder.col(j).cast<double>().norm() - 1.0));
  }

  std::vector<char> seen(sae_.n(), 0);
  std::vector<LatentIndex> fired;
  for (std::size_t i = 0; i < fwd.latents.indices.size(); ++i) {
    const auto j = fwd.latents.indices[i];
    if (fwd.latents.values[i] > 0 && !seen[j]) {
      seen[j] = 1;
      fired.push_back(j);
    }
  }
  tracker_.update(fired, batch.n_tokens);
  tokens_seen_ += batch.n_tokens;
  ++batches_;

  r.dead_fraction = tracker_.dead_fraction();
  r.step = steps_;
  r.tokens_seen = tokens_seen_;
  return r;
}

void Trainer::write_checkpoint(std::ostream& out) const {
  if (!initialized_) throw Error("trainer: nothing to checkpoint before the first step");
  write_sae(out, sae_, params_);
  io::LeWriter w(out);
  w.magic(kTrainerStateMagic);
  w.u32(1);
  w.u64(steps_);
  w.u64(tokens_seen_);
  w.u64(batches_);
  w.u64(adam_.step);
  w.u8(config_.lens_enabled ? 1 : 0);
  w.u8(config_.layer_subset ? 1 : 0);
  w.u32(config_.layer_subset.value_or(0));
  w.u64(tracker_.window());
  w.u64(tracker_.current());
  w.u64s(tracker_.last_fired());
  w.f32s(cflat(adam_.m_encoder));
  w.f32s(cflat(adam_.v_encoder));
  w.f32s(cflat(adam_.m_decoder));
  w.f32s(cflat(adam_.v_decoder));
  w.f32s(cflat(adam_.m_bias));
  w.f32s(cflat(adam_.v_bias));
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  io::write_file_atomic(path, [&](std::ostream& out) { write_checkpoint(out); });
}

namespace {

struct TrainerStateRecord {
  std::uint64_t steps = 0, tokens = 0, batches = 0, adam_step = 0;
  bool lens_enabled = false;
  std::optional<std::uint32_t> layer_subset;
  std::uint64_t window = 0, current = 0;
  std::vector<std::uint64_t> last_fired;
  AdamState adam;
};

std::optional<TrainerStateRecord> read_trainer_state(std::istream& in, const SaeParams<float>& params) {
  io::LeReader r(in, "MLSC trainer state");
  io::Magic magic{};
  if (!r.try_raw(magic.data(), magic.size())) return std::nullopt;
  if (magic != kTrainerStateMagic) throw FormatError("MLSC checkpoint: unexpected trailing data");
  r.expect_version(1);
  TrainerStateRecord s;
  s.steps = r.u64();
  s.tokens = r.u64();
  s.batches = r.u64();
  s.adam_step = r.u64();
  s.lens_enabled = r.u8() != 0;
  const bool has_layer = r.u8() != 0;
  const auto layer = r.u32();
  if (has_layer) s.layer_subset = layer;
  s.window = r.u64();
  s.current = r.u64();
  s.last_fired.resize(static_cast<std::size_t>(params.n()));
  r.u64s(s.last_fired);
  s.adam = AdamState::zeros_like(params);
  s.adam.step = s.adam_step;
  r.f32s(flat(s.adam.m_encoder));
  r.f32s(flat(s.adam.v_encoder));
  r.f32s(flat(s.adam.m_decoder));
  r.f32s(flat(s.adam.v_decoder));
  r.f32s(flat(s.adam.m_bias));
  r.f32s(flat(s.adam.v_bias));
  if (!r.at_eof()) throw FormatError("MLSC checkpoint: trailing bytes after trainer state");
  return s;
}

}  // namespace

Trainer Trainer::resume(const std::filesystem::path& path, TrainConfig config) {
  std::ifstream in;
  io::open_for_read(in, path);
  SaeConfig sae;
  SaeParams<float> params;
  read_sae(in, sae, params);
  auto state = read_trainer_state(in, params);
  if (!state) throw FormatError("MLSC checkpoint " + path.string() + " has no trainer state");
  const auto expected = config.sae_config(sae.d);
  if (!(expected == sae)) throw Error("resume: checkpoint SAE shape differs from the train config");
  if (state->lens_enabled != config.lens_enabled || state->layer_subset != config.layer_subset) {
    throw Error("resume: checkpoint lens/layer settings differ from the train config");
  }
  Trainer t(sae, std::move(config));
  t.params_ = std::move(params);
  t.adam_ = std::move(state->adam);
  t.tracker_.restore(state->current, std::move(state->last_fired));
  t.initialized_ = true;
  t.steps_ = state->steps;
  t.tokens_seen_ = state->tokens;
  t.batches_ = state->batches;
  t.median_.median = t.params_.bias.cast<double>();
  t.median_.converged = true;
  return t;
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in;
  io::open_for_read(in, path);
  CheckpointInfo info;
  read_sae(in, info.sae, info.params);
  if (auto state = read_trainer_state(in, info.params)) {
    info.has_trainer_state = true;
    info.steps = state->steps;
    info.tokens_seen = state->tokens;
    info.lens_enabled = state->lens_enabled;
    info.layer_subset = state->layer_subset;
  }
  return info;
}

void save_sae_checkpoint(const std::filesystem::path& path, const SaeConfig& sae,
                         const SaeParams<float>& params) {
  io::write_file_atomic(path, [&](std::ostream& out) { write_sae(out, sae, params); });
}

MetricsLog::MetricsLog(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open metrics log " + path.string());
  if (fresh) out_ << "tokens_seen,fvu,aux_loss,total_loss,dead_fraction,l1_mean\n";
  out_.precision(9);
}

void MetricsLog::append(const StepReport& r) {
  out_ << r.tokens_seen << ',' << r.fvu << ',' << r.aux_loss << ',' << r.total_loss << ','
       << r.dead_fraction << ',' << r.l1_mean << '\n';
  out_.flush();
  if (!out_) throw IoError("metrics log write failed");
}

TrainResult train(BatchSource& source, std::uint32_t d, const TrainConfig& config,
                  const TrainOptions& options) {
  Trainer trainer = options.resume_from ? Trainer::resume(*options.resume_from, config)
                                        : Trainer(config.sae_config(d), config);
  for (std::uint64_t i = 0; i < trainer.batches_consumed(); ++i) {
    if (!source.next()) throw Error("resume: the stream ends before the checkpoint position");
  }

  if (!options.resume_from && options.metrics_path) std::filesystem::remove(*options.metrics_path);
  std::optional<MetricsLog> log;
  if (options.metrics_path) log.emplace(*options.metrics_path);

  std::optional<PrefetchSource> prefetch;
  BatchSource* src = &source;
  if (options.prefetch && worker_count() > 1) {
    prefetch.emplace(source);
    src = &*prefetch;
  }

  TrainResult result;
  bool logged_last = true;
  bool saved_last = true;
  for (;;) {
    if (config.total_tokens > 0 && trainer.tokens_seen() >= config.total_tokens) break;
    auto batch = src->next();
    if (!batch) {
      if (config.total_tokens > 0) {
        std::cerr << "warning: stream exhausted after " << trainer.tokens_seen() << " of "
                  << config.total_tokens << " tokens\n";
      }
      result.source_exhausted = true;
      break;
    }
    const auto report = trainer.step(*batch);
    if (!report.applied) {
      std::cerr << "warning: non-finite gradient at batch " << trainer.batches_consumed()
                << "; step skipped\n";
    }
    result.steps.push_back(report);
    if (options.on_step) options.on_step(report);
    logged_last = saved_last = false;
    if (log && trainer.batches_consumed() % config.log_every == 0) {
      log->append(report);
      logged_last = true;
    }
    if (options.checkpoint_path && trainer.batches_consumed() % config.checkpoint_every == 0) {
      trainer.save_checkpoint(*options.checkpoint_path);
      saved_last = true;
    }
  }
  if (!trainer.initialized()) throw Error("train: the stream produced no batches");
  if (log && !logged_last && !result.steps.empty()) log->append(result.steps.back());
  if (options.checkpoint_path && !saved_last) trainer.save_checkpoint(*options.checkpoint_path);

  result.sae = trainer.sae_config();
  result.params = trainer.params();
  result.init_median = trainer.init_median();
  return result;
}

}  // namespace mlsae
