#include "mlsae/evaluator.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mlsae/errors.hpp"
#include "mlsae/trainer.hpp"

namespace mlsae {
namespace {

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) {
  return v ? fmt(*v) : "nan";
}

nlohmann::json metrics_json(const LayerMetrics& m) {
  nlohmann::json j;
  j["fvu"] = m.fvu;
  j["mse"] = m.mse;
  j["l1_per_token"] = m.l1_per_token;
  j["l0_per_token"] = m.l0_per_token;
  j["l0_nonzero_per_token"] = m.l0_nonzero_per_token;
  j["delta_ce"] = m.delta_ce ? nlohmann::json(*m.delta_ce) : nlohmann::json(nullptr);
  j["kl"] = m.kl ? nlohmann::json(*m.kl) : nlohmann::json(nullptr);
  return j;
}

}  // namespace

void EvalReport::compute_mean() {
  mean = {};
  if (layers.empty()) return;
  const double n = static_cast<double>(layers.size());
  bool all_ce = true, all_kl = true;
  double ce = 0.0, kl = 0.0;
  for (const auto& l : layers) {
    mean.fvu += l.fvu / n;
    mean.mse += l.mse / n;
    mean.l1_per_token += l.l1_per_token / n;
    mean.l0_per_token += l.l0_per_token / n;
    mean.l0_nonzero_per_token += l.l0_nonzero_per_token / n;
    if (l.delta_ce) ce += *l.delta_ce / n; else all_ce = false;
    if (l.kl) kl += *l.kl / n; else all_kl = false;
  }
  if (all_ce) mean.delta_ce = ce;
  if (all_kl) mean.kl = kl;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "layer,fvu,mse,l1_per_token,l0_per_token,delta_ce,kl\n";
  auto row = [&](const std::string& name, const LayerMetrics& m) {
    os << name << ',' << fmt(m.fvu) << ',' << fmt(m.mse) << ',' << fmt(m.l1_per_token) << ','
       << fmt(m.l0_per_token) << ',' << fmt(m.delta_ce) << ',' << fmt(m.kl) << '\n';
  };
  for (std::size_t l = 0; l < layers.size(); ++l) row(std::to_string(l), layers[l]);
  row("mean", mean);
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto m = metrics_json(layers[l]);
    m["layer"] = l;
    j["layers"].push_back(m);
  }
  j["mean"] = metrics_json(mean);
  j["dead_fraction"] = dead_fraction;
  j["tokens_evaluated"] = tokens_evaluated;
  return j.dump(2);
}

ReconstructionAccumulator::ReconstructionAccumulator(std::uint32_t d, std::uint32_t n_layers,
                                                     std::uint32_t n_latents)
    : d_(d), layers_(n_layers), fired_(n_latents, 0) {
  for (auto& l : layers_) l.sum.assign(d, 0.0);
}

void ReconstructionAccumulator::add(const RowMatrix<float>& x, const RowMatrix<float>& x_hat,
                                    const SparseLatents<float>& latents, std::span<const RowProvenance> rows) {
  if (x.cols() != d_ || x_hat.cols() != d_ || x.rows() != x_hat.rows()) {
    throw DimensionError("eval: reconstruction shape mismatch");
  }
  if (rows.size() != static_cast<std::size_t>(x.rows()) || latents.rows != rows.size()) {
    throw DimensionError("eval: provenance does not match the batch");
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto l = rows[r].layer;
    if (l >= layers_.size()) throw RangeError("eval: layer out of range");
    auto& acc = layers_[l];
    const auto i = static_cast<Eigen::Index>(r);
    ++acc.rows;
    for (std::uint32_t c = 0; c < d_; ++c) {
      const double v = x(i, c);
      const double e = v - static_cast<double>(x_hat(i, c));
      acc.sse += e * e;
      acc.sum_sq += v * v;
      acc.sum[c] += v;
    }
    const auto idx = latents.row_indices(r);
    const auto val = latents.row_values(r);
    for (std::size_t q = 0; q < idx.size(); ++q) {
      acc.l1 += val[q];
      ++acc.selected;
      if (val[q] > 0.0f) {
        ++acc.nonzero;
        fired_.at(idx[q]) = 1;
      }
    }
    if (rows[r].token_index != last_token_) {
      ++tokens_;
      last_token_ = rows[r].token_index;
    }
  }
}

EvalReport ReconstructionAccumulator::report(std::span<const float> stds) const {
  if (!stds.empty() && stds.size() != layers_.size()) throw DimensionError("eval: need one std per layer");
  EvalReport rep;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& acc = layers_[l];
    if (acc.rows < 2) throw Error("eval: layer " + std::to_string(l) + " has fewer than 2 vectors");
    const double n = static_cast<double>(acc.rows);
    double mean_sq = 0.0;
    for (const double s : acc.sum) mean_sq += s * s;
    const double variance = acc.sum_sq - mean_sq / n;
    if (!(variance > 0.0)) throw NumericError("eval: zero variance at layer " + std::to_string(l));
    LayerMetrics m;
    m.fvu = acc.sse / variance;
    const double scale = stds.empty() ? 1.0 : static_cast<double>(stds[l]) * stds[l];
    m.mse = scale * acc.sse / (n * d_);
    m.l1_per_token = acc.l1 / n;
    m.l0_per_token = static_cast<double>(acc.selected) / n;
    m.l0_nonzero_per_token = static_cast<double>(acc.nonzero) / n;
    rep.layers.push_back(m);
  }
  std::size_t fired = 0;
  for (const char f : fired_) fired += f ? 1 : 0;
  rep.dead_fraction = fired_.empty() ? 0.0 : 1.0 - static_cast<double>(fired) / fired_.size();
  rep.tokens_evaluated = tokens_;
  rep.compute_mean();
  return rep;
}

EvalReport eval_reconstruction(BatchSource& source, const SaeConfig& config, const SaeParams<float>& params,
                               const LayerStats& stats) {
  if (stats.d != config.d) {
    throw DimensionError("eval: the stream has d = " + std::to_string(stats.d) + " but the SAE has d = " +
                         std::to_string(config.d));
  }
  ReconstructionAccumulator acc(config.d, stats.n_layers, config.n());
  while (auto batch = source.next()) {
    const auto latents = encode(batch->x, params, config);
    const auto x_hat = decode(latents, params);
    acc.add(batch->x, x_hat, latents, batch->rows);
  }
  return acc.report(stats.stds);
}

EvalReport eval_reconstruction(const std::filesystem::path& stream, const SaeConfig& config,
                               const SaeParams<float>& params, const LayerStats& stats,
                               const TunedLens* lens, std::uint64_t n_tokens, std::size_t tokens_per_batch) {
  const auto header = read_stream_header(stream);
  if (header.d != config.d) {
    throw DimensionError("eval: the stream has d = " + std::to_string(header.d) + " but the SAE has d = " +
                         std::to_string(config.d));
  }
  BatchOptions opts;
  opts.tokens_per_batch = tokens_per_batch;
  opts.max_tokens = n_tokens;
  StreamBatchSource source(stream, stats, lens, opts);
  return eval_reconstruction(source, config, params, stats);
}

Reconstructor sae_reconstructor(const SaeConfig& config, const SaeParams<float>& params,
                                const LayerStats& stats, const TunedLens* lens) {
  if (stats.d != config.d) throw DimensionError("eval: stats d does not match the SAE");
  return [&config, &params, &stats, lens](const RowMatrix<float>& raw, std::size_t layer) {
    const std::size_t d = config.d;
    RowMatrix<float> x(raw.rows(), raw.cols());
    std::vector<float> tmp(d);
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
      std::span<const float> src(raw.row(r).data(), d);
      std::span<float> dst(x.row(r).data(), d);
      if (lens) {
        lens->apply(layer, src, tmp);
        standardize(tmp, layer, stats, dst);
      } else {
        standardize(src, layer, stats, dst);
      }
    }
    RowMatrix<float> out = decode(encode(x, params, config), params);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      std::span<float> row(out.row(r).data(), d);
      destandardize(row, layer, stats, tmp);
      if (lens) {
        lens->invert(layer, tmp, row);
      } else {
        std::copy(tmp.begin(), tmp.end(), row.begin());
      }
    }
    return out;
  };
}

DownstreamMetrics eval_downstream(const toy::ModelWeights& weights,
                                  const std::vector<std::vector<TokenId>>& sequences, std::size_t layer,
                                  const Reconstructor& reconstruct) {
  const auto& cfg = weights.config;
  if (layer >= cfg.n_layers) {
    throw RangeError("eval: layer " + std::to_string(layer) + " out of range (model has " +
                     std::to_string(cfg.n_layers) + " layers)");
  }
  DownstreamMetrics out;
  double clean_sum = 0.0, patched_sum = 0.0, kl_sum = 0.0;
  std::uint64_t predictions = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    const auto clean = toy::forward(seq, weights);
    const auto& tap = clean.taps.layers[layer];
    std::vector<Eigen::Index> kept;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (!cfg.is_special(seq[t])) kept.push_back(static_cast<Eigen::Index>(t));
    }
    RowMatrix<float> raw(static_cast<Eigen::Index>(kept.size()), cfg.d_model);
    for (std::size_t i = 0; i < kept.size(); ++i) raw.row(static_cast<Eigen::Index>(i)) = tap.row(kept[i]);
    RowMatrix<float> replacements = kept.empty() ? raw : reconstruct(raw, layer);
    if (replacements.rows() != raw.rows() || replacements.cols() != raw.cols()) {
      throw DimensionError("eval: reconstruction has the wrong shape");
    }
    const auto patched = toy::patched_forward(seq, weights, layer, replacements);
    const double n_pred = static_cast<double>(seq.size() - 1);
    clean_sum += toy::next_token_cross_entropy(clean.logits, seq) * n_pred;
    patched_sum += toy::next_token_cross_entropy(patched, seq) * n_pred;
    kl_sum += toy::kl_divergence(clean.logits, patched) * static_cast<double>(seq.size());
    predictions += seq.size() - 1;
    out.positions += seq.size();
  }
  if (predictions == 0) throw Error("eval: no sequences with at least two tokens");
  out.clean_ce = clean_sum / static_cast<double>(predictions);
  out.patched_ce = patched_sum / static_cast<double>(predictions);
  out.delta_ce = out.patched_ce - out.clean_ce;
  out.kl = kl_sum / static_cast<double>(out.positions);
  return out;
}

std::string EvalMatrix::to_csv(const std::string& metric) const {
  const bool ce = metric == "delta_ce";
  if (!ce && metric != "fvu") throw Error("eval matrix: unknown metric '" + metric + "'");
  const auto& grid = ce ? delta_ce : fvu;
  const auto& mlsae = ce ? mlsae_delta_ce : mlsae_fvu;
  std::ostringstream os;
  os << "train_layer";
  for (std::uint32_t l = 0; l < n_eval_layers; ++l) os << ",eval_" << l;
  os << '\n';
  for (std::size_t r = 0; r < grid.size(); ++r) {
    os << train_layers[r];
    for (const double v : grid[r]) os << ',' << fmt(v);
    os << '\n';
  }
  if (mlsae) {
    os << "mlsae";
    for (const double v : *mlsae) os << ',' << fmt(v);
    os << '\n';
  }
  return os.str();
}

EvalMatrix eval_matrix(const std::vector<SaeModel>& single_layer, const SaeModel* mlsae,
                       const MatrixInputs& in) {
  if (!in.stats) throw Error("eval matrix: layer statistics are required");
  EvalMatrix out;
  out.n_eval_layers = in.stats->n_layers;
  const bool downstream = in.model && in.sequences;
  auto run = [&](const SaeModel& m, std::vector<double>& fvu_row, std::vector<double>& ce_row) {
    const auto rep = eval_reconstruction(in.stream, m.config, m.params, *in.stats, in.lens, in.n_tokens);
    for (const auto& l : rep.layers) fvu_row.push_back(l.fvu);
    if (downstream) {
      const auto rec = sae_reconstructor(m.config, m.params, *in.stats, in.lens);
      for (std::uint32_t l = 0; l < out.n_eval_layers; ++l) {
        ce_row.push_back(eval_downstream(*in.model, *in.sequences, l, rec).delta_ce);
      }
    }
  };
  for (const auto& m : single_layer) {
    out.train_layers.push_back(m.train_layer);
    out.fvu.emplace_back();
    std::vector<double> ce;
    run(m, out.fvu.back(), ce);
    if (downstream) out.delta_ce.push_back(std::move(ce));
  }
  if (mlsae) {
    std::vector<double> f, ce;
    run(*mlsae, f, ce);
    out.mlsae_fvu = std::move(f);
    if (downstream) out.mlsae_delta_ce = std::move(ce);
  }
  return out;
}

}  // namespace mlsae
