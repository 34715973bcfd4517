#include "mlsae/reports.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mlsae/errors.hpp"

namespace mlsae {
namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : "nan"; }

// rows: latent -> raw per-layer values (only latents that passed filtering).
Heatmap finish(std::vector<std::pair<LatentIndex, std::vector<double>>> rows, std::uint32_t n_layers,
               const HeatmapSpec& spec) {
  if (rows.empty()) throw Error("heatmap: no latents left after filtering");
  const bool normalize = spec.normalization == HeatmapNormalization::PerLatent && spec.mode != HeatmapMode::Totals;
  struct Row {
    LatentIndex latent;
    double expected;
    std::vector<double> values;
  };
  std::vector<Row> ordered;
  for (auto& [j, raw] : rows) {
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    std::vector<double> p(raw.size());
    for (std::size_t l = 0; l < raw.size(); ++l) p[l] = raw[l] / total;
    ordered.push_back({j, layer_moments(p).mean, normalize ? std::move(p) : std::move(raw)});
  }
  std::sort(ordered.begin(), ordered.end(), [](const Row& a, const Row& b) {
    return a.expected != b.expected ? a.expected < b.expected : a.latent < b.latent;
  });
  Heatmap map;
  map.n_layers = n_layers;
  double max_value = 0.0;
  for (const auto& r : ordered) {
    for (const double v : r.values) max_value = std::max(max_value, v);
  }
  for (const auto& r : ordered) {
    map.latents.push_back(r.latent);
    map.expected_layer.push_back(r.expected);
    for (const double v : r.values) {
      map.values.push_back(v);
      double level;
      if (spec.normalization == HeatmapNormalization::PowerLaw) {
        level = max_value > 0.0 ? std::pow(v / max_value, spec.gamma) : 0.0;
      } else {
        level = normalize ? v : (max_value > 0.0 ? v / max_value : 0.0);
      }
      map.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(level, 0.0, 1.0) * 255.0)));
    }
  }
  return map;
}

}  // namespace

void HeatmapSpec::validate() const {
  if (normalization == HeatmapNormalization::PowerLaw && !(gamma > 0.0)) {
    throw RangeError("heatmap: gamma must be > 0");
  }
  if (!(min_activation >= 0.0)) throw RangeError("heatmap: min_activation must be >= 0");
  if (cell_size < 1) throw RangeError("heatmap: cell_size must be >= 1");
}

PromptActivations prompt_activations(std::span<const TokenId> tokens, const toy::ModelWeights& model,
                                     const SaeConfig& config, const SaeParams<float>& params,
                                     const LayerStats& stats, const TunedLens* lens) {
  const auto& mc = model.config;
  if (mc.d_model != config.d || stats.d != config.d) {
    throw DimensionError("prompt: model d = " + std::to_string(mc.d_model) + " but the SAE has d = " +
                         std::to_string(config.d));
  }
  if (stats.n_layers != mc.n_layers) throw DimensionError("prompt: stats layer count does not match the model");
  const auto fwd = toy::forward(tokens, model);
  PromptActivations out;
  out.n_latents = config.n();
  out.n_layers = mc.n_layers;
  out.sums.assign(std::size_t{out.n_latents} * out.n_layers, 0.0);
  out.maxima.assign(out.n_latents, 0.0);
  std::vector<Eigen::Index> kept;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (!mc.is_special(tokens[t])) kept.push_back(static_cast<Eigen::Index>(t));
  }
  if (kept.empty()) throw Error("prompt: no non-special tokens");
  std::vector<float> tmp(config.d);
  for (std::uint32_t l = 0; l < mc.n_layers; ++l) {
    RowMatrix<float> x(static_cast<Eigen::Index>(kept.size()), config.d);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const auto& tap = fwd.taps.layers[l];
      std::span<const float> src(tap.row(kept[i]).data(), config.d);
      std::span<float> dst(x.row(static_cast<Eigen::Index>(i)).data(), config.d);
      if (lens) {
        lens->apply(l, src, tmp);
        standardize(tmp, l, stats, dst);
      } else {
        standardize(src, l, stats, dst);
      }
    }
    const auto z = encode(x, params, config);
    for (std::size_t i = 0; i < z.indices.size(); ++i) {
      const auto j = z.indices[i];
      const double v = z.values[i];
      out.sums[std::size_t{j} * out.n_layers + l] += v;
      out.maxima[j] = std::max(out.maxima[j], v);
    }
  }
  return out;
}

Heatmap build_heatmap(const LatentLayerTotals& totals, const HeatmapSpec& spec) {
  spec.validate();
  if (spec.mode == HeatmapMode::SinglePrompt) throw Error("heatmap: single-prompt mode needs prompt activations");
  std::vector<std::pair<LatentIndex, std::vector<double>>> rows;
  for (LatentIndex j = 0; j < totals.n_latents(); ++j) {
    if (!totals.active(j)) continue;
    std::vector<double> s(totals.n_layers());
    for (LayerIndex l = 0; l < totals.n_layers(); ++l) s[l] = totals.sum(j, l);
    rows.emplace_back(j, std::move(s));
  }
  return finish(std::move(rows), totals.n_layers(), spec);
}

Heatmap build_heatmap(const PromptActivations& prompt, const HeatmapSpec& spec) {
  spec.validate();
  std::vector<std::pair<LatentIndex, std::vector<double>>> rows;
  for (LatentIndex j = 0; j < prompt.n_latents; ++j) {
    if (prompt.maxima[j] < spec.min_activation || !(prompt.maxima[j] > 0.0)) continue;
    const auto begin = prompt.sums.begin() + static_cast<std::ptrdiff_t>(std::size_t{j} * prompt.n_layers);
    rows.emplace_back(j, std::vector<double>(begin, begin + prompt.n_layers));
  }
  return finish(std::move(rows), prompt.n_layers, spec);
}

std::string heatmap_csv(const Heatmap& map) {
  std::ostringstream os;
  os << "latent,expected_layer";
  for (std::uint32_t l = 0; l < map.n_layers; ++l) os << ",layer_" << l;
  os << '\n';
  for (std::size_t r = 0; r < map.rows(); ++r) {
    os << map.latents[r] << ',' << num(map.expected_layer[r]);
    for (std::uint32_t l = 0; l < map.n_layers; ++l) os << ',' << num(map.values[r * map.n_layers + l]);
    os << '\n';
  }
  return os.str();
}

std::string heatmap_pgm(const Heatmap& map, std::uint32_t cell) {
  if (cell < 1) throw RangeError("heatmap: cell_size must be >= 1");
  std::ostringstream os;
  os << "P2\n" << map.n_layers * cell << ' ' << map.rows() * cell << "\n255\n";
  for (std::size_t r = 0; r < map.rows(); ++r) {
    std::string line;
    for (std::uint32_t l = 0; l < map.n_layers; ++l) {
      const auto px = std::to_string(map.pixels[r * map.n_layers + l]);
      for (std::uint32_t c = 0; c < cell; ++c) {
        if (!line.empty()) line += ' ';
        line += px;
      }
    }
    for (std::uint32_t c = 0; c < cell; ++c) os << line << '\n';
  }
  return os.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  io::write_file_atomic(path, [&](std::ostream& out) { out.write(text.data(), static_cast<std::streamsize>(text.size())); });
}

void emit_heatmap(const Heatmap& map, const HeatmapSpec& spec, const std::filesystem::path& stem) {
  auto pgm = stem;
  pgm += ".pgm";
  auto csv = stem;
  csv += ".csv";
  write_text_file(pgm, heatmap_pgm(map, spec.cell_size));
  write_text_file(csv, heatmap_csv(map));
}

std::string latent_table_csv(const AnalyticsSnapshot& snap, double threshold_fraction) {
  const auto& t = snap.totals;
  const auto active = active_layers(t, threshold_fraction);
  const auto entropy = normalized_entropy(t);
  std::ostringstream os;
  os << "latent,active,total,expected_layer,layer_variance,entropy,active_layers,per_token_variance";
  for (std::uint32_t l = 0; l < t.n_layers(); ++l) os << ",S_" << l;
  os << '\n';
  for (LatentIndex j = 0; j < t.n_latents(); ++j) {
    const auto p = layer_distribution(t, j);
    std::optional<double> mean, var;
    if (p) {
      const auto m = layer_moments(*p);
      mean = m.mean;
      var = m.variance;
    }
    os << j << ',' << (p ? 1 : 0) << ',' << num(t.latent_total(j)) << ',' << opt(mean) << ',' << opt(var) << ','
       << opt(entropy.values[j]) << ',' << opt(active.values[j]) << ',' << opt(snap.per_token.mean(j));
    for (LayerIndex l = 0; l < t.n_layers(); ++l) os << ',' << num(t.sum(j, l));
    os << '\n';
  }
  return os.str();
}

std::string summary_json(const AnalyticsSnapshot& snap, double threshold_fraction) {
  const auto v = variance_decomposition(snap);
  nlohmann::json j;
  j["n_latents"] = snap.totals.n_latents();
  j["n_layers"] = snap.totals.n_layers();
  j["tokens_processed"] = snap.totals.tokens_processed();
  j["active_latents"] = v.active_latents;
  j["dead_latents"] = v.dead_latents;
  j["var_total"] = v.total;
  j["var_within_latent"] = v.within_latent;
  j["var_between_latent"] = v.between_latent;
  j["var_within_token"] = v.within_token;
  j["ratio_latent"] = v.ratio_latent;
  j["ratio_token"] = v.ratio_token;
  j["mean_normalized_entropy"] = normalized_entropy(snap.totals).mean;
  j["mean_active_layers"] = active_layers(snap.totals, threshold_fraction).mean;
  j["active_layers_threshold"] = threshold_fraction;
  return j.dump(2);
}

std::string drift_csv(const DriftStats& d) {
  std::ostringstream os;
  os << "kind,index,relative_layer,value,skipped\n";
  for (std::size_t i = 0; i < d.pair_cosine.size(); ++i) {
    os << "cosine," << i << ',' << num(d.pair_relative[i]) << ',' << num(d.pair_cosine[i]) << ','
       << d.skipped_pairs[i] << '\n';
  }
  for (std::size_t i = 0; i < d.mean_norm.size(); ++i) {
    os << "norm," << i << ',' << num(d.norm_relative[i]) << ',' << num(d.mean_norm[i]) << ",0\n";
  }
  return os.str();
}

std::string histogram_csv(const CosineHistograms& h) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,decoder,negative,positive\n";
  const auto bins = h.decoder.counts.size();
  const double width = (h.decoder.hi - h.decoder.lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    os << num(h.decoder.lo + width * b) << ',' << num(h.decoder.lo + width * (b + 1)) << ','
       << h.decoder.counts[b] << ',' << h.negative.counts[b] << ',' << h.positive.counts[b] << '\n';
  }
  return os.str();
}

}  // namespace mlsae
