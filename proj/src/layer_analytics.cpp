#include "mlsae/layer_analytics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "mlsae/errors.hpp"
#include "mlsae/parallel.hpp"
#include "mlsae/trainer.hpp"

namespace mlsae {
namespace {

constexpr int kFixedFractionBits = 64;
constexpr double kMaxFixedInput = 0x1p62;

__int128 to_fixed(double v) {
  if (!(v >= 0.0) || !std::isfinite(v) || v >= kMaxFixedInput) {
    throw NumericError("layer analytics: activation value out of range");
  }
  if (v == 0.0) return 0;
  int e = 0;
  const double m = std::frexp(v, &e);
  const auto mant = static_cast<std::int64_t>(std::ldexp(m, 53));
  const int shift = e - 53 + kFixedFractionBits;
  if (shift >= 0) return static_cast<__int128>(mant) << shift;
  if (-shift >= 63) return 0;
  return static_cast<__int128>(mant >> -shift);
}

double from_fixed(__int128 f) { return static_cast<double>(f) * 0x1p-64; }

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (const double q : p) {
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

void normalize_columns(ColMatrix<double>& m, const char* what) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double norm = m.col(j).norm();
    if (!(norm > 0.0)) {
      throw NumericError(std::string(what) + ": column " + std::to_string(j) + " has zero norm");
    }
    m.col(j) /= norm;
  }
}

}  // namespace

LatentLayerTotals::LatentLayerTotals(std::uint32_t n_latents, std::uint32_t n_layers)
    : n_(n_latents),
      layers_(n_layers),
      s_(std::size_t{n_latents} * n_layers, 0),
      c_(std::size_t{n_latents} * n_layers, 0) {
  if (n_latents < 1 || n_layers < 1) throw RangeError("layer totals: need n, n_layers >= 1");
}

void LatentLayerTotals::add(LatentIndex j, LayerIndex l, float value) {
  if (j >= n_ || l >= layers_) throw RangeError("layer totals: index out of range");
  if (value == 0.0f) return;
  s_[index(j, l)] += to_fixed(static_cast<double>(value));
  ++c_[index(j, l)];
}

double LatentLayerTotals::sum(LatentIndex j, LayerIndex l) const { return from_fixed(s_[index(j, l)]); }

double LatentLayerTotals::latent_total(LatentIndex j) const {
  __int128 t = 0;
  for (LayerIndex l = 0; l < layers_; ++l) t += s_[index(j, l)];
  return from_fixed(t);
}

bool LatentLayerTotals::active(LatentIndex j) const {
  for (LayerIndex l = 0; l < layers_; ++l) {
    if (s_[index(j, l)] > 0) return true;
  }
  return false;
}

void LatentLayerTotals::merge(const LatentLayerTotals& other) {
  if (other.n_ != n_ || other.layers_ != layers_) throw DimensionError("layer totals: merge shape mismatch");
  for (std::size_t i = 0; i < s_.size(); ++i) {
    s_[i] += other.s_[i];
    c_[i] += other.c_[i];
  }
  tokens_ += other.tokens_;
}

bool LatentLayerTotals::operator==(const LatentLayerTotals& o) const {
  return n_ == o.n_ && layers_ == o.layers_ && tokens_ == o.tokens_ && s_ == o.s_ && c_ == o.c_;
}

void LatentLayerTotals::set_sum(LatentIndex j, LayerIndex l, double value) {
  s_[index(j, l)] = to_fixed(value);
}

void PerTokenVarianceAccumulator::add(LatentIndex j, double variance) {
  sums_.at(j) += variance;
  ++counts_[j];
}

std::optional<double> PerTokenVarianceAccumulator::mean(LatentIndex j) const {
  if (counts_.at(j) == 0) return std::nullopt;
  return sums_[j] / static_cast<double>(counts_[j]);
}

void PerTokenVarianceAccumulator::merge(const PerTokenVarianceAccumulator& other) {
  if (other.sums_.size() != sums_.size()) throw DimensionError("per-token variance: merge shape mismatch");
  for (std::size_t j = 0; j < sums_.size(); ++j) {
    sums_[j] += other.sums_[j];
    counts_[j] += other.counts_[j];
  }
}

void AnalyticsSnapshot::merge(const AnalyticsSnapshot& other) {
  totals.merge(other.totals);
  per_token.merge(other.per_token);
}

LayerMoments layer_moments(std::span<const double> p) {
  LayerMoments m;
  for (std::size_t l = 0; l < p.size(); ++l) m.mean += p[l] * static_cast<double>(l);
  for (std::size_t l = 0; l < p.size(); ++l) {
    const double dl = static_cast<double>(l) - m.mean;
    m.variance += p[l] * dl * dl;
  }
  return m;
}

void accumulate(const SparseLatents<float>& latents, std::span<const RowProvenance> rows,
                AnalyticsSnapshot& snap) {
  auto& totals = snap.totals;
  const std::uint32_t L = totals.n_layers();
  if (rows.size() != latents.rows) throw DimensionError("accumulate: provenance rows do not match latents");
  if (snap.per_token.n_latents() != totals.n_latents()) {
    throw DimensionError("accumulate: accumulators disagree on the latent count");
  }
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rows[a].token_index < rows[b].token_index; });

  struct Entry {
    LatentIndex latent;
    LayerIndex layer;
    float value;
  };
  std::vector<Entry> entries;
  std::vector<char> covered(L);
  std::vector<double> h(L);
  std::uint64_t tokens = 0;
  for (std::size_t begin = 0; begin < order.size();) {
    const auto token = rows[order[begin]].token_index;
    std::size_t end = begin;
    while (end < order.size() && rows[order[end]].token_index == token) ++end;
    if (end - begin != L) {
      throw Error("accumulate: token " + std::to_string(token) + " has " + std::to_string(end - begin) +
                  " layer rows, expected " + std::to_string(L));
    }
    std::fill(covered.begin(), covered.end(), 0);
    entries.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const auto r = order[i];
      const auto layer = rows[r].layer;
      if (layer >= L || covered[layer]) {
        throw Error("accumulate: token " + std::to_string(token) + " has incomplete layer coverage");
      }
      covered[layer] = 1;
      const auto idx = latents.row_indices(r);
      const auto val = latents.row_values(r);
      for (std::size_t q = 0; q < idx.size(); ++q) {
        if (val[q] > 0.0f) entries.push_back({idx[q], layer, val[q]});
      }
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.latent != b.latent ? a.latent < b.latent : a.layer < b.layer;
    });
    for (std::size_t a = 0; a < entries.size();) {
      const auto j = entries[a].latent;
      std::fill(h.begin(), h.end(), 0.0);
      double total = 0.0;
      std::size_t b = a;
      for (; b < entries.size() && entries[b].latent == j; ++b) {
        totals.add(j, entries[b].layer, entries[b].value);
        h[entries[b].layer] += entries[b].value;
        total += entries[b].value;
      }
      for (auto& q : h) q /= total;
      snap.per_token.add(j, layer_moments(h).variance);
      a = b;
    }
    ++tokens;
    begin = end;
  }
  totals.add_tokens(tokens);
}

std::optional<std::vector<double>> layer_distribution(const LatentLayerTotals& totals, LatentIndex j) {
  if (j >= totals.n_latents()) throw RangeError("layer_distribution: latent out of range");
  if (!totals.active(j)) return std::nullopt;
  const double total = totals.latent_total(j);
  std::vector<double> p(totals.n_layers());
  for (LayerIndex l = 0; l < totals.n_layers(); ++l) p[l] = totals.sum(j, l) / total;
  return p;
}

std::optional<double> expected_layer(const LatentLayerTotals& totals, LatentIndex j) {
  const auto p = layer_distribution(totals, j);
  if (!p) return std::nullopt;
  return layer_moments(*p).mean;
}

VarianceDecomposition variance_decomposition(const AnalyticsSnapshot& snap) {
  const auto& totals = snap.totals;
  const std::uint32_t L = totals.n_layers();
  VarianceDecomposition out;
  std::vector<double> mixture(L, 0.0);
  std::vector<double> means;
  double within = 0.0, within_token = 0.0;
  for (LatentIndex j = 0; j < totals.n_latents(); ++j) {
    const auto p = layer_distribution(totals, j);
    if (!p) {
      ++out.dead_latents;
      continue;
    }
    ++out.active_latents;
    for (std::uint32_t l = 0; l < L; ++l) mixture[l] += (*p)[l];
    const auto m = layer_moments(*p);
    means.push_back(m.mean);
    within += m.variance;
    within_token += snap.per_token.mean(j).value_or(0.0);
  }
  if (out.active_latents == 0) throw Error("variance_decomposition: no active latents");
  const double a = out.active_latents;
  for (auto& q : mixture) q /= a;
  out.total = layer_moments(mixture).variance;
  out.within_latent = within / a;
  out.within_token = within_token / a;
  const double mu = std::accumulate(means.begin(), means.end(), 0.0) / a;
  double between = 0.0;
  for (const double m : means) between += (m - mu) * (m - mu);
  out.between_latent = between / a;
  out.ratio_latent = out.total > 0.0 ? out.within_latent / out.total : 0.0;
  out.ratio_token = out.within_latent > 0.0 ? out.within_token / out.within_latent : 0.0;
  return out;
}

PerLatentValues active_layers(const LatentLayerTotals& totals, double threshold_fraction) {
  if (totals.tokens_processed() == 0) throw Error("active_layers: no tokens processed");
  if (!(threshold_fraction >= 0.0)) throw RangeError("active_layers: threshold must be >= 0");
  const double threshold = threshold_fraction * static_cast<double>(totals.tokens_processed());
  PerLatentValues out;
  out.values.resize(totals.n_latents());
  double sum = 0.0;
  std::size_t active = 0;
  for (LatentIndex j = 0; j < totals.n_latents(); ++j) {
    if (!totals.active(j)) continue;
    std::uint32_t above = 0;
    for (LayerIndex l = 0; l < totals.n_layers(); ++l) {
      if (static_cast<double>(totals.count(j, l)) > threshold) ++above;
    }
    const double v = static_cast<double>(above) / totals.n_layers();
    out.values[j] = v;
    sum += v;
    ++active;
  }
  out.mean = active ? sum / static_cast<double>(active) : 0.0;
  return out;
}

double normalized_entropy(std::span<const double> p) {
  if (p.size() <= 1) return 0.0;
  return entropy(p) / std::log(static_cast<double>(p.size()));
}

PerLatentValues normalized_entropy(const LatentLayerTotals& totals) {
  PerLatentValues out;
  out.values.resize(totals.n_latents());
  double sum = 0.0;
  std::size_t active = 0;
  for (LatentIndex j = 0; j < totals.n_latents(); ++j) {
    const auto p = layer_distribution(totals, j);
    if (!p) continue;
    const double v = normalized_entropy(*p);
    out.values[j] = v;
    sum += v;
    ++active;
  }
  out.mean = active ? sum / static_cast<double>(active) : 0.0;
  return out;
}

double mmcs(const ColMatrix<float>& a, const ColMatrix<float>& b, MmcsMode mode) {
  if (a.rows() != b.rows()) throw DimensionError("mmcs: dictionaries have different dimensions");
  if (a.cols() < 1 || b.cols() < 1) throw RangeError("mmcs: empty dictionary");
  if (mode == MmcsMode::Self && a.cols() < 2) throw RangeError("mmcs: self mode needs >= 2 columns");
  ColMatrix<double> an = a.cast<double>();
  ColMatrix<double> bn = b.cast<double>();
  normalize_columns(an, "mmcs");
  normalize_columns(bn, "mmcs");
  const ColMatrix<double> sims = an.transpose() * bn;
  double total = 0.0;
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < sims.cols(); ++j) {
      if (mode == MmcsMode::Self && i == j) continue;
      best = std::max(best, sims(i, j));
    }
    total += best;
  }
  return total / static_cast<double>(sims.rows());
}

double mmcs_self(const ColMatrix<float>& a) { return mmcs(a, a, MmcsMode::Self); }

double Histogram::mass_above(double threshold) const {
  if (total == 0) return 0.0;
  const double width = (hi - lo) / static_cast<double>(counts.size());
  std::uint64_t above = 0;
  for (std::size_t b = 0; b < counts.size(); ++b) {
    if (lo + width * static_cast<double>(b) >= threshold) above += counts[b];
  }
  return static_cast<double>(above) / static_cast<double>(total);
}

std::vector<double> pairwise_cosines(const ColMatrix<double>& columns) {
  if (columns.cols() < 2) throw RangeError("pairwise cosines: need >= 2 vectors");
  ColMatrix<double> c = columns;
  normalize_columns(c, "pairwise cosines");
  const ColMatrix<double> gram = c.transpose() * c;
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(c.cols());
  out.reserve(n * (n - 1) / 2);
  for (Eigen::Index j = 1; j < gram.cols(); ++j) {
    for (Eigen::Index i = 0; i < j; ++i) out.push_back(std::clamp(gram(i, j), -1.0, 1.0));
  }
  return out;
}

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins < 1 || !(hi > lo)) throw RangeError("histogram: need bins >= 1 and hi > lo");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  h.total = values.size();
  double sum = 0.0;
  for (const double v : values) {
    const double pos = (v - lo) / (hi - lo) * static_cast<double>(bins);
    const auto b = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
    ++h.counts[b];
    sum += v;
  }
  if (h.total > 0) {
    h.mean = sum / static_cast<double>(h.total);
    double ss = 0.0;
    for (const double v : values) ss += (v - h.mean) * (v - h.mean);
    h.variance = ss / static_cast<double>(h.total);
  }
  return h;
}

ColMatrix<double> negative_control(std::uint32_t d, std::uint32_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ColMatrix<double> m(d, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

ColMatrix<double> positive_control(std::uint32_t d, std::uint32_t n, std::uint32_t n_layers,
                                   std::uint64_t seed) {
  if (n_layers < 1) throw RangeError("positive control: n_layers must be >= 1");
  const std::uint32_t base_count = std::max<std::uint32_t>(n / n_layers, 1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ColMatrix<double> base(d, base_count);
  for (Eigen::Index i = 0; i < base.size(); ++i) base.data()[i] = normal(rng);
  ColMatrix<double> m(d, std::size_t{base_count} * n_layers);
  for (std::uint32_t b = 0; b < base_count; ++b) {
    for (std::uint32_t c = 0; c < n_layers; ++c) {
      auto col = m.col(static_cast<Eigen::Index>(b) * n_layers + c);
      for (std::uint32_t i = 0; i < d; ++i) col[i] = base(i, b) + normal(rng);
    }
  }
  return m;
}

CosineHistograms pairwise_cos_histogram(const ColMatrix<float>& decoder, std::size_t bins,
                                        std::uint32_t n_layers, std::uint64_t seed) {
  const auto d = static_cast<std::uint32_t>(decoder.rows());
  const auto n = static_cast<std::uint32_t>(decoder.cols());
  if (n < 2) throw RangeError("pairwise_cos_histogram: need n >= 2");
  CosineHistograms out;
  out.decoder = histogram(pairwise_cosines(decoder.cast<double>()), bins);
  out.negative = histogram(pairwise_cosines(negative_control(d, n, seed)), bins);
  out.positive = histogram(pairwise_cosines(positive_control(d, n, n_layers, seed + 1)), bins);
  return out;
}

namespace {

// visit(fn) calls fn(const ActivationRecord&) for every kept record.
template <typename Visit>
DriftStats drift_impl(Visit&& visit, std::uint32_t d, std::uint32_t L) {
  if (L < 2) throw RangeError("residual_drift: need n_layers >= 2");
  std::vector<double> means(std::size_t{d} * L, 0.0);
  std::uint64_t tokens = 0;
  visit([&](const ActivationRecord& r) {
    for (std::size_t i = 0; i < means.size(); ++i) means[i] += r.vectors[i];
    ++tokens;
  });
  if (tokens == 0) throw Error("residual_drift: no tokens");
  for (auto& m : means) m /= static_cast<double>(tokens);

  DriftStats out;
  out.tokens = tokens;
  std::vector<double> cos_sum(L - 1, 0.0), norm_sum(L, 0.0);
  out.skipped_pairs.assign(L - 1, 0);
  std::vector<double> centered(std::size_t{d} * L);
  std::vector<double> cnorm(L);
  visit([&](const ActivationRecord& r) {
    for (std::uint32_t l = 0; l < L; ++l) {
      double raw = 0.0, cn = 0.0;
      for (std::uint32_t i = 0; i < d; ++i) {
        const std::size_t k = std::size_t{l} * d + i;
        const double x = r.vectors[k];
        raw += x * x;
        centered[k] = x - means[k];
        cn += centered[k] * centered[k];
      }
      norm_sum[l] += std::sqrt(raw);
      cnorm[l] = std::sqrt(cn);
    }
    for (std::uint32_t l = 0; l + 1 < L; ++l) {
      if (cnorm[l] == 0.0 || cnorm[l + 1] == 0.0) {
        ++out.skipped_pairs[l];
        continue;
      }
      double dot = 0.0;
      for (std::uint32_t i = 0; i < d; ++i) {
        dot += centered[std::size_t{l} * d + i] * centered[std::size_t{l + 1} * d + i];
      }
      cos_sum[l] += std::clamp(dot / (cnorm[l] * cnorm[l + 1]), -1.0, 1.0);
    }
  });
  for (std::uint32_t l = 0; l + 1 < L; ++l) {
    const auto used = tokens - out.skipped_pairs[l];
    out.pair_cosine.push_back(used ? cos_sum[l] / static_cast<double>(used) : 0.0);
    out.pair_relative.push_back(static_cast<double>(l) / static_cast<double>(L - 1));
  }
  for (std::uint32_t l = 0; l < L; ++l) {
    out.mean_norm.push_back(norm_sum[l] / static_cast<double>(tokens));
    out.norm_relative.push_back(static_cast<double>(l) / static_cast<double>(L));
  }
  return out;
}

}  // namespace

DriftStats residual_drift(const std::filesystem::path& stream, std::uint64_t max_tokens) {
  const auto header = read_stream_header(stream);
  auto visit = [&](auto&& fn) {
    StreamFile file(stream);
    ActivationRecord rec;
    std::uint64_t kept = 0;
    while (file.reader().next(rec)) {
      if (rec.special()) continue;
      if (max_tokens > 0 && kept >= max_tokens) break;
      fn(rec);
      ++kept;
    }
  };
  return drift_impl(visit, header.d, header.n_layers);
}

DriftStats residual_drift(std::span<const ActivationRecord> records, std::uint32_t d, std::uint32_t n_layers) {
  auto visit = [&](auto&& fn) {
    for (const auto& r : records) {
      if (r.vectors.size() != std::size_t{d} * n_layers) throw DimensionError("residual_drift: bad record");
      if (!r.special()) fn(r);
    }
  };
  return drift_impl(visit, d, n_layers);
}

AnalyticsSnapshot analyze(BatchSource& source, const SaeConfig& config, const SaeParams<float>& params,
                          std::uint32_t n_layers) {
  AnalyticsSnapshot snap{LatentLayerTotals(config.n(), n_layers), PerTokenVarianceAccumulator(config.n())};
  constexpr Eigen::Index kChunk = 1024;
  while (auto batch = source.next()) {
    const Eigen::Index rows = batch->x.rows();
    const auto chunks = static_cast<std::size_t>((rows + kChunk - 1) / kChunk);
    std::vector<SparseLatents<float>> parts(chunks);
    parallel_for(chunks, [&](std::size_t c) {
      const Eigen::Index begin = static_cast<Eigen::Index>(c) * kChunk;
      const Eigen::Index len = std::min(kChunk, rows - begin);
      const RowMatrix<float> x = batch->x.middleRows(begin, len);
      parts[c] = encode(x, params, config);
    });
    SparseLatents<float> all;
    all.rows = static_cast<std::size_t>(rows);
    all.k = config.k;
    for (auto& p : parts) {
      all.indices.insert(all.indices.end(), p.indices.begin(), p.indices.end());
      all.values.insert(all.values.end(), p.values.begin(), p.values.end());
    }
    accumulate(all, batch->rows, snap);
  }
  return snap;
}

void write_snapshot(const AnalyticsSnapshot& snap, std::ostream& out) {
  const auto& t = snap.totals;
  if (snap.per_token.n_latents() != t.n_latents()) throw DimensionError("snapshot: inconsistent latent counts");
  io::LeWriter w(out);
  w.magic(kAnalyticsMagic);
  w.u32(1);
  w.u32(t.n_latents());
  w.u32(t.n_layers());
  for (LatentIndex j = 0; j < t.n_latents(); ++j) {
    for (LayerIndex l = 0; l < t.n_layers(); ++l) w.f64(t.sum(j, l));
  }
  for (LatentIndex j = 0; j < t.n_latents(); ++j) {
    for (LayerIndex l = 0; l < t.n_layers(); ++l) w.u64(t.count(j, l));
  }
  w.f64s(snap.per_token.sums());
  w.u64s(snap.per_token.counts());
  w.u64(t.tokens_processed());
}

AnalyticsSnapshot read_snapshot(std::istream& in) {
  io::LeReader r(in, "MLAN snapshot");
  r.expect_magic(kAnalyticsMagic);
  r.expect_version(1);
  const auto n = r.u32();
  const auto L = r.u32();
  if (n < 1 || L < 1) throw FormatError("MLAN snapshot: empty dimensions");
  AnalyticsSnapshot snap{LatentLayerTotals(n, L), PerTokenVarianceAccumulator(n)};
  std::vector<double> s(std::size_t{n} * L);
  std::vector<std::uint64_t> c(s.size());
  r.f64s(s);
  r.u64s(c);
  r.f64s(snap.per_token.sums());
  r.u64s(snap.per_token.counts());
  const auto tokens = r.u64();
  for (LatentIndex j = 0; j < n; ++j) {
    for (LayerIndex l = 0; l < L; ++l) {
      const auto i = std::size_t{j} * L + l;
      if (!(s[i] >= 0.0) || !std::isfinite(s[i])) throw FormatError("MLAN snapshot: invalid activation sum");
      if (c[i] > tokens) throw FormatError("MLAN snapshot: count exceeds tokens_processed");
      snap.totals.set_sum(j, l, s[i]);
      snap.totals.set_count(j, l, c[i]);
    }
    if (!(snap.per_token.sums()[j] >= 0.0) || snap.per_token.counts()[j] > tokens) {
      throw FormatError("MLAN snapshot: invalid per-token variance entry");
    }
  }
  snap.totals.set_tokens(tokens);
  return snap;
}

void save_snapshot(const AnalyticsSnapshot& snapshot, const std::filesystem::path& path) {
  io::write_file_atomic(path, [&](std::ostream& out) { write_snapshot(snapshot, out); });
}

AnalyticsSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in;
  io::open_for_read(in, path);
  return read_snapshot(in);
}

}  // namespace mlsae
