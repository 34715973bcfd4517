#include "mlsae/activation_stream.hpp"

#include <bit>
#include <cmath>
#include <istream>
#include <ostream>

#include "mlsae/errors.hpp"

namespace mlsae {

void StreamHeader::validate() const {
  if (d < 1) throw FormatError("MLSA header: d must be >= 1");
  if (n_layers < 1) throw FormatError("MLSA header: n_layers must be >= 1");
}

StreamWriter::StreamWriter(std::ostream& sink, StreamHeader header)
    : writer_(sink), header_(std::move(header)) {
  header_.validate();
  writer_.magic(kStreamMagic);
  writer_.u32(kStreamVersion);
  writer_.u32(header_.d);
  writer_.u32(header_.n_layers);
  writer_.u64(header_.n_tokens);
  writer_.string(header_.model_tag);
}

void StreamWriter::write(TokenId token_id, std::uint8_t flags, std::span<const float> vectors) {
  if (vectors.size() != header_.record_floats()) {
    throw DimensionError("MLSA record has " + std::to_string(vectors.size()) +
                         " floats, expected n_layers*d = " +
                         std::to_string(header_.record_floats()));
  }
  for (float v : vectors) {
    if (!std::isfinite(v)) throw NumericError("MLSA record contains a non-finite value");
  }
  if (header_.n_tokens != 0 && records_ >= header_.n_tokens) {
    throw FormatError("MLSA writer: more records than the declared n_tokens");
  }
  writer_.u32(token_id);
  writer_.u8(flags);
  writer_.f32s(vectors);
  ++records_;
}

void StreamWriter::write(const ActivationRecord& record) {
  write(record.token_id, record.flags, record.vectors);
}

std::uint64_t StreamWriter::finish() {
  if (header_.n_tokens != 0 && records_ != header_.n_tokens) {
    throw FormatError("MLSA writer: wrote " + std::to_string(records_) +
                      " records, header declares " + std::to_string(header_.n_tokens));
  }
  return writer_.bytes_written();
}

std::uint64_t write_stream(const StreamHeader& header, std::span<const ActivationRecord> records,
                           std::ostream& sink) {
  StreamWriter writer(sink, header);
  for (const auto& r : records) writer.write(r);
  return writer.finish();
}

StreamReader::StreamReader(std::istream& source) : reader_(source, "MLSA stream") {
  reader_.expect_magic(kStreamMagic);
  reader_.expect_version(kStreamVersion);
  header_.d = reader_.u32();
  header_.n_layers = reader_.u32();
  header_.n_tokens = reader_.u64();
  header_.model_tag = reader_.string();
  header_.validate();
}

bool StreamReader::next(ActivationRecord& record) {
  if (header_.n_tokens != 0 && records_ == header_.n_tokens) return false;
  std::uint32_t token_id = 0;
  if (!reader_.try_raw(&token_id, 4)) {
    if (header_.n_tokens != 0) {
      throw FormatError("MLSA stream: truncated after " + std::to_string(records_) +
                        " of " + std::to_string(header_.n_tokens) + " records");
    }
    return false;
  }
  try {
    if constexpr (std::endian::native != std::endian::little) {
      token_id = __builtin_bswap32(token_id);
    }
    record.token_id = token_id;
    record.flags = reader_.u8();
    record.vectors.resize(header_.record_floats());
    reader_.f32s(record.vectors);
  } catch (const FormatError&) {
    throw FormatError("MLSA stream: truncated record " + std::to_string(records_));
  }
  ++records_;
  return true;
}

std::optional<ActivationRecord> StreamReader::next() {
  ActivationRecord r;
  if (!next(r)) return std::nullopt;
  return r;
}

StreamFile::StreamFile(const std::filesystem::path& path) {
  io::open_for_read(file_, path);
  reader_ = std::make_unique<StreamReader>(file_);
}

StreamHeader read_stream_header(const std::filesystem::path& path) {
  StreamFile f(path);
  return f.header();
}

BatchReader::BatchReader(StreamReader& reader, BatchOptions options)
    : reader_(reader), options_(options), rng_(options.seed) {
  if (options_.tokens_per_batch < 1) throw RangeError("tokens_per_batch must be >= 1");
  buffer_.reserve(options_.shuffle_buffer);
}

bool BatchReader::pull(Slot& slot) {
  while (true) {
    if (options_.max_tokens != 0 && kept_ >= options_.max_tokens) return false;
    const std::uint64_t index = reader_.records_read();
    if (!reader_.next(slot.record)) return false;
    if (options_.exclude_special && slot.record.special()) continue;
    slot.index = index;
    ++kept_;
    return true;
  }
}

bool BatchReader::next_token(Slot& out) {
  if (options_.shuffle_buffer == 0) return pull(out);
  while (!source_done_ && buffer_.size() < options_.shuffle_buffer) {
    Slot s;
    if (!pull(s)) {
      source_done_ = true;
      break;
    }
    buffer_.push_back(std::move(s));
  }
  if (buffer_.empty()) return false;
  std::uniform_int_distribution<std::size_t> pick(0, buffer_.size() - 1);
  const std::size_t i = pick(rng_);
  out = std::move(buffer_[i]);
  if (!source_done_) {
    Slot s;
    if (pull(s)) {
      buffer_[i] = std::move(s);
      return true;
    }
    source_done_ = true;
  }
  if (i + 1 != buffer_.size()) buffer_[i] = std::move(buffer_.back());
  buffer_.pop_back();
  return true;
}

std::optional<TokenBatch> BatchReader::next() {
  const auto& h = reader_.header();
  TokenBatch batch;
  batch.d = h.d;
  batch.n_layers = h.n_layers;
  batch.data.reserve(options_.tokens_per_batch * h.record_floats());
  Slot slot;
  while (batch.n_tokens() < options_.tokens_per_batch && next_token(slot)) {
    batch.token_index.push_back(slot.index);
    batch.token_id.push_back(slot.record.token_id);
    batch.flags.push_back(slot.record.flags);
    batch.data.insert(batch.data.end(), slot.record.vectors.begin(), slot.record.vectors.end());
  }
  if (batch.n_tokens() == 0) return std::nullopt;
  emitted_ += batch.n_tokens();
  return batch;
}

void LayerStats::validate() const {
  if (d < 1 || n_layers < 1) throw FormatError("layer stats: empty dimensions");
  if (means.size() != std::size_t{d} * n_layers || stds.size() != n_layers) {
    throw DimensionError("layer stats: inconsistent sizes");
  }
  if (token_count < 1) throw FormatError("layer stats: token_count must be >= 1");
  for (std::size_t l = 0; l < stds.size(); ++l) {
    if (!(stds[l] > 0.0f) || !std::isfinite(stds[l])) {
      throw NumericError("layer stats: std at layer " + std::to_string(l) + " is not positive");
    }
  }
}

LayerStatsAccumulator::LayerStatsAccumulator(std::uint32_t d, std::uint32_t n_layers)
    : d_(d),
      n_layers_(n_layers),
      counts_(n_layers, 0),
      mean_(std::size_t{d} * n_layers, 0.0),
      m2_(std::size_t{d} * n_layers, 0.0) {}

void LayerStatsAccumulator::add(std::size_t layer, std::span<const float> x) {
  if (layer >= n_layers_) throw RangeError("layer stats: layer out of range");
  if (x.size() != d_) throw DimensionError("layer stats: vector length mismatch");
  const double n = static_cast<double>(++counts_[layer]);
  double* mean = mean_.data() + layer * d_;
  double* m2 = m2_.data() + layer * d_;
  for (std::size_t i = 0; i < d_; ++i) {
    const double delta = x[i] - mean[i];
    mean[i] += delta / n;
    m2[i] += delta * (x[i] - mean[i]);
  }
}

LayerStats LayerStatsAccumulator::finish() const {
  if (tokens_ == 0) throw Error("layer stats: empty stream");
  LayerStats stats;
  stats.d = d_;
  stats.n_layers = n_layers_;
  stats.token_count = tokens_;
  stats.means.resize(mean_.size());
  stats.stds.resize(n_layers_);
  for (std::size_t l = 0; l < n_layers_; ++l) {
    double m2_total = 0.0;
    for (std::size_t i = 0; i < d_; ++i) {
      stats.means[l * d_ + i] = static_cast<float>(mean_[l * d_ + i]);
      m2_total += m2_[l * d_ + i];
    }
    const double var = m2_total / (static_cast<double>(counts_[l]) * d_);
    if (!(var > 0.0)) {
      throw NumericError("layer stats: zero variance at layer " + std::to_string(l));
    }
    stats.stds[l] = static_cast<float>(std::sqrt(var));
  }
  return stats;
}

LayerStats compute_layer_stats(StreamReader& reader, std::uint64_t max_tokens,
                               const VectorTransform& transform) {
  if (max_tokens < 1) throw RangeError("compute_layer_stats: max_tokens must be >= 1");
  const auto& h = reader.header();
  LayerStatsAccumulator acc(h.d, h.n_layers);
  ActivationRecord record;
  std::uint64_t used = 0;
  while (used < max_tokens && reader.next(record)) {
    if (record.special()) continue;
    for (std::size_t l = 0; l < h.n_layers; ++l) {
      std::span<float> x(record.vectors.data() + l * h.d, h.d);
      if (transform) transform(l, x);
      acc.add(l, x);
    }
    acc.add_token();
    ++used;
  }
  return acc.finish();
}

LayerStats compute_layer_stats(const std::filesystem::path& path, std::uint64_t max_tokens,
                               const VectorTransform& transform) {
  StreamFile f(path);
  return compute_layer_stats(f.reader(), max_tokens, transform);
}

void standardize(std::span<const float> x, std::size_t layer, const LayerStats& stats,
                 std::span<float> out) {
  if (layer >= stats.n_layers) throw RangeError("standardize: layer out of range");
  if (x.size() != stats.d || out.size() != stats.d) throw DimensionError("standardize: length mismatch");
  const float s = stats.stds[layer];
  if (!(s > 0.0f)) throw NumericError("standardize: zero std at layer " + std::to_string(layer));
  const auto mu = stats.mean(layer);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu[i]) / s;
}

void destandardize(std::span<const float> x, std::size_t layer, const LayerStats& stats,
                   std::span<float> out) {
  if (layer >= stats.n_layers) throw RangeError("destandardize: layer out of range");
  if (x.size() != stats.d || out.size() != stats.d) {
    throw DimensionError("destandardize: length mismatch");
  }
  const float s = stats.stds[layer];
  if (!(s > 0.0f)) throw NumericError("destandardize: zero std at layer " + std::to_string(layer));
  const auto mu = stats.mean(layer);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s + mu[i];
}

std::vector<float> standardize(std::span<const float> x, std::size_t layer, const LayerStats& stats) {
  std::vector<float> out(x.size());
  standardize(x, layer, stats, out);
  return out;
}

std::vector<float> destandardize(std::span<const float> x, std::size_t layer,
                                 const LayerStats& stats) {
  std::vector<float> out(x.size());
  destandardize(x, layer, stats, out);
  return out;
}

void write_layer_stats(const LayerStats& stats, std::ostream& out) {
  stats.validate();
  io::LeWriter w(out);
  w.magic(kStatsMagic);
  w.u32(1);
  w.u32(stats.d);
  w.u32(stats.n_layers);
  w.u64(stats.token_count);
  for (std::size_t l = 0; l < stats.n_layers; ++l) {
    w.f32s(stats.mean(l));
    w.f32(stats.stds[l]);
  }
}

LayerStats read_layer_stats(std::istream& in) {
  io::LeReader r(in, "MLST stats");
  r.expect_magic(kStatsMagic);
  r.expect_version(1);
  LayerStats stats;
  stats.d = r.u32();
  stats.n_layers = r.u32();
  stats.token_count = r.u64();
  if (stats.d < 1 || stats.n_layers < 1) throw FormatError("MLST stats: empty dimensions");
  stats.means.resize(std::size_t{stats.d} * stats.n_layers);
  stats.stds.resize(stats.n_layers);
  for (std::size_t l = 0; l < stats.n_layers; ++l) {
    r.f32s(std::span<float>(stats.means).subspan(l * stats.d, stats.d));
    stats.stds[l] = r.f32();
  }
  stats.validate();
  return stats;
}

void save_layer_stats(const LayerStats& stats, const std::filesystem::path& path) {
  io::write_file_atomic(path, [&](std::ostream& out) { write_layer_stats(stats, out); });
}

LayerStats load_layer_stats(const std::filesystem::path& path) {
  std::ifstream in;
  io::open_for_read(in, path);
  return read_layer_stats(in);
}

StreamSummary validate_stream(const std::filesystem::path& path) {
  StreamFile f(path);
  StreamSummary summary;
  summary.header = f.header();
  summary.vectors_per_layer.assign(summary.header.n_layers, 0);
  ActivationRecord record;
  while (f.reader().next(record)) {
    for (float v : record.vectors) {
      if (!std::isfinite(v)) {
        throw NumericError("MLSA stream: non-finite value in record " +
                           std::to_string(summary.records));
      }
    }
    ++summary.records;
    if (record.special()) {
      ++summary.special_records;
    } else {
      for (auto& c : summary.vectors_per_layer) ++c;
    }
  }
  return summary;
}

}  // namespace mlsae
