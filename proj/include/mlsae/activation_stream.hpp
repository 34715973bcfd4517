#pragma once

// MLSA activation streams: one record per token holding the residual vector
// at every layer, plus the MLST per-layer standardization sidecar.
//
// MLSA v1, little-endian:
//   "MLSA" | u32 version=1 | u32 d | u32 n_layers | u64 n_tokens (0 = unknown)
//   | u32 tag_len | tag bytes
//   then per token: u32 token_id | u8 flags | n_layers*d f32 (layer-major)
//
// MLST v1: "MLST" | u32 version=1 | u32 d | u32 n_layers | u64 token_count
//   then per layer: d f32 means | 1 f32 std

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mlsae/binary_io.hpp"
#include "mlsae/types.hpp"

namespace mlsae {

inline constexpr io::Magic kStreamMagic{'M', 'L', 'S', 'A'};
inline constexpr io::Magic kStatsMagic{'M', 'L', 'S', 'T'};
inline constexpr std::uint32_t kStreamVersion = 1;
inline constexpr std::uint8_t kFlagSpecial = 0x01;

struct StreamHeader {
  std::uint32_t d = 0;
  std::uint32_t n_layers = 0;
  std::uint64_t n_tokens = 0;
  std::string model_tag;

  std::size_t record_floats() const { return std::size_t{d} * n_layers; }
  std::size_t record_bytes() const { return 4 + 1 + 4 * record_floats(); }
  /// Serialized header size in bytes.
  std::size_t header_bytes() const { return 4 + 4 + 4 + 4 + 8 + 4 + model_tag.size(); }
  void validate() const;
};

struct ActivationRecord {
  TokenId token_id = 0;
  std::uint8_t flags = 0;
  /// n_layers * d floats, layer 0 first.
  std::vector<float> vectors;

  bool special() const { return (flags & kFlagSpecial) != 0; }
  std::span<const float> layer(std::size_t layer, std::size_t d) const {
    return std::span<const float>(vectors).subspan(layer * d, d);
  }
};

/// Streaming MLSA writer. The header is written by the constructor.
class StreamWriter {
 public:
  StreamWriter(std::ostream& sink, StreamHeader header);

  /// Throws DimensionError if the record length is wrong, NumericError on
  /// non-finite values.
  void write(const ActivationRecord& record);
  void write(TokenId token_id, std::uint8_t flags, std::span<const float> vectors);

  /// Checks the declared token count (if any) against records written.
  std::uint64_t finish();

  std::uint64_t records_written() const { return records_; }
  std::uint64_t bytes_written() const { return writer_.bytes_written(); }
  const StreamHeader& header() const { return header_; }

 private:
  io::LeWriter writer_;
  StreamHeader header_;
  std::uint64_t records_ = 0;
};

/// Writes a whole stream; returns the byte count.
std::uint64_t write_stream(const StreamHeader& header, std::span<const ActivationRecord> records,
                           std::ostream& sink);

/// Sequential MLSA reader; parses and validates the header on construction.
class StreamReader {
 public:
  explicit StreamReader(std::istream& source);

  const StreamHeader& header() const { return header_; }
  /// Next record, or nullopt at the end of the stream. Throws FormatError on
  /// a truncated record or when the declared token count is not reached.
  std::optional<ActivationRecord> next();
  bool next(ActivationRecord& record);
  std::uint64_t records_read() const { return records_; }

 private:
  io::LeReader reader_;
  StreamHeader header_;
  std::uint64_t records_ = 0;
};

/// Owns the file behind a StreamReader.
class StreamFile {
 public:
  explicit StreamFile(const std::filesystem::path& path);
  StreamReader& reader() { return *reader_; }
  const StreamHeader& header() const { return reader_->header(); }

 private:
  std::ifstream file_;
  std::unique_ptr<StreamReader> reader_;
};

StreamHeader read_stream_header(const std::filesystem::path& path);

/// A batch of tokens with all their layers; vector(t, l) is a view of d floats.
struct TokenBatch {
  std::uint32_t d = 0;
  std::uint32_t n_layers = 0;
  std::vector<std::uint64_t> token_index;  // record number in the stream
  std::vector<TokenId> token_id;
  std::vector<std::uint8_t> flags;
  std::vector<float> data;  // n_tokens * n_layers * d

  std::size_t n_tokens() const { return token_index.size(); }
  std::size_t n_vectors() const { return n_tokens() * n_layers; }
  std::span<const float> vector(std::size_t token, std::size_t layer) const {
    return std::span<const float>(data).subspan((token * n_layers + layer) * d, d);
  }
};

struct BatchOptions {
  std::size_t tokens_per_batch = 1024;
  /// Skip tokens flagged special; batch sizes count the kept tokens.
  bool exclude_special = true;
  /// Bounded shuffle buffer capacity in tokens; 0 disables shuffling.
  std::size_t shuffle_buffer = 0;
  std::uint64_t seed = 0;
  /// Stop after this many kept tokens; 0 reads to the end.
  std::uint64_t max_tokens = 0;
};

/// Groups stream records into TokenBatches (read_batches).
class BatchReader {
 public:
  BatchReader(StreamReader& reader, BatchOptions options);

  /// Next batch; the final batch may be short. nullopt when exhausted.
  std::optional<TokenBatch> next();
  std::uint64_t tokens_emitted() const { return emitted_; }

 private:
  struct Slot {
    std::uint64_t index;
    ActivationRecord record;
  };
  bool pull(Slot& slot);
  bool next_token(Slot& out);

  StreamReader& reader_;
  BatchOptions options_;
  std::mt19937_64 rng_;
  std::vector<Slot> buffer_;
  bool source_done_ = false;
  std::uint64_t kept_ = 0;
  std::uint64_t emitted_ = 0;
};

/// Per-layer mean vector and scalar standard deviation.
struct LayerStats {
  std::uint32_t d = 0;
  std::uint32_t n_layers = 0;
  std::uint64_t token_count = 0;
  std::vector<float> means;  // n_layers * d
  std::vector<float> stds;   // n_layers

  std::span<const float> mean(std::size_t layer) const {
    return std::span<const float>(means).subspan(layer * d, d);
  }
  void validate() const;
};

/// Accumulates per-layer statistics in double precision (Welford per dimension).
class LayerStatsAccumulator {
 public:
  LayerStatsAccumulator(std::uint32_t d, std::uint32_t n_layers);
  void add(std::size_t layer, std::span<const float> x);
  /// Marks one token as complete (for token_count).
  void add_token() { ++tokens_; }
  /// Throws NumericError when a layer has zero variance, Error when empty.
  LayerStats finish() const;

 private:
  std::uint32_t d_;
  std::uint32_t n_layers_;
  std::uint64_t tokens_ = 0;
  std::vector<std::uint64_t> counts_;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// In-place per-layer transform applied before statistics (e.g. a tuned lens).
using VectorTransform = std::function<void(std::size_t layer, std::span<float> x)>;

/// Statistics over the first `max_tokens` non-special tokens.
LayerStats compute_layer_stats(StreamReader& reader, std::uint64_t max_tokens,
                               const VectorTransform& transform = {});
LayerStats compute_layer_stats(const std::filesystem::path& path, std::uint64_t max_tokens,
                               const VectorTransform& transform = {});

void standardize(std::span<const float> x, std::size_t layer, const LayerStats& stats,
                 std::span<float> out);
void destandardize(std::span<const float> x, std::size_t layer, const LayerStats& stats,
                   std::span<float> out);
std::vector<float> standardize(std::span<const float> x, std::size_t layer, const LayerStats& stats);
std::vector<float> destandardize(std::span<const float> x, std::size_t layer,
                                 const LayerStats& stats);

void write_layer_stats(const LayerStats& stats, std::ostream& out);
LayerStats read_layer_stats(std::istream& in);
void save_layer_stats(const LayerStats& stats, const std::filesystem::path& path);
LayerStats load_layer_stats(const std::filesystem::path& path);

/// Result of a full validation pass over a stream.
struct StreamSummary {
  StreamHeader header;
  std::uint64_t records = 0;
  std::uint64_t special_records = 0;
  /// Vectors per layer after special-token exclusion.
  std::vector<std::uint64_t> vectors_per_layer;
};

/// Reads every record; throws on any format violation or non-finite value.
StreamSummary validate_stream(const std::filesystem::path& path);

}  // namespace mlsae
