#pragma once

// A small pre-norm decoder-only transformer (forward pass only) used as a
// source of residual-stream activations and as the target of activation
// patching.
//
// Block: x += Attn(LN1(x)); x += MLP(LN2(x)). The residual after block l is
// tap l; the last tap is taken before the final layer norm.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlsae/binary_io.hpp"
#include "mlsae/types.hpp"

namespace mlsae::toy {

inline constexpr io::Magic kWeightsMagic{'M', 'L', 'T', 'W'};
inline constexpr float kLayerNormEps = 1e-5f;
/// Byte 0 doubles as the beginning-of-document token in generated corpora.
inline constexpr TokenId kBosToken = 0;

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t d_mlp = 256;
  std::uint32_t vocab_size = 256;
  std::uint32_t max_seq = 128;
  std::vector<TokenId> special_token_ids{kBosToken};

  void validate() const;
  bool is_special(TokenId id) const;
  bool operator==(const ModelConfig&) const = default;
};

struct BlockWeights {
  Vector<float> ln1_scale, ln1_bias;
  RowMatrix<float> wq, wk, wv, wo;  // d x d, applied as x * W
  Vector<float> ln2_scale, ln2_bias;
  RowMatrix<float> w_in;  // d x d_mlp
  Vector<float> b_in;
  RowMatrix<float> w_out;  // d_mlp x d
  Vector<float> b_out;
};

struct ModelWeights {
  ModelConfig config;
  RowMatrix<float> embedding;  // vocab x d
  std::vector<BlockWeights> blocks;
  Vector<float> lnf_scale, lnf_bias;
  RowMatrix<float> unembed;  // d x vocab

  /// Throws DimensionError on inconsistent shapes, NumericError on non-finite entries.
  void validate() const;
};

/// Residual vector after each block: layers[l] is (tokens x d_model).
struct ResidualTaps {
  std::vector<RowMatrix<float>> layers;
};

struct ForwardResult {
  RowMatrix<float> logits;  // tokens x vocab
  ResidualTaps taps;
};

ModelWeights init_random(const ModelConfig& config, std::uint64_t seed);
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
void write_weights(const ModelWeights& weights, std::ostream& out);
ModelWeights read_weights(std::istream& in);
ModelWeights load_weights(const std::filesystem::path& path);
/// Loads and checks the stored config against `expected`.
ModelWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected);

ForwardResult forward(std::span<const TokenId> tokens, const ModelWeights& weights);

/// Runs the model, overwriting the residual after block `layer` at every
/// non-special position with the next row of `replacements` (one row per
/// non-special position, in order). Special positions keep their activations.
RowMatrix<float> patched_forward(std::span<const TokenId> tokens, const ModelWeights& weights,
                                 std::size_t layer, const RowMatrix<float>& replacements);

/// Mean of -log softmax(logits[i])[targets[i]] in nats.
double cross_entropy(const RowMatrix<float>& logits, std::span<const TokenId> targets);
/// Cross-entropy of predicting tokens[i+1] from logits[i].
double next_token_cross_entropy(const RowMatrix<float>& logits, std::span<const TokenId> tokens);
/// Mean over positions of KL(softmax(clean) || softmax(patched)) in nats.
double kl_divergence(const RowMatrix<float>& clean, const RowMatrix<float>& patched);

std::vector<TokenId> encode_bytes(std::string_view text);

/// Prefixes each newline-separated document with `bos`, concatenates, and
/// cuts into sequences of `seq_len` tokens, discarding the incomplete tail.
std::vector<std::vector<TokenId>> make_sequences(std::string_view corpus, TokenId bos,
                                                 std::size_t seq_len);

/// Synthetic English-like byte corpus of roughly `n_bytes` bytes.
std::string generate_corpus(std::size_t n_bytes, std::uint64_t seed);

}  // namespace mlsae::toy
