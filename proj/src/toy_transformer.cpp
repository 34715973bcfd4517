#include "mlsae/toy_transformer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "mlsae/errors.hpp"

namespace mlsae::toy {
namespace {

void layer_norm(const RowMatrix<float>& x, const Vector<float>& scale, const Vector<float>& bias,
                RowMatrix<float>& out) {
  out.resize(x.rows(), x.cols());
  const float inv_d = 1.0f / static_cast<float>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const auto row = x.row(t);
    const float mean = row.sum() * inv_d;
    const float var = (row.array() - mean).square().sum() * inv_d;
    const float inv_std = 1.0f / std::sqrt(var + kLayerNormEps);
    out.row(t) = ((row.array() - mean) * inv_std * scale.transpose().array() +
                  bias.transpose().array())
                     .matrix();
  }
}

float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

void causal_attention(const BlockWeights& b, const RowMatrix<float>& h, std::uint32_t n_heads,
                      RowMatrix<float>& out) {
  const Eigen::Index t_len = h.rows();
  const Eigen::Index d = h.cols();
  const Eigen::Index dh = d / n_heads;
  const RowMatrix<float> q = h * b.wq;
  const RowMatrix<float> k = h * b.wk;
  const RowMatrix<float> v = h * b.wv;
  RowMatrix<float> heads(t_len, d);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  RowMatrix<float> scores;
  for (std::uint32_t head = 0; head < n_heads; ++head) {
    const auto qh = q.middleCols(head * dh, dh);
    const auto kh = k.middleCols(head * dh, dh);
    const auto vh = v.middleCols(head * dh, dh);
    scores.noalias() = (qh * kh.transpose()) * scale;
    for (Eigen::Index i = 0; i < t_len; ++i) {
      auto row = scores.row(i);
      const float mx = row.head(i + 1).maxCoeff();
      float sum = 0.0f;
      for (Eigen::Index j = 0; j <= i; ++j) {
        row(j) = std::exp(row(j) - mx);
        sum += row(j);
      }
      row.head(i + 1) /= sum;
      row.tail(t_len - i - 1).setZero();
    }
    heads.middleCols(head * dh, dh).noalias() = scores * vh;
  }
  out.noalias() = heads * b.wo;
}

void apply_block(const BlockWeights& b, const ModelConfig& cfg, RowMatrix<float>& x) {
  RowMatrix<float> h, delta;
  layer_norm(x, b.ln1_scale, b.ln1_bias, h);
  causal_attention(b, h, cfg.n_heads, delta);
  x += delta;
  layer_norm(x, b.ln2_scale, b.ln2_bias, h);
  RowMatrix<float> pre = h * b.w_in;
  pre.rowwise() += b.b_in.transpose();
  pre = pre.unaryExpr([](float v) { return gelu(v); });
  delta.noalias() = pre * b.w_out;
  delta.rowwise() += b.b_out.transpose();
  x += delta;
}

RowMatrix<float> embed(std::span<const TokenId> tokens, const ModelWeights& w) {
  const auto& cfg = w.config;
  if (tokens.empty()) throw RangeError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq) {
    throw RangeError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  RowMatrix<float> x(static_cast<Eigen::Index>(tokens.size()), cfg.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= cfg.vocab_size) {
      throw RangeError("forward: token " + std::to_string(tokens[t]) + " out of range");
    }
    x.row(static_cast<Eigen::Index>(t)) = w.embedding.row(tokens[t]);
  }
  return x;
}

RowMatrix<float> final_logits(const RowMatrix<float>& x, const ModelWeights& w) {
  RowMatrix<float> h;
  layer_norm(x, w.lnf_scale, w.lnf_bias, h);
  return h * w.unembed;
}

// Row-wise log-softmax in double precision.
Eigen::MatrixXd log_softmax(const RowMatrix<float>& logits) {
  Eigen::MatrixXd out = logits.cast<double>();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    const double lse = mx + std::log((out.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

template <typename Gen>
void fill_normal(RowMatrix<float>& m, Eigen::Index rows, Eigen::Index cols, double stddev, Gen& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
}

void write_vec(io::LeWriter& w, const Vector<float>& v) {
  w.f32s(std::span<const float>(v.data(), static_cast<std::size_t>(v.size())));
}
void write_mat(io::LeWriter& w, const RowMatrix<float>& m) {
  w.f32s(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}
void read_vec(io::LeReader& r, Vector<float>& v, Eigen::Index n) {
  v.resize(n);
  r.f32s(std::span<float>(v.data(), static_cast<std::size_t>(n)));
}
void read_mat(io::LeReader& r, RowMatrix<float>& m, Eigen::Index rows, Eigen::Index cols) {
  m.resize(rows, cols);
  r.f32s(std::span<float>(m.data(), static_cast<std::size_t>(m.size())));
}

template <typename M>
void check_shape(const M& m, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string("model weights: ") + name + " has shape " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (!m.allFinite()) throw NumericError(std::string("model weights: ") + name + " is not finite");
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 || max_seq < 1) {
    throw RangeError("model config: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) throw DimensionError("model config: d_model not divisible by n_heads");
  for (auto id : special_token_ids) {
    if (id >= vocab_size) throw RangeError("model config: special token id out of range");
  }
}

bool ModelConfig::is_special(TokenId id) const {
  return std::find(special_token_ids.begin(), special_token_ids.end(), id) !=
         special_token_ids.end();
}

void ModelWeights::validate() const {
  config.validate();
  const Eigen::Index d = config.d_model, m = config.d_mlp, v = config.vocab_size;
  check_shape(embedding, v, d, "embedding");
  if (blocks.size() != config.n_layers) throw DimensionError("model weights: wrong block count");
  for (const auto& b : blocks) {
    check_shape(b.ln1_scale, d, 1, "ln1_scale");
    check_shape(b.ln1_bias, d, 1, "ln1_bias");
    check_shape(b.wq, d, d, "wq");
    check_shape(b.wk, d, d, "wk");
    check_shape(b.wv, d, d, "wv");
    check_shape(b.wo, d, d, "wo");
    check_shape(b.ln2_scale, d, 1, "ln2_scale");
    check_shape(b.ln2_bias, d, 1, "ln2_bias");
    check_shape(b.w_in, d, m, "w_in");
    check_shape(b.b_in, m, 1, "b_in");
    check_shape(b.w_out, m, d, "w_out");
    check_shape(b.b_out, d, 1, "b_out");
  }
  check_shape(lnf_scale, d, 1, "lnf_scale");
  check_shape(lnf_bias, d, 1, "lnf_bias");
  check_shape(unembed, d, v, "unembed");
}

ModelWeights init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelWeights w;
  w.config = config;
  const Eigen::Index d = config.d_model, m = config.d_mlp, v = config.vocab_size;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_m = 1.0 / std::sqrt(static_cast<double>(m));
  fill_normal(w.embedding, v, d, 1.0, rng);
  w.blocks.resize(config.n_layers);
  for (auto& b : w.blocks) {
    b.ln1_scale = Vector<float>::Ones(d);
    b.ln1_bias = Vector<float>::Zero(d);
    fill_normal(b.wq, d, d, s_d, rng);
    fill_normal(b.wk, d, d, s_d, rng);
    fill_normal(b.wv, d, d, s_d, rng);
    fill_normal(b.wo, d, d, s_d, rng);
    b.ln2_scale = Vector<float>::Ones(d);
    b.ln2_bias = Vector<float>::Zero(d);
    fill_normal(b.w_in, d, m, s_d, rng);
    b.b_in = Vector<float>::Zero(m);
    fill_normal(b.w_out, m, d, s_m, rng);
    b.b_out = Vector<float>::Zero(d);
  }
  w.lnf_scale = Vector<float>::Ones(d);
  w.lnf_bias = Vector<float>::Zero(d);
  fill_normal(w.unembed, d, v, s_d, rng);
  return w;
}

void write_weights(const ModelWeights& weights, std::ostream& out) {
  weights.validate();
  const auto& c = weights.config;
  io::LeWriter w(out);
  w.magic(kWeightsMagic);
  w.u32(1);
  w.u32(c.n_layers);
  w.u32(c.d_model);
  w.u32(c.n_heads);
  w.u32(c.d_mlp);
  w.u32(c.vocab_size);
  w.u32(c.max_seq);
  w.u32(static_cast<std::uint32_t>(c.special_token_ids.size()));
  for (auto id : c.special_token_ids) w.u32(id);
  write_mat(w, weights.embedding);
  for (const auto& b : weights.blocks) {
    write_vec(w, b.ln1_scale);
    write_vec(w, b.ln1_bias);
    write_mat(w, b.wq);
    write_mat(w, b.wk);
    write_mat(w, b.wv);
    write_mat(w, b.wo);
    write_vec(w, b.ln2_scale);
    write_vec(w, b.ln2_bias);
    write_mat(w, b.w_in);
    write_vec(w, b.b_in);
    write_mat(w, b.w_out);
    write_vec(w, b.b_out);
  }
  write_vec(w, weights.lnf_scale);
  write_vec(w, weights.lnf_bias);
  write_mat(w, weights.unembed);
}

ModelWeights read_weights(std::istream& in) {
  io::LeReader r(in, "MLTW weights");
  r.expect_magic(kWeightsMagic);
  r.expect_version(1);
  ModelWeights w;
  auto& c = w.config;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.d_mlp = r.u32();
  c.vocab_size = r.u32();
  c.max_seq = r.u32();
  const auto n_special = r.u32();
  if (n_special > 1'000'000) throw FormatError("MLTW weights: implausible special token count");
  c.special_token_ids.resize(n_special);
  for (auto& id : c.special_token_ids) id = r.u32();
  c.validate();
  const Eigen::Index d = c.d_model, m = c.d_mlp, v = c.vocab_size;
  read_mat(r, w.embedding, v, d);
  w.blocks.resize(c.n_layers);
  for (auto& b : w.blocks) {
    read_vec(r, b.ln1_scale, d);
    read_vec(r, b.ln1_bias, d);
    read_mat(r, b.wq, d, d);
    read_mat(r, b.wk, d, d);
    read_mat(r, b.wv, d, d);
    read_mat(r, b.wo, d, d);
    read_vec(r, b.ln2_scale, d);
    read_vec(r, b.ln2_bias, d);
    read_mat(r, b.w_in, d, m);
    read_vec(r, b.b_in, m);
    read_mat(r, b.w_out, m, d);
    read_vec(r, b.b_out, d);
  }
  read_vec(r, w.lnf_scale, d);
  read_vec(r, w.lnf_bias, d);
  read_mat(r, w.unembed, d, v);
  w.validate();
  return w;
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  io::write_file_atomic(path, [&](std::ostream& out) { write_weights(weights, out); });
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in;
  io::open_for_read(in, path);
  return read_weights(in);
}

ModelWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected) {
  auto w = load_weights(path);
  if (!(w.config == expected)) throw DimensionError("MLTW weights: config does not match expected");
  return w;
}

ForwardResult forward(std::span<const TokenId> tokens, const ModelWeights& weights) {
  ForwardResult result;
  RowMatrix<float> x = embed(tokens, weights);
  result.taps.layers.reserve(weights.blocks.size());
  for (const auto& b : weights.blocks) {
    apply_block(b, weights.config, x);
    result.taps.layers.push_back(x);
  }
  result.logits = final_logits(x, weights);
  return result;
}

RowMatrix<float> patched_forward(std::span<const TokenId> tokens, const ModelWeights& weights,
                                 std::size_t layer, const RowMatrix<float>& replacements) {
  const auto& cfg = weights.config;
  if (layer >= cfg.n_layers) {
    throw RangeError("patched_forward: layer " + std::to_string(layer) + " out of range");
  }
  std::size_t n_regular = 0;
  for (auto t : tokens) n_regular += cfg.is_special(t) ? 0 : 1;
  if (static_cast<std::size_t>(replacements.rows()) != n_regular ||
      replacements.cols() != static_cast<Eigen::Index>(cfg.d_model)) {
    throw DimensionError("patched_forward: expected " + std::to_string(n_regular) + "x" +
                         std::to_string(cfg.d_model) + " replacements, got " +
                         std::to_string(replacements.rows()) + "x" +
                         std::to_string(replacements.cols()));
  }
  RowMatrix<float> x = embed(tokens, weights);
  for (std::size_t l = 0; l < weights.blocks.size(); ++l) {
    apply_block(weights.blocks[l], cfg, x);
    if (l == layer) {
      Eigen::Index r = 0;
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (!cfg.is_special(tokens[t])) x.row(static_cast<Eigen::Index>(t)) = replacements.row(r++);
      }
    }
  }
  return final_logits(x, weights);
}

double cross_entropy(const RowMatrix<float>& logits, std::span<const TokenId> targets) {
  if (targets.empty()) throw RangeError("cross_entropy: no predicted positions");
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw DimensionError("cross_entropy: logits rows do not match targets");
  }
  const Eigen::MatrixXd lp = log_softmax(logits);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= static_cast<TokenId>(logits.cols())) {
      throw RangeError("cross_entropy: target out of range");
    }
    total -= lp(static_cast<Eigen::Index>(i), targets[i]);
  }
  return total / static_cast<double>(targets.size());
}

double next_token_cross_entropy(const RowMatrix<float>& logits, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw RangeError("cross_entropy: need at least two tokens");
  const RowMatrix<float> head = logits.topRows(logits.rows() - 1);
  return cross_entropy(head, tokens.subspan(1));
}

double kl_divergence(const RowMatrix<float>& clean, const RowMatrix<float>& patched) {
  if (clean.rows() != patched.rows() || clean.cols() != patched.cols()) {
    throw DimensionError("kl_divergence: shape mismatch");
  }
  if (clean.rows() == 0) throw RangeError("kl_divergence: no positions");
  const Eigen::MatrixXd lp = log_softmax(clean);
  const Eigen::MatrixXd lq = log_softmax(patched);
  double total = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) {
    const double row = (lp.row(i).array().exp() * (lp.row(i) - lq.row(i)).array()).sum();
    total += std::max(row, 0.0);
  }
  return total / static_cast<double>(clean.rows());
}

std::vector<TokenId> encode_bytes(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::vector<std::vector<TokenId>> make_sequences(std::string_view corpus, TokenId bos,
                                                 std::size_t seq_len) {
  if (seq_len < 2) throw RangeError("make_sequences: seq_len must be >= 2");
  std::vector<TokenId> all;
  all.reserve(corpus.size() + corpus.size() / 16);
  std::size_t start = 0;
  while (start < corpus.size()) {
    std::size_t end = corpus.find('\n', start);
    if (end == std::string_view::npos) end = corpus.size();
    if (end > start) {
      all.push_back(bos);
      for (unsigned char c : corpus.substr(start, end - start)) all.push_back(c);
    }
    start = end + 1;
  }
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i + seq_len <= all.size(); i += seq_len) {
    out.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(i),
                     all.begin() + static_cast<std::ptrdiff_t>(i + seq_len));
  }
  return out;
}

std::string generate_corpus(std::size_t n_bytes, std::uint64_t seed) {
  static constexpr std::array<const char*, 12> kNames{
      "John", "Mary", "Alice", "Bob", "Sarah", "Tom", "Emma", "David", "Lucy", "Mark", "Anna", "Paul"};
  static constexpr std::array<const char*, 8> kPlaces{
      "the store", "the park", "school", "the office", "the beach", "the library", "the market",
      "the station"};
  static constexpr std::array<const char*, 8> kObjects{
      "a drink", "a book", "the keys", "a letter", "some bread", "a ticket", "the map", "a gift"};
  static constexpr std::array<const char*, 6> kVerbs{"gave", "handed", "sent", "showed", "passed",
                                                     "offered"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const auto& arr) {
    return arr[std::uniform_int_distribution<std::size_t>(0, arr.size() - 1)(rng)];
  };
  std::string out;
  out.reserve(n_bytes + 128);
  while (out.size() < n_bytes) {
    const std::string a = pick(kNames);
    std::string b = pick(kNames);
    while (b == a) b = pick(kNames);
    const int form = std::uniform_int_distribution<int>(0, 3)(rng);
    std::string s;
    switch (form) {
      case 0:
        s = "When " + a + " and " + b + " went to " + pick(kPlaces) + ", " + a + " " + pick(kVerbs) +
            " " + pick(kObjects) + " to " + b + ".";
        break;
      case 1:
        s = a + " " + pick(kVerbs) + " " + b + " " + pick(kObjects) + " at " + pick(kPlaces) + ".";
        break;
      case 2:
        s = "After " + a + " met " + b + " near " + pick(kPlaces) + ", they talked for " +
            std::to_string(std::uniform_int_distribution<int>(2, 59)(rng)) + " minutes.";
        break;
      default:
        s = "Did " + a + " leave " + pick(kObjects) + " at " + pick(kPlaces) + "? " + b +
            " thinks so.";
        break;
    }
    out += s;
    out += '\n';
  }
  return out;
}

}  // namespace mlsae::toy
