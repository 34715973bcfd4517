#include "mlsae/tuned_lens.hpp"

#include <Eigen/LU>
#include <fstream>

#include "mlsae/errors.hpp"

namespace mlsae {
namespace {

LensLayer make_layer(Eigen::MatrixXd weight, Eigen::VectorXd bias, std::size_t index) {
  const auto d = weight.rows();
  LensLayer layer;
  const Eigen::MatrixXd shifted = Eigen::MatrixXd::Identity(d, d) + weight;
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(shifted);
  layer.rcond = lu.rcond();
  if (!(layer.rcond >= kMinReciprocalCondition)) {
    throw NumericError("tuned lens: I + W at layer " + std::to_string(index) +
                       " is singular (rcond " + std::to_string(layer.rcond) + ")");
  }
  layer.inverse = lu.inverse();
  layer.weight = std::move(weight);
  layer.bias = std::move(bias);
  return layer;
}

}  // namespace

TunedLens TunedLens::identity(std::uint32_t d, std::uint32_t n_layers) {
  std::vector<Eigen::MatrixXd> w(n_layers, Eigen::MatrixXd::Zero(d, d));
  std::vector<Eigen::VectorXd> b(n_layers, Eigen::VectorXd::Zero(d));
  return from_parameters(std::move(w), std::move(b));
}

TunedLens TunedLens::from_parameters(std::vector<Eigen::MatrixXd> weights,
                                     std::vector<Eigen::VectorXd> biases) {
  if (weights.empty() || weights.size() != biases.size()) {
    throw DimensionError("tuned lens: need matching non-empty weight and bias lists");
  }
  TunedLens lens;
  lens.d_ = static_cast<std::uint32_t>(weights.front().rows());
  if (lens.d_ < 1) throw DimensionError("tuned lens: d must be >= 1");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rows() != lens.d_ || weights[l].cols() != lens.d_ || biases[l].size() != lens.d_) {
      throw DimensionError("tuned lens: layer " + std::to_string(l) + " has inconsistent shape");
    }
    lens.layers_.push_back(make_layer(std::move(weights[l]), std::move(biases[l]), l));
  }
  return lens;
}

const LensLayer& TunedLens::layer(std::size_t l) const {
  if (l >= layers_.size()) throw RangeError("tuned lens: layer " + std::to_string(l) + " out of range");
  return layers_[l];
}

double TunedLens::min_rcond() const {
  double m = 1.0;
  for (const auto& l : layers_) m = std::min(m, l.rcond);
  return m;
}

void TunedLens::apply(std::size_t layer_index, std::span<const float> x, std::span<float> out) const {
  const auto& l = layer(layer_index);
  if (x.size() != d_ || out.size() != d_) throw DimensionError("tuned lens: vector length mismatch");
  const Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXf>(x.data(), d_).cast<double>();
  const Eigen::VectorXd y = v + (l.weight * v + l.bias);
  Eigen::Map<Eigen::VectorXf>(out.data(), d_) = y.cast<float>();
}

void TunedLens::invert(std::size_t layer_index, std::span<const float> x, std::span<float> out) const {
  const auto& l = layer(layer_index);
  if (x.size() != d_ || out.size() != d_) throw DimensionError("tuned lens: vector length mismatch");
  const Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXf>(x.data(), d_).cast<double>();
  const Eigen::VectorXd y = l.inverse * (v - l.bias);
  Eigen::Map<Eigen::VectorXf>(out.data(), d_) = y.cast<float>();
}

std::vector<float> TunedLens::apply(std::size_t layer_index, std::span<const float> x) const {
  std::vector<float> out(x.size());
  apply(layer_index, x, out);
  return out;
}

std::vector<float> TunedLens::invert(std::size_t layer_index, std::span<const float> x) const {
  std::vector<float> out(x.size());
  invert(layer_index, x, out);
  return out;
}

void TunedLens::apply_in_place(std::size_t layer_index, std::span<float> x) const {
  const std::vector<float> copy(x.begin(), x.end());
  apply(layer_index, copy, x);
}

void TunedLens::invert_in_place(std::size_t layer_index, std::span<float> x) const {
  const std::vector<float> copy(x.begin(), x.end());
  invert(layer_index, copy, x);
}

void write_lens(const TunedLens& lens, std::ostream& out) {
  io::LeWriter w(out);
  w.magic(kLensMagic);
  w.u32(1);
  w.u32(lens.d());
  w.u32(lens.n_layers());
  for (std::size_t l = 0; l < lens.n_layers(); ++l) {
    const auto& layer = lens.layer(l);
    using RowF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const RowF wf = layer.weight.cast<float>();
    const Eigen::VectorXf bf = layer.bias.cast<float>();
    w.f32s(std::span<const float>(wf.data(), static_cast<std::size_t>(wf.size())));
    w.f32s(std::span<const float>(bf.data(), static_cast<std::size_t>(bf.size())));
  }
}

void save_lens(const TunedLens& lens, const std::filesystem::path& path) {
  io::write_file_atomic(path, [&](std::ostream& out) { write_lens(lens, out); });
}

TunedLens read_lens(std::istream& in, std::optional<std::uint32_t> expected_d,
                    std::optional<std::uint32_t> expected_layers) {
  io::LeReader r(in, "MLLN lens");
  r.expect_magic(kLensMagic);
  r.expect_version(1);
  const auto d = r.u32();
  const auto n_layers = r.u32();
  if (d < 1 || n_layers < 1) throw FormatError("MLLN lens: empty dimensions");
  if (expected_d && *expected_d != d) {
    throw DimensionError("MLLN lens: d = " + std::to_string(d) + " but the stream has d = " +
                         std::to_string(*expected_d));
  }
  if (expected_layers && n_layers != *expected_layers && n_layers + 1 != *expected_layers) {
    throw DimensionError("MLLN lens: " + std::to_string(n_layers) + " layers but the stream has " +
                         std::to_string(*expected_layers));
  }
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  using RowF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    RowF wf(d, d);
    Eigen::VectorXf bf(d);
    r.f32s(std::span<float>(wf.data(), static_cast<std::size_t>(wf.size())));
    r.f32s(std::span<float>(bf.data(), static_cast<std::size_t>(bf.size())));
    if (!wf.allFinite() || !bf.allFinite()) throw NumericError("MLLN lens: non-finite parameters");
    weights.push_back(wf.cast<double>());
    biases.push_back(bf.cast<double>());
  }
  if (expected_layers && n_layers + 1 == *expected_layers) {
    weights.push_back(Eigen::MatrixXd::Zero(d, d));
    biases.push_back(Eigen::VectorXd::Zero(d));
  }
  return TunedLens::from_parameters(std::move(weights), std::move(biases));
}

TunedLens load_lens(const std::filesystem::path& path, std::optional<std::uint32_t> expected_d,
                    std::optional<std::uint32_t> expected_layers) {
  std::ifstream in;
  io::open_for_read(in, path);
  return read_lens(in, expected_d, expected_layers);
}

}  // namespace mlsae
