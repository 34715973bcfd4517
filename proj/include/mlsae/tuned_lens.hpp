#pragma once

// Per-layer affine translators with a residual parameterization:
//   apply:  x' = x + W x + b
//   invert: x  = (I + W)^{-1} (x' - b)
//
// MLLN v1: "MLLN" | u32 version=1 | u32 d | u32 n_layers
//   then per layer: d*d f32 W (row-major) | d f32 b
// A file may omit the final layer; that layer then uses the identity.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mlsae/binary_io.hpp"

namespace mlsae {

inline constexpr io::Magic kLensMagic{'M', 'L', 'L', 'N'};
inline constexpr double kMinReciprocalCondition = 1e-10;

struct LensLayer {
  Eigen::MatrixXd weight;   // W, d x d
  Eigen::VectorXd bias;     // b
  Eigen::MatrixXd inverse;  // (I + W)^{-1}, computed at load
  double rcond = 1.0;       // reciprocal condition estimate of I + W
};

class TunedLens {
 public:
  /// Identity lens for every layer.
  static TunedLens identity(std::uint32_t d, std::uint32_t n_layers);
  /// Builds a lens from raw per-layer parameters, computing the inverses.
  /// Throws NumericError if some I + W is singular or too ill-conditioned.
  static TunedLens from_parameters(std::vector<Eigen::MatrixXd> weights,
                                   std::vector<Eigen::VectorXd> biases);

  std::uint32_t d() const { return d_; }
  std::uint32_t n_layers() const { return static_cast<std::uint32_t>(layers_.size()); }
  const LensLayer& layer(std::size_t l) const;
  /// Smallest reciprocal condition estimate over layers.
  double min_rcond() const;

  void apply(std::size_t layer, std::span<const float> x, std::span<float> out) const;
  void invert(std::size_t layer, std::span<const float> x, std::span<float> out) const;
  std::vector<float> apply(std::size_t layer, std::span<const float> x) const;
  std::vector<float> invert(std::size_t layer, std::span<const float> x) const;
  void apply_in_place(std::size_t layer, std::span<float> x) const;
  void invert_in_place(std::size_t layer, std::span<float> x) const;

 private:
  std::uint32_t d_ = 0;
  std::vector<LensLayer> layers_;
};

void write_lens(const TunedLens& lens, std::ostream& out);
void save_lens(const TunedLens& lens, const std::filesystem::path& path);
/// Reads an MLLN file. When `expected_layers` is given the file must hold
/// either that many layers or one fewer (identity appended for the last).
TunedLens read_lens(std::istream& in, std::optional<std::uint32_t> expected_d = std::nullopt,
                    std::optional<std::uint32_t> expected_layers = std::nullopt);
TunedLens load_lens(const std::filesystem::path& path,
                    std::optional<std::uint32_t> expected_d = std::nullopt,
                    std::optional<std::uint32_t> expected_layers = std::nullopt);

}  // namespace mlsae
