#pragma once

#include <cstdint>

#include <Eigen/Core>

namespace mlsae {

/// Row-major dense matrix; batches store one vector per row.
template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ColMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using LayerIndex = std::uint32_t;
using LatentIndex = std::uint32_t;
using TokenId = std::uint32_t;

/// Which (token, layer) a batch row came from.
struct RowProvenance {
  std::uint64_t token_index;
  LayerIndex layer;
};

}  // namespace mlsae
