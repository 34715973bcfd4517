#include "mlsae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include "mlsae/errors.hpp"

namespace mlsae {

void SaeConfig::validate() const {
  if (d < 1) throw RangeError("sae config: d must be >= 1");
  if (expansion_factor < 1) throw RangeError("sae config: expansion_factor must be >= 1");
  if (k < 1 || k > n()) throw RangeError("sae config: k must be in [1, n]");
  if (k_aux < 1 || k_aux > n()) throw RangeError("sae config: k_aux must be in [1, n]");
  if (!(alpha >= 0.0)) throw RangeError("sae config: alpha must be >= 0");
}

std::uint32_t default_k_aux(std::uint32_t d) {
  const double half = d / 2.0;
  std::uint32_t best = 1;
  for (std::uint32_t p = 1; p != 0 && p <= 2 * d; p <<= 1) {
    if (std::abs(p - half) < std::abs(best - half)) best = p;
  }
  return best;
}

template <typename T>
void SaeParams<T>::validate(const SaeConfig& config) const {
  const Eigen::Index d = config.d, n = config.n();
  if (encoder.rows() != n || encoder.cols() != d || decoder.rows() != d || decoder.cols() != n ||
      bias.size() != d) {
    throw DimensionError("sae params: shapes do not match config (d=" + std::to_string(d) +
                         ", n=" + std::to_string(n) + ")");
  }
  if (!encoder.allFinite() || !decoder.allFinite() || !bias.allFinite()) {
    throw NumericError("sae params: non-finite entries");
  }
}

template <typename T>
RowMatrix<T> pre_activations(const RowMatrix<T>& x, const SaeParams<T>& params) {
  if (x.cols() != params.d()) {
    throw DimensionError("encode: input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(params.d()));
  }
  RowMatrix<T> centered = x.rowwise() - params.bias.transpose();
  RowMatrix<T> pre(x.rows(), params.n());
  pre.noalias() = centered * params.encoder.transpose();
  return pre;
}

template <typename T>
SparseLatents<T> top_k(const RowMatrix<T>& pre, std::size_t k,
                       std::span<const LatentIndex> candidates) {
  const auto n = static_cast<std::size_t>(pre.cols());
  std::vector<LatentIndex> pool;
  if (candidates.empty()) {
    pool.resize(n);
    std::iota(pool.begin(), pool.end(), LatentIndex{0});
  } else {
    pool.assign(candidates.begin(), candidates.end());
  }
  const std::size_t kk = std::min(k, pool.size());
  SparseLatents<T> out;
  out.rows = static_cast<std::size_t>(pre.rows());
  out.k = kk;
  out.indices.resize(out.rows * kk);
  out.values.resize(out.rows * kk);
  std::vector<LatentIndex> work(pool.size());
  for (std::size_t r = 0; r < out.rows; ++r) {
    const T* z = pre.data() + r * n;
    work = pool;
    auto better = [z](LatentIndex a, LatentIndex b) {
      return z[a] > z[b] || (z[a] == z[b] && a < b);
    };
    if (kk < work.size()) {
      std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(kk), work.end(),
                       better);
    }
    std::sort(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(kk));
    for (std::size_t i = 0; i < kk; ++i) {
      out.indices[r * kk + i] = work[i];
      out.values[r * kk + i] = std::max(z[work[i]], T(0));
    }
  }
  return out;
}

template <typename T>
SparseLatents<T> encode(const RowMatrix<T>& x, const SaeParams<T>& params, const SaeConfig& config) {
  return top_k(pre_activations(x, params), config.k);
}

template <typename T>
RowMatrix<T> decode(const SparseLatents<T>& latents, const SaeParams<T>& params) {
  const auto n = static_cast<LatentIndex>(params.n());
  RowMatrix<T> out(static_cast<Eigen::Index>(latents.rows), params.d());
  for (std::size_t r = 0; r < latents.rows; ++r) {
    auto row = out.row(static_cast<Eigen::Index>(r));
    row = params.bias.transpose();
    const auto idx = latents.row_indices(r);
    const auto val = latents.row_values(r);
    for (std::size_t i = 0; i < latents.k; ++i) {
      if (idx[i] >= n) throw RangeError("decode: latent index " + std::to_string(idx[i]) + " >= n");
      if (val[i] != T(0)) row += val[i] * params.decoder.col(idx[i]).transpose();
    }
  }
  return out;
}

template <typename T>
double total_variance(const RowMatrix<T>& x) {
  const Eigen::MatrixXd xd = x.template cast<double>();
  const Eigen::RowVectorXd mean = xd.colwise().mean();
  return (xd.rowwise() - mean).squaredNorm();
}

template <typename T>
double fvu(const RowMatrix<T>& x, const RowMatrix<T>& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw DimensionError("fvu: shape mismatch");
  if (x.rows() < 2) throw RangeError("fvu: batch size must be >= 2");
  const double var = total_variance(x);
  if (!(var > 0.0)) throw NumericError("fvu: zero-variance batch");
  const double err = (x.template cast<double>() - x_hat.template cast<double>()).squaredNorm();
  return err / var;
}

template <typename T>
AuxTerm<T> aux_term(const RowMatrix<T>& x, const RowMatrix<T>& x_hat, const RowMatrix<T>& pre,
                    const DeadMask& dead, const SaeParams<T>& params, const SaeConfig& config) {
  AuxTerm<T> term;
  if (dead.empty()) return term;
  if (dead.size() != static_cast<std::size_t>(params.n())) {
    throw DimensionError("aux_loss: dead mask length must equal n");
  }
  std::vector<LatentIndex> dead_idx;
  for (std::size_t j = 0; j < dead.size(); ++j) {
    if (dead[j]) dead_idx.push_back(static_cast<LatentIndex>(j));
  }
  if (dead_idx.empty()) return term;
  term.active = true;
  term.latents = top_k(pre, config.k_aux, dead_idx);
  term.reconstruction = decode(term.latents, params);
  // e - e_hat with e = x - x_hat
  const auto diff = (x - x_hat - term.reconstruction).template cast<double>();
  term.loss = diff.squaredNorm() / static_cast<double>(x.rows());
  return term;
}

template <typename T>
ForwardOutput<T> forward_loss(const RowMatrix<T>& x, const SaeParams<T>& params,
                              const SaeConfig& config, const DeadMask& dead) {
  ForwardOutput<T> out;
  out.pre = pre_activations(x, params);
  out.latents = top_k(out.pre, config.k);
  out.reconstruction = decode(out.latents, params);
  out.variance = total_variance(x);
  if (x.rows() < 2) throw RangeError("forward_loss: batch size must be >= 2");
  if (!(out.variance > 0.0)) throw NumericError("forward_loss: zero-variance batch");
  out.fvu = (x.template cast<double>() - out.reconstruction.template cast<double>()).squaredNorm() /
            out.variance;
  out.aux = aux_term(x, out.reconstruction, out.pre, dead, params, config);
  out.aux_loss = out.aux.loss;
  out.total_loss = out.fvu + config.alpha * out.aux_loss;
  return out;
}

namespace {

// Accumulates gradients for one sparse code whose decoded output has
// upstream gradient `upstream` (rows x d).
template <typename T>
void accumulate_code(const SparseLatents<T>& code, const RowMatrix<T>& upstream,
                     const RowMatrix<T>& centered, const SaeParams<T>& params,
                     SaeGradients<T>& grads, Vector<T>& encoder_bias_term) {
  for (std::size_t r = 0; r < code.rows; ++r) {
    const auto u = upstream.row(static_cast<Eigen::Index>(r));
    const auto xc = centered.row(static_cast<Eigen::Index>(r));
    const auto idx = code.row_indices(r);
    const auto val = code.row_values(r);
    for (std::size_t i = 0; i < code.k; ++i) {
      const T h = val[i];
      if (!(h > T(0))) continue;  // ReLU inactive: no gradient through this entry
      const LatentIndex j = idx[i];
      grads.decoder.col(j) += h * u.transpose();
      const T delta = params.decoder.col(j).dot(u.transpose());
      grads.encoder.row(j) += delta * xc;
      encoder_bias_term += delta * params.encoder.row(j).transpose();
    }
  }
}

}  // namespace

template <typename T>
SaeGradients<T> backward(const RowMatrix<T>& x, const ForwardOutput<T>& fwd,
                         const SaeParams<T>& params, const SaeConfig& config) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = params.d();
  SaeGradients<T> grads;
  grads.encoder = RowMatrix<T>::Zero(params.n(), d);
  grads.decoder = ColMatrix<T>::Zero(d, params.n());
  grads.bias = Vector<T>::Zero(d);

  const RowMatrix<T> residual = fwd.reconstruction - x;  // x_hat - x
  RowMatrix<T> upstream = (T(2) / static_cast<T>(fwd.variance)) * residual;
  RowMatrix<T> aux_upstream;
  if (fwd.aux.active) {
    // d/d x_hat and d/d e_hat of alpha/B * ||e_hat + (x_hat - x)||^2
    const T scale = T(2) * static_cast<T>(config.alpha) / static_cast<T>(rows);
    aux_upstream = scale * (fwd.aux.reconstruction + residual);
    upstream += aux_upstream;
  }

  const RowMatrix<T> centered = x.rowwise() - params.bias.transpose();
  Vector<T> encoder_bias_term = Vector<T>::Zero(d);
  accumulate_code(fwd.latents, upstream, centered, params, grads, encoder_bias_term);
  grads.bias += upstream.colwise().sum().transpose();
  if (fwd.aux.active) {
    accumulate_code(fwd.aux.latents, aux_upstream, centered, params, grads, encoder_bias_term);
    grads.bias += aux_upstream.colwise().sum().transpose();
  }
  grads.bias -= encoder_bias_term;
  return grads;
}

template <typename T>
void project_decoder_gradient(ColMatrix<T>& grad, const SaeParams<T>& params) {
  if (grad.rows() != params.decoder.rows() || grad.cols() != params.decoder.cols()) {
    throw DimensionError("project_decoder_gradient: shape mismatch");
  }
  for (Eigen::Index j = 0; j < grad.cols(); ++j) {
    const auto w = params.decoder.col(j);
    grad.col(j) -= grad.col(j).dot(w) * w;
  }
}

template <typename T>
void renormalize_decoder(SaeParams<T>& params) {
  for (Eigen::Index j = 0; j < params.decoder.cols(); ++j) {
    auto col = params.decoder.col(j);
    const double norm = col.template cast<double>().norm();
    if (!(norm > 0.0)) {
      throw NumericError("renormalize_decoder: decoder column " + std::to_string(j) + " has zero norm");
    }
    col = (col.template cast<double>() / norm).template cast<T>();
  }
}

template <typename T>
GeometricMedianResult geometric_median(const RowMatrix<T>& points,
                                       const GeometricMedianOptions& options) {
  if (points.rows() < 1) throw RangeError("geometric_median: empty point set");
  const Eigen::MatrixXd p = points.template cast<double>();
  GeometricMedianResult result;
  result.median = p.colwise().mean().transpose();
  if (p.rows() == 1) {
    result.converged = true;
    return result;
  }
  constexpr double kCoincident = 1e-12;
  for (int it = 0; it < options.max_iterations; ++it) {
    Eigen::VectorXd numer = Eigen::VectorXd::Zero(p.cols());
    double denom = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dist = (p.row(i).transpose() - result.median).norm();
      if (dist < kCoincident) continue;
      numer += p.row(i).transpose() / dist;
      denom += 1.0 / dist;
    }
    result.iterations = it + 1;
    if (denom == 0.0) {  // every point coincides with the estimate
      result.converged = true;
      return result;
    }
    const Eigen::VectorXd next = numer / denom;
    const double step = (next - result.median).norm();
    result.median = next;
    if (step <= options.relative_tolerance * std::max(result.median.norm(), 1.0)) {
      result.converged = true;
      return result;
    }
  }
  return result;
}

template <typename T>
InitResult<T> init_params(const RowMatrix<T>& first_batch, const SaeConfig& config,
                          std::uint64_t seed) {
  config.validate();
  if (first_batch.rows() < 1) throw RangeError("init_params: empty first batch");
  if (first_batch.cols() != static_cast<Eigen::Index>(config.d)) {
    throw DimensionError("init_params: batch width does not match d");
  }
  const Eigen::Index d = config.d, n = config.n();
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> dist(-bound, bound);
  InitResult<T> out;
  out.params.encoder.resize(n, d);
  for (Eigen::Index i = 0; i < out.params.encoder.size(); ++i) {
    out.params.encoder.data()[i] = static_cast<T>(dist(rng));
  }
  out.params.decoder = out.params.encoder.transpose();
  renormalize_decoder(out.params);
  out.median = geometric_median(first_batch);
  out.params.bias = out.median.median.template cast<T>();
  return out;
}

void write_sae(std::ostream& out, const SaeConfig& config, const SaeParams<float>& params) {
  config.validate();
  params.validate(config);
  io::LeWriter w(out);
  w.magic(kCheckpointMagic);
  w.u32(1);
  w.u32(config.d);
  w.u32(config.expansion_factor);
  w.u32(config.n());
  w.u32(config.k);
  w.u32(config.k_aux);
  w.f64(config.alpha);
  w.f32s(std::span<const float>(params.encoder.data(), static_cast<std::size_t>(params.encoder.size())));
  w.f32s(std::span<const float>(params.bias.data(), static_cast<std::size_t>(params.bias.size())));
  w.f32s(std::span<const float>(params.decoder.data(), static_cast<std::size_t>(params.decoder.size())));
}

void read_sae(std::istream& in, SaeConfig& config, SaeParams<float>& params) {
  io::LeReader r(in, "MLSC checkpoint");
  r.expect_magic(kCheckpointMagic);
  r.expect_version(1);
  config.d = r.u32();
  config.expansion_factor = r.u32();
  const auto n = r.u32();
  config.k = r.u32();
  config.k_aux = r.u32();
  config.alpha = r.f64();
  config.validate();
  if (n != config.n()) throw FormatError("MLSC checkpoint: n does not equal d * expansion_factor");
  params.encoder.resize(n, config.d);
  params.bias.resize(config.d);
  params.decoder.resize(config.d, n);
  r.f32s(std::span<float>(params.encoder.data(), static_cast<std::size_t>(params.encoder.size())));
  r.f32s(std::span<float>(params.bias.data(), static_cast<std::size_t>(params.bias.size())));
  r.f32s(std::span<float>(params.decoder.data(), static_cast<std::size_t>(params.decoder.size())));
  params.validate(config);
}

#define MLSAE_INSTANTIATE(T)                                                                    \
  template struct SaeParams<T>;                                                                 \
  template RowMatrix<T> pre_activations(const RowMatrix<T>&, const SaeParams<T>&);              \
  template SparseLatents<T> top_k(const RowMatrix<T>&, std::size_t, std::span<const LatentIndex>); \
  template SparseLatents<T> encode(const RowMatrix<T>&, const SaeParams<T>&, const SaeConfig&); \
  template RowMatrix<T> decode(const SparseLatents<T>&, const SaeParams<T>&);                   \
  template double total_variance(const RowMatrix<T>&);                                          \
  template double fvu(const RowMatrix<T>&, const RowMatrix<T>&);                                \
  template AuxTerm<T> aux_term(const RowMatrix<T>&, const RowMatrix<T>&, const RowMatrix<T>&,   \
                               const DeadMask&, const SaeParams<T>&, const SaeConfig&);         \
  template ForwardOutput<T> forward_loss(const RowMatrix<T>&, const SaeParams<T>&,              \
                                         const SaeConfig&, const DeadMask&);                    \
  template SaeGradients<T> backward(const RowMatrix<T>&, const ForwardOutput<T>&,               \
                                    const SaeParams<T>&, const SaeConfig&);                     \
  template void project_decoder_gradient(ColMatrix<T>&, const SaeParams<T>&);                   \
  template void renormalize_decoder(SaeParams<T>&);                                             \
  template GeometricMedianResult geometric_median(const RowMatrix<T>&,                          \
                                                  const GeometricMedianOptions&);               \
  template InitResult<T> init_params(const RowMatrix<T>&, const SaeConfig&, std::uint64_t);

MLSAE_INSTANTIATE(float)
MLSAE_INSTANTIATE(double)

#undef MLSAE_INSTANTIATE

}  // namespace mlsae
