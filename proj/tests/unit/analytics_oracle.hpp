#pragma once
// In-memory brute-force recomputation of the layer analytics, enumerating
// every (latent, layer, token) triple.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mlsae/layer_analytics.hpp"
#include "mlsae/sae.hpp"

namespace mlsae::test {

// codes[l] lists (latent, value) at layer l for one token.
using TokenCodes = std::vector<std::vector<std::pair<LatentIndex, float>>>;

struct Corpus {
  std::uint32_t n = 0, L = 0, k = 0;
  std::vector<TokenCodes> tokens;
};

/// Appends the tokens of one encoded batch (rows grouped token-major).
inline void append_codes(Corpus& c, const SparseLatents<float>& lat, std::span<const RowProvenance> rows) {
  for (std::size_t r = 0; r < rows.size(); r += c.L) {
    TokenCodes codes(c.L);
    for (std::uint32_t q = 0; q < c.L; ++q) {
      const auto l = rows[r + q].layer;
      for (std::size_t i = 0; i < lat.k; ++i)
        codes[l].push_back({lat.row_indices(r + q)[i], lat.row_values(r + q)[i]});
    }
    c.tokens.push_back(std::move(codes));
  }
}

/// Feeds tokens in `order`, `batch` tokens per accumulate call, layers reversed within a token.
inline void feed(const Corpus& c, const std::vector<std::size_t>& order, std::size_t batch, AnalyticsSnapshot& snap) {
  for (std::size_t start = 0; start < order.size(); start += batch) {
    SparseLatents<float> lat;
    lat.k = c.k;
    std::vector<RowProvenance> rows;
    for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) {
      const auto t = order[i];
      for (std::uint32_t l = c.L; l-- > 0;) {
        rows.push_back({t, l});
        for (auto [j, v] : c.tokens[t][l]) {
          lat.indices.push_back(j);
          lat.values.push_back(v);
        }
      }
    }
    lat.rows = rows.size();
    accumulate(lat, rows, snap);
  }
}

struct Brute {
  std::vector<std::vector<double>> S;
  std::vector<std::vector<std::uint64_t>> C;
  std::vector<std::optional<std::vector<double>>> distribution;
  std::vector<std::optional<double>> expected, entropy, active_layers;
  double total = 0, within = 0, between = 0, within_token = 0;
  std::uint32_t active = 0;
};

inline Brute brute_force(const Corpus& c, double threshold_fraction = 0.001) {
  Brute b;
  b.S.assign(c.n, std::vector<double>(c.L, 0.0));
  b.C.assign(c.n, std::vector<std::uint64_t>(c.L, 0));
  std::vector<double> tok_var_sum(c.n, 0.0), tok_count(c.n, 0.0);
  for (const auto& codes : c.tokens) {
    for (std::uint32_t j = 0; j < c.n; ++j) {
      std::vector<double> h(c.L, 0.0);
      double tot = 0.0;
      for (std::uint32_t l = 0; l < c.L; ++l)
        for (auto [jj, v] : codes[l])
          if (jj == j && v > 0.0f) {
            h[l] += v;
            tot += v;
            b.C[j][l] += 1;
          }
      if (tot <= 0.0) continue;
      double m = 0.0, m2 = 0.0;
      for (std::uint32_t l = 0; l < c.L; ++l) {
        b.S[j][l] += h[l];
        m += l * h[l] / tot;
        m2 += double(l) * l * h[l] / tot;
      }
      tok_var_sum[j] += m2 - m * m;
      tok_count[j] += 1;
    }
  }
  const double threshold = threshold_fraction * static_cast<double>(c.tokens.size());
  std::vector<double> means, vars, wt;
  b.distribution.resize(c.n);
  b.expected.resize(c.n);
  b.entropy.resize(c.n);
  b.active_layers.resize(c.n);
  for (std::uint32_t j = 0; j < c.n; ++j) {
    double tot = 0.0;
    for (double s : b.S[j]) tot += s;
    if (tot <= 0.0) continue;
    std::vector<double> p(c.L);
    double m = 0.0, m2 = 0.0, h = 0.0, act = 0.0;
    for (std::uint32_t l = 0; l < c.L; ++l) {
      p[l] = b.S[j][l] / tot;
      m += l * p[l];
      m2 += double(l) * l * p[l];
      if (p[l] > 0.0) h -= p[l] * std::log(p[l]);
      if (static_cast<double>(b.C[j][l]) > threshold) act += 1.0;
    }
    b.distribution[j] = p;
    b.expected[j] = m;
    b.entropy[j] = c.L > 1 ? h / std::log(double(c.L)) : 0.0;
    b.active_layers[j] = act / c.L;
    means.push_back(m);
    vars.push_back(m2 - m * m);
    wt.push_back(tok_var_sum[j] / tok_count[j]);
  }
  b.active = static_cast<std::uint32_t>(means.size());
  double em = 0, em2 = 0;
  for (std::size_t i = 0; i < means.size(); ++i) {
    em += means[i] / b.active;
    em2 += (vars[i] + means[i] * means[i]) / b.active;
    b.within += vars[i] / b.active;
    b.within_token += wt[i] / b.active;
  }
  b.total = em2 - em * em;
  for (double m : means) b.between += (m - em) * (m - em) / b.active;
  return b;
}

}  // namespace mlsae::test
