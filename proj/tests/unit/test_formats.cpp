#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "mlsae/activation_stream.hpp"
#include "mlsae/errors.hpp"
#include "test_util.hpp"

using namespace mlsae;

namespace {

StreamHeader header(std::uint32_t d, std::uint32_t layers, std::string tag = "toy") {
  StreamHeader h;
  h.d = d;
  h.n_layers = layers;
  h.model_tag = std::move(tag);
  return h;
}

std::string encode(const StreamHeader& h, const std::vector<ActivationRecord>& records) {
  std::ostringstream out(std::ios::binary);
  write_stream(h, records, out);
  return out.str();
}

std::vector<ActivationRecord> decode_all(const std::string& bytes, StreamHeader* h = nullptr) {
  std::istringstream in(bytes, std::ios::binary);
  StreamReader reader(in);
  if (h) *h = reader.header();
  std::vector<ActivationRecord> out;
  while (auto r = reader.next()) out.push_back(std::move(*r));
  return out;
}

}  // namespace

TEST_CASE("empty stream is exactly the header") {
  auto h = header(2, 1, "ab");
  std::ostringstream out(std::ios::binary);
  auto n = write_stream(h, {}, out);
  CHECK(n == 4 + 4 + 4 + 4 + 8 + 4 + 2);
  CHECK(out.str().size() == n);
}

TEST_CASE("header bytes are little-endian in the documented order") {
  auto h = header(3, 2, "xy");
  std::string b = encode(h, test::gaussian_records(3, 2, 1, 0));
  REQUIRE(b.size() == 30 + 4 + 1 + 4 * 6);
  CHECK(b.substr(0, 4) == "MLSA");
  auto u32_at = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[off + i]);
    return v;
  };
  CHECK(u32_at(4) == 1);
  CHECK(u32_at(8) == 3);
  CHECK(u32_at(12) == 2);
  CHECK(u32_at(24) == 2);
  CHECK(b.substr(28, 2) == "xy");
}

TEST_CASE("write then read preserves every byte and float bit") {
  auto h = header(5, 3);
  auto records = test::gaussian_records(5, 3, 17, 42, 4);
  records[2].vectors[0] = -0.0f;
  records[3].vectors[1] = std::numeric_limits<float>::denorm_min();
  std::string bytes = encode(h, records);
  StreamHeader got;
  auto back = decode_all(bytes, &got);
  CHECK(got.d == 5);
  CHECK(got.n_layers == 3);
  CHECK(got.model_tag == "toy");
  REQUIRE(back.size() == records.size());
  for (std::size_t t = 0; t < records.size(); ++t) {
    CHECK(back[t].token_id == records[t].token_id);
    CHECK(back[t].flags == records[t].flags);
    CHECK(std::memcmp(back[t].vectors.data(), records[t].vectors.data(), records[t].vectors.size() * 4) == 0);
  }
  CHECK(encode(got, back) == bytes);
}

TEST_CASE("record of the wrong length is a dimension error") {
  auto h = header(2, 2);
  std::ostringstream out(std::ios::binary);
  StreamWriter w(out, h);
  ActivationRecord r;
  r.vectors.assign(3, 0.0f);
  CHECK_THROWS_AS(w.write(r), DimensionError);
}

TEST_CASE("non-finite record is rejected") {
  auto h = header(1, 1);
  std::ostringstream out(std::ios::binary);
  StreamWriter w(out, h);
  ActivationRecord r;
  r.vectors = {std::nanf("")};
  CHECK_THROWS_AS(w.write(r), Error);
}

TEST_CASE("corrupted magic, bad version and truncation are detected") {
  auto h = header(2, 1);
  std::string bytes = encode(h, test::gaussian_records(2, 1, 3, 1));
  SUBCASE("magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream in(bad, std::ios::binary);
    CHECK_THROWS_AS(StreamReader{in}, FormatError);
  }
  SUBCASE("version") {
    std::string bad = bytes;
    bad[4] = 2;
    std::istringstream in(bad, std::ios::binary);
    CHECK_THROWS_AS(StreamReader{in}, FormatError);
  }
  SUBCASE("truncated record") {
    std::string bad = bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(decode_all(bad), FormatError);
  }
  SUBCASE("zero d") {
    std::string bad = bytes;
    bad[8] = 0;
    std::istringstream in(bad, std::ios::binary);
    CHECK_THROWS_AS(StreamReader{in}, Error);
  }
}

TEST_CASE("n_tokens in the header bounds the read") {
  auto h = header(2, 1);
  auto records = test::gaussian_records(2, 1, 4, 9);
  h.n_tokens = 4;
  CHECK(decode_all(encode(h, records)).size() == 4);
  std::string over = encode(h, records);
  over[16] = 5;
  CHECK_THROWS_AS(decode_all(over), FormatError);
}

TEST_CASE("batches: exact division") {
  auto h = header(3, 2);
  std::string bytes = encode(h, test::gaussian_records(3, 2, 4, 5));
  std::istringstream in(bytes, std::ios::binary);
  StreamReader reader(in);
  BatchOptions opt;
  opt.tokens_per_batch = 2;
  BatchReader batches(reader, opt);
  int count = 0;
  while (auto b = batches.next()) {
    CHECK(b->n_vectors() == 4);
    ++count;
  }
  CHECK(count == 2);
}

TEST_CASE("batches: special tokens contribute no vectors") {
  auto h = header(2, 3);
  auto records = test::gaussian_records(2, 3, 3, 5);
  records[1].flags = kFlagSpecial;
  std::string bytes = encode(h, records);
  std::istringstream in(bytes, std::ios::binary);
  StreamReader reader(in);
  BatchOptions opt;
  opt.tokens_per_batch = 8;
  BatchReader batches(reader, opt);
  auto b = batches.next();
  REQUIRE(b);
  CHECK(b->n_tokens() == 2);
  CHECK(b->n_vectors() == 6);
  CHECK(b->token_index == std::vector<std::uint64_t>{0, 2});
  CHECK_FALSE(batches.next());
}

TEST_CASE("batches: shuffle buffer permutes tokens deterministically") {
  auto h = header(1, 1);
  auto records = test::gaussian_records(1, 1, 100, 5);
  std::string bytes = encode(h, records);
  auto order = [&](std::uint64_t seed) {
    std::istringstream in(bytes, std::ios::binary);
    StreamReader reader(in);
    BatchOptions opt;
    opt.tokens_per_batch = 7;
    opt.shuffle_buffer = 16;
    opt.seed = seed;
    BatchReader batches(reader, opt);
    std::vector<std::uint64_t> idx;
    while (auto b = batches.next()) {
      for (std::size_t t = 0; t < b->n_tokens(); ++t) {
        CHECK(b->vector(t, 0)[0] == records[b->token_index[t]].vectors[0]);
        idx.push_back(b->token_index[t]);
      }
    }
    return idx;
  };
  auto a = order(1);
  CHECK(a.size() == 100);
  CHECK(std::set<std::uint64_t>(a.begin(), a.end()).size() == 100);
  CHECK(a == order(1));
  CHECK(a != order(2));
}

TEST_CASE("layer stats: hand-computed mean and scalar std") {
  LayerStatsAccumulator acc(2, 1);
  std::vector<float> a{0, 0}, b{2, 0};
  acc.add(0, a);
  acc.add_token();
  acc.add(0, b);
  acc.add_token();
  auto s = acc.finish();
  CHECK(s.mean(0)[0] == doctest::Approx(1.0));
  CHECK(s.mean(0)[1] == doctest::Approx(0.0));
  CHECK(s.stds[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-7));
  CHECK(s.token_count == 2);
}

TEST_CASE("layer stats: constant layer is a zero-variance error") {
  LayerStatsAccumulator acc(2, 1);
  std::vector<float> c{1.5f, -2.0f};
  for (int i = 0; i < 4; ++i) {
    acc.add(0, c);
    acc.add_token();
  }
  CHECK_THROWS_AS(acc.finish(), NumericError);
}

TEST_CASE("layer stats: empty stream is an error") {
  std::string bytes = encode(header(2, 1), {});
  std::istringstream in(bytes, std::ios::binary);
  StreamReader reader(in);
  CHECK_THROWS_AS(compute_layer_stats(reader, 100), Error);
}

TEST_CASE("layer stats from a stream skip special tokens and respect max_tokens") {
  auto records = test::gaussian_records(4, 2, 50, 11, 5);
  records[0].vectors.assign(8, 1e6f);  // special, must not leak into the mean
  std::string bytes = encode(header(4, 2), records);
  std::istringstream in(bytes, std::ios::binary);
  StreamReader reader(in);
  auto s = compute_layer_stats(reader, 20);
  CHECK(s.token_count == 20);
  double oracle[2][4] = {};
  std::size_t used = 0;
  for (const auto& r : records) {
    if (r.special()) continue;
    if (used == 20) break;
    for (int l = 0; l < 2; ++l)
      for (int i = 0; i < 4; ++i) oracle[l][i] += r.vectors[l * 4 + i];
    ++used;
  }
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 4; ++i) CHECK(s.mean(l)[i] == doctest::Approx(oracle[l][i] / 20).epsilon(1e-5));
}

TEST_CASE("standardize: direct evaluation and inverse") {
  LayerStats s;
  s.d = 2;
  s.n_layers = 1;
  s.token_count = 1;
  s.means = {1, 1};
  s.stds = {2};
  std::vector<float> x{3, 1};
  auto z = standardize(x, 0, s);
  CHECK(z[0] == doctest::Approx(1.0));
  CHECK(z[1] == doctest::Approx(0.0));
  auto back = destandardize(z, 0, s);
  CHECK(back[0] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(back[1] == doctest::Approx(1.0).epsilon(1e-6));
  auto zero = standardize(std::vector<float>{1, 1}, 0, s);
  CHECK(zero[0] == 0.0f);
  CHECK(zero[1] == 0.0f);
  s.stds = {0};
  CHECK_THROWS(standardize(x, 0, s));
}

TEST_CASE("standardized batch has zero mean and unit mean square") {
  const std::uint32_t d = 6, L = 3;
  auto records = test::gaussian_records(d, L, 400, 3);
  LayerStatsAccumulator acc(d, L);
  for (const auto& r : records) {
    for (std::uint32_t l = 0; l < L; ++l) acc.add(l, r.layer(l, d));
    acc.add_token();
  }
  auto s = acc.finish();
  for (std::uint32_t l = 0; l < L; ++l) {
    std::vector<double> mean(d, 0.0);
    double sq = 0.0;
    for (const auto& r : records) {
      auto z = standardize(r.layer(l, d), l, s);
      for (std::uint32_t i = 0; i < d; ++i) {
        mean[i] += z[i];
        sq += double(z[i]) * z[i];
      }
    }
    for (auto m : mean) CHECK(std::abs(m / records.size()) <= 1e-5);
    CHECK(sq / (records.size() * d) == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("MLST sidecar round trip") {
  LayerStats s;
  s.d = 3;
  s.n_layers = 2;
  s.token_count = 77;
  s.means = {0.1f, -2.f, 3.f, 4.f, 5.f, 6.5f};
  s.stds = {0.25f, 7.f};
  std::ostringstream out(std::ios::binary);
  write_layer_stats(s, out);
  std::string bytes = out.str();
  CHECK(bytes.substr(0, 4) == "MLST");
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 8 + 2 * (3 * 4 + 4));
  std::istringstream in(bytes, std::ios::binary);
  auto back = read_layer_stats(in);
  CHECK(back.means == s.means);
  CHECK(back.stds == s.stds);
  CHECK(back.token_count == 77);
  std::ostringstream again(std::ios::binary);
  write_layer_stats(back, again);
  CHECK(again.str() == bytes);
}

TEST_CASE("validate_stream counts records and layer vectors") {
  test::TempDir dir("formats");
  auto records = test::gaussian_records(2, 3, 10, 4, 3);
  test::write_records(dir / "a.mlsa", header(2, 3), records);
  auto summary = validate_stream(dir / "a.mlsa");
  CHECK(summary.records == 10);
  CHECK(summary.special_records == 4);
  REQUIRE(summary.vectors_per_layer.size() == 3);
  for (auto v : summary.vectors_per_layer) CHECK(v == 6);
  CHECK(read_stream_header(dir / "a.mlsa").d == 2);
}
