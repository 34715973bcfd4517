#include <doctest.h>

#include <random>
#include <sstream>

#include "mlsae/errors.hpp"
#include "mlsae/tuned_lens.hpp"
#include "test_util.hpp"

using namespace mlsae;

namespace {

TunedLens random_lens(std::uint32_t d, std::uint32_t layers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.1 / d);
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;
  for (std::uint32_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd m(d, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 10 * dist(rng);
    w.push_back(m.cast<float>().cast<double>());
    b.push_back(v.cast<float>().cast<double>());
  }
  return TunedLens::from_parameters(std::move(w), std::move(b));
}

std::string serialized(const TunedLens& lens) {
  std::ostringstream out(std::ios::binary);
  write_lens(lens, out);
  return out.str();
}

}  // namespace

TEST_CASE("apply examples") {
  auto id = TunedLens::identity(2, 1);
  std::vector<float> x{1, 2};
  CHECK(id.apply(0, x) == x);
  CHECK(id.invert(0, x) == x);

  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 2);
  Eigen::VectorXd b(2);
  b << 0.5, -1.5;
  auto bias_only = TunedLens::from_parameters({zero}, {b});
  auto y = bias_only.apply(0, std::vector<float>{0, 0});
  CHECK(y == std::vector<float>{0.5f, -1.5f});

  auto doubling = TunedLens::from_parameters({Eigen::MatrixXd::Identity(2, 2)}, {Eigen::VectorXd::Zero(2)});
  CHECK(doubling.apply(0, x) == std::vector<float>{2, 4});
  CHECK(doubling.invert(0, std::vector<float>{2, 4}) == x);
  CHECK_THROWS_AS(doubling.apply(1, x), RangeError);
  CHECK_THROWS_AS(doubling.apply(0, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST_CASE("singular I + W is rejected") {
  CHECK_THROWS_AS(TunedLens::from_parameters({-Eigen::MatrixXd::Identity(3, 3)}, {Eigen::VectorXd::Zero(3)}),
                  NumericError);
}

TEST_CASE("cached inverse and apply/invert round trip") {
  const std::uint32_t d = 16, L = 3;
  auto lens = random_lens(d, L, 4);
  std::mt19937_64 rng(9);
  std::normal_distribution<float> dist(0.0f, 2.0f);
  for (std::uint32_t l = 0; l < L; ++l) {
    const auto& layer = lens.layer(l);
    Eigen::MatrixXd prod = layer.inverse * (Eigen::MatrixXd::Identity(d, d) + layer.weight);
    CHECK((prod - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-5);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<float> x(d);
      for (auto& v : x) v = dist(rng);
      auto back = lens.invert(l, lens.apply(l, x));
      for (std::uint32_t i = 0; i < d; ++i) worst = std::max(worst, double(std::abs(back[i] - x[i])));
    }
    CHECK(worst < 1e-5);
  }
  CHECK(lens.min_rcond() > 0.5);
}

TEST_CASE("MLLN round trip, missing last layer, dimension checks") {
  auto lens = random_lens(4, 3, 2);
  std::string bytes = serialized(lens);
  CHECK(bytes.substr(0, 4) == "MLLN");
  CHECK(bytes.size() == 16 + 3 * (16 + 4) * 4);
  std::istringstream in(bytes, std::ios::binary);
  auto back = read_lens(in, 4u, 3u);
  CHECK(serialized(back) == bytes);

  // Two stored layers on a three-layer stream: the last layer is the identity.
  auto two = random_lens(4, 2, 3);
  std::istringstream in2(serialized(two), std::ios::binary);
  auto padded = read_lens(in2, 4u, 3u);
  CHECK(padded.n_layers() == 3);
  CHECK(padded.layer(2).weight.isZero(0.0));
  CHECK(padded.layer(2).bias.isZero(0.0));

  std::istringstream in3(bytes, std::ios::binary);
  CHECK_THROWS_AS(read_lens(in3, 5u, 3u), DimensionError);
  std::istringstream in4(bytes, std::ios::binary);
  CHECK_THROWS_AS(read_lens(in4, 4u, 5u), DimensionError);
  std::string bad = bytes;
  bad[1] = 'X';
  std::istringstream in5(bad, std::ios::binary);
  CHECK_THROWS_AS(read_lens(in5), FormatError);
}

TEST_CASE("zero-weight file behaves as the identity") {
  test::TempDir dir("lens");
  save_lens(TunedLens::identity(3, 2), dir / "id.mlln");
  auto lens = load_lens(dir / "id.mlln", 3u, 2u);
  std::vector<float> x{0.25f, -7.0f, 3.5f};
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(lens.apply(l, x) == x);
    CHECK(lens.invert(l, x) == x);
  }
}
