#include "doctest.h"
#include "oracles.hpp"
#include "xreg/explain.hpp"
#include "xreg/synthdata.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

using namespace xreg;

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Splits a P5 file into (width, height, maxval, payload).
struct Pgm {
  int w = 0, h = 0, maxval = 0;
  std::vector<unsigned char> pixels;
};

Pgm parse_pgm(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string magic;
  Pgm g;
  in >> magic >> g.w >> g.h >> g.maxval;
  REQUIRE(magic == "P5");
  in.get();
  g.pixels.resize(std::size_t(g.w) * g.h);
  in.read(reinterpret_cast<char*>(g.pixels.data()), std::streamsize(g.pixels.size()));
  REQUIRE(in.gcount() == std::streamsize(g.pixels.size()));
  return g;
}

}  // namespace

TEST_CASE("gradcam on a phantom pair: feature-grid extents, range [0,1]") {
  PhantomSettings ps;
  const auto c = generate_phantom_pair(3, ps);
  const auto inits = draw_inits(4, c.moving_surface, 1, 5.0, 5.0);
  Network<float> net(Architecture{}, 11);
  const auto before = encode_checkpoint(net.to_checkpoint());
  for (const auto block : {AttentionBlock::A, AttentionBlock::B}) {
    const auto s = gradcam(net, c.fixed_image, c.moving_image, inits[0].transform, block);
    CHECK(s.extents == std::array<std::size_t, 3>{8, 8, 8});
    REQUIRE(s.values.size() == 512);
    CHECK(s.block == block);
    const double mx = *std::max_element(s.values.begin(), s.values.end());
    const double mn = *std::min_element(s.values.begin(), s.values.end());
    CHECK(mn >= 0.0);
    if (s.all_zero) {
      CHECK(mx == 0.0);
    } else {
      CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(encode_checkpoint(net.to_checkpoint()) == before);
}

TEST_CASE("gradcam with a zero head reports an all-zero map") {
  const auto c = generate_phantom_pair(5);
  Network<float> net(Architecture{}, 12);
  net.zero_head();
  const auto s = gradcam(net, c.fixed_image, c.moving_image, RigidTransform::identity(c.truth.center()),
                         AttentionBlock::A);
  CHECK(s.all_zero);
  CHECK(std::all_of(s.values.begin(), s.values.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("gradcam_from: hand example") {
  // Two channels on a 2x1x1 grid.
  const std::vector<double> act{1, 3, 2, 0};
  const std::vector<double> grad{1, 1, -1, -3};  // weights: 1, -2
  const auto s = gradcam_from(act, grad, 2, {2, 1, 1});
  // raw: [1*1 - 2*2, 1*3 - 0] = [-3, 3] -> relu [0, 3] -> [0, 1]
  CHECK(s.values == std::vector<double>{0.0, 1.0});
  CHECK_FALSE(s.all_zero);
  CHECK_THROWS_AS(gradcam_from(act, grad, 3, {2, 1, 1}), std::invalid_argument);
}

TEST_CASE("gradcam_from ignores channels whose gradient is zero everywhere") {
  std::mt19937_64 rng(21);
  const std::size_t c = 4, n = 27;
  auto act = oracle::randn(rng, c * n);
  auto grad = oracle::randn(rng, c * n);
  for (auto& v : act) v = std::abs(v);
  std::fill(grad.begin() + 2 * n, grad.begin() + 3 * n, 0.0);
  const auto base = gradcam_from(act, grad, c, {3, 3, 3});
  for (int trial = 0; trial < 5; ++trial) {
    auto changed = act;
    const auto noise = oracle::randn(rng, n, 100.0);
    std::copy(noise.begin(), noise.end(), changed.begin() + 2 * n);
    const auto s = gradcam_from(changed, grad, c, {3, 3, 3});
    for (std::size_t i = 0; i < n; ++i) CHECK(s.values[i] == doctest::Approx(base.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("slice export: counts, sizes and quantization") {
  const auto dir = oracle::scratch_dir("pgm");
  std::vector<double> vals(8 * 8 * 8);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = double(i % 37) / 36.0 - 0.3;
  const double lo = *std::min_element(vals.begin(), vals.end());
  const double hi = *std::max_element(vals.begin(), vals.end());
  for (const char axis : {'x', 'y', 'z'}) {
    const auto files = export_slices(vals, {8, 8, 8}, axis, dir / "v");
    REQUIRE(files.size() == 8);
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(files[k].filename().string() == "v_" + std::string(1, axis) + "_" + std::to_string(k) + ".pgm");
      const auto g = parse_pgm(files[k]);
      CHECK(g.w == 8);
      CHECK(g.h == 8);
      CHECK(g.maxval == 255);
      // Pixel (u, v) of slice k.
      for (std::size_t v = 0; v < 8; ++v)
        for (std::size_t u = 0; u < 8; ++u) {
          std::size_t x = 0, y = 0, z = 0;
          if (axis == 'z') { x = u; y = v; z = k; }
          if (axis == 'y') { x = u; z = v; y = k; }
          if (axis == 'x') { y = u; z = v; x = k; }
          const double src = vals[(z * 8 + y) * 8 + x];
          const long expect = std::lround(255.0 * (src - lo) / (hi - lo));
          CHECK(long(g.pixels[v * 8 + u]) == expect);
        }
    }
  }
}

TEST_CASE("slice export: a constant volume maps to 128; bad inputs throw") {
  const auto dir = oracle::scratch_dir("pgm_const");
  const std::vector<double> flat(4 * 5 * 6, 0.25);
  const auto files = export_slices(flat, {4, 5, 6}, 'z', dir / "c");
  REQUIRE(files.size() == 6);
  const auto g = parse_pgm(files[0]);
  CHECK(g.w == 4);
  CHECK(g.h == 5);
  CHECK(std::all_of(g.pixels.begin(), g.pixels.end(), [](unsigned char p) { return p == 128; }));
  CHECK(quantize(0.5, 1.0, 1.0) == 128);
  CHECK(quantize(2.0, 0.0, 1.0) == 255);
  CHECK(quantize(-2.0, 0.0, 1.0) == 0);
  CHECK_THROWS_AS(export_slices(flat, {4, 5, 6}, 'q', dir / "c"), std::invalid_argument);
  CHECK_THROWS_AS(export_slices(flat, {4, 5, 7}, 'z', dir / "c"), std::invalid_argument);
  CHECK_THROWS(export_slices(flat, {4, 5, 6}, 'z', dir / "missing_dir" / "deeper" / "c"));
  CHECK(read_bytes(files[5]).size() == std::string("P5\n4 5\n255\n").size() + 20);
}
