#include "doctest.h"
#include "oracles.hpp"
#include "xreg/model.hpp"
#include "xreg/ops.hpp"

using namespace xreg;
using TD = Tensor<double>;

namespace {

Architecture tiny() {
  Architecture a;
  a.extent = 8;
  a.extractor_c1 = 3;
  a.extractor_c2 = 4;
  a.embed = 2;
  a.registrator_channels = 3;
  a.hidden = 5;
  return a;
}

AttentionParams<double> random_attention(std::mt19937_64& rng, std::size_t C, std::size_t E, bool grad = false) {
  return {oracle::tensor<double>(rng, {C, E}, grad, 0.3), oracle::tensor<double>(rng, {C, E}, grad, 0.3),
          oracle::tensor<double>(rng, {C, C}, grad, 0.3)};
}

}  // namespace

TEST_CASE("architecture defaults and text round trip") {
  const Architecture a;
  CHECK(a.feature_extent() == 8);
  CHECK(a.registrator_strides() == std::vector<int>{2, 1, 1});
  CHECK(a.registrator_out_extent() == 4);
  CHECK(Architecture::from_text(a.to_text()) == a);
  Architecture bad;
  bad.extent = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("feature extractor shapes, zeros and positive homogeneity") {
  Network<double> net({}, 1);
  std::mt19937_64 rng(1);
  const auto x = oracle::tensor<double>(rng, {1, 1, 32, 32, 32});
  const auto f = feature_extract<double>(nullptr, net.extractor_fixed(), x);
  CHECK(f.shape() == Shape{1, 32, 8, 8, 8});

  // Biases start at zero, so the extractor is positively homogeneous.
  auto twice = oracle::values(x);
  for (auto& v : twice) v *= 2.0;
  const auto f2 = feature_extract<double>(nullptr, net.extractor_fixed(), TD::from(x.shape(), twice));
  for (std::size_t i = 0; i < f.numel(); ++i) CHECK(f2.at(i) == doctest::Approx(2.0 * f.at(i)).epsilon(1e-12));

  const auto z = feature_extract<double>(nullptr, net.extractor_fixed(), TD::zeros({1, 1, 32, 32, 32}));
  for (const double v : z.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(feature_extract<double>(nullptr, net.extractor_fixed(), TD::zeros({1, 1, 30, 32, 32})),
                  std::invalid_argument);
}

TEST_CASE("attention matches the loop-nest oracle") {
  std::mt19937_64 rng(2);
  const std::size_t C = 32, E = 16;
  const auto p = oracle::tensor<double>(rng, {2, C, 4, 4, 4});
  const auto c = oracle::tensor<double>(rng, {2, C, 4, 4, 4});
  const auto ap = random_attention(rng, C, E);
  const auto z = cross_modal_attention<double>(nullptr, p, c, ap);
  CHECK(z.shape() == p.shape());
  const auto pv = oracle::values(p), cv = oracle::values(c);
  for (std::size_t n = 0; n < 2; ++n) {
    const std::size_t sz = C * 64;
    const auto ref = oracle::attention({pv.begin() + n * sz, pv.begin() + (n + 1) * sz},
                                       {cv.begin() + n * sz, cv.begin() + (n + 1) * sz}, oracle::values(ap.theta),
                                       oracle::values(ap.phi), oracle::values(ap.g), C, 64, E);
    const auto zv = oracle::values(z);
    CHECK(oracle::rel_err({zv.begin() + n * sz, zv.begin() + (n + 1) * sz}, ref) <= 1e-5);
  }
}

TEST_CASE("attention: residual identity, single site and uniform weights") {
  std::mt19937_64 rng(3);
  const auto p = oracle::tensor<double>(rng, {1, 4, 2, 2, 2});
  const auto c = oracle::tensor<double>(rng, {1, 4, 2, 2, 2});
  auto ap = random_attention(rng, 4, 3);
  const AttentionParams<double> zero_g{ap.theta, ap.phi, TD::zeros({4, 4})};
  const auto z = cross_modal_attention<double>(nullptr, p, c, zero_g);
  CHECK(oracle::values(z) == oracle::values(p));

  const auto p1 = oracle::tensor<double>(rng, {1, 4, 1, 1, 1});
  const auto c1 = oracle::tensor<double>(rng, {1, 4, 1, 1, 1});
  const auto z1 = cross_modal_attention<double>(nullptr, p1, c1, ap);
  const auto g1 = oracle::matmul(oracle::values(p1), oracle::values(ap.g), 1, 4, 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(z1.at(k) == doctest::Approx(g1[k] + p1.at(k)).epsilon(1e-12));

  const AttentionParams<double> flat{TD::zeros({4, 3}), TD::zeros({4, 3}), ap.g};
  const auto r = cross_modal_attention_detail<double>(nullptr, p, c, flat);
  for (const double w : r.weights.data()) CHECK(w == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
  // y_i = mean_j g(p_j) for every i
  const auto sites = oracle::values(ops::to_sites<double>(nullptr, p));
  const auto g = oracle::matmul(sites, oracle::values(ap.g), 8, 4, 4);
  for (std::size_t o = 0; o < 4; ++o) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += g[j * 4 + o] / 8.0;
    for (std::size_t i = 0; i < 8; ++i) CHECK(r.output.at(o * 8 + i) - p.at(o * 8 + i) == doctest::Approx(mean).epsilon(1e-10));
  }
}

TEST_CASE("attention weights rows sum to one and LWH mismatch is rejected") {
  std::mt19937_64 rng(4);
  const auto p = oracle::tensor<double>(rng, {2, 4, 2, 2, 2});
  const auto c = oracle::tensor<double>(rng, {2, 4, 2, 2, 2});
  const auto r = cross_modal_attention_detail<double>(nullptr, p, c, random_attention(rng, 4, 3));
  CHECK(r.weights.shape() == Shape{2, 8, 8});
  for (std::size_t row = 0; row < 16; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) s += r.weights.at(row * 8 + j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(cross_modal_attention<double>(nullptr, p, oracle::tensor<double>(rng, {2, 4, 2, 2, 1}),
                                                random_attention(rng, 4, 3)),
                  std::invalid_argument);
}

TEST_CASE("attention is invariant to permuting the primary sites it summarizes") {
  std::mt19937_64 rng(5);
  const std::size_t C = 4, S = 8;
  const auto p = oracle::tensor<double>(rng, {1, C, 2, 2, 2});
  const auto c = oracle::tensor<double>(rng, {1, C, 2, 2, 2});
  const auto ap = random_attention(rng, C, 3);
  const auto z = cross_modal_attention<double>(nullptr, p, c, ap);
  // Permute primary sites; Y (= Z - P) evaluated at each cross site i is unchanged.
  std::vector<std::size_t> perm{3, 7, 1, 0, 6, 2, 5, 4};
  std::vector<double> pp(C * S);
  for (std::size_t k = 0; k < C; ++k)
    for (std::size_t j = 0; j < S; ++j) pp[k * S + j] = p.at(k * S + perm[j]);
  const auto zp = cross_modal_attention<double>(nullptr, TD::from(p.shape(), pp), c, ap);
  for (std::size_t k = 0; k < C; ++k)
    for (std::size_t i = 0; i < S; ++i)
      CHECK(zp.at(k * S + i) - pp[k * S + i] == doctest::Approx(z.at(k * S + i) - p.at(k * S + i)).epsilon(1e-10));
}

TEST_CASE("forward output shape, zero head, and the ablation path") {
  Network<double> net(tiny(), 2);
  std::mt19937_64 rng(6);
  const auto f = oracle::tensor<double>(rng, {3, 1, 8, 8, 8});
  const auto m = oracle::tensor<double>(rng, {3, 1, 8, 8, 8});
  const auto r = net.forward(nullptr, f, m);
  CHECK(r.prediction.shape() == Shape{3, 6});
  CHECK(r.block_a.shape() == r.features_moving.shape());
  CHECK(net.forward_ablation(nullptr, f, m).prediction.shape() == Shape{3, 6});

  // With g = 0 both blocks pass their primary through, giving the same
  // concatenation (moving, fixed) that the ablation path uses.
  for (const char* name : {"attention_a.g", "attention_b.g"}) {
    for (auto& v : net.parameter(name).mutable_data()) v = 0.0;
  }
  const auto a = net.forward(nullptr, f, m).prediction;
  const auto b = net.forward_ablation(nullptr, f, m).prediction;
  CHECK(oracle::values(a) == oracle::values(b));

  net.zero_head();
  const auto zero = net.forward(nullptr, f, m).prediction;
  for (const double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(net.forward(nullptr, f, oracle::tensor<double>(rng, {2, 1, 8, 8, 8})), std::invalid_argument);
}

TEST_CASE("parameter accounting") {
  const Network<float> with({}, 0);
  Architecture no_attention;
  no_attention.attention = false;
  const Network<float> without(no_attention, 0);
  CHECK(with.attention_parameter_count() == 2 * (32 * 16 * 2 + 32 * 32));
  CHECK(with.parameter_count() - without.parameter_count() == with.attention_parameter_count());
  CHECK(double(with.attention_parameter_count()) / double(with.parameter_count()) < 0.01);
  // Shared layers start from identical weights.
  for (const auto& [name, t] : without.named_parameters()) {
    CHECK(oracle::values(with.parameter(name)) == oracle::values(t));
  }
}

TEST_CASE("every weight group receives a nonzero gradient") {
  Network<double> net(tiny(), 4);
  std::mt19937_64 rng(7);
  const auto f = oracle::tensor<double>(rng, {2, 1, 8, 8, 8});
  const auto m = oracle::tensor<double>(rng, {2, 1, 8, 8, 8});
  const auto target = oracle::tensor<double>(rng, {2, 6});
  Tape<double> tape;
  tape.backward(ops::mse_loss(&tape, net.forward(&tape, f, m).prediction, target));
  for (const auto& [name, t] : net.named_parameters()) {
    double norm = 0.0;
    for (const double g : t.grad()) norm += g * g;
    INFO(name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("full network passes finite differences in 64-bit mode") {
  Network<double> net(tiny(), 5);
  std::mt19937_64 rng(8);
  const auto f = oracle::tensor<double>(rng, {2, 1, 8, 8, 8});
  const auto m = oracle::tensor<double>(rng, {2, 1, 8, 8, 8});
  const auto target = oracle::tensor<double>(rng, {2, 6});
  const auto rep = oracle::finite_difference(
      net.named_parameters(),
      [&](Tape<double>* t) { return ops::mse_loss(t, net.forward(t, f, m).prediction, target); }, 10, 1e-4, 9);
  INFO("worst at " << rep.where << "; " << rep.one_sided << " one-sided, " << rep.skipped << " skipped");
  CHECK(rep.worst <= 1e-3);
  CHECK(10 * rep.central >= 9 * (rep.central + rep.one_sided + rep.skipped));
}

TEST_CASE("checkpoint round trip, clone and cast") {
  Network<float> net(tiny(), 6);
  const auto ck = net.to_checkpoint();
  const auto back = Network<float>::from_checkpoint(decode_checkpoint(encode_checkpoint(ck)));
  CHECK(back.arch() == net.arch());
  for (const auto& [name, t] : net.named_parameters()) CHECK(oracle::values(back.parameter(name)) == oracle::values(t));

  auto copy = net.clone();
  copy.zero_head();
  CHECK(net.parameter("registrator.fc2.weight").at(0) != 0.0f);
  const auto d = net.cast<double>();
  CHECK(d.parameter("registrator.fc2.weight").at(3) == double(net.parameter("registrator.fc2.weight").at(3)));

  auto broken = ck;
  broken.arrays.pop_back();
  CHECK_THROWS(Network<float>::from_checkpoint(broken));
}
