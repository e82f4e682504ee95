#include "xreg/selftest.hpp"

#include "xreg/geometry.hpp"
#include "xreg/model.hpp"
#include "xreg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace xreg {

namespace {

using TD = Tensor<double>;

TD random_tensor(std::mt19937_64& rng, Shape shape, bool grad, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = nd(rng);
  return TD::from(std::move(shape), std::move(v), grad);
}

// sum(out * R) for a fixed random R, so every output element matters.
std::function<TD(Tape<double>*)> weighted(std::function<TD(Tape<double>*)> f, std::uint64_t seed) {
  auto probe = std::make_shared<TD>();
  return [f, probe, seed](Tape<double>* tape) {
    const auto out = f(tape);
    if (!probe->defined()) {
      std::mt19937_64 rng(seed);
      *probe = random_tensor(rng, out.shape(), false);
    }
    return ops::sum(tape, ops::mul(tape, out, *probe));
  };
}

CheckResult report_case(const std::string& name, const GradCheckReport& rep, double tol) {
  return {name, grad_check_passed(rep, tol), rep.worst, tol,
          std::to_string(rep.central) + " central, " + std::to_string(rep.one_sided) + " one-sided, " +
              std::to_string(rep.skipped) + " skipped"};
}

CheckResult grad_case(const std::string& name, const std::vector<TD>& leaves, std::function<TD(Tape<double>*)> f,
                      std::uint64_t seed) {
  GradCheckSettings s;
  s.seed = seed;
  return report_case("grad " + name, check_gradients(leaves, weighted(std::move(f), seed ^ 0x5eed), s), s.tolerance);
}

std::vector<CheckResult> op_gradients() {
  std::mt19937_64 rng(11);
  std::vector<CheckResult> out;
  const TD none;
  {
    auto x = random_tensor(rng, {2, 2, 5, 4, 6}, true);
    auto w = random_tensor(rng, {3, 2, 3, 3, 3}, true, 0.3);
    auto b = random_tensor(rng, {3}, true);
    out.push_back(grad_case("conv3d", {x, w, b}, [=](Tape<double>* t) { return ops::conv3d(t, x, w, b, 1, 1); }, 1));
    out.push_back(grad_case("conv3d stride 2", {x, w, b}, [=](Tape<double>* t) { return ops::conv3d(t, x, w, b, 2, 1); }, 2));
  }
  {
    auto x = random_tensor(rng, {2, 3, 4, 4, 6}, true);
    out.push_back(grad_case("maxpool3d", {x}, [=](Tape<double>* t) { return ops::maxpool3d(t, x, 2, 2); }, 3));
    out.push_back(grad_case("relu", {x}, [=](Tape<double>* t) { return ops::relu(t, x); }, 4));
    out.push_back(grad_case("to_sites", {x}, [=](Tape<double>* t) { return ops::to_sites(t, x); }, 5));
    auto y = random_tensor(rng, {2, 2, 4, 4, 6}, true);
    out.push_back(grad_case("concat_channels", {x, y}, [=](Tape<double>* t) { return ops::concat_channels(t, x, y); }, 6));
  }
  {
    auto x = random_tensor(rng, {5, 4}, true);
    auto w = random_tensor(rng, {4, 3}, true);
    auto b = random_tensor(rng, {3}, true);
    out.push_back(grad_case("linear", {x, w, b}, [=](Tape<double>* t) { return ops::linear(t, x, w, b); }, 7));
    out.push_back(grad_case("linear no bias", {x, w}, [=](Tape<double>* t) { return ops::linear(t, x, w, none); }, 8));
    auto l = random_tensor(rng, {3, 7}, true, 2.0);
    out.push_back(grad_case("softmax_rows", {l}, [=](Tape<double>* t) { return ops::softmax_rows(t, l); }, 9));
    out.push_back(grad_case("exp", {l}, [=](Tape<double>* t) { return ops::exp(t, l); }, 10));
    auto m = random_tensor(rng, {3, 7}, true);
    out.push_back(grad_case("mul", {l, m}, [=](Tape<double>* t) { return ops::mul(t, l, m); }, 11));
    out.push_back(grad_case("add", {l, m}, [=](Tape<double>* t) { return ops::add(t, l, m); }, 12));
    out.push_back(grad_case("mse_loss", {l, m}, [=](Tape<double>* t) { return ops::mse_loss(t, l, m); }, 13));
  }
  {
    auto a = random_tensor(rng, {2, 3, 4}, true);
    auto b = random_tensor(rng, {2, 4, 5}, true);
    auto c = random_tensor(rng, {2, 5, 4}, true);
    out.push_back(grad_case("bmm", {a, b}, [=](Tape<double>* t) { return ops::bmm(t, a, b); }, 14));
    out.push_back(grad_case("bmm_nt", {a, c}, [=](Tape<double>* t) { return ops::bmm_nt(t, a, c); }, 15));
  }
  {
    auto p = random_tensor(rng, {2, 4, 2, 2, 2}, true);
    auto c = random_tensor(rng, {2, 4, 2, 2, 2}, true);
    AttentionParams<double> ap{random_tensor(rng, {4, 3}, true), random_tensor(rng, {4, 3}, true),
                               random_tensor(rng, {4, 4}, true)};
    out.push_back(grad_case("cross_modal_attention", {p, c, ap.theta, ap.phi, ap.g},
                            [=](Tape<double>* t) { return cross_modal_attention(t, p, c, ap); }, 16));
  }
  return out;
}

// Direct evaluation of y_i = sum_j softmax_j(theta(c_i).phi(p_j)) g(p_j) + p_i.
CheckResult attention_reference() {
  std::mt19937_64 rng(21);
  const std::size_t C = 6, E = 3, D = 2, H = 3, W = 2, S = D * H * W;
  auto p = random_tensor(rng, {1, C, D, H, W}, false);
  auto c = random_tensor(rng, {1, C, D, H, W}, false);
  AttentionParams<double> ap{random_tensor(rng, {C, E}, false), random_tensor(rng, {C, E}, false),
                             random_tensor(rng, {C, C}, false)};
  const auto z = cross_modal_attention<double>(nullptr, p, c, ap);
  const auto P = p.data(), X = c.data(), th = ap.theta.data(), ph = ap.phi.data(), g = ap.g.data();
  double worst = 0.0;
  for (std::size_t i = 0; i < S; ++i) {
    std::vector<double> logits(S);
    for (std::size_t j = 0; j < S; ++j) {
      double dot = 0.0;
      for (std::size_t e = 0; e < E; ++e) {
        double ti = 0.0, pj = 0.0;
        for (std::size_t k = 0; k < C; ++k) {
          ti += X[k * S + i] * th[k * E + e];
          pj += P[k * S + j] * ph[k * E + e];
        }
        dot += ti * pj;
      }
      logits[j] = dot;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (auto& l : logits) denom += (l = std::exp(l - mx));
    for (std::size_t o = 0; o < C; ++o) {
      double y = 0.0;
      for (std::size_t j = 0; j < S; ++j) {
        double gj = 0.0;
        for (std::size_t k = 0; k < C; ++k) gj += P[k * S + j] * g[k * C + o];
        y += logits[j] / denom * gj;
      }
      const double expect = y + P[o * S + i];
      worst = std::max(worst, std::abs(z.data()[o * S + i] - expect) / std::max(1.0, std::abs(expect)));
    }
  }
  return {"attention vs loop nest", worst <= 1e-10, worst, 1e-10, {}};
}

CheckResult conv_reference() {
  std::mt19937_64 rng(31);
  const std::size_t Ci = 2, Co = 3, n = 5, k = 3;
  auto x = random_tensor(rng, {1, Ci, n, n, n}, false);
  auto w = random_tensor(rng, {Co, Ci, k, k, k}, false);
  auto b = random_tensor(rng, {Co}, false);
  const auto y = ops::conv3d<double>(nullptr, x, w, b, 1, 1);
  double worst = 0.0;
  const auto at = [&](std::size_t ci, long z, long yy, long xx) {
    if (z < 0 || yy < 0 || xx < 0 || z >= long(n) || yy >= long(n) || xx >= long(n)) return 0.0;
    return x.data()[((ci * n + z) * n + yy) * n + xx];
  };
  for (std::size_t co = 0; co < Co; ++co)
    for (std::size_t z = 0; z < n; ++z)
      for (std::size_t yy = 0; yy < n; ++yy)
        for (std::size_t xx = 0; xx < n; ++xx) {
          double acc = b.data()[co];
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t bb = 0; bb < k; ++bb)
                for (std::size_t cc = 0; cc < k; ++cc)
                  acc += w.data()[(((co * Ci + ci) * k + a) * k + bb) * k + cc] *
                         at(ci, long(z + a) - 1, long(yy + bb) - 1, long(xx + cc) - 1);
          worst = std::max(worst, std::abs(acc - y.data()[((co * n + z) * n + yy) * n + xx]));
        }
  return {"conv3d vs loop nest", worst <= 1e-10, worst, 1e-10, {}};
}

CheckResult residual_identity() {
  std::mt19937_64 rng(41);
  auto p = random_tensor(rng, {1, 4, 2, 2, 2}, false);
  auto c = random_tensor(rng, {1, 4, 2, 2, 2}, false);
  AttentionParams<double> ap{random_tensor(rng, {4, 2}, false), random_tensor(rng, {4, 2}, false), TD::zeros({4, 4})};
  const auto z = cross_modal_attention<double>(nullptr, p, c, ap);
  const bool same = std::equal(z.data().begin(), z.data().end(), p.data().begin());
  return {"residual identity with zero g", same, same ? 0.0 : 1.0, 0.0, {}};
}

CheckResult geometry_roundtrip() {
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const RigidTransform t(RigidParams{{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}}, Vec3(u(rng), u(rng), u(rng)));
    const auto id = compose(invert(t), t).matrix();
    worst = std::max(worst, (id - Mat4::Identity()).cwiseAbs().maxCoeff());
  }
  return {"compose(invert(t), t) == identity", worst <= 1e-9, worst, 1e-9, {}};
}

CheckResult network_gradient() {
  Architecture arch;
  arch.extent = 8;
  arch.extractor_c1 = 2;
  arch.extractor_c2 = 3;
  arch.embed = 2;
  arch.registrator_channels = 3;
  arch.hidden = 5;
  Network<double> net(arch, 3);
  std::mt19937_64 rng(61);
  auto f = random_tensor(rng, {2, 1, 8, 8, 8}, false);
  auto m = random_tensor(rng, {2, 1, 8, 8, 8}, false);
  auto target = random_tensor(rng, {2, 6}, false);
  GradCheckSettings s;
  s.samples_per_tensor = 6;
  const auto rep = check_gradients(net.parameters(), [&](Tape<double>* t) {
    return ops::mse_loss(t, net.forward(t, f, m).prediction, target);
  }, s);
  return report_case("grad full network (8^3)", rep, s.tolerance);
}

}  // namespace

GradCheckReport check_gradients(const std::vector<Tensor<double>>& leaves,
                                const std::function<Tensor<double>(Tape<double>*)>& loss,
                                const GradCheckSettings& settings) {
  for (const auto& l : leaves) l.zero_grad();
  std::uint64_t base_pattern = 0;
  {
    Tape<double> tape;
    ops::BranchPattern pattern;
    const auto value = loss(&tape);
    base_pattern = pattern.value();
    tape.backward(value);
  }
  const auto eval = [&](std::uint64_t& pattern_out) {
    ops::BranchPattern pattern;
    const double v = loss(nullptr).item();
    pattern_out = pattern.value();
    return v;
  };
  std::mt19937_64 rng(settings.seed);
  GradCheckReport rep;
  const double h = settings.step;
  for (const auto& leaf : leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    std::vector<std::size_t> idx(leaf.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (settings.samples_per_tensor > 0 && idx.size() > settings.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(settings.samples_per_tensor);
    }
    auto values = Tensor<double>(leaf).mutable_data();
    for (const auto i : idx) {
      const double keep = values[i];
      std::uint64_t p_up = 0, p_down = 0, p_mid = 0;
      values[i] = keep + h;
      const double up = eval(p_up);
      values[i] = keep - h;
      const double down = eval(p_down);
      values[i] = keep;
      const bool up_ok = p_up == base_pattern, down_ok = p_down == base_pattern;
      double numeric = 0.0;
      if (up_ok && down_ok) {
        numeric = (up - down) / (2.0 * h);
        ++rep.central;
      } else if (up_ok || down_ok) {
        const double mid = eval(p_mid);
        numeric = up_ok ? (up - mid) / h : (mid - down) / h;
        ++rep.one_sided;
      } else {
        ++rep.skipped;
        continue;
      }
      const double a = analytic.empty() ? 0.0 : analytic[i];
      rep.worst = std::max(rep.worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
    }
  }
  for (const auto& l : leaves) l.zero_grad();
  return rep;
}

bool grad_check_passed(const GradCheckReport& r, double tolerance) {
  return r.worst <= tolerance && r.checked() > 0 && 10 * r.central >= 9 * r.checked();
}

std::vector<CheckResult> run_selftest(bool full) {
  auto out = op_gradients();
  out.push_back(attention_reference());
  out.push_back(conv_reference());
  out.push_back(residual_identity());
  out.push_back(geometry_roundtrip());
  if (full) out.push_back(network_gradient());
  return out;
}

}  // namespace xreg
