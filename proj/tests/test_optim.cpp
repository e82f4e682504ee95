#include "doctest.h"
#include "oracles.hpp"
#include "xreg/ops.hpp"
#include "xreg/optim.hpp"

using namespace xreg;

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  auto w = Tensor<double>::from({3}, {1, -2, 3}, true);
  w.grad_buffer();
  AdamOptimizer<double> opt({w});
  opt.step(0.1);
  CHECK(oracle::values(w) == std::vector<double>{1, -2, 3});
}

TEST_CASE("adam: first step moves by lr against the gradient sign") {
  auto w = Tensor<double>::from({2}, {0.5, 0.5}, true);
  auto g = w.grad_buffer();
  g[0] = 3.0;
  g[1] = -0.25;
  AdamOptimizer<double> opt({w});
  opt.step(0.01);
  CHECK(w.at(0) == doctest::Approx(0.49).epsilon(1e-6));
  CHECK(w.at(1) == doctest::Approx(0.51).epsilon(1e-6));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adam: 100 steps on w^2 from 1 with lr 0.1") {
  auto w = Tensor<double>::from({1}, {1.0}, true);
  AdamOptimizer<double> opt({w});
  // Scalar simulation of the same recurrence.
  double ws = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    opt.zero_grad();
    Tape<double> tape;
    tape.backward(ops::sum(&tape, ops::mul(&tape, w, w)));
    opt.step(0.1);
    const double g = 2.0 * ws;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ws -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(std::abs(w.item()) < 0.1);
  CHECK(w.item() == doctest::Approx(ws).epsilon(1e-9));
}

TEST_CASE("adam: non-finite gradient aborts the step without side effects") {
  auto w = Tensor<float>::from({2}, {1.0f, 2.0f}, true);
  auto g = w.grad_buffer();
  g[0] = 1.0f;
  g[1] = INFINITY;
  AdamOptimizer<float> opt({w});
  CHECK_THROWS_AS(opt.step(0.1), NonFiniteError);
  CHECK(w.at(0) == 1.0f);
  CHECK(opt.steps_taken() == 0);
}

TEST_CASE("step schedule") {
  CHECK(step_lr(5e-5, 0.9, 5, 1) == 5e-5);
  CHECK(step_lr(5e-5, 0.9, 5, 5) == 5e-5);
  CHECK(step_lr(5e-5, 0.9, 5, 6) == doctest::Approx(4.5e-5).epsilon(1e-12));
  CHECK(step_lr(5e-5, 0.9, 5, 12) == doctest::Approx(5e-5 * 0.81).epsilon(1e-12));
}
