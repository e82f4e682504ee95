// Adam with bias correction, plus the step learning-rate schedule.

#pragma once

#include "xreg/tensor.hpp"

#include <vector>

namespace xreg {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor<T>> params, AdamSettings settings = {});

  // One update with the gradients currently held by the parameters. A
  // parameter with no gradient buffer counts as zero gradient. Throws
  // NonFiniteError without touching any state if a gradient is NaN/Inf.
  void step(double lr);
  void zero_grad();

  long steps_taken() const { return t_; }
  const AdamSettings& settings() const { return settings_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  AdamSettings settings_;
  long t_ = 0;
};

// lr_init * gamma^floor((epoch - 1) / step_epochs) for 1-based epochs.
double step_lr(double lr_init, double gamma, int step_epochs, int epoch);

extern template class AdamOptimizer<float>;
extern template class AdamOptimizer<double>;

}  // namespace xreg
