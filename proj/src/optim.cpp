#include "xreg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace xreg {

template <typename T>
AdamOptimizer<T>::AdamOptimizer(std::vector<Tensor<T>> params, AdamSettings settings)
    : params_(std::move(params)), settings_(settings) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw std::invalid_argument("AdamOptimizer: parameters must be leaf tensors");
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamOptimizer<T>::step(double lr) {
  for (const auto& p : params_) {
    for (const T g : p.grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient; Adam step aborted");
    }
  }
  ++t_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const auto g = p.grad();
    if (g.empty()) continue;
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g[j]);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * g[j] * g[j]);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(w[j] - lr * mhat / (std::sqrt(vhat) + settings_.eps));
    }
  }
}

template <typename T>
void AdamOptimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double step_lr(double lr_init, double gamma, int step_epochs, int epoch) {
  if (step_epochs < 1 || epoch < 1) throw std::invalid_argument("step_lr: epochs are 1-based and step must be >= 1");
  return lr_init * std::pow(gamma, (epoch - 1) / step_epochs);
}

template class AdamOptimizer<float>;
template class AdamOptimizer<double>;

}  // namespace xreg
