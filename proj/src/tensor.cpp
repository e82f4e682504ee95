#include "xreg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace xreg {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
void check_shape(const Shape& shape, std::size_t count) {
  for (auto e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != count) {
    throw std::invalid_argument("value count " + std::to_string(count) + " does not match shape " +
                                shape_str(shape));
  }
}
}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  Tensor t = make_result(std::move(shape), Buffer<T>(n, value), requires_grad);
  t.s_->leaf = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  Tensor t = make_result(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  t.s_->leaf = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, Buffer<T> values, bool requires_grad) {
  check_shape(shape, values.size());
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->data = std::move(values);
  t.s_->requires_grad = requires_grad;
  t.s_->leaf = false;
  return t;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!s_->leaf) throw std::logic_error("mutable_data() is only available on leaf tensors");
  return s_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() needs a single-element tensor, got " + shape_str(shape()));
  return s_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
  return s_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  std::fill(s_->grad.begin(), s_->grad.end(), T(0));
}

template <typename T>
void Tape<T>::record(const Tensor<T>& output, std::function<void()> backward) {
  nodes_.push_back(Node{output, std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss");
  }
  if (nodes_.empty()) throw std::invalid_argument("backward() on an empty tape");
  if (!loss.requires_grad()) throw std::invalid_argument("loss does not depend on any gradient-tracked tensor");

  for (auto& node : nodes_) {
    auto out = node.output;
    out.grad_buffer();
    out.zero_grad();
  }
  auto seed = loss;
  seed.grad_buffer()[0] = T(1);

  visit_order_.clear();
  visit_order_.reserve(nodes_.size());
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    visit_order_.push_back(i);
    nodes_[i].backward();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace xreg
