// Dense tensors with tape-based reverse-mode differentiation.
//
// Tensor<T> is a shared handle. Data is immutable after an op produces it;
// only gradients accumulate. Leaves (parameters, inputs) are created by the
// caller, everything else is produced by an op. When an op receives a
// non-null Tape and any input requires a gradient, it appends a backward
// closure to the tape; Tape::backward replays those closures in exact
// reverse order.
//
// Two precisions are instantiated: float for training and double for
// finite-difference checking.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xreg {

using Shape = std::vector<std::size_t>;

// Tensor buffers start on a 64-byte boundary. Vectorized reductions peel a
// different head depending on the start address, so without this the same
// computation can round differently from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised by any forward op whose output holds NaN or Inf, and by the
// optimizer when a gradient is non-finite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const T> data() const { return s_->data; }
  // Leaves only: used by optimizers and initializers.
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat) const { return s_->data.at(flat); }

  bool requires_grad() const { return s_->requires_grad; }
  bool is_leaf() const { return s_->leaf; }
  bool has_grad() const { return !s_->grad.empty(); }
  // Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const { return s_->grad; }
  // Gradients accumulate through const handles: the storage is shared.
  std::span<T> grad_buffer() const;  // allocates a zero buffer on first use
  void zero_grad() const;

  // Identity of the underlying storage (handles compare equal when shared).
  const void* id() const { return s_.get(); }

  // Internal: op outputs are created through this.
  static Tensor make_result(Shape shape, Buffer<T> values, bool requires_grad);

 private:
  struct Storage {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Storage> s_;
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Appends one executed op. `output` is reset to zero gradient before each
  // replay; `backward` reads output's gradient and accumulates into inputs.
  void record(const Tensor<T>& output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Leaf
  // gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Order in which the last backward() visited nodes (indices into record
  // order). Exposed for tests of the reverse-order invariant.
  const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

 private:
  struct Node {
    Tensor<T> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace xreg
