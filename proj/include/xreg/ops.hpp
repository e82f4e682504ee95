// Differentiable tensor operations.
//
// Every op takes a nullable Tape. With a tape and at least one input that
// requires a gradient, the op is recorded and its output requires a
// gradient; otherwise it runs as plain inference. All ops validate shapes
// (std::invalid_argument) and reject non-finite outputs (NonFiniteError).

#pragma once

#include "xreg/tensor.hpp"

#include <cstdint>

namespace xreg::ops {

// While one of these is alive on a thread, relu and maxpool3d fold their
// branch decisions (active mask, window argmax) into a running hash.
// Finite-difference checks compare hashes to tell whether a step crossed a
// kink. Instances nest; only the innermost one records.
class BranchPattern {
 public:
  BranchPattern();
  ~BranchPattern();
  BranchPattern(const BranchPattern&) = delete;
  BranchPattern& operator=(const BranchPattern&) = delete;

  std::uint64_t value() const { return hash_; }
  void mix(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ull; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ull;
  BranchPattern* outer_;
};

// input [N,Cin,D,H,W], weight [Cout,Cin,k,k,k], bias [Cout] (may be undefined)
template <typename T>
Tensor<T> conv3d(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding);

// Pad-free pooling. Extents must be divisible by `stride`. Gradient goes to
// the first maximal element of each window in (d,h,w) scan order.
template <typename T>
Tensor<T> maxpool3d(Tape<T>* tape, const Tensor<T>& input, int window = 2, int stride = 2);

// input [M,din], weight [din,dout], bias [dout] or undefined.
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x);
template <typename T>
Tensor<T> exp(Tape<T>* tape, const Tensor<T>& x);
template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor);

// Softmax over the last axis; all leading axes are rows. Each row has its
// maximum subtracted before exponentiation.
template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& logits);

// Batched matrix products: a [B,M,K] x b [B,K,N] -> [B,M,N], and
// a [B,M,K] x b[B,N,K]^T -> [B,M,N].
template <typename T>
Tensor<T> bmm(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> bmm_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

// Copying reshape; element order is unchanged.
template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape);

// [N,C,D,H,W] -> [N,S,C] with S = D*H*W in row-major (d,h,w) order, and back.
template <typename T>
Tensor<T> to_sites(Tape<T>* tape, const Tensor<T>& x);
template <typename T>
Tensor<T> from_sites(Tape<T>* tape, const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w);

// Concatenates along axis 1; all other extents must match.
template <typename T>
Tensor<T> concat_channels(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x);

// Mean of squared differences over all elements.
template <typename T>
Tensor<T> mse_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace xreg::ops
