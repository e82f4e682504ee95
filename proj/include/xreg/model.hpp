// Cross-modal attention registration network.
//
//   fixed  -> extractor_fixed  -> F
//   moving -> extractor_moving -> M
//   A = attention(primary = M, cross = F), B = attention(primary = F, cross = M)
//   concat(A, B) -> registrator -> 6 params
//
// The ablation variant (Feature-Reg) skips both attention blocks and feeds
// concat(M, F) to the registrator. Output units: translations in mm,
// rotations in degrees.

#pragma once

#include "xreg/checkpoint.hpp"
#include "xreg/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace xreg {

struct Architecture {
  std::size_t extent = 32;  // cubic input extent, divisible by 4
  std::size_t extractor_c1 = 16;
  std::size_t extractor_c2 = 32;
  std::size_t embed = 16;  // theta/phi width
  std::size_t registrator_channels = 32;
  // Registrator convs use stride 2 while the feature extent is above this.
  std::size_t registrator_min_extent = 4;
  std::size_t hidden = 256;
  bool attention = true;

  std::size_t feature_extent() const { return extent / 4; }
  std::vector<int> registrator_strides() const;
  std::size_t registrator_out_extent() const;
  void validate() const;

  // Space-separated key=value text, embedded in checkpoints.
  std::string to_text() const;
  static Architecture from_text(const std::string& text);
  bool operator==(const Architecture&) const = default;
};

template <typename T>
struct ExtractorParams {
  Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b;
};

// Bias-free linear embeddings, stored [in, out].
template <typename T>
struct AttentionParams {
  Tensor<T> theta, phi, g;
};

template <typename T>
struct RegistratorParams {
  Tensor<T> conv_w[3], conv_b[3];
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

// conv -> relu -> maxpool, twice. vol is [N,1,D,H,W] with D,H,W divisible by 4.
template <typename T>
Tensor<T> feature_extract(Tape<T>* tape, const ExtractorParams<T>& p, const Tensor<T>& vol);

template <typename T>
struct AttentionResult {
  Tensor<T> output;   // Z = Y + P, shape of `primary`
  Tensor<T> weights;  // [N, S, S]; row i holds the softmax weights for cross site i
};

// y_i = sum_j softmax_j(theta(c_i) . phi(p_j)) g(p_j);  Z = Y + P.
template <typename T>
AttentionResult<T> cross_modal_attention_detail(Tape<T>* tape, const Tensor<T>& primary, const Tensor<T>& cross,
                                                const AttentionParams<T>& p);
template <typename T>
Tensor<T> cross_modal_attention(Tape<T>* tape, const Tensor<T>& primary, const Tensor<T>& cross,
                                const AttentionParams<T>& p);

template <typename T>
struct ForwardResult {
  Tensor<T> prediction;  // [N, 6]
  Tensor<T> features_fixed, features_moving;
  Tensor<T> block_a, block_b;  // attention outputs; undefined in the ablation path
};

template <typename T>
class Network {
 public:
  explicit Network(Architecture arch = {}, std::uint64_t seed = 0);

  const Architecture& arch() const { return arch_; }

  // Uses the attention blocks when the architecture has them.
  ForwardResult<T> forward(Tape<T>* tape, const Tensor<T>& fixed, const Tensor<T>& moving) const;
  // Always bypasses attention.
  ForwardResult<T> forward_ablation(Tape<T>* tape, const Tensor<T>& fixed, const Tensor<T>& moving) const;

  const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const { return named_; }
  std::vector<Tensor<T>> parameters() const;
  Tensor<T> parameter(const std::string& name) const;
  std::size_t parameter_count() const;
  std::size_t attention_parameter_count() const;

  // Sets the final fully connected layer to zero (prediction == 0).
  void zero_head();
  void zero_grad();

  const ExtractorParams<T>& extractor_fixed() const { return ext_fixed_; }
  const ExtractorParams<T>& extractor_moving() const { return ext_moving_; }
  const AttentionParams<T>& attention_a() const { return attn_a_; }
  const AttentionParams<T>& attention_b() const { return attn_b_; }

  // Handles share storage, so copying a Network aliases its weights;
  // clone() makes an independent copy.
  Network clone() const;

  Checkpoint to_checkpoint() const;
  static Network from_checkpoint(const Checkpoint& ckpt);

  template <typename U>
  Network<U> cast() const {
    return Network<U>::from_checkpoint(to_checkpoint());
  }

 private:
  void register_all();
  ForwardResult<T> run(Tape<T>* tape, const Tensor<T>& fixed, const Tensor<T>& moving, bool use_attention) const;

  Architecture arch_;
  ExtractorParams<T> ext_fixed_, ext_moving_;
  AttentionParams<T> attn_a_, attn_b_;
  RegistratorParams<T> reg_;
  std::vector<std::pair<std::string, Tensor<T>>> named_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace xreg
