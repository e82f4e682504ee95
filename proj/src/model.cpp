#include "xreg/model.hpp"

#include "xreg/ops.hpp"

#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

namespace xreg {

std::vector<int> Architecture::registrator_strides() const {
  std::vector<int> strides;
  std::size_t e = feature_extent();
  for (int i = 0; i < 3; ++i) {
    if (e > registrator_min_extent && e % 2 == 0) {
      strides.push_back(2);
      e /= 2;
    } else {
      strides.push_back(1);
    }
  }
  return strides;
}

std::size_t Architecture::registrator_out_extent() const {
  std::size_t e = feature_extent();
  for (const int s : registrator_strides()) e = (e + 2 - 3) / static_cast<std::size_t>(s) + 1;
  return e;
}

void Architecture::validate() const {
  if (extent < 4 || extent % 4 != 0) throw std::invalid_argument("architecture: extent must be a positive multiple of 4");
  if (extractor_c1 == 0 || extractor_c2 == 0 || embed == 0 || registrator_channels == 0 || hidden == 0) {
    throw std::invalid_argument("architecture: widths must be positive");
  }
  if (registrator_min_extent == 0) throw std::invalid_argument("architecture: registrator_min_extent must be >= 1");
}

std::string Architecture::to_text() const {
  std::ostringstream os;
  os << "extent=" << extent << " extractor_c1=" << extractor_c1 << " extractor_c2=" << extractor_c2
     << " embed=" << embed << " registrator_channels=" << registrator_channels
     << " registrator_min_extent=" << registrator_min_extent << " hidden=" << hidden
     << " attention=" << (attention ? 1 : 0);
  return os.str();
}

Architecture Architecture::from_text(const std::string& text) {
  Architecture a;
  std::map<std::string, std::size_t*> fields{{"extent", &a.extent},
                                             {"extractor_c1", &a.extractor_c1},
                                             {"extractor_c2", &a.extractor_c2},
                                             {"embed", &a.embed},
                                             {"registrator_channels", &a.registrator_channels},
                                             {"registrator_min_extent", &a.registrator_min_extent},
                                             {"hidden", &a.hidden}};
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("architecture: malformed token '" + tok + "'");
    const auto key = tok.substr(0, eq);
    const auto val = tok.substr(eq + 1);
    try {
      if (key == "attention") {
        a.attention = std::stoi(val) != 0;
      } else if (auto it = fields.find(key); it != fields.end()) {
        *it->second = static_cast<std::size_t>(std::stoull(val));
      } else {
        throw FormatError("architecture: unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError("architecture: bad value in '" + tok + "'");
    }
  }
  a.validate();
  return a;
}

template <typename T>
Tensor<T> feature_extract(Tape<T>* tape, const ExtractorParams<T>& p, const Tensor<T>& vol) {
  if (!vol.defined() || vol.rank() != 5 || vol.dim(1) != 1) {
    throw std::invalid_argument("feature_extract: expected input [N,1,D,H,W]");
  }
  for (std::size_t a = 2; a < 5; ++a) {
    if (vol.dim(a) % 4 != 0) throw std::invalid_argument("feature_extract: spatial extents must be divisible by 4");
  }
  auto x = ops::relu(tape, ops::conv3d(tape, vol, p.conv1_w, p.conv1_b, 1, 1));
  x = ops::maxpool3d(tape, x, 2, 2);
  x = ops::relu(tape, ops::conv3d(tape, x, p.conv2_w, p.conv2_b, 1, 1));
  return ops::maxpool3d(tape, x, 2, 2);
}

template <typename T>
AttentionResult<T> cross_modal_attention_detail(Tape<T>* tape, const Tensor<T>& primary, const Tensor<T>& cross,
                                                const AttentionParams<T>& p) {
  if (!primary.defined() || !cross.defined() || primary.rank() != 5 || cross.rank() != 5) {
    throw std::invalid_argument("cross_modal_attention: feature maps must be [N,C,D,H,W]");
  }
  if (primary.shape() != cross.shape()) {
    throw std::invalid_argument("cross_modal_attention: primary " + shape_str(primary.shape()) + " and cross " +
                                shape_str(cross.shape()) + " differ");
  }
  const auto N = primary.dim(0), C = primary.dim(1);
  const auto d = primary.dim(2), h = primary.dim(3), w = primary.dim(4);
  const auto S = d * h * w;
  const auto E = p.theta.dim(1);

  const auto P = ops::to_sites(tape, primary);  // [N,S,C]
  const auto Cx = ops::to_sites(tape, cross);
  const auto P_rows = ops::reshape(tape, P, {N * S, C});
  const auto C_rows = ops::reshape(tape, Cx, {N * S, C});
  const Tensor<T> none;
  const auto theta = ops::reshape(tape, ops::linear(tape, C_rows, p.theta, none), {N, S, E});
  const auto phi = ops::reshape(tape, ops::linear(tape, P_rows, p.phi, none), {N, S, E});
  const auto g = ops::reshape(tape, ops::linear(tape, P_rows, p.g, none), {N, S, C});

  const auto weights = ops::softmax_rows(tape, ops::bmm_nt(tape, theta, phi));  // [N,S,S]
  const auto Y = ops::bmm(tape, weights, g);
  const auto Z = ops::add(tape, Y, P);
  return {ops::from_sites(tape, Z, d, h, w), weights};
}

template <typename T>
Tensor<T> cross_modal_attention(Tape<T>* tape, const Tensor<T>& primary, const Tensor<T>& cross,
                                const AttentionParams<T>& p) {
  return cross_modal_attention_detail(tape, primary, cross, p).output;
}

template <typename T>
Network<T>::Network(Architecture arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  const auto c1 = arch_.extractor_c1, c2 = arch_.extractor_c2, rc = arch_.registrator_channels;
  for (auto* ext : {&ext_fixed_, &ext_moving_}) {
    ext->conv1_w = Tensor<T>::zeros({c1, 1, 3, 3, 3}, true);
    ext->conv1_b = Tensor<T>::zeros({c1}, true);
    ext->conv2_w = Tensor<T>::zeros({c2, c1, 3, 3, 3}, true);
    ext->conv2_b = Tensor<T>::zeros({c2}, true);
  }
  if (arch_.attention) {
    for (auto* att : {&attn_a_, &attn_b_}) {
      att->theta = Tensor<T>::zeros({c2, arch_.embed}, true);
      att->phi = Tensor<T>::zeros({c2, arch_.embed}, true);
      att->g = Tensor<T>::zeros({c2, c2}, true);
    }
  }
  std::size_t cin = 2 * c2;
  for (int i = 0; i < 3; ++i) {
    reg_.conv_w[i] = Tensor<T>::zeros({rc, cin, 3, 3, 3}, true);
    reg_.conv_b[i] = Tensor<T>::zeros({rc}, true);
    cin = rc;
  }
  const auto e = arch_.registrator_out_extent();
  const auto flat = rc * e * e * e;
  reg_.fc1_w = Tensor<T>::zeros({flat, arch_.hidden}, true);
  reg_.fc1_b = Tensor<T>::zeros({arch_.hidden}, true);
  reg_.fc2_w = Tensor<T>::zeros({arch_.hidden, 6}, true);
  reg_.fc2_b = Tensor<T>::zeros({6}, true);
  register_all();

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases. Attention
  // weights are drawn last so that a network without attention gets the
  // same initial weights for every layer it shares.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (const bool attention_pass : {false, true}) {
    for (auto& [name, t] : named_) {
      if (t.rank() == 1 || (name.rfind("attention_", 0) == 0) != attention_pass) continue;
      const std::size_t fan_in = t.rank() == 5 ? t.numel() / t.dim(0) : t.dim(0);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.mutable_data()) v = static_cast<T>(bound * unit(rng));
    }
  }
}

template <typename T>
void Network<T>::register_all() {
  named_.clear();
  const auto add_ext = [&](const std::string& prefix, ExtractorParams<T>& e) {
    named_.emplace_back(prefix + ".conv1.weight", e.conv1_w);
    named_.emplace_back(prefix + ".conv1.bias", e.conv1_b);
    named_.emplace_back(prefix + ".conv2.weight", e.conv2_w);
    named_.emplace_back(prefix + ".conv2.bias", e.conv2_b);
  };
  add_ext("extractor_fixed", ext_fixed_);
  add_ext("extractor_moving", ext_moving_);
  if (arch_.attention) {
    for (auto [prefix, att] : {std::pair{std::string("attention_a"), &attn_a_}, std::pair{std::string("attention_b"), &attn_b_}}) {
      named_.emplace_back(prefix + ".theta", att->theta);
      named_.emplace_back(prefix + ".phi", att->phi);
      named_.emplace_back(prefix + ".g", att->g);
    }
  }
  for (int i = 0; i < 3; ++i) {
    named_.emplace_back("registrator.conv" + std::to_string(i + 1) + ".weight", reg_.conv_w[i]);
    named_.emplace_back("registrator.conv" + std::to_string(i + 1) + ".bias", reg_.conv_b[i]);
  }
  named_.emplace_back("registrator.fc1.weight", reg_.fc1_w);
  named_.emplace_back("registrator.fc1.bias", reg_.fc1_b);
  named_.emplace_back("registrator.fc2.weight", reg_.fc2_w);
  named_.emplace_back("registrator.fc2.bias", reg_.fc2_b);
}

template <typename T>
std::vector<Tensor<T>> Network<T>::parameters() const {
  std::vector<Tensor<T>> out;
  out.reserve(named_.size());
  for (const auto& [name, t] : named_) out.push_back(t);
  return out;
}

template <typename T>
Tensor<T> Network<T>::parameter(const std::string& name) const {
  for (const auto& [n, t] : named_) {
    if (n == name) return t;
  }
  throw std::invalid_argument("network has no parameter '" + name + "'");
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_) n += t.numel();
  return n;
}

template <typename T>
std::size_t Network<T>::attention_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_) {
    if (name.rfind("attention_", 0) == 0) n += t.numel();
  }
  return n;
}

template <typename T>
void Network<T>::zero_head() {
  for (auto* t : {&reg_.fc2_w, &reg_.fc2_b}) {
    for (auto& v : t->mutable_data()) v = T(0);
  }
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& [name, t] : named_) t.zero_grad();
}

template <typename T>
ForwardResult<T> Network<T>::forward(Tape<T>* tape, const Tensor<T>& fixed, const Tensor<T>& moving) const {
  return run(tape, fixed, moving, arch_.attention);
}

template <typename T>
ForwardResult<T> Network<T>::forward_ablation(Tape<T>* tape, const Tensor<T>& fixed, const Tensor<T>& moving) const {
  return run(tape, fixed, moving, false);
}

template <typename T>
ForwardResult<T> Network<T>::run(Tape<T>* tape, const Tensor<T>& fixed, const Tensor<T>& moving,
                                 bool use_attention) const {
  for (const auto* t : {&fixed, &moving}) {
    if (!t->defined() || t->rank() != 5 || t->dim(1) != 1) throw std::invalid_argument("network input must be [N,1,D,H,W]");
    for (std::size_t a = 2; a < 5; ++a) {
      if (t->dim(a) != arch_.extent) {
        throw std::invalid_argument("network input " + shape_str(t->shape()) + " does not match architecture extent " +
                                    std::to_string(arch_.extent));
      }
    }
  }
  if (fixed.dim(0) != moving.dim(0)) throw std::invalid_argument("fixed and moving batch sizes differ");

  ForwardResult<T> r;
  r.features_fixed = feature_extract(tape, ext_fixed_, fixed);
  r.features_moving = feature_extract(tape, ext_moving_, moving);
  Tensor<T> x;
  if (use_attention) {
    r.block_a = cross_modal_attention(tape, r.features_moving, r.features_fixed, attn_a_);
    r.block_b = cross_modal_attention(tape, r.features_fixed, r.features_moving, attn_b_);
    x = ops::concat_channels(tape, r.block_a, r.block_b);
  } else {
    x = ops::concat_channels(tape, r.features_moving, r.features_fixed);
  }
  const auto strides = arch_.registrator_strides();
  for (int i = 0; i < 3; ++i) x = ops::relu(tape, ops::conv3d(tape, x, reg_.conv_w[i], reg_.conv_b[i], strides[i], 1));
  const auto N = x.dim(0);
  x = ops::reshape(tape, x, {N, x.numel() / N});
  x = ops::relu(tape, ops::linear(tape, x, reg_.fc1_w, reg_.fc1_b));
  r.prediction = ops::linear(tape, x, reg_.fc2_w, reg_.fc2_b);
  return r;
}

template <typename T>
Network<T> Network<T>::clone() const {
  Network<T> out(arch_, 0);
  for (std::size_t i = 0; i < named_.size(); ++i) {
    auto dst = out.named_[i].second.mutable_data();
    const auto src = named_[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

template <typename T>
Checkpoint Network<T>::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.metadata.emplace_back("arch", arch_.to_text());
  for (const auto& [name, t] : named_) {
    NamedArray a{name, t.shape(), {}};
    a.values.reserve(t.numel());
    for (const T v : t.data()) a.values.push_back(static_cast<float>(v));
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

template <typename T>
Network<T> Network<T>::from_checkpoint(const Checkpoint& ckpt) {
  const auto arch_text = ckpt.meta("arch");
  if (arch_text.empty()) throw FormatError("checkpoint lacks an architecture manifest");
  Network<T> net(Architecture::from_text(arch_text), 0);
  for (auto& [name, t] : net.named_) {
    const auto& a = ckpt.get(name);
    if (a.shape != t.shape()) {
      throw FormatError("checkpoint array '" + name + "' has shape " + shape_str(a.shape) + ", expected " +
                        shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
  }
  return net;
}

#define XREG_INSTANTIATE_MODEL(T)                                                                               \
  template Tensor<T> feature_extract(Tape<T>*, const ExtractorParams<T>&, const Tensor<T>&);                    \
  template AttentionResult<T> cross_modal_attention_detail(Tape<T>*, const Tensor<T>&, const Tensor<T>&,        \
                                                           const AttentionParams<T>&);                          \
  template Tensor<T> cross_modal_attention(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const AttentionParams<T>&); \
  template class Network<T>;

XREG_INSTANTIATE_MODEL(float)
XREG_INSTANTIATE_MODEL(double)

#undef XREG_INSTANTIATE_MODEL

}  // namespace xreg
