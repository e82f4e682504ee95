#include "xreg/explain.hpp"

#include "xreg/ops.hpp"
#include "xreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace xreg {

AttentionBlock parse_block(const std::string& s) {
  if (s == "A" || s == "a") return AttentionBlock::A;
  if (s == "B" || s == "b") return AttentionBlock::B;
  throw std::invalid_argument("block must be A or B, got '" + s + "'");
}

std::string to_string(AttentionBlock b) { return b == AttentionBlock::A ? "A" : "B"; }

Saliency gradcam_from(std::span<const double> activation, std::span<const double> grad, std::size_t channels,
                      std::array<std::size_t, 3> extents) {
  const auto sites = extents[0] * extents[1] * extents[2];
  if (channels == 0 || sites == 0) throw std::invalid_argument("gradcam: empty feature map");
  if (activation.size() != channels * sites || grad.size() != activation.size()) {
    throw std::invalid_argument("gradcam: activation/gradient sizes do not match channels x extents");
  }
  Saliency out;
  out.extents = extents;
  out.values.assign(sites, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double w = 0.0;
    for (std::size_t s = 0; s < sites; ++s) w += grad[c * sites + s];
    w /= static_cast<double>(sites);
    if (w == 0.0) continue;
    for (std::size_t s = 0; s < sites; ++s) out.values[s] += w * activation[c * sites + s];
  }
  double peak = 0.0;
  for (auto& v : out.values) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (auto& v : out.values) v /= peak;
  } else {
    out.all_zero = true;
  }
  return out;
}

Saliency gradcam(const Network<float>& net, const Volume& fixed, const Volume& moving, const RigidTransform& init,
                 AttentionBlock block) {
  if (!net.arch().attention) throw std::invalid_argument("gradcam: network has no attention blocks");
  const auto e = net.arch().extent;
  if (fixed.geom.extents != std::array<std::size_t, 3>{e, e, e}) {
    throw std::invalid_argument("gradcam: fixed grid does not match the network input extent " + std::to_string(e));
  }
  // Gradients accumulate into leaf parameters, so work on a private copy.
  const auto local = net.clone();
  const Shape shape{1, 1, e, e, e};
  const auto f = Tensor<float>::from(shape, network_input(fixed));
  const auto m = Tensor<float>::from(shape, network_input(resample_volume(moving, init, fixed.geom)));
  Tape<float> tape;
  const auto r = local.forward(&tape, f, m);
  const auto s = ops::sum(&tape, ops::mul(&tape, r.prediction, r.prediction));
  tape.backward(s);

  const auto& act = block == AttentionBlock::A ? r.block_a : r.block_b;
  const auto C = act.dim(1);
  const std::array<std::size_t, 3> ext{act.dim(4), act.dim(3), act.dim(2)};
  std::vector<double> a(act.data().begin(), act.data().end());
  std::vector<double> g(act.numel(), 0.0);
  const auto gr = act.grad();
  std::copy(gr.begin(), gr.end(), g.begin());
  auto out = gradcam_from(a, g, C, ext);
  out.block = block;
  return out;
}

std::uint8_t quantize(double v, double lo, double hi) {
  if (!(hi > lo)) return 128;
  const double q = std::round(255.0 * (v - lo) / (hi - lo));
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

std::vector<std::filesystem::path> export_slices(std::span<const double> values, std::array<std::size_t, 3> extents,
                                                 char axis, const std::filesystem::path& prefix) {
  const auto nx = extents[0], ny = extents[1], nz = extents[2];
  if (values.size() != nx * ny * nz || values.empty()) throw std::invalid_argument("export_slices: size mismatch");
  int ax = 0;
  switch (axis) {
    case 'x': ax = 0; break;
    case 'y': ax = 1; break;
    case 'z': ax = 2; break;
    default: throw std::invalid_argument(std::string("export_slices: axis must be x, y or z, got '") + axis + "'");
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;

  // Slice plane axes (columns, rows): z -> (x, y), y -> (x, z), x -> (y, z).
  const std::size_t count = extents[ax];
  const std::size_t cols = ax == 0 ? ny : nx;
  const std::size_t rows = ax == 2 ? ny : nz;
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::uint8_t> pix(cols * rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        std::size_t x = 0, y = 0, z = 0;
        if (ax == 2) { x = c; y = r; z = i; }
        else if (ax == 1) { x = c; y = i; z = r; }
        else { x = i; y = c; z = r; }
        pix[r * cols + c] = quantize(values[(z * ny + y) * nx + x], lo, hi);
      }
    }
    std::filesystem::path path = prefix;
    path += "_" + std::string(1, axis) + "_" + std::to_string(i) + ".pgm";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << cols << ' ' << rows << "\n255\n";
    out.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
    written.push_back(path);
  }
  return written;
}

std::vector<std::filesystem::path> export_slices(const Saliency& s, char axis, const std::filesystem::path& prefix) {
  return export_slices(s.values, s.extents, axis, prefix);
}

std::vector<std::filesystem::path> export_slices(const Volume& v, char axis, const std::filesystem::path& prefix) {
  const std::vector<double> values(v.values.begin(), v.values.end());
  return export_slices(values, v.geom.extents, axis, prefix);
}

}  // namespace xreg
