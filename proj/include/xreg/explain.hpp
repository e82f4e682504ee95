// Grad-CAM saliency over the attention block outputs, and PGM slice export.

#pragma once

#include "xreg/geometry.hpp"
#include "xreg/model.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace xreg {

enum class AttentionBlock { A, B };

AttentionBlock parse_block(const std::string& s);
std::string to_string(AttentionBlock b);

struct Saliency {
  std::array<std::size_t, 3> extents{};  // x, y, z; x fastest in `values`
  std::vector<double> values;            // >= 0, max 1 unless all zero
  AttentionBlock block = AttentionBlock::A;
  bool all_zero = false;
  std::string source;
};

// activation and grad are one sample's [C, D, H, W] maps.
Saliency gradcam_from(std::span<const double> activation, std::span<const double> grad, std::size_t channels,
                      std::array<std::size_t, 3> extents);

// Differentiates the sum of squared predicted parameters for the pair
// (fixed, moving resampled through init). The network is not modified.
Saliency gradcam(const Network<float>& net, const Volume& fixed, const Volume& moving, const RigidTransform& init,
                 AttentionBlock block);

// Writes one P5 PGM per slice along axis 'x', 'y' or 'z', named
// <prefix>_<axis>_<index>.pgm; returns the paths. Intensities are min-max
// scaled over the whole volume; a constant volume maps to 128.
std::vector<std::filesystem::path> export_slices(std::span<const double> values, std::array<std::size_t, 3> extents,
                                                 char axis, const std::filesystem::path& prefix);
std::vector<std::filesystem::path> export_slices(const Saliency& s, char axis, const std::filesystem::path& prefix);
std::vector<std::filesystem::path> export_slices(const Volume& v, char axis, const std::filesystem::path& prefix);

std::uint8_t quantize(double v, double lo, double hi);

}  // namespace xreg
