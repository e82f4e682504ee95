#include "xreg/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace xreg {

SurfacePointSet extract_surface(const Volume& label, std::string source) {
  const auto& e = label.geom.extents;
  const auto fg = [&](long x, long y, long z) {
    return label.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)) > 0.5f;
  };
  const auto inside = [&](long x, long y, long z) {
    return x >= 0 && y >= 0 && z >= 0 && x < static_cast<long>(e[0]) && y < static_cast<long>(e[1]) &&
           z < static_cast<long>(e[2]);
  };
  static constexpr int kNeighbors[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};

  std::size_t foreground = 0;
  SurfacePointSet out;
  out.source = std::move(source);
  for (long z = 0; z < static_cast<long>(e[2]); ++z) {
    for (long y = 0; y < static_cast<long>(e[1]); ++y) {
      for (long x = 0; x < static_cast<long>(e[0]); ++x) {
        if (!fg(x, y, z)) continue;
        ++foreground;
        for (const auto& n : kNeighbors) {
          const long nx = x + n[0], ny = y + n[1], nz = z + n[2];
          if (inside(nx, ny, nz) && !fg(nx, ny, nz)) {
            out.points.push_back(label.geom.world(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)));
            break;
          }
        }
      }
    }
  }
  if (foreground == 0) throw std::invalid_argument("extract_surface: label volume is empty");
  if (foreground == label.values.size()) throw std::invalid_argument("extract_surface: label volume is full");
  if (out.points.empty()) throw std::invalid_argument("extract_surface: label has no boundary voxels");
  return out;
}

double sre(std::span<const Vec3> surface, const RigidTransform& truth, const RigidTransform& estimate) {
  if (surface.empty()) throw std::invalid_argument("sre: surface is empty");
  double total = 0.0;
  for (const auto& p : surface) total += (truth.apply(p) - estimate.apply(p)).norm();
  return total / static_cast<double>(surface.size());
}

double sre(const SurfacePointSet& surface, const RigidTransform& truth, const RigidTransform& estimate) {
  return sre(std::span<const Vec3>(surface.points), truth, estimate);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double total = 0.0;
  for (const double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (const double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace xreg
