#include "xreg/geometry.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace xreg {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double wrap_degrees(double a) {
  double r = std::fmod(a, 360.0);
  if (r <= -180.0) r += 360.0;
  if (r > 180.0) r -= 360.0;
  return r;
}

// Grid-aligned coordinates pick up rounding noise from the world/voxel round
// trip; snapping keeps lattice-aligned resampling exact.
double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

double mean_displacement(const Mat4& m, std::span<const Vec3> pts) {
  const Mat3 r = m.topLeftCorner<3, 3>();
  const Vec3 t = m.topRightCorner<3, 1>();
  double total = 0.0;
  for (const auto& p : pts) total += (r * p + t - p).norm();
  return total / static_cast<double>(pts.size());
}

}  // namespace

RigidParams RigidParams::from_vector(std::span<const double> six) {
  if (six.size() != 6) throw std::invalid_argument("rigid parameters need exactly 6 values");
  RigidParams p;
  for (int i = 0; i < 3; ++i) {
    p.t_mm[i] = six[i];
    p.a_deg[i] = six[i + 3];
  }
  return p;
}

std::array<double, 6> RigidParams::as_vector() const {
  return {t_mm[0], t_mm[1], t_mm[2], a_deg[0], a_deg[1], a_deg[2]};
}

bool RigidParams::is_finite() const {
  const auto v = as_vector();
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Mat3 rotation_zyx(const std::array<double, 3>& a_deg) {
  const Mat3 rx = Eigen::AngleAxisd(a_deg[0] * kDeg, Vec3::UnitX()).toRotationMatrix();
  const Mat3 ry = Eigen::AngleAxisd(a_deg[1] * kDeg, Vec3::UnitY()).toRotationMatrix();
  const Mat3 rz = Eigen::AngleAxisd(a_deg[2] * kDeg, Vec3::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

Mat4 params_to_matrix(const RigidParams& p, const Vec3& center) {
  if (!p.is_finite()) throw std::invalid_argument("rigid parameters must be finite");
  const Mat3 r = rotation_zyx(p.a_deg);
  const Vec3 t(p.t_mm[0], p.t_mm[1], p.t_mm[2]);
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t + center - r * center;
  return m;
}

RigidTransform::RigidTransform() : RigidTransform(RigidParams{}, Vec3::Zero()) {}

RigidTransform::RigidTransform(const RigidParams& params, const Vec3& center)
    : params_(params), center_(center), matrix_(params_to_matrix(params, center)) {}

RigidTransform RigidTransform::identity(const Vec3& center) { return RigidTransform(RigidParams{}, center); }

RigidTransform RigidTransform::from_matrix(const Mat4& matrix, const Vec3& center) {
  const Mat3 r = matrix.topLeftCorner<3, 3>();
  const double sy = std::clamp(-r(2, 0), -1.0, 1.0);
  const double ay = std::asin(sy);
  double ax = 0.0;
  double az = 0.0;
  if (std::abs(std::cos(ay)) > 1e-12) {
    ax = std::atan2(r(2, 1), r(2, 2));
    az = std::atan2(r(1, 0), r(0, 0));
  } else {
    // Gimbal lock: only ax - az (or ax + az) is determined; put it all in az.
    az = std::atan2(-r(0, 1), r(1, 1));
  }
  RigidParams p;
  p.a_deg = {wrap_degrees(ax / kDeg), wrap_degrees(ay / kDeg), wrap_degrees(az / kDeg)};
  const Vec3 t = matrix.topRightCorner<3, 1>() - center + r * center;
  p.t_mm = {t.x(), t.y(), t.z()};
  return RigidTransform(p, center);
}

Vec3 RigidTransform::apply(const Vec3& p) const {
  return matrix_.topLeftCorner<3, 3>() * p + matrix_.topRightCorner<3, 1>();
}

RigidTransform make_transform(const RigidParams& p, const Vec3& center) { return RigidTransform(p, center); }

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return RigidTransform::from_matrix(a.matrix() * b.matrix(), b.center());
}

RigidTransform invert(const RigidTransform& a) {
  const Mat3 r = a.matrix().topLeftCorner<3, 3>();
  const Vec3 t = a.matrix().topRightCorner<3, 1>();
  Mat4 inv = Mat4::Identity();
  inv.topLeftCorner<3, 3>() = r.transpose();
  inv.topRightCorner<3, 1>() = -r.transpose() * t;
  return RigidTransform::from_matrix(inv, a.center());
}

std::vector<Vec3> apply_to_points(const RigidTransform& t, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(t.apply(p));
  return out;
}

Vec3 VolumeGeometry::world(double x, double y, double z) const {
  return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
}

Vec3 VolumeGeometry::to_voxel(const Vec3& w) const {
  return {(w.x() - origin[0]) / spacing[0], (w.y() - origin[1]) / spacing[1], (w.z() - origin[2]) / spacing[2]};
}

Vec3 VolumeGeometry::center() const {
  return world((extents[0] - 1) / 2.0, (extents[1] - 1) / 2.0, (extents[2] - 1) / 2.0);
}

bool VolumeGeometry::same_grid(const VolumeGeometry& other) const {
  return extents == other.extents && spacing == other.spacing && origin == other.origin;
}

void VolumeGeometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (extents[a] < 1) throw std::invalid_argument("volume extents must be >= 1");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw std::invalid_argument("volume spacing must be positive and finite");
    }
    if (!std::isfinite(origin[a])) throw std::invalid_argument("volume origin must be finite");
  }
}

Volume::Volume(VolumeGeometry g, float fill) : geom(g), values(g.voxel_count(), fill) { geom.validate(); }

float Volume::sample_linear(const Vec3& voxel) const {
  const auto& e = geom.extents;
  const Vec3 v(snap(voxel.x()), snap(voxel.y()), snap(voxel.z()));
  const double fx = std::floor(v.x()), fy = std::floor(v.y()), fz = std::floor(v.z());
  const double dx = v.x() - fx, dy = v.y() - fy, dz = v.z() - fz;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy), z0 = static_cast<long>(fz);
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const long xi = x0 + (c & 1), yi = y0 + ((c >> 1) & 1), zi = z0 + ((c >> 2) & 1);
    const double w = ((c & 1) ? dx : 1.0 - dx) * (((c >> 1) & 1) ? dy : 1.0 - dy) * (((c >> 2) & 1) ? dz : 1.0 - dz);
    if (w == 0.0) continue;
    if (xi < 0 || yi < 0 || zi < 0 || xi >= static_cast<long>(e[0]) || yi >= static_cast<long>(e[1]) ||
        zi >= static_cast<long>(e[2])) {
      continue;
    }
    acc += w * at(static_cast<std::size_t>(xi), static_cast<std::size_t>(yi), static_cast<std::size_t>(zi));
  }
  return static_cast<float>(acc);
}

float Volume::sample_nearest(const Vec3& v) const {
  const long x = std::lround(v.x()), y = std::lround(v.y()), z = std::lround(v.z());
  const auto& e = geom.extents;
  if (x < 0 || y < 0 || z < 0 || x >= static_cast<long>(e[0]) || y >= static_cast<long>(e[1]) ||
      z >= static_cast<long>(e[2])) {
    return 0.0f;
  }
  return at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z));
}

Volume resample_volume(const Volume& moving, const RigidTransform& t, const VolumeGeometry& out_grid,
                       Interpolation mode) {
  moving.geom.validate();
  out_grid.validate();
  const Mat3 r = t.matrix().topLeftCorner<3, 3>().transpose();
  const Vec3 tr = -r * t.matrix().topRightCorner<3, 1>();
  Volume out(out_grid);
  const auto& e = out_grid.extents;
  for (std::size_t z = 0; z < e[2]; ++z) {
    for (std::size_t y = 0; y < e[1]; ++y) {
      for (std::size_t x = 0; x < e[0]; ++x) {
        const Vec3 w = out_grid.world(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        const Vec3 src = moving.geom.to_voxel(r * w + tr);
        out.at(x, y, z) = mode == Interpolation::Linear ? moving.sample_linear(src) : moving.sample_nearest(src);
      }
    }
  }
  return out;
}

Vec3 centroid(std::span<const Vec3> pts) {
  if (pts.empty()) throw std::invalid_argument("centroid of an empty point set");
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return c / static_cast<double>(pts.size());
}

RigidTransform sample_perturbation(std::mt19937_64& rng, std::span<const Vec3> surface, double target_sre_mm,
                                   const PerturbationSettings& settings) {
  if (surface.empty()) throw std::invalid_argument("sample_perturbation: surface is empty");
  if (!(target_sre_mm >= 0.0) || !std::isfinite(target_sre_mm)) {
    throw std::invalid_argument("sample_perturbation: target SRE must be finite and >= 0");
  }
  const Vec3 center = centroid(surface);
  if (target_sre_mm == 0.0) return RigidTransform::identity(center);

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    RigidParams draw;
    for (int i = 0; i < 3; ++i) draw.t_mm[i] = unit(rng) * settings.max_translation_mm;
    for (int i = 0; i < 3; ++i) {
      const double a = unit(rng) * settings.max_rotation_deg;
      draw.a_deg[i] = settings.translation_only ? 0.0 : a;
    }
    const auto scaled = [&](double s) {
      RigidParams p;
      for (int i = 0; i < 3; ++i) {
        p.t_mm[i] = s * draw.t_mm[i];
        p.a_deg[i] = s * draw.a_deg[i];
      }
      return p;
    };
    const auto sre_at = [&](double s) { return mean_displacement(params_to_matrix(scaled(s), center), surface); };

    if (sre_at(1.0) <= 0.0) continue;  // zero draw
    double lo = 0.0, hi = 1.0;
    while (sre_at(hi) < target_sre_mm && hi < 1e6) hi *= 2.0;
    for (int it = 0; it < settings.bisection_iterations; ++it) {
      const double mid = 0.5 * (lo + hi);
      (sre_at(mid) < target_sre_mm ? lo : hi) = mid;
    }
    const double s = 0.5 * (lo + hi);
    const auto p = scaled(s);
    const double max_angle = std::max({std::abs(p.a_deg[0]), std::abs(p.a_deg[1]), std::abs(p.a_deg[2])});
    if (max_angle >= 90.0) continue;  // SRE(s) is only monotone well inside a quarter turn
    if (std::abs(sre_at(s) - target_sre_mm) > settings.tolerance * target_sre_mm) continue;
    return RigidTransform(p, center);
  }
  throw std::runtime_error("sample_perturbation: could not reach the target SRE");
}

}  // namespace xreg
