// Rigid transforms, scalar volumes and resampling.
//
// Rotations use intrinsic z-y-x Euler angles in degrees about an explicit
// center:  M = T(t) * T(c) * Rz(az) * Ry(ay) * Rx(ax) * T(-c).

#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

namespace xreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct RigidParams {
  std::array<double, 3> t_mm{0.0, 0.0, 0.0};
  std::array<double, 3> a_deg{0.0, 0.0, 0.0};

  static RigidParams from_vector(std::span<const double> six);
  std::array<double, 6> as_vector() const;
  bool is_finite() const;
};

class RigidTransform {
 public:
  RigidTransform();  // identity about the origin
  RigidTransform(const RigidParams& params, const Vec3& center);

  static RigidTransform identity(const Vec3& center = Vec3::Zero());
  // Decomposes the rigid matrix into parameters about `center`. The rotation
  // block must be orthonormal; angles come back in (-180, 180].
  static RigidTransform from_matrix(const Mat4& matrix, const Vec3& center);

  const RigidParams& params() const { return params_; }
  const Vec3& center() const { return center_; }
  const Mat4& matrix() const { return matrix_; }

  Vec3 apply(const Vec3& p) const;

 private:
  RigidParams params_;
  Vec3 center_;
  Mat4 matrix_;
};

Mat3 rotation_zyx(const std::array<double, 3>& a_deg);
Mat4 params_to_matrix(const RigidParams& p, const Vec3& center);
RigidTransform make_transform(const RigidParams& p, const Vec3& center);

// compose(a, b).matrix() == a.matrix() * b.matrix(); the result keeps b's
// center.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& a);
std::vector<Vec3> apply_to_points(const RigidTransform& t, std::span<const Vec3> pts);

struct VolumeGeometry {
  std::array<std::size_t, 3> extents{1, 1, 1};  // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // world mm of voxel (0,0,0) center

  std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * extents[1] + y) * extents[0] + x;
  }
  Vec3 world(double x, double y, double z) const;
  Vec3 to_voxel(const Vec3& world) const;  // continuous voxel coordinates
  Vec3 center() const;
  bool same_grid(const VolumeGeometry& other) const;
  void validate() const;  // throws std::invalid_argument on degenerate geometry
};

// Scalar grid, x fastest, then y, then z.
struct Volume {
  VolumeGeometry geom;
  std::vector<float> values;

  Volume() = default;
  explicit Volume(VolumeGeometry g, float fill = 0.0f);

  float at(std::size_t x, std::size_t y, std::size_t z) const { return values[geom.index(x, y, z)]; }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return values[geom.index(x, y, z)]; }
  // Trilinear sample at continuous voxel coordinates; zero outside.
  float sample_linear(const Vec3& voxel) const;
  float sample_nearest(const Vec3& voxel) const;
};

enum class Interpolation { Linear, Nearest };

// out(x) = moving(t^-1 x) for every voxel center x of `out_grid`.
Volume resample_volume(const Volume& moving, const RigidTransform& t, const VolumeGeometry& out_grid,
                       Interpolation mode = Interpolation::Linear);

struct PerturbationSettings {
  double max_translation_mm = 5.0;
  double max_rotation_deg = 6.0;
  int bisection_iterations = 40;
  double tolerance = 0.01;  // relative
  bool translation_only = false;
};

// Draws a random rigid perturbation about the surface centroid and rescales
// it so that its surface registration error against identity equals
// `target_sre_mm`.
RigidTransform sample_perturbation(std::mt19937_64& rng, std::span<const Vec3> surface, double target_sre_mm,
                                   const PerturbationSettings& settings = {});

Vec3 centroid(std::span<const Vec3> pts);

}  // namespace xreg
