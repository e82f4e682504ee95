// Label-surface extraction and surface registration error (SRE).

#pragma once

#include "xreg/geometry.hpp"

#include <string>
#include <vector>

namespace xreg {

struct SurfacePointSet {
  std::vector<Vec3> points;  // world mm
  std::string source;
};

// World centers of all foreground voxels (value > 0.5) with at least one
// in-volume background 6-neighbor. Throws std::invalid_argument when the
// label is empty or has no background at all.
SurfacePointSet extract_surface(const Volume& label, std::string source = {});

// Mean Euclidean distance between truth(x) and estimate(x) over the surface.
double sre(std::span<const Vec3> surface, const RigidTransform& truth, const RigidTransform& estimate);
double sre(const SurfacePointSet& surface, const RigidTransform& truth, const RigidTransform& estimate);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace xreg
