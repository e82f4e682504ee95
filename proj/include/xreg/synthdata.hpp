// Synthetic two-modality prostate phantoms and dataset assembly.
//
// The fixed image is MRI-like (bright gland, dark rectum, textured
// background); the moving image is ultrasound-like (dark gland with a
// bright capsule, multiplicative speckle, fan-shaped visibility). Both are
// rendered on one grid, so the ground-truth alignment is the identity.

#pragma once

#include "xreg/geometry.hpp"
#include "xreg/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace xreg {

// splitmix64-based mixing of a master seed with a path of indices.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

struct InitTransform {
  RigidTransform transform;
  double target_sre_mm = 0.0;
};

struct CasePair {
  std::string case_id;
  Volume fixed_image;
  Volume fixed_label;  // exactly {0, 1}
  Volume moving_image;
  SurfacePointSet moving_surface;
  RigidTransform truth;  // identity about the surface centroid
  std::vector<InitTransform> inits;
};

struct PhantomSettings {
  std::size_t extent = 32;
  double spacing_mm = 1.5;
  double fixed_noise_sigma = 0.03;
  double moving_noise_sigma = 0.03;
};

CasePair generate_phantom_pair(std::uint64_t seed, const PhantomSettings& settings = {});

struct DatasetSpec {
  std::size_t cases = 8;
  std::size_t inits_per_case = 5;
  double sre_lo_mm = 0.0;
  double sre_hi_mm = 20.0;
  PhantomSettings phantom;
};

// Case c uses phantom seed derive_seed(master, {c}); its initializations
// come from draw_inits(derive_seed(master, {c, 1}), ...).
// Cases are independent, so `jobs` threads give identical output.
std::vector<CasePair> make_dataset(std::uint64_t master_seed, const DatasetSpec& spec, int jobs = 1);

// Init i draws its target SRE (uniform in [lo, hi]) and its perturbation
// from derive_seed(seed, {i}).
std::vector<InitTransform> draw_inits(std::uint64_t seed, const SurfacePointSet& surface, std::size_t count,
                                      double sre_lo_mm, double sre_hi_mm);

// MetaImage (.mhd) with float32 little-endian payload stored inline
// (ElementDataFile = LOCAL). Reading also accepts a detached payload file.
void write_volume(const Volume& vol, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

// Transform JSON: {"t_mm":[..], "a_deg":[..], "center_mm":[..], "convention":"zyx-intrinsic"}
std::string transform_to_json(const RigidTransform& t, double target_sre_mm = -1.0);
RigidTransform transform_from_json(const std::string& text);
void write_transform(const RigidTransform& t, const std::filesystem::path& path);
RigidTransform read_transform(const std::filesystem::path& path);

// <root>/<case_id>/{fixed.mhd, fixed_label.mhd, moving.mhd, inits.json}
void write_dataset(const std::vector<CasePair>& cases, const std::filesystem::path& root);
std::vector<CasePair> read_dataset(const std::filesystem::path& root);
CasePair read_case(const std::filesystem::path& case_dir);

}  // namespace xreg
