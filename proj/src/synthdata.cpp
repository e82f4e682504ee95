#include "xreg/synthdata.hpp"

#include "xreg/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

namespace xreg {

namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Sum of random plane waves; roughly unit variance, smooth at the scale of
// the shortest wavelength.
class SmoothField {
 public:
  SmoothField(std::mt19937_64& rng, int waves, double min_wavelength, double max_wavelength) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    const double amp = std::sqrt(2.0 / waves);
    for (int i = 0; i < waves; ++i) {
      Vec3 dir(n(rng), n(rng), n(rng));
      dir.normalize();
      const double wl = min_wavelength + (max_wavelength - min_wavelength) * u(rng);
      waves_.push_back({dir * (2.0 * std::numbers::pi / wl), 2.0 * std::numbers::pi * u(rng), amp});
    }
  }
  double operator()(const Vec3& p) const {
    double v = 0.0;
    for (const auto& w : waves_) v += w.amp * std::cos(w.k.dot(p) + w.phase);
    return v;
  }

 private:
  struct Wave {
    Vec3 k;
    double phase;
    double amp;
  };
  std::vector<Wave> waves_;
};

struct Gland {
  Vec3 center;
  Mat3 rotation;  // gland frame -> world
  Vec3 axes;      // semi-axes, mm
  std::vector<std::pair<Vec3, double>> lobes;  // direction in gland frame, amplitude

  // Positive inside, zero on the boundary; units of normalized radius.
  double signed_depth(const Vec3& p) const {
    const Vec3 q = rotation.transpose() * (p - center);
    const Vec3 s(q.x() / axes.x(), q.y() / axes.y(), q.z() / axes.z());
    const double rho = s.norm();
    double bound = 1.0;
    if (rho > 1e-12) {
      const Vec3 u = s / rho;
      for (const auto& [dir, amp] : lobes) bound += amp * std::exp(-(1.0 - u.dot(dir)) / 0.25);
    }
    return bound - rho;
  }
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v(n(rng), n(rng), n(rng));
  return v.normalized();
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

std::array<double, 3> triple(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != 3) {
    throw FormatError(std::string("transform JSON: '") + key + "' must be a 3-element array");
  }
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    if (!j[key][i].is_number()) throw FormatError(std::string("transform JSON: '") + key + "' must be numeric");
    out[i] = j[key][i].get<double>();
  }
  return out;
}

RigidTransform transform_from(const json& j) {
  if (!j.is_object()) throw FormatError("transform JSON must be an object");
  if (j.contains("convention") && j["convention"] != "zyx-intrinsic") {
    throw FormatError("transform JSON: unsupported convention " + j["convention"].dump());
  }
  RigidParams p;
  p.t_mm = triple(j, "t_mm");
  p.a_deg = triple(j, "a_deg");
  const auto c = triple(j, "center_mm");
  if (!p.is_finite()) throw FormatError("transform JSON: non-finite parameters");
  return RigidTransform(p, Vec3(c[0], c[1], c[2]));
}

json transform_json(const RigidTransform& t, double target_sre_mm) {
  json j;
  const auto& p = t.params();
  j["t_mm"] = json::array({p.t_mm[0], p.t_mm[1], p.t_mm[2]});
  j["a_deg"] = json::array({p.a_deg[0], p.a_deg[1], p.a_deg[2]});
  j["center_mm"] = vec_json(t.center());
  j["convention"] = "zyx-intrinsic";
  if (target_sre_mm >= 0.0) j["target_sre_mm"] = target_sre_mm;
  return j;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(master);
  for (const auto v : path) h = splitmix64(h ^ splitmix64(v + 0x632be59bd9b4e019ULL));
  return h;
}

CasePair generate_phantom_pair(std::uint64_t seed, const PhantomSettings& settings) {
  const auto n = settings.extent;
  if (n < 16) throw std::invalid_argument("generate_phantom_pair: extent must be >= 16");
  if (n % 4 != 0) throw std::invalid_argument("generate_phantom_pair: extent must be divisible by 4");
  if (!(settings.spacing_mm > 0.0)) throw std::invalid_argument("generate_phantom_pair: spacing must be positive");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  VolumeGeometry g;
  g.extents = {n, n, n};
  g.spacing = {settings.spacing_mm, settings.spacing_mm, settings.spacing_mm};
  const double half_fov = (static_cast<double>(n) - 1.0) / 2.0 * settings.spacing_mm;
  g.origin = {-half_fov, -half_fov, -half_fov};

  Gland gland;
  gland.center = Vec3(uni(-0.08, 0.08), uni(-0.08, 0.08), uni(-0.08, 0.08)) * half_fov;
  gland.rotation = rotation_zyx({uni(-20, 20), uni(-20, 20), uni(-20, 20)});
  // Wider than deep, like a prostate seen axially.
  gland.axes = Vec3(uni(0.58, 0.68), uni(0.50, 0.58), uni(0.54, 0.64)) * half_fov;
  for (int i = 0; i < 3; ++i) gland.lobes.emplace_back(random_unit(rng), uni(-0.15, 0.12));

  // Rectum: a tube along z behind (-y) the gland.
  const Vec3 gland_posterior = gland.center + gland.rotation * Vec3(0.0, -gland.axes.y(), 0.0);
  const Vec3 rectum_center = gland_posterior + Vec3(0.0, -0.28 * half_fov, 0.0);
  const double rectum_radius = 0.2 * half_fov;

  std::vector<Vec3> calcs;
  for (int i = 0; i < 3; ++i) {
    const Vec3 q = random_unit(rng) * uni(0.1, 0.55);
    calcs.push_back(gland.center + gland.rotation * Vec3(q.x() * gland.axes.x(), q.y() * gland.axes.y(), q.z() * gland.axes.z()));
  }
  const double calc_radius = 0.09 * half_fov;

  const SmoothField mri_bg(rng, 10, 0.4 * half_fov, 1.5 * half_fov);
  const SmoothField mri_gland(rng, 10, 0.25 * half_fov, 0.8 * half_fov);
  const SmoothField us_bg(rng, 10, 0.3 * half_fov, 1.2 * half_fov);
  const SmoothField us_gland(rng, 10, 0.25 * half_fov, 0.8 * half_fov);

  // Ultrasound fan: apex inside the rectum, opening towards the gland.
  const Vec3 apex = rectum_center;
  const Vec3 fan_axis = (gland.center - apex + Vec3(uni(-0.1, 0.1), 0.0, uni(-0.1, 0.1)) * half_fov).normalized();
  const double fan_cos = std::cos(uni(48.0, 58.0) * std::numbers::pi / 180.0);

  CasePair pair;
  pair.fixed_image = Volume(g);
  pair.fixed_label = Volume(g);
  pair.moving_image = Volume(g);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double soft = 0.04;

  for (std::size_t z = 0; z < n; ++z) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const Vec3 p = g.world(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        const double depth = gland.signed_depth(p);
        const double inside = sigmoid(depth / soft);
        const Vec3 rq = p - rectum_center;
        const double rectum_r = std::hypot(rq.x(), rq.y());
        const double in_rectum = sigmoid((rectum_radius - rectum_r) / (0.03 * half_fov));
        const double rectum_wall = std::exp(-std::pow((rectum_r - rectum_radius) / (0.05 * half_fov), 2.0));
        double calc = 0.0;
        for (const auto& c : calcs) calc += std::exp(-(p - c).squaredNorm() / (calc_radius * calc_radius));

        double mri = (1.0 - inside) * (0.35 + 0.06 * mri_bg(p)) + inside * (0.75 + 0.08 * mri_gland(p));
        mri = mri * (1.0 - 0.8 * in_rectum) - 0.35 * calc;
        mri += settings.fixed_noise_sigma * noise(rng);

        const double capsule = std::exp(-std::pow((depth + 0.04) / 0.04, 2.0));  // just outside the mask
        double us = (1.0 - inside) * (0.65 + 0.1 * us_bg(p)) + inside * (0.1 + 0.05 * us_gland(p));
        us = us + 0.55 * capsule + 0.5 * rectum_wall + 0.8 * calc;
        us *= (1.0 - 0.85 * in_rectum);
        us *= std::max(0.0, 1.0 + 0.35 * noise(rng));
        us += settings.moving_noise_sigma * noise(rng);
        const Vec3 from_apex = p - apex;
        const double r = from_apex.norm();
        const bool visible = r > 1e-9 && from_apex.dot(fan_axis) / r >= fan_cos;

        const auto idx = g.index(x, y, z);
        pair.fixed_image.values[idx] = static_cast<float>(mri);
        pair.fixed_label.values[idx] = depth > 0.0 ? 1.0f : 0.0f;
        pair.moving_image.values[idx] = visible ? static_cast<float>(us) : 0.0f;
      }
    }
  }

  pair.moving_surface = extract_surface(pair.fixed_label, "fixed_label");
  pair.truth = RigidTransform::identity(centroid(pair.moving_surface.points));
  return pair;
}

std::vector<InitTransform> draw_inits(std::uint64_t seed, const SurfacePointSet& surface, std::size_t count,
                                      double sre_lo_mm, double sre_hi_mm) {
  if (!(sre_lo_mm >= 0.0) || sre_hi_mm < sre_lo_mm) throw std::invalid_argument("draw_inits: need 0 <= lo <= hi");
  std::vector<InitTransform> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, {i}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double target = sre_lo_mm + (sre_hi_mm - sre_lo_mm) * u(rng);
    out.push_back({sample_perturbation(rng, surface.points, target), target});
  }
  return out;
}

std::vector<CasePair> make_dataset(std::uint64_t master_seed, const DatasetSpec& spec, int jobs) {
  if (!(spec.sre_lo_mm >= 0.0) || spec.sre_lo_mm > spec.sre_hi_mm) {
    throw std::invalid_argument("make_dataset: SRE range needs 0 <= lo <= hi");
  }
  std::vector<CasePair> cases(spec.cases);
  const auto build = [&](std::size_t c) {
    auto pair = generate_phantom_pair(derive_seed(master_seed, {c}), spec.phantom);
    std::ostringstream id;
    id << "case_" << std::setw(3) << std::setfill('0') << c;
    pair.case_id = id.str();
    pair.inits = draw_inits(derive_seed(master_seed, {c, 1}), pair.moving_surface, spec.inits_per_case,
                            spec.sre_lo_mm, spec.sre_hi_mm);
    cases[c] = std::move(pair);
  };
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1) {
    for (std::size_t c = 0; c < spec.cases; ++c) build(c);
    return cases;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t c = w; c < spec.cases; c += workers) build(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return cases;
}

void write_volume(const Volume& vol, const std::filesystem::path& path) {
  vol.geom.validate();
  static_assert(std::endian::native == std::endian::little, "volume payload assumes a little-endian host");
  std::ostringstream h;
  h << std::setprecision(17);
  const auto& g = vol.geom;
  h << "ObjectType = Image\n"
    << "NDims = 3\n"
    << "BinaryData = True\n"
    << "BinaryDataByteOrderMSB = False\n"
    << "CompressedData = False\n"
    << "Offset = " << g.origin[0] << ' ' << g.origin[1] << ' ' << g.origin[2] << '\n'
    << "ElementSpacing = " << g.spacing[0] << ' ' << g.spacing[1] << ' ' << g.spacing[2] << '\n'
    << "DimSize = " << g.extents[0] << ' ' << g.extents[1] << ' ' << g.extents[2] << '\n'
    << "ElementType = MET_FLOAT\n"
    << "ElementDataFile = LOCAL\n";
  std::string bytes = h.str();
  const auto start = bytes.size();
  bytes.resize(start + vol.values.size() * sizeof(float));
  std::memcpy(bytes.data() + start, vol.values.data(), vol.values.size() * sizeof(float));
  write_text(path, bytes);
}

Volume read_volume(const std::filesystem::path& path) {
  const std::string bytes = read_text(path);
  std::map<std::string, std::string> fields;
  std::size_t pos = 0;
  while (true) {
    const auto end = bytes.find('\n', pos);
    if (end == std::string::npos) throw FormatError(path.string() + ": header ends before ElementDataFile");
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": malformed header line '" + line + "'");
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const auto key = trim(line.substr(0, eq));
    fields[key] = trim(line.substr(eq + 1));
    if (key == "ElementDataFile") break;
  }
  const auto need = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError(path.string() + ": header lacks " + key);
    return it->second;
  };
  if (need("NDims") != "3") throw FormatError(path.string() + ": only NDims = 3 is supported");
  const auto& type = need("ElementType");
  if (type != "MET_FLOAT" && type != "float32-LE") throw FormatError(path.string() + ": unsupported ElementType " + type);
  for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"}) {
    if (auto it = fields.find(key); it != fields.end() && it->second != "False") {
      throw FormatError(path.string() + ": big-endian payloads are not supported");
    }
  }
  if (auto it = fields.find("CompressedData"); it != fields.end() && it->second != "False") {
    throw FormatError(path.string() + ": compressed payloads are not supported");
  }

  VolumeGeometry g;
  const auto parse3 = [&](const std::string& key, auto& out) {
    std::istringstream is(need(key));
    for (auto& v : out) {
      if (!(is >> v)) throw FormatError(path.string() + ": bad " + key);
    }
    std::string extra;
    if (is >> extra) throw FormatError(path.string() + ": " + key + " must have exactly 3 values");
  };
  std::array<long long, 3> dims{};
  parse3("DimSize", dims);
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw FormatError(path.string() + ": DimSize must be positive");
    g.extents[a] = static_cast<std::size_t>(dims[a]);
  }
  if (fields.count("ElementSpacing")) parse3("ElementSpacing", g.spacing);
  if (fields.count("Offset")) parse3("Offset", g.origin);
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }

  std::string payload;
  const auto& data_file = need("ElementDataFile");
  if (data_file == "LOCAL") {
    payload = bytes.substr(pos);
  } else {
    payload = read_text(path.parent_path() / data_file);
  }
  const std::size_t expected = g.voxel_count() * sizeof(float);
  if (payload.size() < expected) throw FormatError(path.string() + ": truncated payload");
  if (payload.size() > expected) throw FormatError(path.string() + ": payload longer than DimSize implies");
  Volume vol;
  vol.geom = g;
  vol.values.resize(g.voxel_count());
  std::memcpy(vol.values.data(), payload.data(), expected);
  return vol;
}

std::string transform_to_json(const RigidTransform& t, double target_sre_mm) {
  return transform_json(t, target_sre_mm).dump();
}

RigidTransform transform_from_json(const std::string& text) {
  try {
    return transform_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("transform JSON: ") + e.what());
  }
}

void write_transform(const RigidTransform& t, const std::filesystem::path& path) {
  write_text(path, transform_to_json(t) + "\n");
}

RigidTransform read_transform(const std::filesystem::path& path) { return transform_from_json(read_text(path)); }

void write_dataset(const std::vector<CasePair>& cases, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  for (const auto& c : cases) {
    if (c.case_id.empty()) throw std::invalid_argument("write_dataset: case without an id");
    const auto dir = root / c.case_id;
    std::filesystem::create_directories(dir);
    write_volume(c.fixed_image, dir / "fixed.mhd");
    write_volume(c.fixed_label, dir / "fixed_label.mhd");
    write_volume(c.moving_image, dir / "moving.mhd");
    json inits = json::array();
    for (const auto& init : c.inits) inits.push_back(transform_json(init.transform, init.target_sre_mm));
    write_text(dir / "inits.json", inits.dump(1) + "\n");
  }
}

CasePair read_case(const std::filesystem::path& case_dir) {
  CasePair c;
  c.case_id = case_dir.filename().string();
  c.fixed_image = read_volume(case_dir / "fixed.mhd");
  c.fixed_label = read_volume(case_dir / "fixed_label.mhd");
  c.moving_image = read_volume(case_dir / "moving.mhd");
  if (!c.fixed_image.geom.same_grid(c.fixed_label.geom)) throw FormatError(c.case_id + ": label grid differs from fixed image");
  c.moving_surface = extract_surface(c.fixed_label, "fixed_label");
  c.truth = RigidTransform::identity(centroid(c.moving_surface.points));
  const auto inits_path = case_dir / "inits.json";
  if (std::filesystem::exists(inits_path)) {
    json arr;
    try {
      arr = json::parse(read_text(inits_path));
    } catch (const json::exception& e) {
      throw FormatError(inits_path.string() + ": " + e.what());
    }
    if (!arr.is_array()) throw FormatError(inits_path.string() + ": expected a JSON array");
    for (const auto& j : arr) {
      const double target = j.contains("target_sre_mm") ? j["target_sre_mm"].get<double>() : -1.0;
      c.inits.push_back({transform_from(j), target});
    }
  }
  return c;
}

std::vector<CasePair> read_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw std::runtime_error("dataset root " + root.string() + " is not a directory");
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "fixed.mhd")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<CasePair> cases;
  for (const auto& d : dirs) cases.push_back(read_case(d));
  return cases;
}

}  // namespace xreg
