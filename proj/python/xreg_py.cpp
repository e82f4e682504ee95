#include "cli.hpp"
#include "xreg/explain.hpp"
#include "xreg/metrics.hpp"
#include "xreg/model.hpp"
#include "xreg/selftest.hpp"
#include "xreg/synthdata.hpp"
#include "xreg/training.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace xreg;

namespace {

// Volumes cross the boundary as (z, y, x) float32 arrays.
py::array_t<float> volume_array(const Volume& v) {
  const auto& e = v.geom.extents;
  py::array_t<float> out({e[2], e[1], e[0]});
  std::copy(v.values.begin(), v.values.end(), out.mutable_data());
  return out;
}

Volume make_volume(py::array_t<float, py::array::c_style | py::array::forcecast> values,
                   std::array<double, 3> spacing, std::array<double, 3> origin) {
  if (values.ndim() != 3) throw std::invalid_argument("volume array must be 3-D (z, y, x)");
  VolumeGeometry g;
  g.extents = {static_cast<std::size_t>(values.shape(2)), static_cast<std::size_t>(values.shape(1)),
               static_cast<std::size_t>(values.shape(0))};
  g.spacing = spacing;
  g.origin = origin;
  g.validate();
  Volume v(g);
  std::copy(values.data(), values.data() + values.size(), v.values.begin());
  return v;
}

py::array_t<double> points_array(const std::vector<Vec3>& pts) {
  py::array_t<double> out({pts.size(), std::size_t{3}});
  auto r = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int k = 0; k < 3; ++k) r(i, k) = pts[i][k];
  return out;
}

std::vector<Vec3> points_from(py::array_t<double, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw std::invalid_argument("points must have shape (n, 3)");
  std::vector<Vec3> pts(static_cast<std::size_t>(a.shape(0)));
  const auto r = a.unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = Vec3(r(i, 0), r(i, 1), r(i, 2));
  return pts;
}

Architecture arch_from(const py::kwargs& kw) {
  Architecture a;
  for (const auto& [k, v] : kw) {
    const auto key = k.cast<std::string>();
    if (key == "extent") a.extent = v.cast<std::size_t>();
    else if (key == "extractor_c1") a.extractor_c1 = v.cast<std::size_t>();
    else if (key == "extractor_c2") a.extractor_c2 = v.cast<std::size_t>();
    else if (key == "embed") a.embed = v.cast<std::size_t>();
    else if (key == "registrator_channels") a.registrator_channels = v.cast<std::size_t>();
    else if (key == "registrator_min_extent") a.registrator_min_extent = v.cast<std::size_t>();
    else if (key == "hidden") a.hidden = v.cast<std::size_t>();
    else if (key == "attention") a.attention = v.cast<bool>();
    else throw std::invalid_argument("unknown architecture field '" + key + "'");
  }
  a.validate();
  return a;
}

py::dict log_row(const EpochLog& e) {
  py::dict d;
  d["epoch"] = e.epoch;
  d["lr"] = e.lr;
  d["train_loss"] = e.train_loss;
  d["val_mean_sre"] = e.val_mean_sre;
  d["val_std_sre"] = e.val_std_sre;
  d["skipped_batches"] = e.skipped_batches;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cross-modal attention rigid registration core";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);

  py::enum_<FixedInput>(m, "FixedInput").value("Image", FixedInput::Image).value("Label", FixedInput::Label);
  py::enum_<AttentionBlock>(m, "AttentionBlock").value("A", AttentionBlock::A).value("B", AttentionBlock::B);

  py::class_<RigidTransform>(m, "RigidTransform")
      .def(py::init([](std::array<double, 3> t_mm, std::array<double, 3> a_deg, const Vec3& center) {
             return RigidTransform(RigidParams{t_mm, a_deg}, center);
           }),
           py::arg("t_mm") = std::array<double, 3>{0, 0, 0}, py::arg("a_deg") = std::array<double, 3>{0, 0, 0},
           py::arg("center") = Vec3(Vec3::Zero()))
      .def_static("identity", &RigidTransform::identity, py::arg("center") = Vec3(Vec3::Zero()))
      .def_static("from_matrix", &RigidTransform::from_matrix, py::arg("matrix"), py::arg("center"))
      .def_property_readonly("t_mm", [](const RigidTransform& t) { return t.params().t_mm; })
      .def_property_readonly("a_deg", [](const RigidTransform& t) { return t.params().a_deg; })
      .def_property_readonly("center", &RigidTransform::center)
      .def_property_readonly("matrix", &RigidTransform::matrix)
      .def("apply", [](const RigidTransform& t, py::array_t<double> pts) {
        return points_array(apply_to_points(t, points_from(pts)));
      })
      .def("to_json", [](const RigidTransform& t) { return transform_to_json(t); })
      .def_static("from_json", &transform_from_json);

  m.def("compose", &compose, "Matrix product a * b; keeps b's center");
  m.def("invert", &invert);

  py::class_<Volume>(m, "Volume")
      .def(py::init(&make_volume), py::arg("values"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
           py::arg("origin") = std::array<double, 3>{0, 0, 0})
      .def_property_readonly("extents", [](const Volume& v) { return v.geom.extents; })
      .def_property_readonly("spacing", [](const Volume& v) { return v.geom.spacing; })
      .def_property_readonly("origin", [](const Volume& v) { return v.geom.origin; })
      .def_property_readonly("center", [](const Volume& v) { return v.geom.center(); })
      .def("array", &volume_array, "Copy of the voxels as a (z, y, x) array");

  m.def("read_volume", &read_volume);
  m.def("write_volume", &write_volume);
  m.def("resample_volume", [](const Volume& moving, const RigidTransform& t, const Volume& grid) {
    return resample_volume(moving, t, grid.geom);
  });
  m.def("extract_surface", [](const Volume& label) { return points_array(extract_surface(label).points); });
  m.def("sre", [](py::array_t<double> surface, const RigidTransform& truth, const RigidTransform& estimate) {
    return sre(points_from(surface), truth, estimate);
  });

  py::class_<InitTransform>(m, "InitTransform")
      .def_readonly("transform", &InitTransform::transform)
      .def_readonly("target_sre_mm", &InitTransform::target_sre_mm);

  py::class_<CasePair>(m, "CasePair")
      .def_readonly("case_id", &CasePair::case_id)
      .def_readonly("fixed_image", &CasePair::fixed_image)
      .def_readonly("fixed_label", &CasePair::fixed_label)
      .def_readonly("moving_image", &CasePair::moving_image)
      .def_property_readonly("moving_surface", [](const CasePair& c) { return points_array(c.moving_surface.points); })
      .def_readonly("truth", &CasePair::truth)
      .def_readonly("inits", &CasePair::inits)
      .def("sre", [](const CasePair& c, const RigidTransform& t) { return sre(c.moving_surface, c.truth, t); });

  m.def("generate_phantom_pair",
        [](std::uint64_t seed, std::size_t extent, double spacing) {
          PhantomSettings s;
          s.extent = extent;
          s.spacing_mm = spacing;
          return generate_phantom_pair(seed, s);
        },
        py::arg("seed"), py::arg("extent") = 32, py::arg("spacing") = 1.5);
  m.def("make_dataset",
        [](std::uint64_t seed, std::size_t cases, std::size_t inits, double lo, double hi, std::size_t extent,
           double spacing, int jobs) {
          DatasetSpec spec;
          spec.cases = cases;
          spec.inits_per_case = inits;
          spec.sre_lo_mm = lo;
          spec.sre_hi_mm = hi;
          spec.phantom.extent = extent;
          spec.phantom.spacing_mm = spacing;
          py::gil_scoped_release release;
          return make_dataset(seed, spec, jobs);
        },
        py::arg("seed"), py::arg("cases") = 8, py::arg("inits") = 5, py::arg("sre_lo") = 0.0,
        py::arg("sre_hi") = 20.0, py::arg("extent") = 32, py::arg("spacing") = 1.5, py::arg("jobs") = 1);
  m.def("write_dataset", &write_dataset);
  m.def("read_dataset", &read_dataset);

  py::class_<Network<float>>(m, "Network")
      .def(py::init([](std::uint64_t seed, const py::kwargs& kw) { return Network<float>(arch_from(kw), seed); }),
           py::arg("seed") = 0)
      .def_property_readonly("arch", [](const Network<float>& n) { return n.arch().to_text(); })
      .def("parameter_count", &Network<float>::parameter_count)
      .def("attention_parameter_count", &Network<float>::attention_parameter_count)
      .def("zero_head", &Network<float>::zero_head)
      .def("save", [](const Network<float>& n, const std::filesystem::path& p, FixedInput kind) { save_model(n, kind, p); },
           py::arg("path"), py::arg("fixed_input") = FixedInput::Image);
  m.def("load_model", [](const std::filesystem::path& p) {
    auto tm = load_model(p);
    return py::make_tuple(std::move(tm.net), tm.fixed_input);
  });

  m.def("register_pair", &register_pair, py::arg("net"), py::arg("fixed"), py::arg("moving"), py::arg("init"));
  m.def("cascade_register",
        [](const Network<float>& s1, const Network<float>& s2, const Volume& f, const Volume& mv,
           const RigidTransform& init) { return cascade_register(Cascade{&s1, &s2}, f, mv, init); });

  m.def("train",
        [](const std::string& config_json, const std::vector<CasePair>& train, const std::vector<CasePair>& val,
           const std::function<void(py::dict)>& on_epoch) {
          const auto cfg = TrainConfig::from_json(config_json);
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = train_stage(cfg, train, val, [&](const EpochLog& e) {
              if (!on_epoch) return;
              py::gil_scoped_acquire acquire;
              on_epoch(log_row(e));
            });
          }
          py::list log;
          for (const auto& e : r.log) log.append(log_row(e));
          return py::make_tuple(std::move(r.best), r.best_epoch, log);
        },
        py::arg("config_json"), py::arg("train"), py::arg("val"), py::arg("on_epoch") = nullptr,
        "Train one stage; config keys as in the CLI's config.json. Returns (network, best_epoch, log).");

  py::class_<EvalReport>(m, "EvalReport")
      .def("results", &EvalReport::results, py::arg("stage") = 1)
      .def("to_csv", &EvalReport::to_csv)
      .def("summary_text", &EvalReport::summary_text)
      .def_property_readonly("result_means", [](const EvalReport& r) {
        std::vector<double> out;
        for (const auto& s : r.result_summary) out.push_back(s.mean);
        return out;
      });
  m.def("evaluate",
        [](const std::vector<const Network<float>*>& stages, const std::vector<CasePair>& cases, FixedInput kind,
           int jobs) {
          py::gil_scoped_release release;
          return evaluate(stages, cases, kind, jobs);
        },
        py::arg("stages"), py::arg("cases"), py::arg("fixed_input") = FixedInput::Image, py::arg("jobs") = 1);

  m.def("paired_t_test", [](const std::vector<double>& a, const std::vector<double>& b) {
    const auto t = paired_t_test(a, b);
    py::dict d;
    d["t"] = t.t;
    d["p_less"] = t.p_less;
    d["p_two_sided"] = t.p_two_sided;
    d["mean_diff"] = t.mean_diff;
    return d;
  });

  m.def("gradcam",
        [](const Network<float>& net, const Volume& fixed, const Volume& moving, const RigidTransform& init,
           AttentionBlock block) {
          const auto s = gradcam(net, fixed, moving, init, block);
          py::array_t<double> out({s.extents[2], s.extents[1], s.extents[0]});
          std::copy(s.values.begin(), s.values.end(), out.mutable_data());
          return out;
        },
        "Saliency over the attention block output as a (z, y, x) array in [0, 1].");

  m.def("selftest", [](bool full) {
    py::list out;
    for (const auto& r : run_selftest(full)) {
      py::dict d;
      d["name"] = r.name;
      d["passed"] = r.passed;
      d["error"] = r.error;
      d["tolerance"] = r.tolerance;
      out.append(d);
    }
    return out;
  }, py::arg("full") = false);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    py::gil_scoped_release release;
    return run_cli(args);
  }, "Run the command line with the given arguments; returns the exit code.");
}
