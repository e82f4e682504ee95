// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Pass criterion numbers as arguments to run a subset.

#include "cli.hpp"
#include "oracles.hpp"
#include "xreg/explain.hpp"
#include "xreg/metrics.hpp"
#include "xreg/model.hpp"
#include "xreg/ops.hpp"
#include "xreg/synthdata.hpp"
#include "xreg/training.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

using namespace xreg;
namespace fs = std::filesystem;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

// Tolerances and budgets.
constexpr double kAttentionRelErr = 1e-5;
constexpr double kAttentionSeconds = 10.0;
constexpr double kFdStep = 1e-4;
constexpr double kFdRelErr = 1e-3;
constexpr std::size_t kFdSamples = 50;
constexpr double kFdCentralFraction = 0.9;
constexpr double kGradSeconds = 300.0;
constexpr double kGeometryAbs = 1e-9;
constexpr double kSamplerRel = 0.01;
constexpr double kOverfitSre = 2.0;
constexpr int kOverfitMaxEpochs = 300;
constexpr double kOverfitSeconds = 1800.0;
constexpr double kAblationAlpha = 0.05;
constexpr double kAttentionShare = 0.01;

// Synthetic benchmark shared by the ablation and cascade criteria.
struct Benchmark {
  std::uint64_t train_seed = 1001, val_seed = 1002, test_seed = 1003;
  std::size_t train_cases = 32, val_cases = 4, val_inits = 5, test_cases = 8, test_inits = 10;
  TrainConfig stage1() const {
    TrainConfig c;
    c.seed = 17;
    c.lr_init = 1e-3;
    c.lr_gamma = 0.9;
    c.lr_step_epochs = 20;
    c.max_epochs = 200;
    c.samples_per_case = 2;
    c.val_every = 10;
    c.sre_lo_mm = 0.0;
    c.sre_hi_mm = 20.0;
    return c;
  }
  TrainConfig stage2() const {
    auto c = stage1();
    c.seed = 18;
    c.sre_lo_mm = 0.0;
    c.sre_hi_mm = 8.0;
    return c;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// 1 ------------------------------------------------------------------------
Outcome attention_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  const std::size_t C = 32, E = 16, S = 64;
  const auto p = oracle::tensor<float>(rng, {1, C, 4, 4, 4});
  const auto c = oracle::tensor<float>(rng, {1, C, 4, 4, 4});
  const AttentionParams<float> ap{oracle::tensor<float>(rng, {C, E}, false, 0.3),
                                  oracle::tensor<float>(rng, {C, E}, false, 0.3),
                                  oracle::tensor<float>(rng, {C, C}, false, 0.3)};
  const auto z = cross_modal_attention<float>(nullptr, p, c, ap);
  const auto ref = oracle::attention(oracle::values(p), oracle::values(c), oracle::values(ap.theta),
                                     oracle::values(ap.phi), oracle::values(ap.g), C, S, E);
  const double err = oracle::rel_err(oracle::values(z), ref);
  const double secs = seconds_since(t0);
  return {err <= kAttentionRelErr && secs < kAttentionSeconds,
          "rel err " + fmt(err) + " (<= " + fmt(kAttentionRelErr) + "), " + fmt(secs) + " s"};
}

// 2 ------------------------------------------------------------------------
struct GradTally {
  double worst = 0.0;
  std::string where;
  std::size_t central = 0, total = 0;
  std::vector<std::string> failed;

  void add(const std::string& name, const oracle::FdReport& r) {
    const std::size_t n = r.central + r.one_sided + r.skipped;
    central += r.central;
    total += n;
    if (r.worst > worst) {
      worst = r.worst;
      where = name + ":" + r.where;
    }
    if (r.worst > kFdRelErr || double(r.central) < kFdCentralFraction * double(n)) failed.push_back(name);
  }
};

using Leaves = std::vector<std::pair<std::string, TD>>;

oracle::FdReport fd(const Leaves& leaves, const std::function<TD(Tape<double>*)>& out, std::uint64_t seed) {
  // Contract every output with fixed random weights so all entries matter.
  auto probe = std::make_shared<TD>();
  const auto loss = [out, probe, seed](Tape<double>* t) {
    const auto y = out(t);
    if (!probe->defined()) {
      std::mt19937_64 r(seed);
      *probe = oracle::tensor<double>(r, y.shape());
    }
    return ops::sum(t, ops::mul(t, y, *probe));
  };
  return oracle::finite_difference(leaves, loss, kFdSamples, kFdStep, seed);
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(202);
  GradTally tally;
  const TD none;
  {
    auto x = oracle::tensor<double>(rng, {2, 3, 8, 8, 8}, true);
    auto w = oracle::tensor<double>(rng, {4, 3, 3, 3, 3}, true, 0.3);
    auto b = oracle::tensor<double>(rng, {4}, true);
    tally.add("conv3d", fd({{"x", x}, {"w", w}, {"b", b}}, [=](Tape<double>* t) { return ops::conv3d(t, x, w, b, 1, 1); }, 1));
    tally.add("conv3d/2", fd({{"x", x}, {"w", w}, {"b", b}}, [=](Tape<double>* t) { return ops::conv3d(t, x, w, b, 2, 1); }, 2));
    tally.add("relu", fd({{"x", x}}, [=](Tape<double>* t) { return ops::relu(t, x); }, 3));
    tally.add("maxpool3d", fd({{"x", x}}, [=](Tape<double>* t) { return ops::maxpool3d(t, x, 2, 2); }, 4));
    auto y = oracle::tensor<double>(rng, {2, 2, 8, 8, 8}, true);
    tally.add("concat", fd({{"x", x}, {"y", y}}, [=](Tape<double>* t) { return ops::concat_channels(t, x, y); }, 5));
    tally.add("to_sites", fd({{"x", x}}, [=](Tape<double>* t) { return ops::to_sites(t, x); }, 6));
  }
  {
    auto x = oracle::tensor<double>(rng, {4, 16}, true);
    auto w = oracle::tensor<double>(rng, {16, 6}, true, 0.3);
    auto b = oracle::tensor<double>(rng, {6}, true);
    tally.add("linear", fd({{"x", x}, {"w", w}, {"b", b}}, [=](Tape<double>* t) { return ops::linear(t, x, w, b); }, 7));
    tally.add("linear/nobias", fd({{"x", x}, {"w", w}}, [=](Tape<double>* t) { return ops::linear(t, x, w, none); }, 8));
    auto l = oracle::tensor<double>(rng, {8, 8}, true, 2.0);
    auto m = oracle::tensor<double>(rng, {8, 8}, true);
    tally.add("softmax", fd({{"l", l}}, [=](Tape<double>* t) { return ops::softmax_rows(t, l); }, 9));
    tally.add("exp", fd({{"l", l}}, [=](Tape<double>* t) { return ops::exp(t, l); }, 10));
    tally.add("mul", fd({{"l", l}, {"m", m}}, [=](Tape<double>* t) { return ops::mul(t, l, m); }, 11));
    tally.add("add", fd({{"l", l}, {"m", m}}, [=](Tape<double>* t) { return ops::add(t, l, m); }, 12));
    tally.add("mse", fd({{"l", l}, {"m", m}}, [=](Tape<double>* t) { return ops::mse_loss(t, l, m); }, 13));
    auto a3 = oracle::tensor<double>(rng, {2, 8, 5}, true);
    auto b3 = oracle::tensor<double>(rng, {2, 5, 8}, true);
    auto c3 = oracle::tensor<double>(rng, {2, 8, 5}, true);
    tally.add("bmm", fd({{"a", a3}, {"b", b3}}, [=](Tape<double>* t) { return ops::bmm(t, a3, b3); }, 14));
    tally.add("bmm_nt", fd({{"a", a3}, {"c", c3}}, [=](Tape<double>* t) { return ops::bmm_nt(t, a3, c3); }, 15));
  }
  {
    const std::size_t C = 8, E = 4;
    auto p = oracle::tensor<double>(rng, {2, C, 2, 2, 2}, true);
    auto c = oracle::tensor<double>(rng, {2, C, 2, 2, 2}, true);
    const AttentionParams<double> ap{oracle::tensor<double>(rng, {C, E}, true, 0.3),
                                     oracle::tensor<double>(rng, {C, E}, true, 0.3),
                                     oracle::tensor<double>(rng, {C, C}, true, 0.3)};
    tally.add("attention", fd({{"p", p}, {"c", c}, {"theta", ap.theta}, {"phi", ap.phi}, {"g", ap.g}},
                              [=](Tape<double>* t) { return cross_modal_attention(t, p, c, ap); }, 16));
  }
  for (const bool attention : {true, false}) {
    Architecture arch;
    arch.extent = 8;
    arch.attention = attention;
    Network<double> net(arch, 303);
    auto f = oracle::tensor<double>(rng, {2, 1, 8, 8, 8});
    auto m = oracle::tensor<double>(rng, {2, 1, 8, 8, 8});
    auto target = oracle::tensor<double>(rng, {2, 6});
    const auto rep = oracle::finite_difference(
        net.named_parameters(),
        [&](Tape<double>* t) { return ops::mse_loss(t, net.forward(t, f, m).prediction, target); }, kFdSamples,
        kFdStep, attention ? 17 : 18);
    tally.add(attention ? "network" : "network/ablation", rep);
  }
  const double secs = seconds_since(t0);
  std::string detail = "worst rel err " + fmt(tally.worst) + " at " + tally.where + ", " +
                       std::to_string(tally.central) + "/" + std::to_string(tally.total) + " central, " + fmt(secs) +
                       " s";
  for (const auto& f : tally.failed) detail += "; FAILED " + f;
  return {tally.failed.empty() && secs < kGradSeconds, detail};
}

// 3 ------------------------------------------------------------------------
Outcome residual_identity() {
  std::mt19937_64 rng(404);
  const std::size_t C = 32;
  const auto p = oracle::tensor<float>(rng, {2, C, 4, 4, 4});
  const auto c = oracle::tensor<float>(rng, {2, C, 4, 4, 4});
  const AttentionParams<float> ap{oracle::tensor<float>(rng, {C, 16}), oracle::tensor<float>(rng, {C, 16}),
                                  TF::zeros({C, C})};
  const auto z = cross_modal_attention<float>(nullptr, p, c, ap);
  const bool same = z.shape() == p.shape() && std::equal(z.data().begin(), z.data().end(), p.data().begin());
  return {same, same ? "Z == P bitwise" : "Z differs from P"};
}

// 4 ------------------------------------------------------------------------
Outcome geometry_exactness() {
  const auto pair = generate_phantom_pair(505);
  const auto& surface = pair.moving_surface;
  const Vec3 c = pair.truth.center();
  std::mt19937_64 rng(506);
  std::uniform_real_distribution<double> u(-15.0, 15.0), ua(-60.0, 60.0);

  double translation_err = 0.0, roundtrip_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    const RigidParams tp{{u(rng), u(rng), u(rng)}, {0, 0, 0}};
    const auto t = make_transform(tp, c);
    const double norm = std::sqrt(tp.t_mm[0] * tp.t_mm[0] + tp.t_mm[1] * tp.t_mm[1] + tp.t_mm[2] * tp.t_mm[2]);
    translation_err = std::max(translation_err, std::abs(sre(surface, pair.truth, t) - norm));

    const auto a = make_transform({{u(rng), u(rng), u(rng)}, {ua(rng), ua(rng), ua(rng)}}, c);
    const auto b = make_transform({{u(rng), u(rng), u(rng)}, {ua(rng), ua(rng), ua(rng)}}, c);
    const Mat4 ab = compose(a, b).matrix();
    roundtrip_err = std::max(roundtrip_err, (compose(invert(a), a).matrix() - Mat4::Identity()).cwiseAbs().maxCoeff());
    roundtrip_err = std::max(roundtrip_err, (compose(a, invert(a)).matrix() - Mat4::Identity()).cwiseAbs().maxCoeff());
    roundtrip_err = std::max(roundtrip_err, (compose(compose(a, b), invert(b)).matrix() - a.matrix()).cwiseAbs().maxCoeff());
    roundtrip_err = std::max(roundtrip_err, (ab - a.matrix() * b.matrix()).cwiseAbs().maxCoeff());
  }

  double sampler_worst = 0.0;
  for (const double target : {4.0, 8.0, 12.0, 16.0, 20.0}) {
    std::mt19937_64 srng(derive_seed(507, {static_cast<std::uint64_t>(target)}));
    for (int i = 0; i < 100; ++i) {
      const auto t = sample_perturbation(srng, surface.points, target);
      sampler_worst = std::max(sampler_worst, std::abs(sre(surface, pair.truth, t) - target) / target);
    }
  }
  const bool pass = translation_err <= kGeometryAbs && roundtrip_err <= kGeometryAbs && sampler_worst <= kSamplerRel;
  return {pass, "translation " + fmt(translation_err) + ", round trip " + fmt(roundtrip_err) + " (<= " +
                    fmt(kGeometryAbs) + "), sampler rel " + fmt(sampler_worst) + " (<= " + fmt(kSamplerRel) + ")"};
}

// 5 ------------------------------------------------------------------------
Outcome overfit_probe() {
  const auto t0 = std::chrono::steady_clock::now();
  DatasetSpec spec;
  spec.cases = 8;
  spec.inits_per_case = 5;
  spec.sre_lo_mm = 0.0;
  spec.sre_hi_mm = 20.0;
  const auto cases = make_dataset(606, spec);
  TrainConfig cfg;
  cfg.seed = 607;
  cfg.lr_init = 1e-3;
  cfg.lr_gamma = 0.9;
  cfg.lr_step_epochs = 20;
  cfg.max_epochs = 120;
  cfg.fresh_inits = false;
  cfg.val_every = 5;
  const auto result = train_stage(cfg, cases, cases, [&](const EpochLog& e) {
    if (e.epoch % 10 == 0) {
      std::cout << "  overfit epoch " << e.epoch << " loss " << e.train_loss << " train SRE " << e.val_mean_sre
                << " mm, " << seconds_since(t0) << " s" << std::endl;
    }
  });
  const auto report = evaluate({&result.best}, cases, cfg.fixed_input);
  const double final_sre = report.result_summary[0].mean;
  const double secs = seconds_since(t0);
  const bool pass = final_sre < kOverfitSre && cfg.max_epochs <= kOverfitMaxEpochs && secs < kOverfitSeconds;
  return {pass, "training-set SRE " + fmt(report.init_summary[0].mean) + " -> " + fmt(final_sre) + " mm (< " +
                    fmt(kOverfitSre) + "), " + std::to_string(cfg.max_epochs) + " epochs, best " +
                    std::to_string(result.best_epoch) + ", " + fmt(secs) + " s"};
}

// 6, 7 ---------------------------------------------------------------------
struct BenchmarkRun {
  bool done = false;
  std::vector<double> attention, feature, cascade;
  double init_mean = 0.0;
  Summary attention_summary, feature_summary, cascade_summary;
};

BenchmarkRun& benchmark() {
  static BenchmarkRun run;
  if (run.done) return run;
  const Benchmark b;
  DatasetSpec tr;
  tr.cases = b.train_cases;
  tr.inits_per_case = 0;
  const auto train = make_dataset(b.train_seed, tr);
  DatasetSpec va;
  va.cases = b.val_cases;
  va.inits_per_case = b.val_inits;
  DatasetSpec te;
  te.cases = b.test_cases;
  te.inits_per_case = b.test_inits;
  const auto test = make_dataset(b.test_seed, te);

  const auto t0 = std::chrono::steady_clock::now();
  const auto train_one = [&](TrainConfig cfg, bool attention, const std::string& tag) {
    cfg.arch.attention = attention;
    va.sre_lo_mm = cfg.sre_lo_mm;
    va.sre_hi_mm = cfg.sre_hi_mm;
    const auto val = make_dataset(b.val_seed, va);
    auto r = train_stage(cfg, train, val, [&](const EpochLog& e) {
      if (e.epoch % 20 == 0) {
        std::cout << "  " << tag << " epoch " << e.epoch << " loss " << e.train_loss << " val SRE " << e.val_mean_sre
                  << " mm, " << seconds_since(t0) << " s" << std::endl;
      }
    });
    return r.best;
  };
  const auto attention = train_one(b.stage1(), true, "attention-reg");
  const auto feature = train_one(b.stage1(), false, "feature-reg");
  const auto stage2 = train_one(b.stage2(), true, "attention-reg stage 2");

  const auto ra = evaluate({&attention}, test, FixedInput::Image);
  const auto rf = evaluate({&feature}, test, FixedInput::Image);
  const auto rc = evaluate({&attention, &stage2}, test, FixedInput::Image);
  run.attention = ra.results(1);
  run.feature = rf.results(1);
  run.cascade = rc.results(2);
  run.init_mean = ra.init_summary[0].mean;
  run.attention_summary = ra.result_summary[0];
  run.feature_summary = rf.result_summary[0];
  run.cascade_summary = rc.result_summary[1];
  run.done = true;
  return run;
}

Outcome ablation_trend() {
  const auto& r = benchmark();
  const auto t = paired_t_test(r.attention, r.feature);
  const bool pass = r.attention_summary.mean <= r.feature_summary.mean && t.p_less < kAblationAlpha;
  return {pass, "init " + fmt(r.init_mean) + " mm; Attention-Reg " + fmt(r.attention_summary.mean) + " +/- " +
                    fmt(r.attention_summary.std) + " mm vs Feature-Reg " + fmt(r.feature_summary.mean) + " +/- " +
                    fmt(r.feature_summary.std) + " mm; paired t " + fmt(t.t) + ", one-sided p " + fmt(t.p_less) +
                    " (< " + fmt(kAblationAlpha) + ")"};
}

Outcome cascade_trend() {
  const auto& r = benchmark();
  const bool pass = r.cascade_summary.mean <= r.attention_summary.mean;
  return {pass, "one stage " + fmt(r.attention_summary.mean) + " mm, two stages " + fmt(r.cascade_summary.mean) +
                    " mm"};
}

// 8 ------------------------------------------------------------------------
Outcome parameter_accounting() {
  const Network<float> net(Architecture{}, 0);
  const double share = double(net.attention_parameter_count()) / double(net.parameter_count());
  Architecture ablated;
  ablated.attention = false;
  const Network<float> feature(ablated, 0);
  const bool consistent = net.parameter_count() - feature.parameter_count() == net.attention_parameter_count();
  return {share < kAttentionShare && consistent,
          std::to_string(net.attention_parameter_count()) + " of " + std::to_string(net.parameter_count()) + " = " +
              fmt(100.0 * share) + "% (< " + fmt(100.0 * kAttentionShare) + "%)"};
}

// 9 ------------------------------------------------------------------------
std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

Outcome determinism() {
  const auto root = oracle::scratch_dir("acceptance_determinism");
  {
    std::ofstream cfg(root / "cfg.json");
    cfg << R"({"arch": "extent=16 extractor_c1=4 extractor_c2=8 embed=4 registrator_channels=8 hidden=32",)"
        << R"( "lr_init": 0.001, "batch_size": 4, "samples_per_case": 2})";
  }
  const auto run = [&](const std::string& tag) {
    const auto dir = root / tag;
    const std::string seed = "42";
    int rc = run_cli({"gen-data", "--seed", seed, "--cases", "4", "--extent", "16", "--spacing", "3", "--inits", "3",
                      "--jobs", "2", "--out", (dir / "data").string()});
    rc |= run_cli({"train", "--seed", seed, "--config", (root / "cfg.json").string(), "--data",
                   (dir / "data").string(), "--epochs", "3", "--out", (dir / "train").string()});
    rc |= run_cli({"eval", "--checkpoint", (dir / "train" / "model.ckpt").string(), "--data",
                   (dir / "data").string(), "--out", (dir / "eval").string()});
    return rc;
  };
  const int rc = run("a") | run("b");
  const auto a = tree_bytes(root / "a"), b = tree_bytes(root / "b");
  std::vector<std::string> differ;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) differ.push_back(name);
  }
  const bool pass = rc == 0 && !a.empty() && a.size() == b.size() && differ.empty();
  std::string detail = std::to_string(a.size()) + " files compared (dataset, checkpoint, log, eval)";
  if (rc != 0) detail += "; a command failed";
  for (const auto& d : differ) detail += "; differs: " + d;
  return {pass, detail};
}

// 10 -----------------------------------------------------------------------
Outcome gradcam_contract() {
  const auto pair = generate_phantom_pair(1010);
  const auto inits = draw_inits(1011, pair.moving_surface, 3, 4.0, 16.0);
  Network<float> net(Architecture{}, 1012);
  const std::array<std::size_t, 3> extents{8, 8, 8};
  bool ok = true;
  std::string issues;
  for (const auto& init : inits) {
    for (const auto block : {AttentionBlock::A, AttentionBlock::B}) {
      const auto s = gradcam(net, pair.fixed_image, pair.moving_image, init.transform, block);
      const double lo = *std::min_element(s.values.begin(), s.values.end());
      const double hi = *std::max_element(s.values.begin(), s.values.end());
      if (s.extents != extents || s.values.size() != 512) ok = false, issues += "; wrong extents";
      if (lo < 0.0) ok = false, issues += "; negative value";
      if (s.all_zero || hi != 1.0) ok = false, issues += "; not normalized to max 1";
    }
  }
  net.zero_head();
  for (const auto block : {AttentionBlock::A, AttentionBlock::B}) {
    const auto s = gradcam(net, pair.fixed_image, pair.moving_image, inits[0].transform, block);
    const bool zero = std::all_of(s.values.begin(), s.values.end(), [](double v) { return v == 0.0; });
    if (!s.all_zero || !zero) ok = false, issues += "; zero head gave a nonzero map";
  }
  return {ok, "6 maps of 8x8x8 in [0,1] with max 1; zero head gives all-zero maps" + issues};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"attention oracle equivalence", attention_oracle},
      {"gradient suite", gradient_suite},
      {"residual identity", residual_identity},
      {"geometry exactness", geometry_exactness},
      {"overfit probe", overfit_probe},
      {"ablation trend", ablation_trend},
      {"cascade trend", cascade_trend},
      {"parameter accounting", parameter_accounting},
      {"determinism", determinism},
      {"grad-cam contract", gradcam_contract},
  };
  int failures = 0;
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::ostringstream line;
    line << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << ": " << criteria[i].first << ": " << o.detail;
    lines.push_back(line.str());
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << "\n";
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
