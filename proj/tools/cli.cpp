#include "cli.hpp"

#include "xreg/explain.hpp"
#include "xreg/selftest.hpp"
#include "xreg/training.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace xreg {

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = "xreg_out";
  int jobs = 1;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

fs::path out_dir(const Globals& g) {
  fs::create_directories(g.out);
  return g.out;
}

struct TrainFlags {
  std::string data, val;
  std::vector<double> stage_range;
  std::string fixed_input;
  int epochs = -1;
  int batch = -1;
  double lr = -1.0;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--data", f.data, "Training dataset directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--val", f.val, "Validation dataset (default: the training cases' stored inits)")
      ->check(CLI::ExistingDirectory);
  cmd->add_option("--stage-range", f.stage_range, "Training SRE range in mm: lo hi")->expected(2)->delimiter(',');
  cmd->add_option("--fixed-input", f.fixed_input, "Fixed network input")->check(CLI::IsMember({"image", "label"}));
  cmd->add_option("--epochs", f.epochs, "Maximum epochs")->check(CLI::NonNegativeNumber);
  cmd->add_option("--batch", f.batch, "Minibatch size")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "Initial learning rate")->check(CLI::PositiveNumber);
}

// Precedence: defaults < --config < explicit flags.
TrainConfig train_config(const Globals& g, const CLI::App& root, const TrainFlags& f) {
  TrainConfig cfg;
  cfg.seed = g.seed;
  if (!g.config.empty()) cfg = TrainConfig::from_json(read_text(g.config), cfg);
  if (root.count("--seed") > 0) cfg.seed = g.seed;
  if (f.stage_range.size() == 2) {
    cfg.sre_lo_mm = f.stage_range[0];
    cfg.sre_hi_mm = f.stage_range[1];
  }
  if (!f.fixed_input.empty()) cfg.fixed_input = parse_fixed_input(f.fixed_input);
  if (f.epochs >= 0) cfg.max_epochs = f.epochs;
  if (f.batch > 0) cfg.batch_size = f.batch;
  if (f.lr > 0) cfg.lr_init = f.lr;
  cfg.validate();
  return cfg;
}

TrainResult run_training(const TrainConfig& cfg, const TrainFlags& f, const std::string& tag) {
  const auto train = read_dataset(f.data);
  const auto val = f.val.empty() ? train : read_dataset(f.val);
  std::cout << tag << ": training on " << train.size() << " cases, validating on " << val.size() << "\n";
  return train_stage(cfg, train, val, [&](const EpochLog& e) {
    std::cout << tag << " epoch " << e.epoch << " lr " << e.lr << " loss " << e.train_loss << " val SRE "
              << e.val_mean_sre << " +/- " << e.val_std_sre << "\n";
  });
}

int cmd_gen_data(const Globals& g, std::size_t cases, std::size_t extent, double spacing, std::size_t inits,
                 double lo, double hi) {
  DatasetSpec spec;
  spec.cases = cases;
  spec.inits_per_case = inits;
  spec.sre_lo_mm = lo;
  spec.sre_hi_mm = hi;
  spec.phantom.extent = extent;
  spec.phantom.spacing_mm = spacing;
  const auto data = make_dataset(g.seed, spec, g.jobs);
  write_dataset(data, out_dir(g));
  std::cout << "wrote " << data.size() << " cases to " << g.out << "\n";
  return 0;
}

int cmd_train(const Globals& g, const CLI::App& root, const TrainFlags& f, bool feature_reg) {
  auto cfg = train_config(g, root, f);
  cfg.arch.attention = !feature_reg;
  const auto dir = out_dir(g);
  const auto result = run_training(cfg, f, feature_reg ? "feature-reg" : "attention-reg");
  save_model(result.best, cfg.fixed_input, dir / "model.ckpt");
  write_training_log(result.log, dir / "train_log.csv");
  write_text(dir / "config.json", cfg.to_json() + "\n");
  std::cout << "best epoch " << result.best_epoch << " val mean SRE " << result.best_val_mean_sre << " mm\n";
  return 0;
}

int cmd_register(const Globals& g, const std::string& ckpt, const std::string& fixed, const std::string& moving,
                 const std::string& init, std::string out_transform) {
  const auto model = load_model(ckpt);
  const auto f = read_volume(fixed);
  const auto m = read_volume(moving);
  const auto start = init.empty() ? RigidTransform::identity(f.geom.center()) : read_transform(init);
  const auto result = register_pair(model.net, f, m, start);
  if (out_transform.empty()) out_transform = (out_dir(g) / "transform.json").string();
  write_transform(result, out_transform);
  std::cout << transform_to_json(result) << "\n";
  return 0;
}

void write_report(const EvalReport& r, const fs::path& dir, const std::string& stem) {
  write_text(dir / (stem + ".csv"), r.to_csv());
  write_text(dir / (stem + "_summary.txt"), r.summary_text());
  std::cout << r.summary_text();
}

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& data, const std::string& kind) {
  const auto model = load_model(ckpt);
  const auto cases = read_dataset(data);
  const auto fixed = kind.empty() ? model.fixed_input : parse_fixed_input(kind);
  write_report(evaluate({&model.net}, cases, fixed, g.jobs), out_dir(g), "eval");
  return 0;
}

int cmd_cascade(const Globals& g, const std::string& s1, const std::string& s2, const std::string& data) {
  const auto m1 = load_model(s1);
  const auto m2 = load_model(s2);
  if (m1.fixed_input != m2.fixed_input) throw std::runtime_error("cascade stages were trained on different fixed inputs");
  const auto cases = read_dataset(data);
  write_report(evaluate({&m1.net, &m2.net}, cases, m1.fixed_input, g.jobs), out_dir(g), "cascade_eval");
  return 0;
}

int cmd_ablate(const Globals& g, const CLI::App& root, const TrainFlags& f, const std::string& test) {
  auto cfg = train_config(g, root, f);
  const auto dir = out_dir(g);
  const auto cases = read_dataset(test);
  std::vector<EvalReport> reports;
  for (const bool attention : {true, false}) {
    cfg.arch.attention = attention;
    const std::string tag = attention ? "attention_reg" : "feature_reg";
    const auto result = run_training(cfg, f, tag);
    save_model(result.best, cfg.fixed_input, dir / (tag + ".ckpt"));
    write_training_log(result.log, dir / (tag + "_log.csv"));
    reports.push_back(evaluate({&result.best}, cases, cfg.fixed_input, g.jobs));
    write_text(dir / (tag + "_eval.csv"), reports.back().to_csv());
  }
  const auto a = reports[0].results(1), b = reports[1].results(1);
  const auto t = paired_t_test(a, b);
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "variant        params   mean SRE (mm)   std\n";
  cfg.arch.attention = true;
  os << "Attention-Reg  " << Network<float>(cfg.arch).parameter_count() << "   " << reports[0].result_summary[0].mean
     << "   " << reports[0].result_summary[0].std << "\n";
  cfg.arch.attention = false;
  os << "Feature-Reg    " << Network<float>(cfg.arch).parameter_count() << "   " << reports[1].result_summary[0].mean
     << "   " << reports[1].result_summary[0].std << "\n";
  os << std::setprecision(6) << "paired t = " << t.t << ", one-sided p = " << t.p_less
     << ", two-sided p = " << t.p_two_sided << "\n";
  write_text(dir / "ablation_summary.txt", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_explain(const Globals& g, const std::string& ckpt, const std::string& case_dir, const std::string& block,
                std::size_t init_index, const std::string& axis) {
  const auto model = load_model(ckpt);
  const auto pair = read_case(case_dir);
  const auto start = pair.inits.empty() ? pair.truth : pair.inits.at(init_index).transform;
  const auto b = parse_block(block);
  const auto s = gradcam(model.net, fixed_volume(pair, model.fixed_input), pair.moving_image, start, b);
  if (s.all_zero) std::cerr << "warning: saliency is all zero (zero gradient at the attention output)\n";
  const auto files = export_slices(s, axis.front(), out_dir(g) / ("gradcam_" + to_string(b)));
  std::cout << "wrote " << files.size() << " slices of " << s.extents[0] << "x" << s.extents[1] << "x"
            << s.extents[2] << " saliency to " << g.out << "\n";
  return 0;
}

int cmd_check(bool full) {
  const auto results = run_selftest(full);
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (error " << r.error << ", tolerance " << r.tolerance
              << (r.detail.empty() ? "" : "; " + r.detail) << ")\n";
    ok = ok && r.passed;
  }
  std::cout << (ok ? "all checks passed" : "some checks FAILED") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Cross-modal attention rigid registration for paired 3D volumes", "xreg"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed for all randomness");
  app.add_option("--config", g.config, "JSON training config (flags override it)")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--jobs", g.jobs, "Worker threads for case-level generation/evaluation")->check(CLI::PositiveNumber);

  std::size_t cases = 8, extent = 32, inits = 5;
  double spacing = 1.5, sre_lo = 0.0, sre_hi = 20.0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  gen->add_option("--cases", cases, "Number of cases")->check(CLI::PositiveNumber);
  gen->add_option("--extent", extent, "Cubic grid extent (divisible by 4, >= 16)");
  gen->add_option("--spacing", spacing, "Voxel spacing in mm")->check(CLI::PositiveNumber);
  gen->add_option("--inits", inits, "Initializations per case");
  gen->add_option("--sre-lo", sre_lo, "Lowest initial SRE in mm");
  gen->add_option("--sre-hi", sre_hi, "Highest initial SRE in mm");

  TrainFlags train_flags;
  bool feature_reg = false;
  auto* train = app.add_subcommand("train", "Train one registration stage");
  add_train_flags(train, train_flags);
  train->add_flag("--feature-reg", feature_reg, "Train the variant without attention blocks");

  std::string ckpt, fixed, moving, init, out_transform, data, kind;
  auto* reg = app.add_subcommand("register", "Register one fixed/moving pair");
  reg->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  reg->add_option("--fixed", fixed)->required()->check(CLI::ExistingFile);
  reg->add_option("--moving", moving)->required()->check(CLI::ExistingFile);
  reg->add_option("--init", init, "Initial transform JSON (default identity)")->check(CLI::ExistingFile);
  reg->add_option("--out-transform", out_transform, "Result path (default <out>/transform.json)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's stored inits");
  ev->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--fixed-input", kind, "Override the checkpoint's fixed input")
      ->check(CLI::IsMember({"image", "label"}));

  std::string stage1, stage2;
  auto* casc = app.add_subcommand("cascade-eval", "Evaluate a two-stage cascade");
  casc->add_option("--stage1", stage1)->required()->check(CLI::ExistingFile);
  casc->add_option("--stage2", stage2)->required()->check(CLI::ExistingFile);
  casc->add_option("--data", data)->required()->check(CLI::ExistingDirectory);

  TrainFlags ablate_flags;
  std::string test;
  auto* abl = app.add_subcommand("ablate", "Train and compare Attention-Reg and Feature-Reg");
  add_train_flags(abl, ablate_flags);
  abl->add_option("--test", test, "Test dataset")->required()->check(CLI::ExistingDirectory);

  std::string case_dir, block = "A", axis = "z";
  std::size_t init_index = 0;
  auto* expl = app.add_subcommand("explain", "Grad-CAM saliency of an attention block");
  expl->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  expl->add_option("--case", case_dir, "Case directory")->required()->check(CLI::ExistingDirectory);
  expl->add_option("--block", block)->check(CLI::IsMember({"A", "B"}));
  expl->add_option("--init-index", init_index, "Which stored init to start from");
  expl->add_option("--axis", axis)->check(CLI::IsMember({"x", "y", "z"}));

  bool quick = false, full = false;
  auto* check = app.add_subcommand("check", "Run the gradient/oracle self-tests");
  auto* q = check->add_flag("--quick", quick, "Op-level checks");
  check->add_flag("--full", full, "Also check the whole network")->excludes(q);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(g, cases, extent, spacing, inits, sre_lo, sre_hi);
    if (*train) return cmd_train(g, app, train_flags, feature_reg);
    if (*reg) return cmd_register(g, ckpt, fixed, moving, init, out_transform);
    if (*ev) return cmd_eval(g, ckpt, data, kind);
    if (*casc) return cmd_cascade(g, stage1, stage2, data);
    if (*abl) return cmd_ablate(g, app, ablate_flags, test);
    if (*expl) return cmd_explain(g, ckpt, case_dir, block, init_index, axis);
    if (*check) return cmd_check(full);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace xreg
