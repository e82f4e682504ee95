#include "xreg/training.hpp"

#include "xreg/ops.hpp"

#include "json.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace xreg {

namespace {

using json = nlohmann::json;

struct Batch {
  Tensor<float> fixed;
  Tensor<float> moving;
  Tensor<float> target;
};

Batch make_batch(const std::vector<const CasePair*>& cases, const std::vector<RigidTransform>& inits, FixedInput kind) {
  if (cases.empty() || cases.size() != inits.size()) throw std::invalid_argument("batch: cases and inits must pair up");
  const auto& g = fixed_volume(*cases.front(), kind).geom;
  const auto vox = g.voxel_count();
  const auto N = cases.size();
  std::vector<float> fixed, moving, target;
  fixed.reserve(N * vox);
  moving.reserve(N * vox);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& fv = fixed_volume(*cases[i], kind);
    if (!fv.geom.same_grid(g)) throw std::invalid_argument("batch: all fixed volumes must share one grid");
    const auto f = network_input(fv);
    fixed.insert(fixed.end(), f.begin(), f.end());
    const auto m = network_input(resample_volume(cases[i]->moving_image, inits[i], fv.geom));
    moving.insert(moving.end(), m.begin(), m.end());
    for (const double v : correction_target(inits[i])) target.push_back(static_cast<float>(v));
  }
  const Shape shape{N, 1, g.extents[2], g.extents[1], g.extents[0]};
  return {Tensor<float>::from(shape, std::move(fixed)), Tensor<float>::from(shape, std::move(moving)),
          Tensor<float>::from({N, 6}, std::move(target))};
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

FixedInput parse_fixed_input(const std::string& s) {
  if (s == "image") return FixedInput::Image;
  if (s == "label") return FixedInput::Label;
  throw std::invalid_argument("fixed input must be 'image' or 'label', got '" + s + "'");
}

std::string to_string(FixedInput kind) { return kind == FixedInput::Image ? "image" : "label"; }

void TrainConfig::validate() const {
  if (!(lr_init > 0.0)) throw std::invalid_argument("lr_init must be > 0");
  if (!(lr_gamma > 0.0)) throw std::invalid_argument("lr_gamma must be > 0");
  if (lr_step_epochs < 1) throw std::invalid_argument("lr_step_epochs must be >= 1");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(sre_lo_mm >= 0.0) || !(sre_lo_mm < sre_hi_mm)) throw std::invalid_argument("stage SRE range needs 0 <= lo < hi");
  if (samples_per_case < 1) throw std::invalid_argument("samples_per_case must be >= 1");
  if (val_inits < 1) throw std::invalid_argument("val_inits must be >= 1");
  if (val_every < 1) throw std::invalid_argument("val_every must be >= 1");
  arch.validate();
}

TrainConfig TrainConfig::from_json(const std::string& text, TrainConfig cfg) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr_init") cfg.lr_init = v.get<double>();
      else if (key == "lr_gamma") cfg.lr_gamma = v.get<double>();
      else if (key == "lr_step_epochs") cfg.lr_step_epochs = v.get<int>();
      else if (key == "max_epochs") cfg.max_epochs = v.get<int>();
      else if (key == "batch_size") cfg.batch_size = v.get<int>();
      else if (key == "sre_lo_mm") cfg.sre_lo_mm = v.get<double>();
      else if (key == "sre_hi_mm") cfg.sre_hi_mm = v.get<double>();
      else if (key == "stage_sre_range") {
        if (!v.is_array() || v.size() != 2) throw FormatError("config: stage_sre_range must be [lo, hi]");
        cfg.sre_lo_mm = v[0].get<double>();
        cfg.sre_hi_mm = v[1].get<double>();
      } else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "fixed_input_kind" || key == "fixed_input") cfg.fixed_input = parse_fixed_input(v.get<std::string>());
      else if (key == "samples_per_case") cfg.samples_per_case = v.get<int>();
      else if (key == "val_inits") cfg.val_inits = v.get<int>();
      else if (key == "val_every") cfg.val_every = v.get<int>();
      else if (key == "fresh_inits") cfg.fresh_inits = v.get<bool>();
      else if (key == "arch") cfg.arch = Architecture::from_text(v.get<std::string>());
      else throw FormatError("config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string TrainConfig::to_json() const {
  json j;
  j["lr_init"] = lr_init;
  j["lr_gamma"] = lr_gamma;
  j["lr_step_epochs"] = lr_step_epochs;
  j["max_epochs"] = max_epochs;
  j["batch_size"] = batch_size;
  j["stage_sre_range"] = json::array({sre_lo_mm, sre_hi_mm});
  j["seed"] = seed;
  j["fixed_input_kind"] = to_string(fixed_input);
  j["samples_per_case"] = samples_per_case;
  j["val_inits"] = val_inits;
  j["val_every"] = val_every;
  j["fresh_inits"] = fresh_inits;
  j["arch"] = arch.to_text();
  return j.dump(2);
}

std::vector<float> network_input(const Volume& vol) {
  const auto n = static_cast<double>(vol.values.size());
  double mean = 0.0;
  for (const float v : vol.values) mean += v;
  mean /= n;
  double var = 0.0;
  for (const float v : vol.values) var += (v - mean) * (v - mean);
  const double inv = 1.0 / std::max(std::sqrt(var / n), 1e-6);
  std::vector<float> out(vol.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((vol.values[i] - mean) * inv);
  return out;
}

const Volume& fixed_volume(const CasePair& c, FixedInput kind) {
  return kind == FixedInput::Image ? c.fixed_image : c.fixed_label;
}

std::array<double, 6> correction_target(const RigidTransform& init) { return invert(init).params().as_vector(); }

std::vector<double> mse_per_component(std::span<const float> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.size() % 6 != 0) throw std::invalid_argument("mse_per_component: size mismatch");
  std::vector<double> out(6, 0.0);
  const auto rows = pred.size() / 6;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    out[i % 6] += d * d / static_cast<double>(rows);
  }
  return out;
}

double batch_loss(const Network<float>& net, const std::vector<const CasePair*>& cases,
                  const std::vector<RigidTransform>& inits, FixedInput kind) {
  const auto b = make_batch(cases, inits, kind);
  const auto r = net.forward(nullptr, b.fixed, b.moving);
  return ops::mse_loss<float>(nullptr, r.prediction, b.target).item();
}

double train_step(Network<float>& net, AdamOptimizer<float>& opt, double lr, const std::vector<const CasePair*>& cases,
                  const std::vector<RigidTransform>& inits, FixedInput kind) {
  const auto b = make_batch(cases, inits, kind);
  Tape<float> tape;
  const auto r = net.forward(&tape, b.fixed, b.moving);
  const auto loss = ops::mse_loss(&tape, r.prediction, b.target);
  opt.zero_grad();
  tape.backward(loss);
  opt.step(lr);
  return loss.item();
}

TrainResult train_stage(const TrainConfig& cfg, const std::vector<CasePair>& train, const std::vector<CasePair>& val,
                        const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  if (cfg.max_epochs > 0 && train.empty()) throw std::invalid_argument("train_stage: no training cases");

  Network<float> net(cfg.arch, derive_seed(cfg.seed, {0x6e6574}));
  AdamOptimizer<float> opt(net.parameters());

  // The validation initializations are drawn once and reused every epoch.
  std::vector<std::vector<RigidTransform>> val_inits(val.size());
  for (std::size_t c = 0; c < val.size(); ++c) {
    const auto draws = val[c].inits.empty()
                           ? draw_inits(derive_seed(cfg.seed, {0x76616c, c}), val[c].moving_surface,
                                        static_cast<std::size_t>(cfg.val_inits), cfg.sre_lo_mm, cfg.sre_hi_mm)
                           : val[c].inits;
    for (const auto& d : draws) val_inits[c].push_back(d.transform);
  }
  const auto validate_net = [&](const Network<float>& n) {
    std::vector<double> sres;
    for (std::size_t c = 0; c < val.size(); ++c) {
      const auto out = register_many(n, fixed_volume(val[c], cfg.fixed_input), val[c].moving_image, val_inits[c]);
      for (const auto& t : out) sres.push_back(sre(val[c].moving_surface, val[c].truth, t));
    }
    return summarize(sres);
  };

  TrainResult result{net.clone(), 0, 0.0, {}};
  if (cfg.max_epochs == 0) {
    result.best_val_mean_sre = val.empty() ? 0.0 : validate_net(net).mean;
    return result;
  }
  result.best_val_mean_sre = std::numeric_limits<double>::infinity();

  int consecutive_skips = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = step_lr(cfg.lr_init, cfg.lr_gamma, cfg.lr_step_epochs, epoch);

    std::vector<std::pair<const CasePair*, RigidTransform>> samples;
    for (std::size_t c = 0; c < train.size(); ++c) {
      if (!cfg.fresh_inits) {
        if (train[c].inits.empty()) throw std::invalid_argument("train_stage: " + train[c].case_id + " has no stored inits");
        for (const auto& init : train[c].inits) samples.emplace_back(&train[c], init.transform);
        continue;
      }
      const auto inits = draw_inits(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), c}),
                                    train[c].moving_surface, static_cast<std::size_t>(cfg.samples_per_case),
                                    cfg.sre_lo_mm, cfg.sre_hi_mm);
      for (const auto& init : inits) samples.emplace_back(&train[c], init.transform);
    }
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x73687566}));
    std::shuffle(samples.begin(), samples.end(), shuffle_rng);

    double loss_total = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(samples.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const CasePair*> cases;
      std::vector<RigidTransform> inits;
      for (auto i = start; i < end; ++i) {
        cases.push_back(samples[i].first);
        inits.push_back(samples[i].second);
      }
      try {
        loss_total += train_step(net, opt, log.lr, cases, inits, cfg.fixed_input) * static_cast<double>(end - start);
        loss_count += end - start;
        consecutive_skips = 0;
      } catch (const NonFiniteError&) {
        ++log.skipped_batches;
        if (++consecutive_skips > 10) {
          throw std::runtime_error("training aborted: more than 10 consecutive non-finite batches at epoch " +
                                   std::to_string(epoch));
        }
      }
    }
    log.train_loss = loss_count ? loss_total / static_cast<double>(loss_count) : std::nan("");

    const bool validate_now = epoch % cfg.val_every == 0 || epoch == cfg.max_epochs;
    if (!val.empty() && validate_now) {
      const auto s = validate_net(net);
      log.val_mean_sre = s.mean;
      log.val_std_sre = s.std;
      if (s.mean < result.best_val_mean_sre) {
        result.best = net.clone();
        result.best_epoch = epoch;
        result.best_val_mean_sre = s.mean;
      }
    } else if (val.empty()) {
      result.best = net.clone();
      result.best_epoch = epoch;
    } else {
      log.val_mean_sre = log.val_std_sre = std::nan("");
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void save_model(const Network<float>& net, FixedInput kind, const std::filesystem::path& path) {
  auto ckpt = net.to_checkpoint();
  ckpt.metadata.emplace_back("fixed_input", to_string(kind));
  write_checkpoint(ckpt, path);
}

TrainedModel load_model(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  const auto kind = ckpt.meta("fixed_input");
  return {Network<float>::from_checkpoint(ckpt), kind.empty() ? FixedInput::Image : parse_fixed_input(kind)};
}

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,train_loss,val_mean_sre,val_std_sre\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << fmt_double(e.lr) << ',' << fmt_double(e.train_loss) << ',' << fmt_double(e.val_mean_sre)
        << ',' << fmt_double(e.val_std_sre) << '\n';
  }
}

std::vector<RigidTransform> register_many(const Network<float>& net, const Volume& fixed, const Volume& moving,
                                          const std::vector<RigidTransform>& inits, std::size_t batch) {
  const auto e = net.arch().extent;
  if (fixed.geom.extents != std::array<std::size_t, 3>{e, e, e}) {
    throw std::invalid_argument("register: fixed grid does not match the network input extent " + std::to_string(e));
  }
  moving.geom.validate();
  const auto f = network_input(fixed);
  const auto vox = fixed.geom.voxel_count();
  std::vector<RigidTransform> out;
  out.reserve(inits.size());
  for (std::size_t start = 0; start < inits.size(); start += batch) {
    const auto end = std::min(inits.size(), start + batch);
    const auto N = end - start;
    std::vector<float> fb, mb;
    fb.reserve(N * vox);
    mb.reserve(N * vox);
    for (auto i = start; i < end; ++i) {
      fb.insert(fb.end(), f.begin(), f.end());
      const auto m = network_input(resample_volume(moving, inits[i], fixed.geom));
      mb.insert(mb.end(), m.begin(), m.end());
    }
    const Shape shape{N, 1, e, e, e};
    const auto r = net.forward(nullptr, Tensor<float>::from(shape, std::move(fb)), Tensor<float>::from(shape, std::move(mb)));
    const auto pred = r.prediction.data();
    for (std::size_t i = 0; i < N; ++i) {
      std::array<double, 6> six{};
      for (int k = 0; k < 6; ++k) six[k] = pred[i * 6 + k];
      const auto& init = inits[start + i];
      out.push_back(compose(RigidTransform(RigidParams::from_vector(six), init.center()), init));
    }
  }
  return out;
}

RigidTransform register_pair(const Network<float>& net, const Volume& fixed, const Volume& moving,
                             const RigidTransform& init) {
  return register_many(net, fixed, moving, {init}, 1).front();
}

RigidTransform cascade_register(const Cascade& cascade, const Volume& fixed, const Volume& moving,
                                const RigidTransform& init) {
  if (cascade.stage1 == nullptr || cascade.stage2 == nullptr) throw std::invalid_argument("cascade needs two stages");
  const auto t1 = register_pair(*cascade.stage1, fixed, moving, init);
  return register_pair(*cascade.stage2, fixed, moving, t1);
}

std::vector<double> EvalReport::results(int stage) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.stage == stage) out.push_back(r.result_sre_mm);
  }
  return out;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "case_id,init_id,stage,init_sre_mm,result_sre_mm\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.case_id << ',' << r.init_id << ',' << r.stage << ',' << r.init_sre_mm << ',' << r.result_sre_mm << '\n';
  }
  return os.str();
}

std::string EvalReport::summary_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  for (std::size_t s = 0; s < result_summary.size(); ++s) {
    os << "stage " << s + 1 << ": n=" << result_summary[s].count << " init SRE " << init_summary[s].mean << " +/- "
       << init_summary[s].std << " mm -> result SRE " << result_summary[s].mean << " +/- " << result_summary[s].std
       << " mm\n";
  }
  return os.str();
}

EvalReport evaluate(const std::vector<const Network<float>*>& stages, const std::vector<CasePair>& cases,
                    FixedInput kind, int jobs) {
  if (stages.empty()) throw std::invalid_argument("evaluate: no networks");
  // rows_per_case[c][s] holds stage s rows for case c, in init order.
  std::vector<std::vector<std::vector<EvalRow>>> per_case(cases.size());
  const auto run_case = [&](std::size_t c) {
    const auto& pair = cases[c];
    const auto& fixed = fixed_volume(pair, kind);
    std::vector<RigidTransform> current;
    std::vector<double> init_sre;
    for (const auto& init : pair.inits) {
      current.push_back(init.transform);
      init_sre.push_back(sre(pair.moving_surface, pair.truth, init.transform));
    }
    per_case[c].resize(stages.size());
    for (std::size_t s = 0; s < stages.size(); ++s) {
      current = register_many(*stages[s], fixed, pair.moving_image, current);
      for (std::size_t i = 0; i < current.size(); ++i) {
        per_case[c][s].push_back(
            {pair.case_id, i, static_cast<int>(s + 1), init_sre[i], sre(pair.moving_surface, pair.truth, current[i])});
      }
    }
  };

  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || cases.size() < 2) {
    for (std::size_t c = 0; c < cases.size(); ++c) run_case(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        for (std::size_t c = w; c < cases.size(); c += workers) run_case(c);
      });
    }
    for (auto& t : pool) t.join();
  }

  EvalReport report;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    std::vector<double> inits, results;
    for (const auto& pc : per_case) {
      for (const auto& row : pc[s]) {
        report.rows.push_back(row);
        inits.push_back(row.init_sre_mm);
        results.push_back(row.result_sre_mm);
      }
    }
    report.init_summary.push_back(summarize(inits));
    report.result_summary.push_back(summarize(results));
  }
  return report;
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("paired_t_test: need two equal samples of size >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const auto s = summarize(d);
  TTest out;
  out.mean_diff = s.mean;
  const double se = s.std / std::sqrt(static_cast<double>(d.size()));
  if (se == 0.0) {
    out.t = s.mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), s.mean);
    out.p_less = s.mean < 0.0 ? 0.0 : 1.0;
    out.p_two_sided = s.mean == 0.0 ? 1.0 : 0.0;
    return out;
  }
  out.t = s.mean / se;
  const boost::math::students_t dist(static_cast<double>(d.size() - 1));
  out.p_less = boost::math::cdf(dist, out.t);
  out.p_two_sided = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
  return out;
}

}  // namespace xreg
