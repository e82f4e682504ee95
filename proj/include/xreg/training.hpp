// Supervised training, registration, cascades and evaluation.

#pragma once

#include "xreg/model.hpp"
#include "xreg/optim.hpp"
#include "xreg/synthdata.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace xreg {

enum class FixedInput { Image, Label };

FixedInput parse_fixed_input(const std::string& s);
std::string to_string(FixedInput kind);

struct TrainConfig {
  double lr_init = 5e-5;
  double lr_gamma = 0.9;
  int lr_step_epochs = 5;
  int max_epochs = 300;
  int batch_size = 8;
  double sre_lo_mm = 0.0;
  double sre_hi_mm = 20.0;
  std::uint64_t seed = 0;
  FixedInput fixed_input = FixedInput::Image;
  // Fresh perturbations drawn per training case each epoch.
  int samples_per_case = 1;
  // false: train on each case's stored inits every epoch instead of fresh
  // perturbations (used by the overfit probe).
  bool fresh_inits = true;
  // Pre-generated validation initializations per case (cases without stored inits).
  int val_inits = 5;
  // Validate every k epochs; the last epoch is always validated.
  int val_every = 1;
  Architecture arch;

  void validate() const;
  // Keys mirror the field names; "stage_sre_range": [lo, hi] is accepted
  // too. Unknown keys are rejected.
  static TrainConfig from_json(const std::string& text, TrainConfig base);
  static TrainConfig from_json(const std::string& text) { return from_json(text, TrainConfig{}); }
  std::string to_json() const;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_mean_sre = 0.0;
  double val_std_sre = 0.0;
  int skipped_batches = 0;
};

struct TrainResult {
  Network<float> best;
  int best_epoch = 0;  // 0: the initialization was never beaten
  double best_val_mean_sre = 0.0;
  std::vector<EpochLog> log;
};

// Network inputs: each volume standardized to zero mean, unit deviation.
std::vector<float> network_input(const Volume& vol);
const Volume& fixed_volume(const CasePair& c, FixedInput kind);

// 6-vector regression target for a case perturbed by `init`: the
// parameters of init^-1 about init's center.
std::array<double, 6> correction_target(const RigidTransform& init);

std::vector<double> mse_per_component(std::span<const float> pred, std::span<const double> target);

// Loss on one minibatch (forward only); used by tests and logging.
double batch_loss(const Network<float>& net, const std::vector<const CasePair*>& cases,
                  const std::vector<RigidTransform>& inits, FixedInput kind);

// One Adam step on a fixed minibatch; returns the loss before the step.
double train_step(Network<float>& net, AdamOptimizer<float>& opt, double lr, const std::vector<const CasePair*>& cases,
                  const std::vector<RigidTransform>& inits, FixedInput kind);

TrainResult train_stage(const TrainConfig& cfg, const std::vector<CasePair>& train, const std::vector<CasePair>& val,
                        const std::function<void(const EpochLog&)>& on_epoch = {});

// Checkpoint plus the fixed-input kind it was trained with.
struct TrainedModel {
  Network<float> net;
  FixedInput fixed_input = FixedInput::Image;
};
void save_model(const Network<float>& net, FixedInput kind, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

// Resamples `moving` through `init` onto the fixed grid, predicts the
// correction and returns correction o init.
RigidTransform register_pair(const Network<float>& net, const Volume& fixed, const Volume& moving,
                             const RigidTransform& init);
// Batched variant over several initializations of one pair.
std::vector<RigidTransform> register_many(const Network<float>& net, const Volume& fixed, const Volume& moving,
                                          const std::vector<RigidTransform>& inits, std::size_t batch = 8);

struct Cascade {
  const Network<float>* stage1 = nullptr;
  const Network<float>* stage2 = nullptr;
};

RigidTransform cascade_register(const Cascade& cascade, const Volume& fixed, const Volume& moving,
                                const RigidTransform& init);

struct EvalRow {
  std::string case_id;
  std::size_t init_id = 0;
  int stage = 1;
  double init_sre_mm = 0.0;
  double result_sre_mm = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<Summary> init_summary;    // per stage
  std::vector<Summary> result_summary;  // per stage

  std::vector<double> results(int stage) const;
  std::string to_csv() const;
  std::string summary_text() const;
};

// `stages` holds one network (single stage) or two (cascade). Stage s
// starts from the output of stage s-1; init_sre_mm is always measured on the
// original initialization. Cases are distributed over `jobs` threads.
EvalReport evaluate(const std::vector<const Network<float>*>& stages, const std::vector<CasePair>& cases,
                    FixedInput kind, int jobs = 1);

// Paired t-test on a[i] - b[i]; returns the one-sided p-value for
// mean(a - b) < 0 together with the t statistic.
struct TTest {
  double t = 0.0;
  double p_less = 1.0;
  double p_two_sided = 1.0;
  double mean_diff = 0.0;
};
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace xreg
