#pragma once

// Training, evaluation, ablation and inference-scaling drivers.

#include "aurora/corpus.hpp"
#include "aurora/flowmatch.hpp"
#include "aurora/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace aurora::harness {

enum class AblationVariant { Full, NoGuidedAttention, GaussianStart, Both };

std::string to_string(AblationVariant v);
AblationVariant parse_variant(const std::string& s);
const std::vector<AblationVariant>& all_variants();
// Sets the model switches for a variant.
void apply_variant(AblationVariant v, model::ModelConfig& config);

struct TrainConfig {
  double learning_rate = 1e-3;
  int lr_step_epochs = 50;
  double lr_decay = 0.5;
  int batch_size = 64;
  long max_steps = 20000;
  double text_mask_prob = 0.3;
  std::uint64_t seed = 0;
  long eval_interval = 1000;
  double limit_fraction = 1.0;
  AblationVariant variant = AblationVariant::Full;
  model::ModelConfig model;

  static TrainConfig named(const std::string& name);  // "desk" or "paper"
  // Flat key=value lines; '#' starts a comment; unknown keys are rejected.
  // Keys not present keep the values of `base`.
  static TrainConfig parse(const std::string& text, TrainConfig base);
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path, TrainConfig base);
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  void validate() const;
};

// One entry per training step.
struct LossRecord {
  long step = 0;
  long epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

using StepCallback = std::function<void(const LossRecord&)>;

std::vector<model::PreparedSample> prepare_all(const model::AuroraModel& model,
                                               const std::vector<corpus::MultimodalSample>& samples);

// Runs config.max_steps AdamW steps over `data` (reshuffled every epoch,
// last partial batch kept) with StepLR decay per epoch. Throws on a
// non-finite loss.
std::vector<LossRecord> train(model::AuroraModel& model, const TrainConfig& config,
                              const std::vector<model::PreparedSample>& data, const StepCallback& on_step = {});

// Training driver writing `checkpoint.bin` (every eval_interval steps and at
// the end), `loss_log.csv` and `config.txt` into `out_dir`.
std::vector<LossRecord> train_to_dir(const TrainConfig& config, const corpus::Corpus& corpus,
                                     const std::filesystem::path& out_dir);

struct EvalOptions {
  int samples = 100;
  int steps = 16;
  std::uint64_t seed = 0;
  bool mask_text = false;
  flow::PointMode mode = flow::PointMode::Mean;
};

struct EvalReport {
  std::string dataset;
  int horizon = 0;
  double mse = 0.0;
  double mae = 0.0;
  double crps = 0.0;
  double nmae = 0.0;
  int n_samples = 0;
  int steps = 0;
  std::uint64_t seed = 0;
  long n_windows = 0;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const model::AuroraModel& model, const std::vector<model::PreparedSample>& data,
                    const EvalOptions& options, const std::string& dataset);

// Writes `<stem>.json` and `<stem>.csv`.
void write_report(const EvalReport& report, const std::filesystem::path& stem);

struct AblationRow {
  AblationVariant variant = AblationVariant::Full;
  std::uint64_t seed = 0;
  double mse = 0.0;
  double mae = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  double median_mse(AblationVariant v) const;
  double median_mae(AblationVariant v) const;
  std::string to_csv() const;
};

// Trains every variant for every seed with identical budgets and evaluates
// on the test split.
AblationTable run_ablation(const TrainConfig& base, const corpus::Corpus& corpus, const std::vector<std::uint64_t>& seeds,
                           const std::vector<AblationVariant>& variants, const EvalOptions& eval);

struct ScalePoint {
  int steps = 0;
  int samples = 0;
  double crps = 0.0;
  double crps_se = 0.0;  // standard error over windows
  double nmae = 0.0;
};

// CRPS/NMAE for every (J, S); sample sets are nested (the first S draws of
// the largest S).
std::vector<ScalePoint> scale_study(const model::AuroraModel& model, const std::vector<model::PreparedSample>& data,
                                    const std::vector<int>& sample_counts, const std::vector<int>& step_counts,
                                    std::uint64_t seed, bool mask_text = false);

std::string scale_csv(const std::vector<ScalePoint>& points);
// CRPS against S, one polyline per J.
void write_scale_plot(const std::vector<ScalePoint>& points, const std::filesystem::path& path);

// Median of a non-empty list.
double median(std::vector<double> values);

}  // namespace aurora::harness
