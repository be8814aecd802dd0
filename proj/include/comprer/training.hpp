#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "comprer/losses.hpp"
#include "comprer/metrics.hpp"
#include "comprer/model.hpp"
#include "comprer/synthdata.hpp"

namespace comprer {

enum class TrainMode { comprer, mmcl };

std::string_view mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view name);

struct StepLrConfig {
  std::size_t step_size = 1000;
  double gamma = 0.9;
};

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.5;
  std::size_t batch_size = 9;
  std::size_t steps = 2000;
  StepLrConfig scheduler;
  LossWeights loss_weights;
  Temperature tau;
  /// Validation every this many steps; 0 disables.
  std::size_t eval_every = 500;
  /// Extra numbered checkpoints every this many steps; 0 keeps only the final.
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::comprer;
  /// Global gradient-norm clip; 0 disables.
  double clip_grad_norm = 0.0;
  std::vector<std::size_t> eval_k = {5, 25, 100};

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  ParamStore m, v;
  std::size_t step = 0;
  AdamConstants constants;

  static OptimState zeros_like(const ParamStore& params);
};

/// θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ), bias-corrected, for every parameter.
/// Parameters named in `no_decay` skip the decay term. A non-finite gradient
/// raises NumericError before anything is modified.
void adamw_step(ParamStore& params, const ParamStore& grads, OptimState& state, double lr_t, double weight_decay,
                const std::set<std::string>& no_decay = {});

/// lr_0 · gamma^floor(step / step_size).
double steplr(double lr0, std::size_t step, std::size_t step_size, double gamma);

/// Per-measure mean and population standard deviation of the train split;
/// targets are standardized with these before entering the prediction loss.
struct MeasureStats {
  VectorXd mean, stddev;

  static MeasureStats fit(const std::vector<CohortSample>& samples);
  /// [N×P] raw -> standardized.
  Array standardize(const Array& measures) const;
};

void to_json(nlohmann::json& j, const MeasureStats& s);
void from_json(const nlohmann::json& j, MeasureStats& s);

using StepBatches = std::array<std::optional<StreamBatch>, 4>;

struct StepGradients {
  LossReport report;
  ParamStore grads;
};

/// Total loss of a step and its gradient with respect to every parameter.
StepGradients step_gradients(const ModelParams& params, const StepBatches& batches, const TrainConfig& config,
                             const MeasureStats& stats);

/// One optimization step on whatever streams are supplied; absent streams
/// contribute no terms. Zero-weight terms are not evaluated.
LossReport train_step(ModelParams& params, const StepBatches& batches, const TrainConfig& config, OptimState& optim,
                      const MeasureStats& stats);

/// Loss terms of a step without updating anything.
LossReport evaluate_step_losses(const ModelParams& params, const StepBatches& batches, const TrainConfig& config,
                                const MeasureStats& stats);

struct TrainState {
  ModelParams params;
  OptimState optim;
  MeasureStats stats;
  std::array<StreamCursor, 4> cursors{};

  std::size_t step() const { return optim.step; }
};

/// Encoder configuration adjusted to the cohort and temperature settings.
EncoderConfig resolve_encoder_config(EncoderConfig base, const Cohort& cohort, const TrainConfig& config);
TrainState init_train_state(const Cohort& cohort, const TrainConfig& config, const EncoderConfig& encoder);

struct Checkpoint {
  TrainState state;
  TrainConfig config;
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Validation-style metrics on a set of samples: Top-K over fc pairs, R² per
/// measure for both prediction heads, reconstruction MSE. With
/// `drop_large_k`, k above the pair count is skipped; otherwise it raises
/// ContractError.
MetricReport evaluate_samples(const ModelParams& params, const std::vector<CohortSample>& samples,
                              const MeasureStats& stats, const std::vector<std::size_t>& k_values,
                              bool drop_large_k, std::size_t step = 0);

/// Encoder embeddings of many images, computed in fixed-size chunks.
Array embed_images(const ModelParams& params, const std::vector<const Array*>& images, Modality modality);

struct TrainOptions {
  /// Where history files and checkpoints go; nothing is written when empty.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from this state instead of a fresh initialization.
  std::optional<TrainState> resume;
  std::function<void(const LossReport&)> on_step;
  std::function<void(const MetricReport&)> on_eval;
};

struct TrainResult {
  TrainState state;
  std::vector<LossReport> losses;
  std::vector<MetricReport> metrics;
};

/// Runs until state.step() == config.steps. Writes loss_history.jsonl,
/// metrics_history.jsonl and checkpoint.cmpr into out_dir. On NumericError
/// the last good state is saved before the error propagates.
TrainResult train_loop(const Cohort& cohort, const TrainConfig& config, const EncoderConfig& encoder,
                       TrainOptions options = {});

struct AblationReport {
  TrainResult comprer, mmcl;
  double comprer_step0_fc = 0.0;
  double mmcl_step0_fc = 0.0;
  MetricReport comprer_final, mmcl_final;

  nlohmann::json to_json() const;
};

/// Same config and seed in both modes; final metrics on the validation split.
AblationReport run_ablation(const Cohort& cohort, const TrainConfig& config, const EncoderConfig& encoder);

}  // namespace comprer
