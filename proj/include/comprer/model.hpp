#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "comprer/modality.hpp"
#include "comprer/ops.hpp"

namespace comprer {

/// Which embedding feeds the measure-prediction and decoder heads.
enum class HeadTap { pre_projection, post_projection };

/// Desk-scale twin encoder: patch embedding + learned positions, pre-norm
/// transformer blocks, mean-pooled tokens. One encoder per modality.
struct EncoderConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 1;
  std::size_t mlp_hidden = 128;
  std::size_t proj_dim = 32;
  std::size_t pred_hidden = 32;
  std::size_t n_measures = 4;
  /// Seed feature-map channels followed by each transposed-conv layer's input
  /// channels; the last layer emits `channels`.
  std::vector<std::size_t> decoder_channels = {16, 16, 8};
  std::size_t decoder_kernel = 2;
  std::size_t decoder_stride = 2;
  HeadTap head_tap = HeadTap::pre_projection;
  bool learnable_tau = false;
  double init_tau = 0.07;

  /// Throws ConfigError, including when the decoder cannot reach image_size.
  void validate() const;
  std::size_t tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t tap_dim() const { return head_tap == HeadTap::pre_projection ? embed_dim : proj_dim; }
  std::size_t decoder_seed_size() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Named parameter arrays, ordered by name.
using ParamStore = std::map<std::string, Array>;

struct ModelParams {
  EncoderConfig config;
  ParamStore values;

  std::size_t count() const;
  bool all_finite() const;
};

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const EncoderConfig& config);

/// Truncated-normal (std 0.02, cut at ±2σ) weights and position tables, zero
/// biases, unit layer-norm gains. Deterministic per seed.
ModelParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Model parameters placed on a tape, either as differentiable leaves or as
/// constants for inference.
class BoundModel {
 public:
  enum class Binding { trainable, frozen };

  BoundModel(Tape& tape, const ModelParams& params, Binding binding = Binding::trainable);

  /// images [N×C×H×W] in [0, 1] -> [N×embed_dim].
  Var encode(const Array& images, Modality modality) const;
  /// Affine projection to [N×proj_dim]; rows are not normalized.
  Var project(Var embedding, Modality modality) const;
  /// linear -> GELU -> linear, [N×tap] -> [N×n_measures].
  Var predict_measures(Var head_input, Modality modality) const;
  /// Reshape to a seed map, then transposed conv (+GELU between layers).
  Var decode(Var head_input, Modality modality) const;
  /// Picks the encoder or projection output according to config.head_tap.
  Var head_input(Var embedding, Var projected) const;

  std::optional<Var> log_tau() const;
  const std::map<std::string, Var>& vars() const { return vars_; }
  Var param(const std::string& name) const;
  const EncoderConfig& config() const { return *config_; }

 private:
  Var linear(Var x, const std::string& prefix) const;

  Tape* tape_;
  const EncoderConfig* config_;
  std::map<std::string, Var> vars_;
};

// Inference helpers; each runs a private tape with frozen parameters.
Array encode(const ModelParams& params, const Array& images, Modality modality);
Array project(const ModelParams& params, const Array& embedding, Modality modality);
Array predict_measures(const ModelParams& params, const Array& head_input, Modality modality);
Array decode(const ModelParams& params, const Array& head_input, Modality modality);

struct ForwardOutputs {
  Array embedding;
  Array projected;
  Array measures;
  Array decoded;
};

/// encode -> project / predict / decode in one pass.
ForwardOutputs forward(const ModelParams& params, const Array& images, Modality modality);

std::string_view head_tap_name(HeadTap tap);

}  // namespace comprer
