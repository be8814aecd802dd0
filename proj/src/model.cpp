#include "comprer/model.hpp"

#include <cmath>
#include <random>

namespace comprer {

namespace {

std::string prefix_of(Modality m) { return std::string(modality_name(m)) + "."; }

Shape shape_of(std::size_t a) { return {a}; }
Shape shape_of(std::size_t a, std::size_t b) { return {a, b}; }

// Every parameter of one modality branch, in declaration order.
std::vector<std::pair<std::string, Shape>> branch_layout(const EncoderConfig& c) {
  const std::size_t d = c.embed_dim;
  std::vector<std::pair<std::string, Shape>> out = {
      {"patch.w", shape_of(c.patch_dim(), d)},
      {"patch.b", shape_of(d)},
      {"pos", shape_of(c.tokens(), d)},
  };
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string b = "block" + std::to_string(i) + ".";
    out.push_back({b + "ln1.g", shape_of(d)});
    out.push_back({b + "ln1.b", shape_of(d)});
    out.push_back({b + "qkv.w", shape_of(d, 3 * d)});
    out.push_back({b + "qkv.b", shape_of(3 * d)});
    out.push_back({b + "attn_out.w", shape_of(d, d)});
    out.push_back({b + "attn_out.b", shape_of(d)});
    out.push_back({b + "ln2.g", shape_of(d)});
    out.push_back({b + "ln2.b", shape_of(d)});
    out.push_back({b + "mlp1.w", shape_of(d, c.mlp_hidden)});
    out.push_back({b + "mlp1.b", shape_of(c.mlp_hidden)});
    out.push_back({b + "mlp2.w", shape_of(c.mlp_hidden, d)});
    out.push_back({b + "mlp2.b", shape_of(d)});
  }
  out.push_back({"proj.w", shape_of(d, c.proj_dim)});
  out.push_back({"proj.b", shape_of(c.proj_dim)});
  out.push_back({"pred1.w", shape_of(c.tap_dim(), c.pred_hidden)});
  out.push_back({"pred1.b", shape_of(c.pred_hidden)});
  out.push_back({"pred2.w", shape_of(c.pred_hidden, c.n_measures)});
  out.push_back({"pred2.b", shape_of(c.n_measures)});
  for (std::size_t i = 0; i < c.decoder_channels.size(); ++i) {
    const std::size_t in = c.decoder_channels[i];
    const std::size_t outc = i + 1 < c.decoder_channels.size() ? c.decoder_channels[i + 1] : c.channels;
    const std::string l = "dec" + std::to_string(i) + ".";
    out.push_back({l + "k", Shape{in, outc, c.decoder_kernel, c.decoder_kernel}});
    out.push_back({l + "b", shape_of(outc)});
  }
  return out;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::string_view head_tap_name(HeadTap tap) {
  return tap == HeadTap::pre_projection ? "pre_projection" : "post_projection";
}

std::size_t EncoderConfig::decoder_seed_size() const {
  if (decoder_channels.empty() || decoder_channels[0] == 0 || tap_dim() % decoder_channels[0] != 0) return 0;
  const std::size_t area = tap_dim() / decoder_channels[0];
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(area))));
  return side * side == area ? side : 0;
}

void EncoderConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("encoder config: " + msg);
  };
  require(patch_size >= 1 && image_size % patch_size == 0, "image_size must be divisible by patch_size");
  require(heads >= 1 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  require(embed_dim >= 2 && proj_dim >= 2 && pred_hidden >= 2 && mlp_hidden >= 2, "all dims must be >= 2");
  require(image_size >= 2 && channels >= 1 && n_measures >= 1, "image_size, channels and n_measures must be positive");
  require(decoder_kernel >= 1 && decoder_stride >= 1, "decoder kernel and stride must be positive");
  require(init_tau > 0.0, "init_tau must be positive");
  const std::size_t seed = decoder_seed_size();
  require(seed > 0, "head input width " + std::to_string(tap_dim()) + " cannot be reshaped to " +
                        (decoder_channels.empty() ? std::string("an empty decoder") : std::to_string(decoder_channels[0]) +
                                                                                          " square channels"));
  std::size_t side = seed;
  for (std::size_t i = 0; i < decoder_channels.size(); ++i) side = (side - 1) * decoder_stride + decoder_kernel;
  require(side == image_size, "decoder reaches " + std::to_string(side) + "x" + std::to_string(side) +
                                  " instead of " + std::to_string(image_size) + "x" + std::to_string(image_size));
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"image_size", c.image_size},
       {"patch_size", c.patch_size},
       {"channels", c.channels},
       {"embed_dim", c.embed_dim},
       {"depth", c.depth},
       {"heads", c.heads},
       {"mlp_hidden", c.mlp_hidden},
       {"proj_dim", c.proj_dim},
       {"pred_hidden", c.pred_hidden},
       {"n_measures", c.n_measures},
       {"decoder_channels", c.decoder_channels},
       {"decoder_kernel", c.decoder_kernel},
       {"decoder_stride", c.decoder_stride},
       {"head_tap", head_tap_name(c.head_tap)},
       {"learnable_tau", c.learnable_tau},
       {"init_tau", c.init_tau}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.channels = j.value("channels", c.channels);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.proj_dim = j.value("proj_dim", c.proj_dim);
  c.pred_hidden = j.value("pred_hidden", c.pred_hidden);
  c.n_measures = j.value("n_measures", c.n_measures);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.decoder_kernel = j.value("decoder_kernel", c.decoder_kernel);
  c.decoder_stride = j.value("decoder_stride", c.decoder_stride);
  if (j.contains("head_tap")) {
    const auto tap = j["head_tap"].get<std::string>();
    if (tap == "pre_projection") {
      c.head_tap = HeadTap::pre_projection;
    } else if (tap == "post_projection") {
      c.head_tap = HeadTap::post_projection;
    } else {
      throw ConfigError("unknown head_tap '" + tap + "'");
    }
  }
  c.learnable_tau = j.value("learnable_tau", c.learnable_tau);
  c.init_tau = j.value("init_tau", c.init_tau);
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [name, a] : values) n += a.size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, a] : values) {
    if (!a.all_finite()) return false;
  }
  return true;
}

std::size_t parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t block = 4 * d                               // two layer norms
                            + d * 3 * d + 3 * d                 // qkv
                            + d * d + d                         // attention output
                            + d * c.mlp_hidden + c.mlp_hidden   // mlp in
                            + c.mlp_hidden * d + d;             // mlp out
  std::size_t decoder = 0;
  for (std::size_t i = 0; i < c.decoder_channels.size(); ++i) {
    const std::size_t out = i + 1 < c.decoder_channels.size() ? c.decoder_channels[i + 1] : c.channels;
    decoder += c.decoder_channels[i] * out * c.decoder_kernel * c.decoder_kernel + out;
  }
  const std::size_t branch = c.patch_dim() * d + d + c.tokens() * d + c.depth * block + d * c.proj_dim + c.proj_dim +
                             c.tap_dim() * c.pred_hidden + c.pred_hidden + c.pred_hidden * c.n_measures +
                             c.n_measures + decoder;
  return 2 * branch + (c.learnable_tau ? 1 : 0);
}

ModelParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params{config, {}};
  for (Modality m : {Modality::fundus, Modality::carotid}) {
    for (auto& [name, shape] : branch_layout(config)) params.values.emplace(prefix_of(m) + name, Array(shape));
  }
  if (config.learnable_tau) params.values.emplace("log_tau", Array::scalar(std::log(config.init_tau)));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto truncated = [&] {
    double v;
    do {
      v = normal(rng);
    } while (std::abs(v) > 2.0);
    return 0.02 * v;
  };
  for (auto& [name, array] : params.values) {
    if (ends_with(name, ".w") || ends_with(name, ".k") || ends_with(name, ".pos")) {
      for (std::size_t i = 0; i < array.size(); ++i) array[i] = truncated();
    } else if (ends_with(name, ".g")) {
      array.values().setOnes();
    }
  }
  return params;
}

BoundModel::BoundModel(Tape& tape, const ModelParams& params, Binding binding)
    : tape_(&tape), config_(&params.config) {
  for (const auto& [name, value] : params.values) {
    vars_.emplace(name, binding == Binding::trainable ? tape.parameter(value) : tape.constant(value));
  }
}

Var BoundModel::param(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("model has no parameter '" + name + "'");
  return it->second;
}

std::optional<Var> BoundModel::log_tau() const {
  auto it = vars_.find("log_tau");
  if (it == vars_.end()) return std::nullopt;
  return it->second;
}

Var BoundModel::linear(Var x, const std::string& prefix) const {
  return add_rows_tiled(matmul(x, param(prefix + ".w")), param(prefix + ".b"));
}

Var BoundModel::encode(const Array& images, Modality modality) const {
  const EncoderConfig& c = *config_;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw DimensionError("encode: expected [N×" + std::to_string(c.channels) + "×" + std::to_string(c.image_size) + "×" +
                         std::to_string(c.image_size) + "], got " + shape_string(images.shape()));
  }
  if ((images.values().array() < 0.0).any() || (images.values().array() > 1.0).any()) {
    throw DomainError("encode: pixel values must lie in [0, 1]");
  }
  const std::string p = prefix_of(modality);
  Var h = linear(tape_->constant(patchify(images, c.patch_size)), p + "patch");
  h = add_rows_tiled(h, param(p + "pos"));
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string b = p + "block" + std::to_string(i) + ".";
    Var a = layer_norm(h, param(b + "ln1.g"), param(b + "ln1.b"));
    a = self_attention(linear(a, b + "qkv"), c.tokens(), c.heads);
    h = add(h, linear(a, b + "attn_out"));
    Var m = layer_norm(h, param(b + "ln2.g"), param(b + "ln2.b"));
    m = linear(gelu(linear(m, b + "mlp1")), b + "mlp2");
    h = add(h, m);
  }
  return group_mean(h, c.tokens());
}

Var BoundModel::project(Var embedding, Modality modality) const {
  if (embedding.value().rank() != 2 || embedding.shape()[1] != config_->embed_dim) {
    throw DimensionError("project: expected [N×" + std::to_string(config_->embed_dim) + "], got " +
                         shape_string(embedding.shape()));
  }
  return linear(embedding, prefix_of(modality) + "proj");
}

Var BoundModel::predict_measures(Var head_input, Modality modality) const {
  if (head_input.value().rank() != 2 || head_input.shape()[1] != config_->tap_dim()) {
    throw DimensionError("predict_measures: expected [N×" + std::to_string(config_->tap_dim()) + "], got " +
                         shape_string(head_input.shape()));
  }
  const std::string p = prefix_of(modality);
  return linear(gelu(linear(head_input, p + "pred1")), p + "pred2");
}

Var BoundModel::decode(Var head_input, Modality modality) const {
  const EncoderConfig& c = *config_;
  if (head_input.value().rank() != 2 || head_input.shape()[1] != c.tap_dim()) {
    throw DimensionError("decode: expected [N×" + std::to_string(c.tap_dim()) + "], got " +
                         shape_string(head_input.shape()));
  }
  const std::size_t side = c.decoder_seed_size();
  Var x = reshape(head_input, {head_input.shape()[0], c.decoder_channels[0], side, side});
  const std::string p = prefix_of(modality);
  for (std::size_t i = 0; i < c.decoder_channels.size(); ++i) {
    const std::string l = p + "dec" + std::to_string(i) + ".";
    x = add_channel_bias(transposed_conv2d(x, param(l + "k"), c.decoder_stride), param(l + "b"));
    if (i + 1 < c.decoder_channels.size()) x = gelu(x);
  }
  return x;
}

Var BoundModel::head_input(Var embedding, Var projected) const {
  return config_->head_tap == HeadTap::pre_projection ? embedding : projected;
}

Array encode(const ModelParams& params, const Array& images, Modality modality) {
  Tape tape;
  BoundModel model(tape, params, BoundModel::Binding::frozen);
  return model.encode(images, modality).value();
}

Array project(const ModelParams& params, const Array& embedding, Modality modality) {
  Tape tape;
  BoundModel model(tape, params, BoundModel::Binding::frozen);
  return model.project(tape.constant(embedding), modality).value();
}

Array predict_measures(const ModelParams& params, const Array& head_input, Modality modality) {
  Tape tape;
  BoundModel model(tape, params, BoundModel::Binding::frozen);
  return model.predict_measures(tape.constant(head_input), modality).value();
}

Array decode(const ModelParams& params, const Array& head_input, Modality modality) {
  Tape tape;
  BoundModel model(tape, params, BoundModel::Binding::frozen);
  return model.decode(tape.constant(head_input), modality).value();
}

ForwardOutputs forward(const ModelParams& params, const Array& images, Modality modality) {
  Tape tape;
  BoundModel model(tape, params, BoundModel::Binding::frozen);
  Var emb = model.encode(images, modality);
  Var proj = model.project(emb, modality);
  Var tap = model.head_input(emb, proj);
  return {emb.value(), proj.value(), model.predict_measures(tap, modality).value(), model.decode(tap, modality).value()};
}

}  // namespace comprer
