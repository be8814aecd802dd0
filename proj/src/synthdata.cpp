#include "comprer/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "comprer/array_io.hpp"
#include "comprer/error.hpp"
#include "comprer/rng.hpp"

namespace comprer {

namespace fs = std::filesystem;

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

VectorXd normal_vector(Rng& rng, std::size_t n) {
  VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  return v;
}

VectorXd unit_vector(Rng& rng, std::size_t n) {
  VectorXd v = normal_vector(rng, n);
  return v / v.norm();
}

// Coloured plane waves whose frequencies avoid multiples of the tile grid, so
// each pattern sums to zero over the tile-aligned pixel lattice.
Array pattern_bank(Rng& rng, std::size_t count, const GeneratorConfig& c) {
  const std::size_t s = c.image_size;
  const std::uint64_t grid = s / c.tile_period;
  Array bank({count, 3, s, s});
  auto m = bank.matrix();
  for (std::size_t l = 0; l < count; ++l) {
    std::uint64_t fx, fy;
    do {
      fx = rng.below(grid);
      fy = rng.below(grid);
    } while (fx == 0 && fy == 0);
    const double phase = kTwoPi * rng.uniform();
    const VectorXd color = unit_vector(rng, 3);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double arg = kTwoPi * static_cast<double>(fx * x + fy * y) / static_cast<double>(s) + phase;
          m(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>((ch * s + y) * s + x)) =
              color[static_cast<Eigen::Index>(ch)] * std::sin(arg);
        }
      }
    }
  }
  return bank;
}

struct Renderer {
  const GeneratorConfig& config;
  const GeneratorWorld& world;

  Array operator()(Rng& rng, const VectorXd& z, Modality modality, const VectorXd* eye_nuisance) const {
    const std::size_t s = config.image_size;
    const Array& bank = modality == Modality::fundus ? world.fundus_bank : world.carotid_bank;
    const Array& nl = modality == Modality::fundus ? world.fundus_nonlinear : world.carotid_nonlinear;
    VectorXd pre = bank.matrix().transpose() * z;
    const VectorXd features =
        ((world.nonlinear_w.matrix() * z).array() + world.nonlinear_b.values().array()).sin().matrix();
    pre += config.nonlinear_amplitude * (nl.matrix().transpose() * features);
    if (eye_nuisance != nullptr) pre += world.eye_bank.matrix().transpose() * *eye_nuisance;

    const std::size_t p = config.tile_period;
    VectorXd tile(static_cast<Eigen::Index>(3 * p * p));
    for (Eigen::Index i = 0; i < tile.size(); ++i) tile[i] = rng.normal();
    Array image({3, s, s});
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const std::size_t i = (ch * s + y) * s + x;
          const double t = tile[static_cast<Eigen::Index>((ch * p + y % p) * p + x % p)];
          const double v = 0.5 + config.signal_amplitude * (pre[static_cast<Eigen::Index>(i)] + config.tile_nuisance * t) +
                           config.pixel_noise * rng.normal();
          image[i] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
    return image;
  }
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view field_name(ImageField f) {
  switch (f) {
    case ImageField::fundus_right: return "fundus_right";
    case ImageField::fundus_left: return "fundus_left";
    case ImageField::carotid: return "carotid";
  }
  return "carotid";
}

std::string_view stream_name(Stream s) {
  switch (s) {
    case Stream::fc: return "fc";
    case Stream::fv: return "fv";
    case Stream::cv: return "cv";
    case Stream::eyes: return "eyes";
  }
  return "fc";
}

void GeneratorConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("generator config: " + msg);
  };
  require(n_participants >= 10, "n_participants must be at least 10");
  require(latent_dim >= 1 && n_measures >= 1, "latent_dim and n_measures must be positive");
  require(tile_period >= 1 && image_size % tile_period == 0 && image_size / tile_period >= 2,
          "image_size must be a multiple of tile_period with at least two tiles per side");
  require(drift >= 0.0 && pixel_noise >= 0.0 && signal_amplitude >= 0.0 && nonlinear_amplitude >= 0.0 &&
              tile_nuisance >= 0.0 && measure_noise >= 0.0,
          "noise and amplitude settings must be non-negative");
  require(missing_probability >= 0.0 && missing_probability < 1.0, "missing_probability must lie in [0, 1)");
  require(second_visit_fraction >= 0.0 && second_visit_fraction <= 1.0, "second_visit_fraction must lie in [0, 1]");
  require(std::isfinite(diagnosis_scale) && std::isfinite(diagnosis_bias) && std::isfinite(prognosis_scale) &&
              std::isfinite(prognosis_bias),
          "label parameters must be finite");
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"n_participants", c.n_participants},
       {"latent_dim", c.latent_dim},
       {"n_measures", c.n_measures},
       {"image_size", c.image_size},
       {"tile_period", c.tile_period},
       {"drift", c.drift},
       {"pixel_noise", c.pixel_noise},
       {"signal_amplitude", c.signal_amplitude},
       {"nonlinear_amplitude", c.nonlinear_amplitude},
       {"nonlinear_features", c.nonlinear_features},
       {"eye_nuisance_dim", c.eye_nuisance_dim},
       {"tile_nuisance", c.tile_nuisance},
       {"measure_noise", c.measure_noise},
       {"diagnosis_scale", c.diagnosis_scale},
       {"diagnosis_bias", c.diagnosis_bias},
       {"prognosis_scale", c.prognosis_scale},
       {"prognosis_bias", c.prognosis_bias},
       {"missing_probability", c.missing_probability},
       {"second_visit_fraction", c.second_visit_fraction},
       {"world_seed", c.world_seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"n_participants",  "latent_dim",          "n_measures",         "image_size",
                                  "tile_period",     "drift",               "pixel_noise",        "signal_amplitude",
                                  "nonlinear_amplitude", "nonlinear_features", "eye_nuisance_dim", "tile_nuisance",
                                  "measure_noise",   "diagnosis_scale",     "diagnosis_bias",     "prognosis_scale",
                                  "prognosis_bias",  "missing_probability", "second_visit_fraction", "world_seed"};
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError("generator config: unknown key '" + key + "'");
    }
    (void)value;
  }
  c.n_participants = j.value("n_participants", c.n_participants);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.n_measures = j.value("n_measures", c.n_measures);
  c.image_size = j.value("image_size", c.image_size);
  c.tile_period = j.value("tile_period", c.tile_period);
  c.drift = j.value("drift", c.drift);
  c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
  c.signal_amplitude = j.value("signal_amplitude", c.signal_amplitude);
  c.nonlinear_amplitude = j.value("nonlinear_amplitude", c.nonlinear_amplitude);
  c.nonlinear_features = j.value("nonlinear_features", c.nonlinear_features);
  c.eye_nuisance_dim = j.value("eye_nuisance_dim", c.eye_nuisance_dim);
  c.tile_nuisance = j.value("tile_nuisance", c.tile_nuisance);
  c.measure_noise = j.value("measure_noise", c.measure_noise);
  c.diagnosis_scale = j.value("diagnosis_scale", c.diagnosis_scale);
  c.diagnosis_bias = j.value("diagnosis_bias", c.diagnosis_bias);
  c.prognosis_scale = j.value("prognosis_scale", c.prognosis_scale);
  c.prognosis_bias = j.value("prognosis_bias", c.prognosis_bias);
  c.missing_probability = j.value("missing_probability", c.missing_probability);
  c.second_visit_fraction = j.value("second_visit_fraction", c.second_visit_fraction);
  c.world_seed = j.value("world_seed", c.world_seed);
}

const std::optional<Array>& CohortSample::field(ImageField f) const {
  switch (f) {
    case ImageField::fundus_right: return fundus_right;
    case ImageField::fundus_left: return fundus_left;
    case ImageField::carotid: return carotid;
  }
  return carotid;
}

std::optional<ImageField> CohortSample::representative_fundus() const {
  if (fundus_right) return ImageField::fundus_right;
  if (fundus_left) return ImageField::fundus_left;
  return std::nullopt;
}

bool CohortSplit::contains(const std::vector<std::size_t>& ids, std::size_t id) const {
  return std::binary_search(ids.begin(), ids.end(), id);
}

std::size_t Cohort::participant_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i == 0 || samples[i].participant_id != samples[i - 1].participant_id) ++n;
  }
  return n;
}

std::vector<CohortSample> Cohort::select(const std::vector<std::size_t>& participant_ids) const {
  std::vector<std::size_t> ids = participant_ids;
  std::sort(ids.begin(), ids.end());
  std::vector<CohortSample> out;
  for (const auto& s : samples) {
    if (std::binary_search(ids.begin(), ids.end(), s.participant_id)) out.push_back(s);
  }
  return out;
}

GeneratorWorld make_world(const GeneratorConfig& config) {
  config.validate();
  Rng rng(derive_seed({config.world_seed, 0x776f726c64ULL}));
  const std::size_t L = config.latent_dim;
  const std::size_t F = config.nonlinear_features;
  GeneratorWorld w;
  w.fundus_bank = pattern_bank(rng, L, config);
  w.carotid_bank = pattern_bank(rng, L, config);
  w.eye_bank = config.eye_nuisance_dim > 0 ? pattern_bank(rng, config.eye_nuisance_dim, config)
                                           : Array({1, 3, config.image_size, config.image_size});
  if (F > 0) {
    w.fundus_nonlinear = pattern_bank(rng, F, config);
    w.carotid_nonlinear = pattern_bank(rng, F, config);
    w.nonlinear_w = Array({F, L});
    for (std::size_t i = 0; i < F * L; ++i) w.nonlinear_w[i] = rng.normal() / std::sqrt(static_cast<double>(L));
    w.nonlinear_b = Array({F});
    for (std::size_t i = 0; i < F; ++i) w.nonlinear_b[i] = kTwoPi * rng.uniform();
  } else {
    // A single inert feature keeps the renderer free of special cases.
    w.fundus_nonlinear = Array({1, 3, config.image_size, config.image_size});
    w.carotid_nonlinear = Array({1, 3, config.image_size, config.image_size});
    w.nonlinear_w = Array({1, L});
    w.nonlinear_b = Array({1});
  }
  w.measure_map = Array({config.n_measures, L});
  for (std::size_t r = 0; r < config.n_measures; ++r) {
    const VectorXd row = unit_vector(rng, L);
    for (std::size_t l = 0; l < L; ++l) w.measure_map[r * L + l] = row[static_cast<Eigen::Index>(l)];
  }
  w.diagnosis_w = Array({L}, unit_vector(rng, L));
  w.prognosis_w = Array({L}, unit_vector(rng, L));
  return w;
}

std::vector<CohortSample> generate_cohort(std::size_t n_participants, const GeneratorConfig& config,
                                          std::uint64_t seed) {
  GeneratorConfig c = config;
  c.n_participants = n_participants;
  c.validate();
  const GeneratorWorld world = make_world(c);
  const Renderer render{c, world};
  const std::size_t L = c.latent_dim;
  const std::size_t E = c.eye_nuisance_dim;

  std::vector<CohortSample> samples;
  for (std::size_t pid = 0; pid < n_participants; ++pid) {
    Rng rng(derive_seed({seed, pid}));
    const VectorXd z1 = normal_vector(rng, L);
    const VectorXd eps = normal_vector(rng, L);
    const VectorXd z2 = z1 + c.drift * eps;
    const bool second_visit = rng.bernoulli(c.second_visit_fraction);
    const double u_diag = rng.uniform();
    const double u_prog = rng.uniform();
    const VectorXd eye_right = normal_vector(rng, E);
    const VectorXd eye_left = normal_vector(rng, E);

    const int diagnosis = u_diag < sigmoid(c.diagnosis_scale * world.diagnosis_w.values().dot(z1) + c.diagnosis_bias);
    int prognosis = -1;
    if (diagnosis == 0) {
      prognosis = u_prog < sigmoid(c.prognosis_scale * world.prognosis_w.values().dot(z2) + c.prognosis_bias);
    }

    for (Visit visit : {Visit::t, Visit::t_prime}) {
      if (visit == Visit::t_prime && !second_visit) break;
      const VectorXd& z = visit == Visit::t ? z1 : z2;
      CohortSample s;
      s.participant_id = pid;
      s.visit = visit;
      s.latent = Array({L}, z);
      VectorXd measures = world.measure_map.matrix() * z;
      for (Eigen::Index i = 0; i < measures.size(); ++i) measures[i] += c.measure_noise * rng.normal();
      s.measures = Array({c.n_measures}, measures);
      s.diagnosis = diagnosis;
      s.prognosis = prognosis;

      // Every field is rendered so the random stream does not depend on the
      // drop pattern; dropped fields are discarded afterwards.
      const bool keep_right = !rng.bernoulli(c.missing_probability);
      Array right = render(rng, z, Modality::fundus, E > 0 ? &eye_right : nullptr);
      const bool keep_left = !rng.bernoulli(c.missing_probability);
      Array left = render(rng, z, Modality::fundus, E > 0 ? &eye_left : nullptr);
      const bool keep_carotid = !rng.bernoulli(c.missing_probability);
      Array carotid = render(rng, z, Modality::carotid, nullptr);
      if (keep_right) s.fundus_right = std::move(right);
      if (keep_left) s.fundus_left = std::move(left);
      if (keep_carotid) s.carotid = std::move(carotid);
      if (s.presence().any()) samples.push_back(std::move(s));
    }
  }
  return samples;
}

CohortSplit split_participants(std::vector<std::size_t> ids, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const std::size_t n = ids.size();
  if (n < 10) throw ContractError("split_cohort: need at least 10 participants, got " + std::to_string(n));
  Rng rng(derive_seed({seed, 0x73706c6974ULL}));
  rng.shuffle(ids);
  const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n - n_test)));
  CohortSplit split;
  split.test.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_test),
                          ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  split.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), ids.end());
  for (auto* part : {&split.train, &split.validation, &split.test}) std::sort(part->begin(), part->end());
  return split;
}

CohortSplit split_cohort(const std::vector<CohortSample>& samples, std::uint64_t seed) {
  std::vector<std::size_t> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.participant_id);
  return split_participants(std::move(ids), seed);
}

Cohort make_cohort(const GeneratorConfig& config, std::uint64_t seed) {
  Cohort cohort;
  cohort.config = config;
  cohort.seed = seed;
  cohort.samples = generate_cohort(config.n_participants, config, seed);
  cohort.split = split_cohort(cohort.samples, seed);
  return cohort;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr std::array<ImageField, 3> kFields = {ImageField::fundus_right, ImageField::fundus_left, ImageField::carotid};

void write_split(const fs::path& dir, const std::vector<CohortSample>& samples, const GeneratorConfig& c) {
  fs::create_directories(dir);
  const std::size_t n = samples.size();
  std::ofstream csv(dir / "samples.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write " + (dir / "samples.csv").string());
  csv << "participant_id,visit,diagnosis,prognosis,fundus_right,fundus_left,carotid";
  for (std::size_t m = 0; m < c.n_measures; ++m) csv << ",measure_" << m;
  csv << '\n';
  for (const auto& s : samples) {
    const PresenceMask mask = s.presence();
    csv << s.participant_id << ',' << visit_name(s.visit) << ',' << s.diagnosis << ',' << s.prognosis << ','
        << mask.fundus_right << ',' << mask.fundus_left << ',' << mask.carotid;
    for (std::size_t m = 0; m < s.measures.size(); ++m) csv << ',' << format_double(s.measures[m]);
    csv << '\n';
  }
  if (n == 0) return;

  const std::size_t s = c.image_size;
  const std::size_t pixels = 3 * s * s;
  for (ImageField f : kFields) {
    Array images({n, 3, s, s});
    for (std::size_t i = 0; i < n; ++i) {
      if (const auto& img = samples[i].field(f)) {
        images.values().segment(static_cast<Eigen::Index>(i * pixels), static_cast<Eigen::Index>(pixels)) =
            img->values();
      }
    }
    save_array(dir / (std::string(field_name(f)) + ".cmpr"), images);
  }
  Array measures({n, c.n_measures}), latents({n, c.latent_dim}), labels({n, 2}), masks({n, 3}), ids({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& smp = samples[i];
    measures.matrix().row(static_cast<Eigen::Index>(i)) = smp.measures.values().transpose();
    latents.matrix().row(static_cast<Eigen::Index>(i)) = smp.latent.values().transpose();
    labels[2 * i] = smp.diagnosis;
    labels[2 * i + 1] = smp.prognosis;
    const PresenceMask mask = smp.presence();
    masks[3 * i] = mask.fundus_right;
    masks[3 * i + 1] = mask.fundus_left;
    masks[3 * i + 2] = mask.carotid;
    ids[2 * i] = static_cast<double>(smp.participant_id);
    ids[2 * i + 1] = smp.visit == Visit::t ? 0.0 : 1.0;
  }
  save_array(dir / "measures.cmpr", measures);
  save_array(dir / "latents.cmpr", latents);
  save_array(dir / "labels.cmpr", labels);
  save_array(dir / "masks.cmpr", masks);
  save_array(dir / "ids.cmpr", ids);
}

std::vector<CohortSample> read_split(const fs::path& dir, std::size_t n, const GeneratorConfig& c) {
  std::vector<CohortSample> out;
  if (n == 0) return out;
  const Array ids = load_array(dir / "ids.cmpr");
  const Array masks = load_array(dir / "masks.cmpr");
  const Array labels = load_array(dir / "labels.cmpr");
  const Array measures = load_array(dir / "measures.cmpr");
  const Array latents = load_array(dir / "latents.cmpr");
  std::array<Array, 3> images;
  for (std::size_t f = 0; f < 3; ++f) images[f] = load_array(dir / (std::string(field_name(kFields[f])) + ".cmpr"));
  const std::size_t s = c.image_size;
  const std::size_t pixels = 3 * s * s;
  if (ids.shape() != Shape{n, 2} || masks.shape() != Shape{n, 3} || labels.shape() != Shape{n, 2} ||
      measures.shape() != Shape{n, c.n_measures} || latents.shape() != Shape{n, c.latent_dim}) {
    throw IoError("cohort split " + dir.string() + " has inconsistent array shapes");
  }
  for (const auto& img : images) {
    if (img.shape() != Shape{n, 3, s, s}) throw IoError("cohort split " + dir.string() + " has malformed images");
  }
  for (std::size_t i = 0; i < n; ++i) {
    CohortSample smp;
    smp.participant_id = static_cast<std::size_t>(ids[2 * i]);
    smp.visit = ids[2 * i + 1] == 0.0 ? Visit::t : Visit::t_prime;
    smp.diagnosis = static_cast<int>(labels[2 * i]);
    smp.prognosis = static_cast<int>(labels[2 * i + 1]);
    smp.measures = Array({c.n_measures}, measures.matrix().row(static_cast<Eigen::Index>(i)).transpose());
    smp.latent = Array({c.latent_dim}, latents.matrix().row(static_cast<Eigen::Index>(i)).transpose());
    std::array<std::optional<Array>*, 3> slots = {&smp.fundus_right, &smp.fundus_left, &smp.carotid};
    for (std::size_t f = 0; f < 3; ++f) {
      if (masks[3 * i + f] != 0.0) {
        *slots[f] = Array({3, s, s}, images[f].values().segment(static_cast<Eigen::Index>(i * pixels),
                                                                static_cast<Eigen::Index>(pixels)));
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

}  // namespace

void save_cohort(const fs::path& dir, const Cohort& cohort) {
  try {
    fs::create_directories(dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot create cohort directory: ") + e.what());
  }
  nlohmann::json manifest;
  manifest["format"] = "comprer-cohort";
  manifest["version"] = kFormatVersion;
  manifest["config"] = cohort.config;
  manifest["seed"] = cohort.seed;
  manifest["counts"]["participants"] = cohort.participant_count();
  manifest["counts"]["samples"] = cohort.samples.size();
  const std::pair<const char*, const std::vector<std::size_t>*> parts[] = {
      {"train", &cohort.split.train}, {"validation", &cohort.split.validation}, {"test", &cohort.split.test}};
  for (const auto& [name, ids] : parts) {
    const auto samples = cohort.select(*ids);
    manifest["split"][name] = *ids;
    manifest["counts"][name] = {{"participants", ids->size()}, {"samples", samples.size()}};
    write_split(dir / name, samples, cohort.config);
  }
  std::ofstream out(dir / "cohort.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "cohort.json").string());
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + (dir / "cohort.json").string());
}

Cohort load_cohort(const fs::path& dir) {
  std::ifstream in(dir / "cohort.json", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "cohort.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed cohort manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", std::string()) != "comprer-cohort") {
    throw IoError(dir.string() + " is not a cohort directory");
  }
  Cohort cohort;
  cohort.config = manifest.at("config").get<GeneratorConfig>();
  cohort.seed = manifest.at("seed").get<std::uint64_t>();
  cohort.split.train = manifest.at("split").at("train").get<std::vector<std::size_t>>();
  cohort.split.validation = manifest.at("split").at("validation").get<std::vector<std::size_t>>();
  cohort.split.test = manifest.at("split").at("test").get<std::vector<std::size_t>>();
  for (const char* name : {"train", "validation", "test"}) {
    const auto n = manifest.at("counts").at(name).at("samples").get<std::size_t>();
    auto part = read_split(dir / name, n, cohort.config);
    for (auto& s : part) cohort.samples.push_back(std::move(s));
  }
  std::sort(cohort.samples.begin(), cohort.samples.end(), [](const CohortSample& a, const CohortSample& b) {
    return a.participant_id != b.participant_id ? a.participant_id < b.participant_id : a.visit < b.visit;
  });
  return cohort;
}

// ---------------------------------------------------------------------------
// Streams

std::vector<PairRef> qualifying_pairs(const std::vector<CohortSample>& samples, Stream stream) {
  std::vector<PairRef> out;
  switch (stream) {
    case Stream::fc:
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto rep = samples[i].representative_fundus();
        if (rep && samples[i].carotid) out.push_back({i, *rep, i, ImageField::carotid});
      }
      break;
    case Stream::eyes:
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].fundus_right && samples[i].fundus_left) {
          out.push_back({i, ImageField::fundus_right, i, ImageField::fundus_left});
        }
      }
      break;
    case Stream::fv:
    case Stream::cv: {
      std::map<std::size_t, std::array<std::optional<std::size_t>, 2>> visits;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        visits[samples[i].participant_id][samples[i].visit == Visit::t ? 0 : 1] = i;
      }
      for (const auto& [pid, idx] : visits) {
        if (!idx[0] || !idx[1]) continue;
        const CohortSample& a = samples[*idx[0]];
        const CohortSample& b = samples[*idx[1]];
        if (stream == Stream::cv) {
          if (a.carotid && b.carotid) out.push_back({*idx[0], ImageField::carotid, *idx[1], ImageField::carotid});
          continue;
        }
        if (!a.presence().any_fundus() || !b.presence().any_fundus()) continue;
        // Same eye at both visits when possible.
        if (a.fundus_right && b.fundus_right) {
          out.push_back({*idx[0], ImageField::fundus_right, *idx[1], ImageField::fundus_right});
        } else if (a.fundus_left && b.fundus_left) {
          out.push_back({*idx[0], ImageField::fundus_left, *idx[1], ImageField::fundus_left});
        } else {
          out.push_back({*idx[0], *a.representative_fundus(), *idx[1], *b.representative_fundus()});
        }
      }
      break;
    }
  }
  return out;
}

Array stack_images(const std::vector<const Array*>& images) {
  if (images.empty()) throw DimensionError("stack_images: no images");
  const Shape& inner = images.front()->shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Array out(shape);
  const std::size_t n = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != inner) throw DimensionError("stack_images: images differ in shape");
    out.values().segment(static_cast<Eigen::Index>(i * n), static_cast<Eigen::Index>(n)) = images[i]->values();
  }
  return out;
}

StreamBatch materialize(const std::vector<CohortSample>& samples, Stream stream, const std::vector<PairRef>& pairs,
                        const std::vector<std::size_t>& pair_indices) {
  StreamBatch batch;
  batch.stream = stream;
  std::vector<const Array*> left, right, left_m, right_m;
  for (std::size_t idx : pair_indices) {
    const PairRef& p = pairs.at(idx);
    const CohortSample& a = samples.at(p.left_sample);
    const CohortSample& b = samples.at(p.right_sample);
    if (a.participant_id != b.participant_id) throw ContractError("materialize: pair crosses participants");
    left.push_back(&*a.field(p.left_field));
    right.push_back(&*b.field(p.right_field));
    left_m.push_back(&a.measures);
    right_m.push_back(&b.measures);
    batch.participant_ids.push_back(a.participant_id);
    batch.left_visits.push_back(a.visit);
    batch.right_visits.push_back(b.visit);
  }
  batch.left = stack_images(left);
  batch.right = stack_images(right);
  batch.left_measures = stack_images(left_m);
  batch.right_measures = stack_images(right_m);
  return batch;
}

StreamScheduler::StreamScheduler(const std::vector<CohortSample>& samples, std::size_t batch_size, std::uint64_t seed)
    : samples_(&samples), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 2) throw ContractError("stream batches need batch_size >= 2");
  bool any = false;
  for (Stream s : kAllStreams) {
    pairs_[index(s)] = qualifying_pairs(samples, s);
    any = any || !empty(s);
  }
  if (!any) throw ContractError("every stream is empty: no sample qualifies for any pairing");
  cached_epoch_.fill(static_cast<std::size_t>(-1));
}

bool StreamScheduler::empty(Stream stream) const { return pairs_[index(stream)].size() < 2; }

std::vector<std::vector<std::size_t>> StreamScheduler::epoch_batches(Stream stream, std::size_t epoch) const {
  const std::size_t n = pairs_[index(stream)].size();
  std::vector<std::vector<std::size_t>> batches;
  if (n < 2) return batches;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({seed_, static_cast<std::uint64_t>(index(stream)) + 1, epoch}));
  rng.shuffle(order);
  for (std::size_t start = 0; start < n; start += batch_size_) {
    const std::size_t end = std::min(n, start + batch_size_);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::optional<StreamBatch> StreamScheduler::next(Stream stream) {
  if (empty(stream)) return std::nullopt;
  const std::size_t s = index(stream);
  StreamCursor& cursor = cursors_[s];
  for (;;) {
    if (cached_epoch_[s] != cursor.epoch) {
      cached_batches_[s] = epoch_batches(stream, cursor.epoch);
      cached_epoch_[s] = cursor.epoch;
    }
    if (cursor.position < cached_batches_[s].size()) break;
    ++cursor.epoch;
    cursor.position = 0;
  }
  return materialize(*samples_, stream, pairs_[s], cached_batches_[s][cursor.position++]);
}

std::array<std::optional<StreamBatch>, 4> StreamScheduler::next_step() {
  std::array<std::optional<StreamBatch>, 4> out;
  for (Stream s : kAllStreams) out[index(s)] = next(s);
  return out;
}

}  // namespace comprer
