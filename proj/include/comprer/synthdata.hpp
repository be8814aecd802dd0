#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "comprer/array.hpp"
#include "comprer/modality.hpp"

namespace comprer {

/// Knobs of the synthetic cohort. Rendering banks (patterns, measure and label
/// directions) come from `world_seed`; participants come from the seed passed
/// to generate_cohort, so two cohorts with one world_seed share their physics.
struct GeneratorConfig {
  std::size_t n_participants = 600;
  std::size_t latent_dim = 8;
  std::size_t n_measures = 4;
  std::size_t image_size = 16;
  /// Period, in pixels, of the per-image tiled nuisance. Matching the encoder
  /// patch keeps that nuisance out of the signal frequencies.
  std::size_t tile_period = 4;
  double drift = 0.3;
  double pixel_noise = 0.05;
  double signal_amplitude = 0.12;
  double nonlinear_amplitude = 0.3;
  std::size_t nonlinear_features = 6;
  /// Per-eye anatomical nuisance, constant across visits.
  std::size_t eye_nuisance_dim = 2;
  double tile_nuisance = 1.0;
  double measure_noise = 0.1;
  double diagnosis_scale = 3.0;
  double diagnosis_bias = -0.5;
  double prognosis_scale = 3.0;
  double prognosis_bias = -0.5;
  /// Independent drop probability of each image field of a sample.
  double missing_probability = 0.1;
  double second_visit_fraction = 0.13;
  std::uint64_t world_seed = 20240601;

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

enum class Visit { t, t_prime };
enum class ImageField { fundus_right, fundus_left, carotid };

constexpr std::string_view visit_name(Visit v) { return v == Visit::t ? "t" : "t_prime"; }
constexpr View visit_view(Visit v) { return v == Visit::t ? View::visit_t : View::visit_t_prime; }
std::string_view field_name(ImageField f);

struct PresenceMask {
  bool fundus_right = false;
  bool fundus_left = false;
  bool carotid = false;

  bool any_fundus() const { return fundus_right || fundus_left; }
  bool any() const { return fundus_right || fundus_left || carotid; }
};

/// One participant at one visit. Images are [3×S×S] in [0, 1].
struct CohortSample {
  std::size_t participant_id = 0;
  Visit visit = Visit::t;
  std::optional<Array> fundus_right, fundus_left, carotid;
  Array measures;
  Array latent;
  int diagnosis = 0;
  /// -1 when the participant was positive at baseline.
  int prognosis = -1;

  PresenceMask presence() const { return {fundus_right.has_value(), fundus_left.has_value(), carotid.has_value()}; }
  const std::optional<Array>& field(ImageField f) const;
  /// Right eye when present, else left; nullopt without fundus.
  std::optional<ImageField> representative_fundus() const;
};

/// Participant-level split; every list is sorted.
struct CohortSplit {
  std::vector<std::size_t> train, validation, test;

  bool contains(const std::vector<std::size_t>& ids, std::size_t id) const;
};

struct Cohort {
  GeneratorConfig config;
  std::uint64_t seed = 0;
  /// Ordered by (participant_id, visit).
  std::vector<CohortSample> samples;
  CohortSplit split;

  std::size_t participant_count() const;
  /// Samples of the listed participants, in cohort order.
  std::vector<CohortSample> select(const std::vector<std::size_t>& participant_ids) const;
};

/// Ground-truth world shared by every participant of a cohort.
struct GeneratorWorld {
  Array fundus_bank;      ///< [L×3×S×S]
  Array carotid_bank;     ///< [L×3×S×S]
  Array eye_bank;         ///< [E×3×S×S]
  Array fundus_nonlinear; ///< [F×3×S×S]
  Array carotid_nonlinear;
  Array nonlinear_w;      ///< [F×L]
  Array nonlinear_b;      ///< [F]
  Array measure_map;      ///< [P×L], unit-norm rows
  Array diagnosis_w;      ///< [L], unit norm
  Array prognosis_w;      ///< [L], unit norm
};

GeneratorWorld make_world(const GeneratorConfig& config);

/// Requires n_participants >= 10. Deterministic per (config, seed).
std::vector<CohortSample> generate_cohort(std::size_t n_participants, const GeneratorConfig& config,
                                          std::uint64_t seed);

/// 80/20 train/test, then 20% of train to validation, by participant.
CohortSplit split_cohort(const std::vector<CohortSample>& samples, std::uint64_t seed);
CohortSplit split_participants(std::vector<std::size_t> participant_ids, std::uint64_t seed);

/// generate_cohort + split_cohort with the same seed.
Cohort make_cohort(const GeneratorConfig& config, std::uint64_t seed);

// Persistence: cohort.json (config, seed, counts, split ids) plus one
// directory per split holding array files and a samples.csv export.
void save_cohort(const std::filesystem::path& dir, const Cohort& cohort);
Cohort load_cohort(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Four-stream scheduler.

enum class Stream { fc, fv, cv, eyes };
inline constexpr std::array<Stream, 4> kAllStreams = {Stream::fc, Stream::fv, Stream::cv, Stream::eyes};

std::string_view stream_name(Stream s);

/// One qualifying pair: an image of one sample against an image of another
/// (or the same) sample of the same participant.
struct PairRef {
  std::size_t left_sample = 0;
  ImageField left_field = ImageField::fundus_right;
  std::size_t right_sample = 0;
  ImageField right_field = ImageField::carotid;
};

/// fc: fundus (representative eye) with carotid of one sample.
/// fv / cv: one modality at visit t (left) and t' (right).
/// eyes: right eye (left side) with left eye (right side) of one sample.
std::vector<PairRef> qualifying_pairs(const std::vector<CohortSample>& samples, Stream stream);

/// `left` and `right` name the two sides of the pair, not eyes.
struct StreamBatch {
  Stream stream = Stream::fc;
  Array left, right;                    ///< [N×3×S×S]
  Array left_measures, right_measures;  ///< [N×P], each side's own visit
  std::vector<std::size_t> participant_ids;
  std::vector<Visit> left_visits, right_visits;

  std::size_t size() const { return participant_ids.size(); }
};

StreamBatch materialize(const std::vector<CohortSample>& samples, Stream stream, const std::vector<PairRef>& pairs,
                        const std::vector<std::size_t>& pair_indices);

struct StreamCursor {
  std::size_t epoch = 0;
  std::size_t position = 0;  ///< index of the next batch in the epoch
};

/// Independent shuffled epochs per stream; each epoch visits every qualifying
/// pair once, with a trailing batch of fewer than two pairs dropped.
class StreamScheduler {
 public:
  /// Throws ContractError if batch_size < 2 or every stream is empty.
  StreamScheduler(const std::vector<CohortSample>& samples, std::size_t batch_size, std::uint64_t seed);

  /// Next batch of the stream; nullopt for a stream that yields nothing.
  std::optional<StreamBatch> next(Stream stream);
  /// One batch from every stream, indexed like kAllStreams.
  std::array<std::optional<StreamBatch>, 4> next_step();

  /// Pair indices of each batch of one epoch, in delivery order.
  std::vector<std::vector<std::size_t>> epoch_batches(Stream stream, std::size_t epoch) const;
  const std::vector<PairRef>& pairs(Stream stream) const { return pairs_[index(stream)]; }
  bool empty(Stream stream) const;

  std::array<StreamCursor, 4> cursors() const { return cursors_; }
  void set_cursors(const std::array<StreamCursor, 4>& cursors) { cursors_ = cursors; }

 private:
  static std::size_t index(Stream s) { return static_cast<std::size_t>(s); }

  const std::vector<CohortSample>* samples_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::array<std::vector<PairRef>, 4> pairs_;
  std::array<StreamCursor, 4> cursors_{};
  // Cached order of the epoch a cursor currently points into.
  std::array<std::size_t, 4> cached_epoch_{};
  std::array<std::vector<std::vector<std::size_t>>, 4> cached_batches_;
};

/// Stacks the listed images ([3×S×S] each) into [N×3×S×S].
Array stack_images(const std::vector<const Array*>& images);

}  // namespace comprer
