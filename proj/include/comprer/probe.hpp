#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "comprer/metrics.hpp"
#include "comprer/model.hpp"
#include "comprer/synthdata.hpp"

namespace comprer {

enum class ProbeTask { diagnosis, prognosis };

std::string_view task_name(ProbeTask task);
ProbeTask parse_task(std::string_view name);

struct ProbeConfig {
  double l2_strength = 1e-2;
  std::size_t max_iterations = 1000;
  double convergence_tol = 1e-6;
  ProbeTask task = ProbeTask::diagnosis;

  void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct GridPoint {
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t epochs = 20;
};

struct SearchGrid {
  std::vector<double> lr = {1e-3, 3e-4, 1e-4};
  std::vector<double> weight_decay = {0.0, 1e-2, 1e-1};
  std::vector<std::size_t> epochs = {20, 50};
  std::size_t batch_size = 16;
  /// How many points, by validation AUC, form the reported distribution.
  std::size_t top = 5;

  /// Cartesian product, lr outermost, epochs innermost.
  std::vector<GridPoint> points() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const SearchGrid& g);
void from_json(const nlohmann::json& j, SearchGrid& g);

/// Frozen encoder embeddings of every sample that has the modality (fundus
/// uses the representative eye).
struct EmbeddingTable {
  Array embeddings;  ///< [N×D]
  std::vector<std::size_t> participant_ids;
  std::vector<Visit> visits;
  std::size_t skipped = 0;  ///< samples without the modality
};

EmbeddingTable extract_embeddings(const ModelParams& params, const std::vector<CohortSample>& samples,
                                  Modality modality = Modality::fundus);

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::filesystem::path& path);

/// Rows of one task population: baseline-visit embeddings, with prognosis
/// restricted to participants healthy at baseline.
struct ProbeDataset {
  MatrixXd x;
  VectorXd y;
  std::vector<std::size_t> participant_ids;

  std::size_t size() const { return participant_ids.size(); }
};

ProbeDataset task_population(const EmbeddingTable& table, const std::vector<CohortSample>& samples, ProbeTask task);
/// Rows whose participant is in `ids` (sorted).
ProbeDataset restrict_to(const ProbeDataset& data, const std::vector<std::size_t>& ids);

/// Column mean / stddev of a fitting population; applied to every split.
struct Standardizer {
  VectorXd mean, scale;

  static Standardizer fit(const MatrixXd& x);
  MatrixXd apply(const MatrixXd& x) const;
};

struct LogisticModel {
  VectorXd w;
  double b = 0.0;
  std::vector<double> loss_trace;  ///< objective after each accepted step, starting at the initial point
  std::size_t iterations = 0;
  bool converged = false;

  VectorXd decision(const MatrixXd& x) const { return (x * w).array() + b; }
};

/// Mean logistic loss + (λ/2)·‖w‖², bias unpenalized.
double logistic_objective(const MatrixXd& x, const VectorXd& y, const VectorXd& w, double b, double l2);

/// Full-batch gradient descent with Armijo backtracking; stops when the
/// gradient norm drops below tol. Single-class labels raise
/// DegenerateInputError.
LogisticModel fit_logistic(const MatrixXd& x, const VectorXd& y, const ProbeConfig& config);

/// Throws ContractError if any fitting participant belongs to the test split.
void assert_no_test_leakage(const std::vector<std::size_t>& fit_ids, const CohortSplit& split);

struct ProbeOutcome {
  double train_auc = 0.0, validation_auc = 0.0, test_auc = 0.0;
  std::size_t n_train = 0, n_validation = 0, n_test = 0;
  std::size_t skipped = 0;
};

/// Standardize on train, fit on train, score every split.
ProbeOutcome run_logistic_probe(const ModelParams& params, const Cohort& cohort, const ProbeConfig& config,
                                Modality modality = Modality::fundus);

/// Same report shape as the other evaluations: auc_per_label holds
/// "<task>.train", "<task>.validation", "<task>.test".
MetricReport evaluate_task(const ModelParams& params, const Cohort& cohort, const ProbeConfig& config,
                           Modality modality = Modality::fundus);

struct SearchRecord {
  std::size_t index = 0;
  GridPoint point;
  double validation_auc = 0.0;
  double test_auc = 0.0;
  bool selected = false;
};

struct SearchResult {
  ProbeTask task = ProbeTask::diagnosis;
  std::vector<SearchRecord> records;
  std::vector<double> distribution;  ///< test AUCs of the selected points, by selection rank
  double median_test_auc = 0.0;
  std::size_t n_train = 0, n_validation = 0, n_test = 0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Affine + sigmoid head trained with AdamW on frozen standardized embeddings
/// for every grid point; top `grid.top` by validation AUC (ties by grid
/// order) report their test AUC.
SearchResult finetune_head_search(const ModelParams& params, const Cohort& cohort, const SearchGrid& grid,
                                  ProbeTask task, std::uint64_t seed, Modality modality = Modality::fundus);

double median(std::vector<double> values);

}  // namespace comprer
