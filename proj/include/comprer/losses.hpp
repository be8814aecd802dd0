#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "comprer/modality.hpp"
#include "comprer/ops.hpp"

namespace comprer {

/// Rows of `values` are projected embeddings, row i belonging to participant i
/// of the batch. Instantiated over Array (plain values) and Var (tape nodes).
template <class T>
struct TaggedBatch {
  T values;
  Modality modality = Modality::fundus;
  View view = View::plain;
};

using EmbeddingBatch = TaggedBatch<Array>;
using EmbeddingNode = TaggedBatch<Var>;

/// Softmax temperature. A learnable temperature is carried as log τ so that
/// τ stays positive.
struct Temperature {
  double tau = 0.07;
  bool learnable = false;
};

/// Temperature as seen by a tape: either a fixed τ or a log-τ node.
struct TemperatureNode {
  double fixed = 0.07;
  Var log_tau;

  static TemperatureNode constant(double tau) { return {tau, {}}; }
  static TemperatureNode learned(Var log_tau) { return {0.0, log_tau}; }
};

/// Loss terms in their canonical summation order.
enum class Term { contr_fc, contr_fv, contr_cv, contr_eye, pred_r, pred_c, rec_f, rec_c };

inline constexpr std::array<Term, 8> kAllTerms = {Term::contr_fc, Term::contr_fv, Term::contr_cv, Term::contr_eye,
                                                  Term::pred_r,   Term::pred_c,   Term::rec_f,    Term::rec_c};

std::string_view term_name(Term term);
std::optional<Term> parse_term(std::string_view name);

enum class Pairing { fc, fv, cv, eye };

constexpr Term pairing_term(Pairing p) {
  switch (p) {
    case Pairing::fc: return Term::contr_fc;
    case Pairing::fv: return Term::contr_fv;
    case Pairing::cv: return Term::contr_cv;
    case Pairing::eye: return Term::contr_eye;
  }
  return Term::contr_fc;
}

struct LossWeights {
  double fc = 1.0, fv = 1.0, cv = 1.0, eye = 1.0;
  double pred_r = 1.0, pred_c = 1.0;
  double rec_f = 1.0, rec_c = 1.0;

  double weight(Term term) const;
  /// Zeroes the reconstruction weights, leaving the six-term objective.
  LossWeights paper_total() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct NamedTerm {
  Term term;
  Var value;
};

/// Scalar losses of one step. Terms are kept in canonical order; a stream that
/// was absent has no entry at all.
struct LossReport {
  std::vector<std::pair<Term, double>> terms;
  double total = 0.0;
  std::size_t step = 0;

  bool has(Term term) const;
  double value(Term term) const;
  /// Re-sums the terms with the given weights (same order as total_loss).
  double recompute_total(const LossWeights& weights) const;
  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
};

// --- tape-level objectives -------------------------------------------------

/// Entry (i, j) is the cosine similarity of u_i and v_j.
Var cosine_similarity_matrix(Var u, Var v);

/// −(1/N) Σ_i log softmax_j(sim(u_i, v_j)/τ) evaluated at j = i, with a
/// max-subtracted log-sum-exp.
Var contrastive_loss(Var u, Var v, const TemperatureNode& tau);

/// ½(contrastive_loss(u, v) + contrastive_loss(v, u)). Each direction builds
/// its own similarity matrix, so swapping the operands only swaps the addends.
Var clip_loss(Var u, Var v, const TemperatureNode& tau);

/// Validates the batch tags against the pairing and returns its CLIP term.
/// fc: fundus × carotid at one visit; fv: fundus t × t'; cv: carotid t × t';
/// eye: fundus right × left. Mismatches raise PairingError.
NamedTerm instantiate_contrastive(Pairing pairing, const EmbeddingNode& first, const EmbeddingNode& second,
                                  const TemperatureNode& tau);

/// Mean over all N·P entries of the squared error.
Var prediction_mse(Var measures, Var predicted);
Var reconstruction_mse(Var image, Var decoded);

struct TotalLoss {
  Var total;
  LossReport report;
};

/// Σ weight·value over the present terms, in canonical term order.
/// Empty or duplicated term sets raise ContractError.
TotalLoss total_loss(std::span<const NamedTerm> terms, const LossWeights& weights);
LossReport total_loss(std::span<const std::pair<Term, double>> terms, const LossWeights& weights);

// --- value-level conveniences (each runs a private tape) --------------------

Array cosine_similarity_matrix(const EmbeddingBatch& u, const EmbeddingBatch& v);
double contrastive_loss(const EmbeddingBatch& u, const EmbeddingBatch& v, const Temperature& tau);
double clip_loss(const EmbeddingBatch& u, const EmbeddingBatch& v, const Temperature& tau);
double instantiate_contrastive(Pairing pairing, const EmbeddingBatch& first, const EmbeddingBatch& second,
                               const Temperature& tau);
double prediction_mse(const Array& measures, const Array& predicted);
double reconstruction_mse(const Array& image, const Array& decoded);

}  // namespace comprer
