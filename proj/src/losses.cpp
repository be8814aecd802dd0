#include "comprer/losses.hpp"

#include <algorithm>

namespace comprer {

std::string_view term_name(Term term) {
  switch (term) {
    case Term::contr_fc: return "contr_fc";
    case Term::contr_fv: return "contr_fv";
    case Term::contr_cv: return "contr_cv";
    case Term::contr_eye: return "contr_eye";
    case Term::pred_r: return "pred_r";
    case Term::pred_c: return "pred_c";
    case Term::rec_f: return "rec_f";
    case Term::rec_c: return "rec_c";
  }
  return "unknown";
}

std::optional<Term> parse_term(std::string_view name) {
  for (Term t : kAllTerms) {
    if (term_name(t) == name) return t;
  }
  return std::nullopt;
}

double LossWeights::weight(Term term) const {
  switch (term) {
    case Term::contr_fc: return fc;
    case Term::contr_fv: return fv;
    case Term::contr_cv: return cv;
    case Term::contr_eye: return eye;
    case Term::pred_r: return pred_r;
    case Term::pred_c: return pred_c;
    case Term::rec_f: return rec_f;
    case Term::rec_c: return rec_c;
  }
  return 0.0;
}

LossWeights LossWeights::paper_total() const {
  LossWeights out = *this;
  out.rec_f = 0.0;
  out.rec_c = 0.0;
  return out;
}

void LossWeights::validate() const {
  for (Term t : kAllTerms) {
    if (!(weight(t) >= 0.0)) throw ConfigError("loss weight for " + std::string(term_name(t)) + " must be >= 0");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json::object();
  for (Term t : kAllTerms) j[std::string(term_name(t))] = w.weight(t);
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.fc = j.value("contr_fc", w.fc);
  w.fv = j.value("contr_fv", w.fv);
  w.cv = j.value("contr_cv", w.cv);
  w.eye = j.value("contr_eye", w.eye);
  w.pred_r = j.value("pred_r", w.pred_r);
  w.pred_c = j.value("pred_c", w.pred_c);
  w.rec_f = j.value("rec_f", w.rec_f);
  w.rec_c = j.value("rec_c", w.rec_c);
}

bool LossReport::has(Term term) const {
  return std::any_of(terms.begin(), terms.end(), [term](const auto& p) { return p.first == term; });
}

double LossReport::value(Term term) const {
  for (const auto& [t, v] : terms) {
    if (t == term) return v;
  }
  throw ContractError("loss report has no term " + std::string(term_name(term)));
}

double LossReport::recompute_total(const LossWeights& weights) const {
  return total_loss(terms, weights).total;
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  j["step"] = step;
  for (const auto& [t, v] : terms) j[std::string(term_name(t))] = v;
  j["total"] = total;
  return j;
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  LossReport r;
  r.step = j.at("step").get<std::size_t>();
  r.total = j.at("total").get<double>();
  for (Term t : kAllTerms) {
    const std::string key(term_name(t));
    if (j.contains(key)) r.terms.emplace_back(t, j[key].get<double>());
  }
  return r;
}

Var cosine_similarity_matrix(Var u, Var v) {
  if (u.value().rank() != 2 || v.value().rank() != 2 || u.shape()[1] != v.shape()[1]) {
    throw DimensionError("cosine similarity needs [N×D] batches of equal width");
  }
  return matmul(row_l2_normalize(u), transpose(row_l2_normalize(v)));
}

namespace {

Var divide_by_tau(Var logits, const TemperatureNode& tau) {
  if (tau.log_tau.valid()) return mul(logits, exp(scale(tau.log_tau, -1.0)));
  if (!(tau.fixed > 0.0)) throw DomainError("temperature must be positive");
  return scale(logits, 1.0 / tau.fixed);
}

void check_pair(Var u, Var v) {
  if (u.value().rank() != 2 || u.shape() != v.shape()) {
    throw DimensionError("paired batches must share shape [N×D], got " + shape_string(u.shape()) + " and " +
                         shape_string(v.shape()));
  }
}

}  // namespace

Var contrastive_loss(Var u, Var v, const TemperatureNode& tau) {
  check_pair(u, v);
  Var logits = divide_by_tau(cosine_similarity_matrix(u, v), tau);
  return mean(sub(row_logsumexp(logits), diagonal(logits)));
}

Var clip_loss(Var u, Var v, const TemperatureNode& tau) {
  return scale(add(contrastive_loss(u, v, tau), contrastive_loss(v, u, tau)), 0.5);
}

NamedTerm instantiate_contrastive(Pairing pairing, const EmbeddingNode& first, const EmbeddingNode& second,
                                  const TemperatureNode& tau) {
  auto fail = [&](const char* expected) {
    throw PairingError(std::string("pairing expects ") + expected + ", got " + std::string(modality_name(first.modality)) +
                       "/" + std::string(view_name(first.view)) + " × " + std::string(modality_name(second.modality)) +
                       "/" + std::string(view_name(second.view)));
  };
  switch (pairing) {
    case Pairing::fc:
      if (first.modality != Modality::fundus || second.modality != Modality::carotid || first.view != second.view ||
          first.view == View::eye_right || first.view == View::eye_left) {
        fail("fundus × carotid at the same visit");
      }
      break;
    case Pairing::fv:
      if (first.modality != Modality::fundus || second.modality != Modality::fundus || first.view != View::visit_t ||
          second.view != View::visit_t_prime) {
        fail("fundus at visit t × fundus at visit t'");
      }
      break;
    case Pairing::cv:
      if (first.modality != Modality::carotid || second.modality != Modality::carotid || first.view != View::visit_t ||
          second.view != View::visit_t_prime) {
        fail("carotid at visit t × carotid at visit t'");
      }
      break;
    case Pairing::eye:
      if (first.modality != Modality::fundus || second.modality != Modality::fundus || first.view != View::eye_right ||
          second.view != View::eye_left) {
        fail("right-eye fundus × left-eye fundus");
      }
      break;
  }
  return {pairing_term(pairing), clip_loss(first.values, second.values, tau)};
}

Var prediction_mse(Var measures, Var predicted) {
  if (measures.shape() != predicted.shape()) {
    throw DimensionError("prediction_mse: shapes " + shape_string(measures.shape()) + " and " +
                         shape_string(predicted.shape()) + " differ");
  }
  Var diff = sub(predicted, measures);
  return mean(mul(diff, diff));
}

Var reconstruction_mse(Var image, Var decoded) {
  if (image.shape() != decoded.shape()) {
    throw DimensionError("reconstruction_mse: shapes " + shape_string(image.shape()) + " and " +
                         shape_string(decoded.shape()) + " differ");
  }
  Var diff = sub(decoded, image);
  return mean(mul(diff, diff));
}

namespace {

template <class T, class ValueOf>
std::vector<const T*> canonical_order(std::span<const T> terms, ValueOf term_of) {
  if (terms.empty()) throw ContractError("total loss needs at least one term");
  std::vector<const T*> ordered;
  for (const auto& t : terms) ordered.push_back(&t);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [&](const T* a, const T* b) { return static_cast<int>(term_of(*a)) < static_cast<int>(term_of(*b)); });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (term_of(*ordered[i]) == term_of(*ordered[i - 1])) {
      throw ContractError("duplicate loss term " + std::string(term_name(term_of(*ordered[i]))));
    }
  }
  return ordered;
}

}  // namespace

TotalLoss total_loss(std::span<const NamedTerm> terms, const LossWeights& weights) {
  const auto ordered = canonical_order(terms, [](const NamedTerm& t) { return t.term; });
  TotalLoss out;
  for (const NamedTerm* t : ordered) {
    Var weighted = scale(t->value, weights.weight(t->term));
    out.total = out.total.valid() ? add(out.total, weighted) : weighted;
    out.report.terms.emplace_back(t->term, t->value.value().item());
  }
  out.report.total = out.total.value().item();
  return out;
}

LossReport total_loss(std::span<const std::pair<Term, double>> terms, const LossWeights& weights) {
  const auto ordered = canonical_order(terms, [](const std::pair<Term, double>& t) { return t.first; });
  LossReport report;
  bool first = true;
  for (const auto* t : ordered) {
    const double weighted = t->second * weights.weight(t->first);
    report.total = first ? weighted : report.total + weighted;
    first = false;
    report.terms.push_back(*t);
  }
  return report;
}

namespace {

void check_batch(const EmbeddingBatch& b) {
  if (b.values.rank() != 2 || b.values.dim(1) < 2) {
    throw DimensionError("embedding batch must be [N×D] with D >= 2, got " + shape_string(b.values.shape()));
  }
}

TemperatureNode fixed_tau(const Temperature& tau) { return TemperatureNode::constant(tau.tau); }

}  // namespace

Array cosine_similarity_matrix(const EmbeddingBatch& u, const EmbeddingBatch& v) {
  check_batch(u);
  check_batch(v);
  if (u.values.shape() != v.values.shape()) throw DimensionError("cosine similarity needs batches of equal shape");
  Tape tape;
  return cosine_similarity_matrix(tape.constant(u.values), tape.constant(v.values)).value();
}

double contrastive_loss(const EmbeddingBatch& u, const EmbeddingBatch& v, const Temperature& tau) {
  check_batch(u);
  check_batch(v);
  Tape tape;
  return contrastive_loss(tape.constant(u.values), tape.constant(v.values), fixed_tau(tau)).value().item();
}

double clip_loss(const EmbeddingBatch& u, const EmbeddingBatch& v, const Temperature& tau) {
  check_batch(u);
  check_batch(v);
  Tape tape;
  return clip_loss(tape.constant(u.values), tape.constant(v.values), fixed_tau(tau)).value().item();
}

double instantiate_contrastive(Pairing pairing, const EmbeddingBatch& first, const EmbeddingBatch& second,
                               const Temperature& tau) {
  check_batch(first);
  check_batch(second);
  Tape tape;
  EmbeddingNode a{tape.constant(first.values), first.modality, first.view};
  EmbeddingNode b{tape.constant(second.values), second.modality, second.view};
  return instantiate_contrastive(pairing, a, b, fixed_tau(tau)).value.value().item();
}

double prediction_mse(const Array& measures, const Array& predicted) {
  Tape tape;
  return prediction_mse(tape.constant(measures), tape.constant(predicted)).value().item();
}

double reconstruction_mse(const Array& image, const Array& decoded) {
  Tape tape;
  return reconstruction_mse(tape.constant(image), tape.constant(decoded)).value().item();
}

}  // namespace comprer
