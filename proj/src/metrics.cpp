#include "comprer/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace comprer {

namespace {

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json keyed(const std::map<std::size_t, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

std::map<std::size_t, double> unkeyed(const nlohmann::json& j) {
  std::map<std::size_t, double> m;
  for (const auto& [k, v] : j.items()) m[std::stoul(k)] = v.get<double>();
  return m;
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  return {{"step", step},
          {"k_values", k_values},
          {"top_k", keyed(top_k)},
          {"mult_top_k", keyed(mult_top_k)},
          {"r2_per_measure", r2_per_measure},
          {"auc_per_label", auc_per_label},
          {"scalars", scalars}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  r.step = j.value("step", std::size_t{0});
  r.k_values = j.value("k_values", std::vector<std::size_t>{});
  if (j.contains("top_k")) r.top_k = unkeyed(j["top_k"]);
  if (j.contains("mult_top_k")) r.mult_top_k = unkeyed(j["mult_top_k"]);
  r.r2_per_measure = j.value("r2_per_measure", std::map<std::string, double>{});
  r.auc_per_label = j.value("auc_per_label", std::map<std::string, double>{});
  r.scalars = j.value("scalars", std::map<std::string, double>{});
  return r;
}

std::string MetricReport::to_csv(bool header) const {
  std::ostringstream out;
  if (header) out << "step,metric,key,value\n";
  auto row = [&](const char* metric, const std::string& key, double v) {
    out << step << ',' << metric << ',' << key << ',' << format_value(v) << '\n';
  };
  for (std::size_t k : k_values) {
    if (top_k.count(k)) row("top_k", std::to_string(k), top_k.at(k));
  }
  for (std::size_t k : k_values) {
    if (mult_top_k.count(k)) row("mult_top_k", std::to_string(k), mult_top_k.at(k));
  }
  for (const auto& [name, v] : r2_per_measure) row("r2", name, v);
  for (const auto& [name, v] : auc_per_label) row("auc", name, v);
  for (const auto& [name, v] : scalars) row("scalar", name, v);
  return out.str();
}

}  // namespace comprer
