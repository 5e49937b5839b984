#include "contactsense/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "contactsense/error.hpp"
#include "parallel.hpp"

namespace contactsense {

using ordered_json = nlohmann::ordered_json;

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : names_(std::move(class_names)), counts_(names_.size() * names_.size(), 0) {
  if (names_.empty()) throw ParameterError("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::four_class() {
  return ConfusionMatrix(std::vector<std::string>(kLabelNames.begin(), kLabelNames.end()));
}

void ConfusionMatrix::add(std::size_t truth, std::size_t pred, std::size_t n) {
  if (truth >= size() || pred >= size()) throw ParameterError("class index out of range");
  counts_[truth * size() + pred] += n;
}

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t t = 0;
  for (std::size_t p = 0; p < size(); ++p) t += at(truth, p);
  return t;
}

std::size_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::size_t t = 0;
  for (std::size_t r = 0; r < size(); ++r) t += at(r, pred);
  return t;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < size(); ++i) t += at(i, i);
  return t;
}

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) {
    throw ParameterError("length mismatch: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  auto cm = ConfusionMatrix::four_class();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= kNumClasses || labels[i] < 0 || labels[i] >= kNumClasses) {
      throw ParameterError("class value out of range at index " + std::to_string(i));
    }
    cm.add(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return cm;
}

MetricReport metrics(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw ParameterError("empty confusion matrix");
  MetricReport r;
  r.total = total;
  std::size_t supported = 0;
  for (std::size_t c = 0; c < cm.size(); ++c) {
    ClassMetrics m;
    m.name = cm.class_names()[c];
    const double tp = static_cast<double>(cm.at(c, c));
    const auto col = cm.col_sum(c);
    m.support = cm.row_sum(c);
    m.precision = col == 0 ? 0.0 : tp / static_cast<double>(col);
    m.recall = m.support == 0 ? 0.0 : tp / static_cast<double>(m.support);
    m.f1 = m.precision + m.recall == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    if (m.support > 0) {
      ++supported;
      r.macro_precision += m.precision;
      r.macro_recall += m.recall;
      r.macro_f1 += m.f1;
    }
    r.per_class.push_back(std::move(m));
  }
  r.macro_precision /= static_cast<double>(supported);
  r.macro_recall /= static_cast<double>(supported);
  r.macro_f1 /= static_cast<double>(supported);
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  return r;
}

int binary_index(int four_class_index) { return four_class_index == index_of(Label::ambient) ? 0 : 1; }

ConfusionMatrix binary_collapse(const ConfusionMatrix& cm) {
  if (cm.size() != static_cast<std::size_t>(kNumClasses)) throw ParameterError("binary collapse needs a 4-class matrix");
  ConfusionMatrix out({"ambient", "contact"});
  for (int t = 0; t < kNumClasses; ++t)
    for (int p = 0; p < kNumClasses; ++p)
      out.add(static_cast<std::size_t>(binary_index(t)), static_cast<std::size_t>(binary_index(p)),
              cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p)));
  return out;
}

std::string report_json(const ConfusionMatrix& cm, const MetricReport& r) {
  ordered_json j;
  j["classes"] = cm.class_names();
  ordered_json rows = ordered_json::array();
  for (std::size_t t = 0; t < cm.size(); ++t) {
    ordered_json row = ordered_json::array();
    for (std::size_t p = 0; p < cm.size(); ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  ordered_json per = ordered_json::array();
  for (const auto& m : r.per_class) {
    per.push_back({{"class", m.name}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
                   {"support", m.support}});
  }
  j["per_class"] = per;
  j["macro"] = {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}};
  j["averaging"] = "macro over classes with support";
  j["accuracy"] = r.accuracy;
  j["total"] = r.total;
  return j.dump(2) + "\n";
}

std::string report_text(const ConfusionMatrix& cm, const MetricReport& r) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %9s %9s %9s %9s\n", "class", "precision", "recall", "f1", "support");
  out << buf;
  for (const auto& m : r.per_class) {
    std::snprintf(buf, sizeof buf, "%-10s %9.4f %9.4f %9.4f %9zu\n", m.name.c_str(), m.precision, m.recall, m.f1,
                  m.support);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-10s %9.4f %9.4f %9.4f %9zu\n", "macro", r.macro_precision, r.macro_recall,
                r.macro_f1, r.total);
  out << buf;
  std::snprintf(buf, sizeof buf, "accuracy %.4f\n\nconfusion (rows true, cols predicted)\n", r.accuracy);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-10s", "");
  out << buf;
  for (const auto& n : cm.class_names()) {
    std::snprintf(buf, sizeof buf, " %8s", n.c_str());
    out << buf;
  }
  out << "\n";
  for (std::size_t t = 0; t < cm.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%-10s", cm.class_names()[t].c_str());
    out << buf;
    for (std::size_t p = 0; p < cm.size(); ++p) {
      std::snprintf(buf, sizeof buf, " %8zu", cm.at(t, p));
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

std::vector<AblationPoint> window_ablation(const std::vector<double>& durations, const AblationHooks& hooks,
                                           std::uint64_t seed, int jobs) {
  if (durations.empty()) throw ParameterError("no durations to sweep");
  std::size_t n_train = SIZE_MAX;
  std::size_t n_eval = SIZE_MAX;
  for (double d : durations) {
    const auto [tr, ev] = hooks.available(d);
    if (tr == 0 || ev == 0) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.3f", d);
      throw ParameterError(std::string("duration ") + buf + " s produced zero samples");
    }
    n_train = std::min(n_train, tr);
    n_eval = std::min(n_eval, ev);
  }
  std::vector<AblationPoint> curve(durations.size());
  detail::parallel_for(durations.size(), jobs, [&](std::size_t i) {
    curve[i] = AblationPoint{durations[i], hooks.run(durations[i], n_train, n_eval, seed), n_train + n_eval, seed};
  });
  return curve;
}

std::vector<double> parse_duration_range(const std::string& spec) {
  double lo = 0, hi = 0, step = 0;
  char tail = 0;
  if (std::sscanf(spec.c_str(), "%lf:%lf:%lf%c", &lo, &hi, &step, &tail) != 3) {
    throw ParameterError("durations must look like lo:hi:step, got '" + spec + "'");
  }
  if (!(lo > 0.0) || !(step > 0.0) || hi < lo) throw ParameterError("durations need 0 < lo <= hi and step > 0");
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-6));
  for (long k = 0; k <= n; ++k) out.push_back(std::round((lo + static_cast<double>(k) * step) * 1e9) / 1e9);
  return out;
}

std::string ablation_csv(const std::vector<AblationPoint>& curve) {
  std::string out = "duration_s,accuracy,n_samples,seed\n";
  char buf[128];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.3f,%.6f,%zu,%llu\n", p.duration_s, p.accuracy, p.n_samples,
                  static_cast<unsigned long long>(p.seed));
    out += buf;
  }
  return out;
}

std::string ablation_json(const std::vector<AblationPoint>& curve) {
  ordered_json j;
  j["metric"] = "sample accuracy";
  ordered_json pts = ordered_json::array();
  for (const auto& p : curve) {
    pts.push_back({{"duration_s", p.duration_s}, {"accuracy", p.accuracy}, {"n_samples", p.n_samples},
                   {"seed", p.seed}});
  }
  j["points"] = pts;
  return j.dump(2) + "\n";
}

}  // namespace contactsense
