#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "contactsense/labels.hpp"

namespace contactsense {

// Rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::vector<std::string> class_names);
  static ConfusionMatrix four_class();

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& class_names() const { return names_; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * size() + pred]; }
  void add(std::size_t truth, std::size_t pred, std::size_t n = 1);
  std::size_t total() const;
  std::size_t row_sum(std::size_t truth) const;
  std::size_t col_sum(std::size_t pred) const;
  std::size_t trace() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> counts_;
};

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels);

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t total = 0;
};

// Zero denominators give 0. Macro means skip classes with no support.
MetricReport metrics(const ConfusionMatrix& cm);

// (ambient, contact) order; leaf, twig and trunk merge into contact.
ConfusionMatrix binary_collapse(const ConfusionMatrix& cm);
int binary_index(int four_class_index);

std::string report_json(const ConfusionMatrix& cm, const MetricReport& r);
std::string report_text(const ConfusionMatrix& cm, const MetricReport& r);

struct AblationPoint {
  double duration_s = 0.0;
  double accuracy = 0.0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

// Returns evaluation accuracy for one duration using exactly `budget`
// training samples (and the matching evaluation count).
struct AblationHooks {
  // Number of (train, eval) samples the duration can offer.
  std::function<std::pair<std::size_t, std::size_t>(double duration_s)> available;
  // Builds, trains and evaluates with the given per-split budget.
  std::function<double(double duration_s, std::size_t n_train, std::size_t n_eval, std::uint64_t seed)> run;
};

// Durations are swept in order; every point uses the smallest sample budget
// found across all durations so the curve compares equal amounts of data.
std::vector<AblationPoint> window_ablation(const std::vector<double>& durations, const AblationHooks& hooks,
                                           std::uint64_t seed, int jobs = 1);

// "lo:hi:step"; hi is included when it lands on the grid (up to rounding).
std::vector<double> parse_duration_range(const std::string& spec);

std::string ablation_csv(const std::vector<AblationPoint>& curve);
std::string ablation_json(const std::vector<AblationPoint>& curve);

}  // namespace contactsense
