#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/nn.hpp"

namespace fedsim::metrics {

/// counts[t * classes + p]: rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;

  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * classes + predicted];
  }
  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t c) const;
  std::size_t col_sum(std::size_t c) const;

  bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct Scores {
  std::vector<ClassScores> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::size_t classes_in_macro = 0;
};

ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t classes);

/// Per-class precision/recall/F1 with empty denominators mapped to 0. Macro averages
/// cover only classes that occur in the truth or in the predictions.
Scores precision_recall_f1(const ConfusionMatrix& cm);

struct MetricsRecord {
  std::size_t round = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassScores> per_class;
  double sim_time = 0.0;
  std::string strategy;
  std::string setting;
};

/// Accuracy, macro-F1 and per-class scores of `model` on a held-out set.
/// Throws EvaluationError on an empty set.
MetricsRecord evaluate(const nn::MlpModel& model, const data::Dataset& test);

/// Fixed CSV schema: strategy,setting,round,accuracy,macro_f1,sim_time, then
/// precision_<c>,recall_<c>,f1_<c> for every class c.
std::string csv_header(std::size_t classes);
std::string csv_row(const MetricsRecord& r);

}  // namespace fedsim::metrics
