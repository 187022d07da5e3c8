#include "fedsim/metrics.hpp"

#include <cstdio>

#include "fedsim/error.hpp"

namespace fedsim::metrics {

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::size_t ConfusionMatrix::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < classes; ++c) n += at(c, c);
  return n;
}

std::size_t ConfusionMatrix::row_sum(std::size_t c) const {
  std::size_t n = 0;
  for (std::size_t p = 0; p < classes; ++p) n += at(c, p);
  return n;
}

std::size_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < classes; ++t) n += at(t, c);
  return n;
}

ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t classes) {
  if (truth.size() != predicted.size()) {
    throw EvaluationError("truth has " + std::to_string(truth.size()) + " labels, predictions " +
                          std::to_string(predicted.size()));
  }
  ConfusionMatrix cm{classes, std::vector<std::size_t>(classes * classes, 0)};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || predicted[i] >= classes) {
      throw EvaluationError("label out of range at position " + std::to_string(i));
    }
    ++cm.counts[truth[i] * classes + predicted[i]];
  }
  return cm;
}

Scores precision_recall_f1(const ConfusionMatrix& cm) {
  Scores s;
  s.per_class.resize(cm.classes);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    const std::size_t rows = cm.row_sum(c);
    const std::size_t cols = cm.col_sum(c);
    auto& k = s.per_class[c];
    k.precision = ratio(cm.at(c, c), cols);
    k.recall = ratio(cm.at(c, c), rows);
    k.f1 = k.precision + k.recall > 0.0 ? 2.0 * k.precision * k.recall / (k.precision + k.recall) : 0.0;
    if (rows > 0 || cols > 0) {
      s.macro_precision += k.precision;
      s.macro_recall += k.recall;
      s.macro_f1 += k.f1;
      ++s.classes_in_macro;
    }
  }
  if (s.classes_in_macro > 0) {
    const double n = static_cast<double>(s.classes_in_macro);
    s.macro_precision /= n;
    s.macro_recall /= n;
    s.macro_f1 /= n;
  }
  return s;
}

MetricsRecord evaluate(const nn::MlpModel& model, const data::Dataset& test) {
  if (test.size() == 0) throw EvaluationError("empty test set");
  const auto predicted = nn::predict(model, test.features);
  const auto cm = confusion(test.labels, predicted, test.num_classes);
  const auto scores = precision_recall_f1(cm);
  MetricsRecord r;
  r.accuracy = ratio(cm.trace(), cm.total());
  r.macro_f1 = scores.macro_f1;
  r.per_class = scores.per_class;
  return r;
}

std::string csv_header(std::size_t classes) {
  std::string h = "strategy,setting,round,accuracy,macro_f1,sim_time";
  for (std::size_t c = 0; c < classes; ++c) {
    const auto id = std::to_string(c);
    h += ",precision_" + id + ",recall_" + id + ",f1_" + id;
  }
  return h;
}

std::string csv_row(const MetricsRecord& r) {
  std::string row = r.strategy + "," + r.setting + "," + std::to_string(r.round) + "," +
                    fmt(r.accuracy) + "," + fmt(r.macro_f1) + "," + fmt(r.sim_time);
  for (const auto& k : r.per_class) row += "," + fmt(k.precision) + "," + fmt(k.recall) + "," + fmt(k.f1);
  return row;
}

}  // namespace fedsim::metrics
