#include "somnoscore/metrics.hpp"

#include <fstream>

#include <json.hpp>

namespace somnoscore::metrics {

using nlohmann::json;

namespace {
const char* kClassNames[kClasses] = {"W", "N1", "N2", "N3", "R"};
}

void ConfusionMatrix::accumulate(int predicted, int truth) {
  ++counts_[check(predicted)][check(truth)];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  for (int p = 0; p < kClasses; ++p)
    for (int t = 0; t < kClasses; ++t) counts_[p][t] += other.counts_[p][t];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts_)
    for (std::uint64_t v : row) n += v;
  return n;
}

std::uint64_t ConfusionMatrix::row_total(int predicted) const {
  std::uint64_t n = 0;
  for (std::uint64_t v : counts_[check(predicted)]) n += v;
  return n;
}

std::uint64_t ConfusionMatrix::col_total(int truth) const {
  check(truth);
  std::uint64_t n = 0;
  for (int p = 0; p < kClasses; ++p) n += counts_[p][truth];
  return n;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t n = 0;
  for (int c = 0; c < kClasses; ++c) n += counts_[c][c];
  return n;
}

double accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) throw NoData("accuracy: empty confusion matrix");
  return double(cm.trace()) / double(n);
}

double kappa(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) throw NoData("kappa: empty confusion matrix");
  const double p0 = double(cm.trace()) / double(n);
  double pe = 0.0;
  for (int c = 0; c < kClasses; ++c)
    pe += double(cm.row_total(c)) / double(n) * (double(cm.col_total(c)) / double(n));
  if (pe >= 1.0)
    throw Degenerate("kappa undefined: chance agreement is 1 (single-class matrix); p0 = " +
                     std::to_string(p0));
  return (p0 - pe) / (1.0 - pe);
}

std::array<ClassStats, kClasses> precision_recall(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw NoData("precision_recall: empty confusion matrix");
  std::array<ClassStats, kClasses> out{};
  for (int c = 0; c < kClasses; ++c) {
    ClassStats& s = out[c];
    const std::uint64_t row = cm.row_total(c);
    const std::uint64_t col = cm.col_total(c);
    const std::uint64_t diag = cm.at(c, c);
    if (row == 0 || col == 0) s.degenerate = true;
    s.precision = row == 0 ? 0.0 : double(diag) / double(row);
    s.recall = col == 0 ? 0.0 : double(diag) / double(col);
    s.f1 = (s.precision + s.recall) > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
  }
  return out;
}

double f1_macro(const ConfusionMatrix& cm) {
  const auto per_class = precision_recall(cm);
  double sum = 0.0;
  for (const ClassStats& s : per_class) sum += s.f1;
  return sum / kClasses;
}

MetricsReport compute_report(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.total = cm.total();
  r.accuracy = accuracy(cm);
  r.kappa = kappa(cm);
  r.per_class = precision_recall(cm);
  double sum = 0.0;
  for (const ClassStats& s : r.per_class) sum += s.f1;
  r.f1_macro = sum / kClasses;
  return r;
}

void write_metrics_json(const MetricsReport& report, const ConfusionMatrix& cm,
                        const std::filesystem::path& file) {
  json j;
  j["orientation"] = "rows=network_prediction,cols=ground_truth";
  j["class_order"] = {"W", "N1", "N2", "N3", "R"};
  j["total"] = report.total;
  j["accuracy"] = report.accuracy;
  j["kappa"] = report.kappa;
  j["f1_macro"] = report.f1_macro;
  json per_class = json::object();
  for (int c = 0; c < kClasses; ++c) {
    const ClassStats& s = report.per_class[c];
    per_class[kClassNames[c]] = {{"precision", s.precision},
                                 {"recall", s.recall},
                                 {"f1", s.f1},
                                 {"degenerate", s.degenerate}};
  }
  j["per_class"] = per_class;
  json counts = json::array();
  for (int p = 0; p < kClasses; ++p) {
    json row = json::array();
    for (int t = 0; t < kClasses; ++t) row.push_back(cm.at(p, t));
    counts.push_back(row);
  }
  j["counts"] = counts;
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << j.dump(2) << "\n";
}

void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << "prediction\\truth";
  for (int t = 0; t < kClasses; ++t) out << "," << kClassNames[t];
  out << "\n";
  for (int p = 0; p < kClasses; ++p) {
    out << kClassNames[p];
    for (int t = 0; t < kClasses; ++t) out << "," << cm.at(p, t);
    out << "\n";
  }
}

}  // namespace somnoscore::metrics
