#pragma once

// Confusion-matrix accumulation and the agreement metrics derived from it:
// accuracy, Cohen's kappa, per-class precision/recall and macro F1.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "somnoscore/errors.hpp"
#include "somnoscore/sigdata.hpp"

namespace somnoscore::metrics {

inline constexpr int kClasses = sigdata::kNumStages;

// counts[prediction][truth]; class order Awake, N1, N2, N3, REM.
class ConfusionMatrix {
 public:
  void accumulate(int predicted, int truth);
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(int predicted, int truth) const {
    return counts_[check(predicted)][check(truth)];
  }
  std::uint64_t& cell(int predicted, int truth) {
    return counts_[check(predicted)][check(truth)];
  }
  std::uint64_t total() const;
  std::uint64_t row_total(int predicted) const;
  std::uint64_t col_total(int truth) const;
  std::uint64_t trace() const;

 private:
  static int check(int c) {
    if (c < 0 || c >= kClasses) throw BadArg("class index out of range 0..4");
    return c;
  }
  std::array<std::array<std::uint64_t, kClasses>, kClasses> counts_{};
};

double accuracy(const ConfusionMatrix& cm);  // trace / total; NoData when empty

// (p0 - pe) / (1 - pe); throws Degenerate (reporting p0) when pe == 1.
double kappa(const ConfusionMatrix& cm);

struct ClassStats {
  double precision = 0.0;  // diag / row total (predictions)
  double recall = 0.0;     // diag / column total (ground truth)
  double f1 = 0.0;
  bool degenerate = false;  // a zero denominator was replaced by 0
};

std::array<ClassStats, kClasses> precision_recall(const ConfusionMatrix& cm);

double f1_macro(const ConfusionMatrix& cm);

struct MetricsReport {
  double accuracy = 0.0;
  double kappa = 0.0;
  double f1_macro = 0.0;
  std::array<ClassStats, kClasses> per_class{};
  std::uint64_t total = 0;
};

MetricsReport compute_report(const ConfusionMatrix& cm);

// metrics.json carries the full report, the matrix and an explicit
// orientation tag; confusion.csv is the 5x5 table with labelled margins.
void write_metrics_json(const MetricsReport& report, const ConfusionMatrix& cm,
                        const std::filesystem::path& file);
void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& file);

}  // namespace somnoscore::metrics
