#pragma once

// Static SVG rendering of run artifacts: training loss curves, per-class
// metric bars and hypnogram strips. Output is plain text and byte-stable
// for identical inputs.

#include <filesystem>
#include <string>
#include <vector>

#include "somnoscore/metrics.hpp"
#include "somnoscore/sigdata.hpp"
#include "somnoscore/train.hpp"

namespace somnoscore::report {

std::string render_loss_curve(const std::vector<train::IterationStat>& history);
std::string render_per_class(const metrics::MetricsReport& report);
std::string render_hypnogram(const std::vector<sigdata::EpochLabel>& hypnogram,
                             const std::string& title);

std::vector<train::IterationStat> read_history_csv(const std::filesystem::path& file);
metrics::MetricsReport read_metrics_json(const std::filesystem::path& file);

// Scans `in` for history.csv, metrics.json and *.hyp files and renders an
// SVG for each found; returns the file names written into `out`.
std::vector<std::string> render_directory(const std::filesystem::path& in,
                                          const std::filesystem::path& out);

}  // namespace somnoscore::report
