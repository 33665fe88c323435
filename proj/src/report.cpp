#include "somnoscore/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace somnoscore::report {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

const char* kStageColors[sigdata::kNumStages] = {
    "#e6a23c",  // Awake
    "#7fc97f",  // N1
    "#4c9bd4",  // N2
    "#2b5fa3",  // N3
    "#c06bd4",  // REM
};
const char* kStageNames[sigdata::kNumStages] = {"W", "N1", "N2", "N3", "R"};

struct SvgBuilder {
  std::ostringstream out;
  SvgBuilder(int w, int h) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\""
        << h << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
    out << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "start", const std::string& fill = "#333") {
    out << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"" << size
        << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\" fill=\""
        << fill << "\">" << s << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0) {
    out << "<line x1=\"" << fmt(x1) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x2)
        << "\" y2=\"" << fmt(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\""
        << fmt(width) << "\"/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    out << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(w)
        << "\" height=\"" << fmt(h) << "\" fill=\"" << fill << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& stroke) {
    out << "<polyline fill=\"none\" stroke=\"" << stroke
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) out << fmt(x) << "," << fmt(y) << " ";
    out << "\"/>\n";
  }
  std::string finish() {
    out << "</svg>\n";
    return out.str();
  }
};

}  // namespace

std::string render_loss_curve(const std::vector<train::IterationStat>& history) {
  if (history.empty()) throw NoData("render_loss_curve: empty history");
  const int W = 640, H = 400;
  const double left = 60, right = 20, top = 30, bottom = 45;
  const double pw = W - left - right, ph = H - top - bottom;

  double lo = history[0].train_loss, hi = lo;
  for (const auto& s : history) {
    lo = std::min({lo, s.train_loss, s.val_loss});
    hi = std::max({hi, s.train_loss, s.val_loss});
  }
  if (hi <= lo) hi = lo + 1.0;
  const double xmax = history.back().iteration;
  const double xmin = history.front().iteration;
  const double xspan = xmax > xmin ? xmax - xmin : 1.0;

  auto px = [&](double it) { return left + (it - xmin) / xspan * pw; };
  auto py = [&](double loss) { return top + (hi - loss) / (hi - lo) * ph; };

  SvgBuilder svg(W, H);
  svg.text(W / 2.0, 18, "training and validation loss", 14, "middle");
  svg.line(left, top, left, top + ph, "#999");
  svg.line(left, top + ph, left + pw, top + ph, "#999");
  svg.text(left - 6, py(lo) + 4, fmt(lo), 11, "end");
  svg.text(left - 6, py(hi) + 4, fmt(hi), 11, "end");
  svg.text(px(xmin), H - 24, fmt(xmin), 11, "middle");
  svg.text(px(xmax), H - 24, fmt(xmax), 11, "middle");
  svg.text(left + pw / 2, H - 8, "iteration", 12, "middle");

  std::vector<std::pair<double, double>> train_pts, val_pts;
  for (const auto& s : history) {
    train_pts.push_back({px(s.iteration), py(s.train_loss)});
    val_pts.push_back({px(s.iteration), py(s.val_loss)});
  }
  svg.polyline(train_pts, "#4c72b0");
  svg.polyline(val_pts, "#dd8452");
  svg.rect(left + pw - 110, top + 6, 14, 4, "#4c72b0");
  svg.text(left + pw - 92, top + 12, "train", 11);
  svg.rect(left + pw - 110, top + 22, 14, 4, "#dd8452");
  svg.text(left + pw - 92, top + 28, "validation", 11);
  return svg.finish();
}

std::string render_per_class(const metrics::MetricsReport& report) {
  const int W = 640, H = 360;
  const double left = 50, top = 50, bottom = 40;
  const double pw = W - left - 20, ph = H - top - bottom;
  SvgBuilder svg(W, H);
  svg.text(W / 2.0, 18, "per-class precision / recall / F1", 14, "middle");
  svg.text(W / 2.0, 34,
           "accuracy " + fmt(report.accuracy) + "  kappa " + fmt(report.kappa) +
               "  macro F1 " + fmt(report.f1_macro),
           11, "middle", "#666");
  const char* bar_colors[3] = {"#4c72b0", "#dd8452", "#55a868"};
  const char* bar_names[3] = {"precision", "recall", "F1"};
  const double group_w = pw / metrics::kClasses;
  const double bar_w = group_w / 4.5;
  for (int c = 0; c < metrics::kClasses; ++c) {
    const double base_x = left + c * group_w + 0.5 * bar_w;
    const double vals[3] = {report.per_class[c].precision, report.per_class[c].recall,
                            report.per_class[c].f1};
    for (int b = 0; b < 3; ++b) {
      const double h = vals[b] * ph;
      svg.rect(base_x + b * bar_w, top + ph - h, bar_w * 0.9, h, bar_colors[b]);
    }
    svg.text(base_x + 1.5 * bar_w, H - 22, kStageNames[c], 12, "middle");
  }
  svg.line(left, top + ph, left + pw, top + ph, "#999");
  svg.line(left, top, left, top + ph, "#999");
  svg.text(left - 6, top + 4, "1.0", 11, "end");
  svg.text(left - 6, top + ph + 4, "0.0", 11, "end");
  for (int b = 0; b < 3; ++b) {
    svg.rect(left + pw - 150 + b * 52, H - 14, 10, 10, bar_colors[b]);
    svg.text(left + pw - 137 + b * 52, H - 5, bar_names[b], 10);
  }
  return svg.finish();
}

std::string render_hypnogram(const std::vector<sigdata::EpochLabel>& hypnogram,
                             const std::string& title) {
  if (hypnogram.empty()) throw NoData("render_hypnogram: empty hypnogram");
  const int W = 800, H = 120;
  const double left = 30, top = 30;
  const double pw = W - left - 20, ph = 50;
  SvgBuilder svg(W, H);
  svg.text(W / 2.0, 18, title, 13, "middle");
  const double epoch_w = pw / double(hypnogram.size());
  for (std::size_t e = 0; e < hypnogram.size(); ++e) {
    const std::string color =
        hypnogram[e].has_value() ? kStageColors[int(*hypnogram[e])] : "#cccccc";
    svg.rect(left + e * epoch_w, top, std::max(epoch_w, 0.5), ph, color);
  }
  for (int s = 0; s < sigdata::kNumStages; ++s) {
    svg.rect(left + s * 60.0, H - 26, 10, 10, kStageColors[s]);
    svg.text(left + 14 + s * 60.0, H - 17, kStageNames[s], 10);
  }
  svg.rect(left + sigdata::kNumStages * 60.0, H - 26, 10, 10, "#cccccc");
  svg.text(left + 14 + sigdata::kNumStages * 60.0, H - 17, "excluded", 10);
  return svg.finish();
}

std::vector<train::IterationStat> read_history_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open " + file.string());
  std::vector<train::IterationStat> out;
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(file.string() + ": empty history file");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    train::IterationStat s;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &s.iteration, &s.train_loss,
                    &s.val_loss, &s.seconds) != 4)
      throw FormatError(file.string() + ":" + std::to_string(lineno) +
                        ": malformed history row");
    out.push_back(s);
  }
  return out;
}

metrics::MetricsReport read_metrics_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": invalid JSON: " + e.what());
  }
  metrics::MetricsReport r;
  try {
    r.accuracy = j.at("accuracy").get<double>();
    r.kappa = j.at("kappa").get<double>();
    r.f1_macro = j.at("f1_macro").get<double>();
    r.total = j.at("total").get<std::uint64_t>();
    const char* names[metrics::kClasses] = {"W", "N1", "N2", "N3", "R"};
    for (int c = 0; c < metrics::kClasses; ++c) {
      const auto& pc = j.at("per_class").at(names[c]);
      r.per_class[c].precision = pc.at("precision").get<double>();
      r.per_class[c].recall = pc.at("recall").get<double>();
      r.per_class[c].f1 = pc.at("f1").get<double>();
      r.per_class[c].degenerate = pc.value("degenerate", false);
    }
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": missing or malformed field: " + e.what());
  }
  return r;
}

namespace {

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << text;
}

std::vector<sigdata::EpochLabel> read_hyp_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open " + file.string());
  std::vector<sigdata::EpochLabel> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    auto l = sigdata::epoch_label_from_token(line);
    if (!l)
      throw FormatError(file.string() + ":" + std::to_string(lineno) +
                        ": unknown stage token '" + line + "'");
    out.push_back(*l);
  }
  return out;
}

}  // namespace

std::vector<std::string> render_directory(const std::filesystem::path& in,
                                          const std::filesystem::path& out) {
  if (!std::filesystem::is_directory(in))
    throw FormatError("report input is not a directory: " + in.string());
  std::filesystem::create_directories(out);
  std::vector<std::string> written;

  if (std::filesystem::exists(in / "history.csv")) {
    const auto history = read_history_csv(in / "history.csv");
    write_text(out / "loss_curve.svg", render_loss_curve(history));
    written.push_back("loss_curve.svg");
  }
  if (std::filesystem::exists(in / "metrics.json")) {
    const auto report = read_metrics_json(in / "metrics.json");
    write_text(out / "per_class.svg", render_per_class(report));
    written.push_back("per_class.svg");
  }
  std::vector<std::filesystem::path> hyps;
  for (const auto& entry : std::filesystem::directory_iterator(in))
    if (entry.is_regular_file() && entry.path().extension() == ".hyp")
      hyps.push_back(entry.path());
  std::sort(hyps.begin(), hyps.end());
  for (const auto& h : hyps) {
    const std::string stem = h.stem().string();
    write_text(out / ("hypnogram_" + stem + ".svg"),
               render_hypnogram(read_hyp_file(h), "hypnogram " + stem));
    written.push_back("hypnogram_" + stem + ".svg");
  }
  if (written.empty())
    throw NoData("report: nothing to render in " + in.string() +
                 " (expected history.csv, metrics.json or *.hyp)");
  return written;
}

}  // namespace somnoscore::report
