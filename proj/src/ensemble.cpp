#include "somnoscore/ensemble.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "somnoscore/parallel.hpp"

namespace somnoscore::ensemble {

using nlohmann::json;

Member load_member(const std::filesystem::path& checkpoint_file) {
  arch::Checkpoint ckpt = arch::load_checkpoint(checkpoint_file);
  Member m;
  m.name = checkpoint_file.stem().string();
  m.meta = std::move(ckpt.meta);
  m.params = std::move(ckpt.params);
  return m;
}

std::vector<EnsembleSpec> enumerate_ensembles(int num_models,
                                              const std::vector<int>& sizes) {
  if (num_models < 1) throw BadArg("enumerate_ensembles: no models");
  for (int s : sizes)
    if (s < 1 || s > num_models)
      throw BadArg("enumerate_ensembles: size " + std::to_string(s) +
                   " outside 1.." + std::to_string(num_models));
  std::vector<EnsembleSpec> out;
  for (int size : sizes) {
    // lexicographic subsets of the given size
    std::vector<int> idx(size);
    for (int i = 0; i < size; ++i) idx[i] = i;
    while (true) {
      out.push_back({idx});
      int i = size - 1;
      while (i >= 0 && idx[i] == num_models - size + i) --i;
      if (i < 0) break;
      ++idx[i];
      for (int j = i + 1; j < size; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
  return out;
}

Combined combine_scores(
    const std::vector<std::array<double, sigdata::kNumStages>>& member_scores) {
  if (member_scores.empty()) throw BadArg("combine_scores: no member scores");
  Combined c;
  for (const auto& s : member_scores)
    for (int k = 0; k < sigdata::kNumStages; ++k) c.scores[k] += s[k];
  c.predicted = 0;
  for (int k = 1; k < sigdata::kNumStages; ++k)
    if (c.scores[k] > c.scores[c.predicted]) c.predicted = k;
  return c;
}

Evaluator::Evaluator(std::vector<Member> members) : members_(std::move(members)) {
  if (members_.empty()) throw BadArg("ensemble: at least one member required");
  contexts_.reserve(members_.size());
  for (const Member& m : members_) contexts_.emplace_back(m.meta.config);
}

namespace {

struct MemberScratch {
  arch::Workspace ws;
  std::vector<float> window;
  std::vector<sigdata::ChannelStats> stats;
  explicit MemberScratch(const arch::ModelContext& ctx)
      : ws(ctx),
        window(std::size_t(ctx.config().input_channels) * ctx.config().input_length()) {}
};

}  // namespace

Combined Evaluator::predict(const EnsembleSpec& spec, const sigdata::Recording& rec,
                            int epoch_index) const {
  if (spec.members.empty()) throw BadArg("ensemble: empty member list");
  std::vector<std::array<double, sigdata::kNumStages>> scores;
  scores.reserve(spec.members.size());
  for (int mi : spec.members) {
    if (mi < 0 || mi >= static_cast<int>(members_.size()))
      throw BadArg("ensemble: member index out of range");
    const Member& m = members_[mi];
    const arch::ModelContext& ctx = contexts_[mi];
    const arch::ModelConfig& cfg = ctx.config();
    for (sigdata::ChannelKind k : cfg.signals)
      if (!rec.has(k))
        throw MissingChannel("ensemble member '" + m.name + "' needs channel " +
                             sigdata::to_string(k) + " absent from recording " +
                             rec.patient_id);
    MemberScratch scratch(ctx);
    sigdata::WindowOptions wopts{cfg.zscore};
    std::vector<sigdata::ChannelStats> stats(cfg.signals.size());
    if (cfg.zscore)
      for (std::size_t i = 0; i < cfg.signals.size(); ++i)
        stats[i] = sigdata::channel_stats(rec, cfg.signals[i]);
    sigdata::fill_window(rec, epoch_index, cfg.signals, wopts, stats,
                         scratch.window.data());
    scores.push_back(scratch.ws.forward(ctx, m.params, scratch.window, arch::Mode::Eval));
  }
  return combine_scores(scores);
}

metrics::ConfusionMatrix Evaluator::evaluate(
    const EnsembleSpec& spec, const std::vector<const sigdata::Recording*>& recs,
    int threads) const {
  if (recs.empty()) throw NoData("ensemble evaluate: empty recording set");
  for (int mi : spec.members) {
    if (mi < 0 || mi >= static_cast<int>(members_.size()))
      throw BadArg("ensemble: member index out of range");
    const Member& m = members_[mi];
    for (const auto* rec : recs)
      for (sigdata::ChannelKind k : m.meta.config.signals)
        if (!rec->has(k))
          throw MissingChannel("ensemble member '" + m.name + "' needs channel " +
                               sigdata::to_string(k) + " absent from recording " +
                               rec->patient_id);
  }

  struct Item {
    int rec;
    int epoch;
    int truth;
  };
  std::vector<Item> items;
  for (std::size_t r = 0; r < recs.size(); ++r)
    for (int e = 0; e < recs[r]->epoch_count(); ++e)
      if (recs[r]->hypnogram[e].has_value())
        items.push_back({int(r), e, int(*recs[r]->hypnogram[e])});
  if (items.empty()) throw NoData("ensemble evaluate: no labelled epochs");

  // per-member normalization statistics per recording
  std::vector<std::vector<std::vector<sigdata::ChannelStats>>> stats(spec.members.size());
  for (std::size_t s = 0; s < spec.members.size(); ++s) {
    const arch::ModelConfig& cfg = contexts_[spec.members[s]].config();
    stats[s].resize(recs.size());
    for (std::size_t r = 0; r < recs.size(); ++r) {
      if (cfg.zscore) {
        for (sigdata::ChannelKind k : cfg.signals)
          stats[s][r].push_back(sigdata::channel_stats(*recs[r], k));
      } else {
        stats[s][r].resize(cfg.signals.size());
      }
    }
  }

  std::vector<std::uint8_t> predictions(items.size());
  parallel_for(items.size(), threads, [&](std::size_t begin, std::size_t end, int) {
    std::vector<MemberScratch> scratch;
    scratch.reserve(spec.members.size());
    for (int mi : spec.members) scratch.emplace_back(contexts_[mi]);
    std::vector<std::array<double, sigdata::kNumStages>> scores(spec.members.size());
    for (std::size_t i = begin; i < end; ++i) {
      const Item& item = items[i];
      const sigdata::Recording& rec = *recs[item.rec];
      for (std::size_t s = 0; s < spec.members.size(); ++s) {
        const int mi = spec.members[s];
        const arch::ModelContext& ctx = contexts_[mi];
        const arch::ModelConfig& cfg = ctx.config();
        sigdata::fill_window(rec, item.epoch, cfg.signals, {cfg.zscore},
                             stats[s][item.rec], scratch[s].window.data());
        scores[s] = scratch[s].ws.forward(ctx, members_[mi].params, scratch[s].window,
                                          arch::Mode::Eval);
      }
      predictions[i] = static_cast<std::uint8_t>(combine_scores(scores).predicted);
    }
  });

  metrics::ConfusionMatrix cm;
  for (std::size_t i = 0; i < items.size(); ++i)
    cm.accumulate(predictions[i], items[i].truth);
  return cm;
}

std::vector<ComparisonRow> compare(const Evaluator& eval,
                                   const std::vector<EnsembleSpec>& specs,
                                   const std::vector<const sigdata::Recording*>& recs,
                                   int threads) {
  if (recs.empty()) throw NoData("compare: empty test set");
  std::vector<ComparisonRow> rows;
  rows.reserve(specs.size());
  for (const EnsembleSpec& spec : specs) {
    ComparisonRow row;
    row.spec = spec;
    for (std::size_t i = 0; i < spec.members.size(); ++i) {
      if (i) row.members_label += "+";
      row.members_label += eval.members()[spec.members[i]].name;
      row.params_total +=
          arch::param_count(eval.members()[spec.members[i]].meta.config).params_total;
    }
    row.report = metrics::compute_report(eval.evaluate(spec, recs, threads));
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ComparisonRow& a, const ComparisonRow& b) {
                     return a.report.f1_macro > b.report.f1_macro;
                   });
  return rows;
}

void write_comparison_csv(const std::vector<ComparisonRow>& rows,
                          const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << "members,accuracy,kappa,f1_macro,params_total\n";
  char buf[160];
  for (const ComparisonRow& row : rows) {
    std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f,%lld\n", row.report.accuracy,
                  row.report.kappa, row.report.f1_macro,
                  static_cast<long long>(row.params_total));
    out << row.members_label << buf;
  }
}

void write_ensemble_json(const std::vector<std::filesystem::path>& checkpoints,
                         const std::vector<Member>& members,
                         const std::filesystem::path& file) {
  if (checkpoints.size() != members.size())
    throw BadArg("write_ensemble_json: path/member count mismatch");
  json j;
  json list = json::array();
  for (std::size_t i = 0; i < members.size(); ++i) {
    json entry;
    entry["checkpoint"] = checkpoints[i].string();
    entry["name"] = members[i].name;
    json ch = json::array();
    for (sigdata::ChannelKind k : members[i].meta.config.signals)
      ch.push_back(sigdata::to_string(k));
    entry["channels"] = ch;
    list.push_back(entry);
  }
  j["members"] = list;
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << j.dump(2) << "\n";
}

}  // namespace somnoscore::ensemble
