// somnoscore: synthesize datasets, split patients, train separable-CNN
// sleep-stage scorers, evaluate them, build softmax-sum ensembles and render
// reports. Every command is a pure function of its flags, input files and
// seed; outputs land atomically in the --out directory together with a
// run_manifest.json describing the invocation.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "somnoscore/arch.hpp"
#include "somnoscore/ensemble.hpp"
#include "somnoscore/metrics.hpp"
#include "somnoscore/report.hpp"
#include "somnoscore/sigdata.hpp"
#include "somnoscore/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace somnoscore;

namespace {

constexpr const char* kVersion = "0.1.0";

std::uint64_t resolve_seed(const CLI::Option* seed_opt, std::uint64_t seed_flag) {
  if (seed_opt->count() > 0) return seed_flag;
  if (const char* env = std::getenv("SOMNOSCORE_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw BadArg(std::string("SOMNOSCORE_SEED is not an integer: ") + env);
    }
  }
  return seed_flag;
}

std::vector<sigdata::ChannelKind> parse_signals(const std::string& csv) {
  std::vector<sigdata::ChannelKind> kinds;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    auto k = sigdata::channel_from_string(tok);
    if (!k)
      throw BadArg("unknown signal '" + tok + "' (expected C3A2, C4A1 or EMG)");
    if (std::find(kinds.begin(), kinds.end(), *k) != kinds.end())
      throw BadArg("signal '" + tok + "' listed twice");
    kinds.push_back(*k);
  }
  if (kinds.empty()) throw BadArg("--signals must name at least one of C3A2,C4A1,EMG");
  return kinds;
}

std::string signals_csv(const std::vector<sigdata::ChannelKind>& kinds) {
  std::string out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (i) out += ",";
    out += sigdata::to_string(kinds[i]);
  }
  return out;
}

// temp-file-then-rename so a crash never leaves a half-written artifact
void atomic_write(const fs::path& file,
                  const std::function<void(const fs::path&)>& writer) {
  const fs::path tmp = file.string() + ".tmp";
  writer(tmp);
  fs::rename(tmp, file);
}

struct ManifestScope {
  std::string command;
  fs::path out_dir;
  std::uint64_t seed = 0;
  json config = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write() const {
    json j;
    j["command"] = command;
    j["tool_version"] = kVersion;
    j["seed"] = seed;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    atomic_write(out_dir / "run_manifest.json", [&](const fs::path& tmp) {
      std::ofstream out(tmp);
      if (!out) throw FormatError("cannot write run manifest in " + out_dir.string());
      out << j.dump(2) << "\n";
    });
  }
};

std::vector<std::string> split_part(const sigdata::SplitSpec& split,
                                    const std::string& part) {
  if (part == "train") return split.train;
  if (part == "val") return split.val;
  if (part == "test") return split.test;
  throw BadArg("unknown split part '" + part + "' (expected train, val or test)");
}

sigdata::SplitSpec load_split(const fs::path& path) {
  return sigdata::split_read(fs::is_directory(path) ? path / "split.json" : path);
}

train::RecordingRefs as_refs(const std::vector<sigdata::Recording>& recs) {
  train::RecordingRefs out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(&r);
  return out;
}

// --- synth -------------------------------------------------------------------

int cmd_synth(int patients, int epochs, std::uint64_t seed, const fs::path& out_dir) {
  if (fs::exists(out_dir))
    throw BadArg("output directory already exists: " + out_dir.string());
  auto spec = sigdata::SynthSpec::defaults(patients, epochs, seed);
  const auto recordings = sigdata::synth_dataset(spec);

  const fs::path partial = out_dir.string() + ".partial";
  fs::remove_all(partial);
  sigdata::manifest_write(recordings, partial);

  ManifestScope manifest;
  manifest.command = "synth";
  manifest.out_dir = partial;
  manifest.seed = seed;
  manifest.config = {{"patients", patients},
                     {"epochs", epochs},
                     {"noise_floor", spec.noise_floor},
                     {"channels", json::array({"C3A2", "C4A1", "EMG"})}};
  manifest.outputs = {"manifest.json"};
  for (const auto& rec : recordings) {
    manifest.outputs.push_back(rec.patient_id + ".hyp");
    for (const auto& [kind, _] : rec.channels)
      manifest.outputs.push_back(rec.patient_id + "_" + sigdata::to_string(kind) + ".f32");
  }
  manifest.write();
  fs::rename(partial, out_dir);
  std::fprintf(stderr, "synth: wrote %d patients x %d epochs to %s\n", patients, epochs,
               out_dir.string().c_str());
  return 0;
}

// --- split -------------------------------------------------------------------

int cmd_split(const fs::path& data, std::uint64_t seed, const fs::path& out_dir) {
  const auto ids = sigdata::manifest_patient_ids(data);
  const auto spec = sigdata::split_patients(ids, {}, seed);
  fs::create_directories(out_dir);
  atomic_write(out_dir / "split.json",
               [&](const fs::path& tmp) { sigdata::split_write(spec, tmp); });

  ManifestScope manifest;
  manifest.command = "split";
  manifest.out_dir = out_dir;
  manifest.seed = seed;
  manifest.config = {{"ratios", {0.7, 0.1, 0.2}},
                     {"patients", ids.size()}};
  manifest.inputs = {data.string()};
  manifest.outputs = {"split.json"};
  manifest.write();
  std::fprintf(stderr, "split: %zu patients -> %zu/%zu/%zu (train/val/test)\n",
               ids.size(), spec.train.size(), spec.val.size(), spec.test.size());
  return 0;
}

// --- train -------------------------------------------------------------------

int cmd_train(const fs::path& data, const fs::path& split_file,
              const std::string& signals, int patients_per_batch, std::uint64_t seed,
              const fs::path& out_dir, int iterations, int batch_size, double lr,
              int patience, bool zscore, int threads) {
  const auto kinds = parse_signals(signals);
  const auto split = load_split(split_file);

  arch::ModelConfig config = arch::ModelConfig::reference(kinds);
  config.zscore = zscore;

  train::TrainConfig tcfg;
  tcfg.learning_rate = lr;
  tcfg.max_iterations = iterations;
  tcfg.batch_size = batch_size;
  tcfg.patience = patience;
  tcfg.patients_per_batch = patients_per_batch;
  tcfg.seed = seed;
  tcfg.threads = threads;
  tcfg.validate();

  std::fprintf(stderr, "train: loading %zu train + %zu val patients from %s\n",
               split.train.size(), split.val.size(), data.string().c_str());
  const auto train_recs = sigdata::manifest_read_subset(data, split.train);
  const auto val_recs = sigdata::manifest_read_subset(data, split.val);

  const auto result = train::fit(config, tcfg, as_refs(train_recs), as_refs(val_recs),
                                 [](const train::IterationStat& s) {
                                   std::fprintf(stderr,
                                                "train: iter %3d  train %.5f  val %.5f"
                                                "  (%.1fs)\n",
                                                s.iteration, s.train_loss, s.val_loss,
                                                s.seconds);
                                 });

  fs::create_directories(out_dir);
  arch::CheckpointMeta meta;
  meta.config = config;
  meta.seed = seed;
  meta.val_loss = result.best_val_loss;
  meta.best_iteration = result.history.best_iteration;
  atomic_write(out_dir / "model.ckpt", [&](const fs::path& tmp) {
    arch::save_checkpoint(tmp, meta, result.best_params);
  });
  atomic_write(out_dir / "history.csv", [&](const fs::path& tmp) {
    train::history_write_csv(result.history, tmp);
  });

  ManifestScope manifest;
  manifest.command = "train";
  manifest.out_dir = out_dir;
  manifest.seed = seed;
  manifest.config = {{"signals", signals_csv(kinds)},
                     {"model", json::parse(arch::config_to_json_string(config))},
                     {"learning_rate", lr},
                     {"iterations", iterations},
                     {"batch_size", batch_size},
                     {"patience", patience},
                     {"patients_per_batch", patients_per_batch},
                     {"zscore", zscore},
                     {"threads", threads}};
  manifest.inputs = {data.string(), split_file.string()};
  manifest.outputs = {"model.ckpt", "history.csv"};
  manifest.write();
  std::fprintf(stderr, "train: best iteration %d (val %.5f), %zu iterations run\n",
               result.history.best_iteration, result.best_val_loss,
               result.history.iterations.size());
  return 0;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const fs::path& model, const fs::path& data, const fs::path& split_file,
             const std::string& part, const fs::path& out_dir, int threads) {
  const auto split = load_split(split_file);
  const auto ids = split_part(split, part);
  if (ids.empty()) throw NoData("split part '" + part + "' lists no patients");

  std::vector<ensemble::Member> members;
  members.push_back(ensemble::load_member(model));
  const ensemble::Evaluator evaluator(std::move(members));

  const auto recs = sigdata::manifest_read_subset(data, ids);
  const auto cm = evaluator.evaluate({{0}}, as_refs(recs), threads);
  const auto report = metrics::compute_report(cm);

  fs::create_directories(out_dir);
  atomic_write(out_dir / "metrics.json", [&](const fs::path& tmp) {
    metrics::write_metrics_json(report, cm, tmp);
  });
  atomic_write(out_dir / "confusion.csv", [&](const fs::path& tmp) {
    metrics::write_confusion_csv(cm, tmp);
  });

  ManifestScope manifest;
  manifest.command = "eval";
  manifest.out_dir = out_dir;
  manifest.config = {{"part", part}, {"threads", threads}};
  manifest.inputs = {model.string(), data.string(), split_file.string()};
  manifest.outputs = {"metrics.json", "confusion.csv"};
  manifest.write();
  std::fprintf(stderr,
               "eval: %s on %zu patients: accuracy %.4f  kappa %.4f  macro-F1 %.4f\n",
               part.c_str(), ids.size(), report.accuracy, report.kappa,
               report.f1_macro);
  return 0;
}

// --- ensemble ----------------------------------------------------------------

int cmd_ensemble(const std::vector<std::string>& model_files, const fs::path& data,
                 const fs::path& split_file, const std::string& part,
                 const std::string& sizes_csv, const fs::path& out_dir, int threads) {
  if (model_files.empty()) throw BadArg("--models requires at least one checkpoint");
  const auto split = load_split(split_file);
  const auto ids = split_part(split, part);
  if (ids.empty()) throw NoData("split part '" + part + "' lists no patients");

  std::vector<ensemble::Member> members;
  std::vector<fs::path> paths;
  for (const auto& f : model_files) {
    paths.emplace_back(f);
    members.push_back(ensemble::load_member(f));
  }
  const int n = static_cast<int>(members.size());

  std::vector<int> sizes;
  if (sizes_csv.empty()) {
    for (int s = 1; s <= n; ++s) sizes.push_back(s);
  } else {
    std::stringstream ss(sizes_csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) sizes.push_back(std::stoi(tok));
  }

  fs::create_directories(out_dir);
  atomic_write(out_dir / "ensemble.json", [&](const fs::path& tmp) {
    ensemble::write_ensemble_json(paths, members, tmp);
  });

  const ensemble::Evaluator evaluator(std::move(members));
  const auto specs = ensemble::enumerate_ensembles(n, sizes);
  const auto recs = sigdata::manifest_read_subset(data, ids);
  const auto rows = ensemble::compare(evaluator, specs, as_refs(recs), threads);
  atomic_write(out_dir / "comparison.csv", [&](const fs::path& tmp) {
    ensemble::write_comparison_csv(rows, tmp);
  });

  ManifestScope manifest;
  manifest.command = "ensemble";
  manifest.out_dir = out_dir;
  manifest.config = {{"part", part}, {"threads", threads}, {"models", model_files}};
  manifest.inputs = {data.string(), split_file.string()};
  for (const auto& f : model_files) manifest.inputs.push_back(f);
  manifest.outputs = {"ensemble.json", "comparison.csv"};
  manifest.write();
  std::fprintf(stderr, "ensemble: best of %zu combinations: %s (macro-F1 %.4f)\n",
               rows.size(), rows.front().members_label.c_str(),
               rows.front().report.f1_macro);
  return 0;
}

// --- params ------------------------------------------------------------------

int cmd_params(const std::string& signals, const fs::path& config_file,
               const fs::path& out_dir) {
  arch::ModelConfig config;
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw FormatError("cannot open config file " + config_file.string());
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    config = arch::config_from_json_string(text);
  } else {
    config = arch::ModelConfig::reference(parse_signals(signals));
  }
  const auto report = arch::param_count(config);

  std::printf("separable convolution cost model, %d input channel(s)\n",
              config.input_channels);
  std::printf("%-6s %-6s %-4s %-4s %-8s %-10s %-10s %-14s %-14s %-8s\n", "block",
              "in_ch", "K", "F", "in_len", "params_dw", "params_pw", "ops_standard",
              "ops_separable", "ratio");
  for (const auto& l : report.layers) {
    std::printf("%-6d %-6d %-4d %-4d %-8d %-10lld %-10lld %-14lld %-14lld %.4f\n",
                l.block, l.in_channels, l.kernel, l.filters, l.in_length,
                static_cast<long long>(l.params_depthwise),
                static_cast<long long>(l.params_pointwise),
                static_cast<long long>(l.ops_standard),
                static_cast<long long>(l.ops_separable), l.ratio);
  }
  std::printf("classifier parameters: %lld\n",
              static_cast<long long>(report.params_classifier));
  std::printf("total trainable parameters: %lld\n",
              static_cast<long long>(report.params_total));
  std::printf("total ops standard: %lld\n",
              static_cast<long long>(report.ops_standard_total));
  std::printf("total ops separable: %lld\n",
              static_cast<long long>(report.ops_separable_total));
  std::printf("separable/standard: %.6f\n",
              double(report.ops_separable_total) / double(report.ops_standard_total));

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    json j;
    j["params_total"] = report.params_total;
    j["params_classifier"] = report.params_classifier;
    j["ops_standard_total"] = report.ops_standard_total;
    j["ops_separable_total"] = report.ops_separable_total;
    json layers = json::array();
    for (const auto& l : report.layers)
      layers.push_back({{"block", l.block},
                        {"in_channels", l.in_channels},
                        {"kernel", l.kernel},
                        {"filters", l.filters},
                        {"in_length", l.in_length},
                        {"params_depthwise", l.params_depthwise},
                        {"params_pointwise", l.params_pointwise},
                        {"ops_standard", l.ops_standard},
                        {"ops_separable", l.ops_separable},
                        {"ratio", l.ratio}});
    j["layers"] = layers;
    atomic_write(out_dir / "cost_report.json", [&](const fs::path& tmp) {
      std::ofstream out(tmp);
      out << j.dump(2) << "\n";
    });

    ManifestScope manifest;
    manifest.command = "params";
    manifest.out_dir = out_dir;
    manifest.config = {{"signals", signals},
                       {"config_file", config_file.string()}};
    manifest.outputs = {"cost_report.json"};
    manifest.write();
  }
  return 0;
}

// --- report ------------------------------------------------------------------

int cmd_report(const fs::path& in_dir, const fs::path& out_dir) {
  const auto written = report::render_directory(in_dir, out_dir);

  ManifestScope manifest;
  manifest.command = "report";
  manifest.out_dir = out_dir;
  manifest.inputs = {in_dir.string()};
  manifest.outputs = written;
  manifest.write();
  for (const auto& f : written) std::fprintf(stderr, "report: wrote %s\n", f.c_str());
  return 0;
}

int classify_exit(const std::exception& e) {
  if (dynamic_cast<const BadArg*>(&e) || dynamic_cast<const BadSpec*>(&e) ||
      dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DuplicatePatient*>(&e))
    return 2;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IntegrityError*>(&e) ||
      dynamic_cast<const MissingChannel*>(&e) || dynamic_cast<const ExcludedEpoch*>(&e) ||
      dynamic_cast<const BadIndex*>(&e) || dynamic_cast<const NoData*>(&e))
    return 3;
  return 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"somnoscore: separable-CNN sleep stage scoring at desk scale"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic PSG dataset");
  int sy_patients = 2, sy_epochs = 20;
  std::uint64_t sy_seed = 0;
  std::string sy_out;
  synth->add_option("--patients", sy_patients, "number of patients")->required();
  synth->add_option("--epochs", sy_epochs, "epochs per patient")->required();
  auto* sy_seed_opt = synth->add_option("--seed", sy_seed, "generator seed");
  synth->add_option("--out", sy_out, "output dataset directory")->required();

  // split
  auto* split = app.add_subcommand("split", "patient-level train/val/test split");
  std::string sp_data, sp_out;
  std::uint64_t sp_seed = 0;
  split->add_option("--data", sp_data, "dataset directory")->required();
  auto* sp_seed_opt = split->add_option("--seed", sp_seed, "shuffle seed");
  split->add_option("--out", sp_out, "output directory for split.json")->required();

  // train
  auto* tr = app.add_subcommand("train", "train one model");
  std::string tr_data, tr_split, tr_signals, tr_out;
  std::uint64_t tr_seed = 0;
  int tr_ppb = 1, tr_iters = 100, tr_bs = 32, tr_patience = 10, tr_threads = 1;
  double tr_lr = 1e-4;
  bool tr_zscore = false;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--split", tr_split, "split.json path")->required();
  tr->add_option("--signals", tr_signals, "input signals, e.g. C4A1,EMG")->required();
  tr->add_option("--patients-per-batch", tr_ppb, "patients mixed per batch (1..8)");
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--iterations", tr_iters, "max training iterations");
  tr->add_option("--batch-size", tr_bs, "mini-batch size");
  tr->add_option("--lr", tr_lr, "learning rate");
  tr->add_option("--patience", tr_patience, "early stopping patience");
  tr->add_flag("--zscore", tr_zscore, "per-recording z-score normalization");
  tr->add_option("--threads", tr_threads, "worker threads");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split part");
  std::string ev_model, ev_data, ev_split, ev_part = "test", ev_out;
  int ev_threads = 1;
  ev->add_option("--model", ev_model, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "split.json path")->required();
  ev->add_option("--split-part,--part", ev_part, "train, val or test");
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--threads", ev_threads, "worker threads");

  // ensemble
  auto* en = app.add_subcommand("ensemble", "compare softmax-sum ensembles");
  std::vector<std::string> en_models;
  std::string en_data, en_split, en_part = "test", en_sizes, en_out;
  int en_threads = 1;
  en->add_option("--models", en_models, "checkpoint files (comma separated)")
      ->required()
      ->delimiter(',');
  en->add_option("--data", en_data, "dataset directory")->required();
  en->add_option("--split", en_split, "split.json path")->required();
  en->add_option("--split-part,--part", en_part, "train, val or test");
  en->add_option("--sizes", en_sizes, "ensemble sizes to enumerate, e.g. 1,3");
  en->add_option("--out", en_out, "output directory")->required();
  en->add_option("--threads", en_threads, "worker threads");

  // params
  auto* pa = app.add_subcommand("params", "parameter and operation accounting");
  std::string pa_signals = "C4A1", pa_config, pa_out;
  pa->add_option("--signals", pa_signals, "input signals, e.g. C4A1,EMG");
  pa->add_option("--config", pa_config, "model config JSON file");
  pa->add_option("--out", pa_out, "optional output directory for cost_report.json");

  // report
  auto* re = app.add_subcommand("report", "render SVG reports from run artifacts");
  std::string re_in, re_out;
  re->add_option("--in", re_in, "directory with history.csv / metrics.json / *.hyp")
      ->required();
  re->add_option("--out", re_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (synth->parsed())
      return cmd_synth(sy_patients, sy_epochs, resolve_seed(sy_seed_opt, sy_seed), sy_out);
    if (split->parsed())
      return cmd_split(sp_data, resolve_seed(sp_seed_opt, sp_seed), sp_out);
    if (tr->parsed())
      return cmd_train(tr_data, tr_split, tr_signals, tr_ppb,
                       resolve_seed(tr_seed_opt, tr_seed), tr_out, tr_iters, tr_bs,
                       tr_lr, tr_patience, tr_zscore, tr_threads);
    if (ev->parsed())
      return cmd_eval(ev_model, ev_data, ev_split, ev_part, ev_out, ev_threads);
    if (en->parsed())
      return cmd_ensemble(en_models, en_data, en_split, en_part, en_sizes, en_out,
                          en_threads);
    if (pa->parsed()) return cmd_params(pa_signals, pa_config, pa_out);
    if (re->parsed()) return cmd_report(re_in, re_out);
    std::fprintf(stderr, "somnoscore: no command given\n");
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "somnoscore %s: error: %s\n", cmd.c_str(), e.what());
    return classify_exit(e);
  }
}
