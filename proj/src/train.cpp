#include "somnoscore/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "somnoscore/parallel.hpp"

namespace somnoscore::train {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw BadArg("learning rate must be positive");
  if (max_iterations < 1) throw BadArg("max_iterations must be >= 1");
  if (batch_size < 1) throw BadArg("batch_size must be >= 1");
  if (patience < 1) throw BadArg("patience must be >= 1");
  if (patients_per_batch < 1) throw BadArg("patients_per_batch must be >= 1");
  if (threads < 1) throw BadArg("threads must be >= 1");
}

void adam_step(std::span<float> params, std::span<const double> grads, AdamState& state,
               double lr, const arch::ParamLayout* layout) {
  if (params.size() != grads.size() || state.m.size() != params.size())
    throw ShapeError("adam_step: parameter/gradient/state size mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      const std::string where =
          layout != nullptr ? arch::param_name(*layout, i) : "param[" + std::to_string(i) + "]";
      throw NonFiniteGradient("non-finite gradient at " + where);
    }
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] = static_cast<float>(double(params[i]) -
                                   lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

bool EarlyStopMonitor::record(int iteration, double val_loss) {
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_iteration_ = iteration;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

void history_write_csv(const FitHistory& history, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << "iteration,train_loss,val_loss,seconds\n";
  char buf[128];
  for (const IterationStat& s : history.iterations) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.3f\n", s.iteration, s.train_loss,
                  s.val_loss, s.seconds);
    out << buf;
  }
}

std::vector<Batch> make_batches(const RecordingRefs& recordings, int patients_per_batch,
                                int batch_size, std::uint64_t seed, int iteration) {
  if (recordings.empty()) throw NoData("make_batches: empty training set");
  if (patients_per_batch < 1) throw BadArg("make_batches: patients_per_batch must be >= 1");
  if (patients_per_batch > static_cast<int>(recordings.size()))
    throw BadArg("make_batches: patients_per_batch (" +
                 std::to_string(patients_per_batch) + ") exceeds patient count (" +
                 std::to_string(recordings.size()) + ")");
  if (batch_size < 1) throw BadArg("make_batches: batch_size must be >= 1");

  Rng rng = Rng::derived(mix_seed(seed, 0xBA7C4), static_cast<std::uint64_t>(iteration));

  std::vector<int> patient_order(recordings.size());
  for (std::size_t i = 0; i < recordings.size(); ++i) patient_order[i] = int(i);
  rng.shuffle(patient_order);

  // per patient, its labelled epochs in shuffled order (master rng, in
  // shuffled patient order, so the whole plan derives from one stream)
  std::vector<std::vector<int>> epochs(recordings.size());
  for (int p : patient_order) {
    std::vector<int>& list = epochs[p];
    const sigdata::Recording& rec = *recordings[p];
    for (int e = 0; e < rec.epoch_count(); ++e)
      if (rec.hypnogram[e].has_value()) list.push_back(e);
    rng.shuffle(list);
  }

  struct Stream {
    int patient = -1;
    std::size_t cursor = 0;
  };
  std::vector<Stream> streams(patients_per_batch);
  std::size_t next_unopened = 0;
  auto open_next = [&](Stream& s) {
    while (next_unopened < patient_order.size()) {
      const int p = patient_order[next_unopened++];
      if (!epochs[p].empty()) {
        s.patient = p;
        s.cursor = 0;
        return true;
      }
    }
    s.patient = -1;
    return false;
  };
  for (Stream& s : streams) open_next(s);

  std::vector<Batch> batches;
  Batch current;
  current.reserve(batch_size);
  bool any_live = true;
  while (any_live) {
    any_live = false;
    for (Stream& s : streams) {
      if (s.patient < 0) continue;
      current.push_back({s.patient, epochs[s.patient][s.cursor]});
      if (current.size() == static_cast<std::size_t>(batch_size)) {
        batches.push_back(std::move(current));
        current.clear();
        current.reserve(batch_size);
      }
      if (++s.cursor == epochs[s.patient].size()) open_next(s);
      if (s.patient >= 0) any_live = true;
    }
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

namespace {

// Recording set prepared for evaluation/training: labelled epochs indexed,
// normalization statistics precomputed.
struct PreparedSet {
  RecordingRefs recs;
  std::vector<std::vector<sigdata::ChannelStats>> stats;  // [rec][kind index]
  std::vector<ExampleRef> examples;
};

PreparedSet prepare(const arch::ModelConfig& config, const RecordingRefs& recordings) {
  PreparedSet set;
  set.recs = recordings;
  set.stats.resize(recordings.size());
  for (std::size_t r = 0; r < recordings.size(); ++r) {
    const sigdata::Recording& rec = *recordings[r];
    if (config.zscore) {
      for (sigdata::ChannelKind k : config.signals)
        set.stats[r].push_back(sigdata::channel_stats(rec, k));
    } else {
      set.stats[r].resize(config.signals.size());
    }
    for (int e = 0; e < rec.epoch_count(); ++e)
      if (rec.hypnogram[e].has_value()) set.examples.push_back({int(r), e});
  }
  return set;
}

double mean_loss(const arch::ModelContext& ctx, std::span<const float> params,
                 const PreparedSet& set, int threads) {
  if (set.examples.empty()) throw NoData("evaluate_loss: no labelled epochs");
  const arch::ModelConfig& cfg = ctx.config();
  const sigdata::WindowOptions wopts{cfg.zscore};
  std::vector<double> losses(set.examples.size());
  parallel_for(set.examples.size(), threads,
               [&](std::size_t begin, std::size_t end, int) {
                 arch::Workspace ws(ctx);
                 std::vector<float> window(std::size_t(cfg.input_channels) *
                                           cfg.input_length());
                 for (std::size_t i = begin; i < end; ++i) {
                   const ExampleRef& ref = set.examples[i];
                   const sigdata::Recording& rec = *set.recs[ref.recording];
                   sigdata::fill_window(rec, ref.epoch, cfg.signals, wopts,
                                        set.stats[ref.recording], window.data());
                   const auto probs = ws.forward(ctx, params, window, arch::Mode::Eval);
                   const int target = int(*rec.hypnogram[ref.epoch]);
                   losses[i] = -std::log(std::max(probs[target], 1e-300));
                 }
               });
  return pairwise_sum(losses.data(), losses.size()) / double(losses.size());
}

}  // namespace

double evaluate_loss(const arch::ModelConfig& config, std::span<const float> params,
                     const RecordingRefs& recordings, int threads) {
  if (recordings.empty()) throw NoData("evaluate_loss: empty recording set");
  arch::ModelContext ctx(config);
  return mean_loss(ctx, params, prepare(config, recordings), threads);
}

FitResult fit(const arch::ModelConfig& config, const TrainConfig& tcfg,
              const RecordingRefs& train_set, const RecordingRefs& val_set,
              const IterationCallback& on_iteration) {
  tcfg.validate();
  if (train_set.empty()) throw NoData("fit: empty training set");
  if (val_set.empty()) throw NoData("fit: empty validation set");
  {
    std::set<std::string> train_ids;
    for (const auto* r : train_set) train_ids.insert(r->patient_id);
    if (train_ids.size() != train_set.size())
      throw ConfigError("fit: duplicate patient in training set");
    for (const auto* r : val_set)
      if (train_ids.count(r->patient_id))
        throw ConfigError("fit: patient " + r->patient_id +
                          " appears in both train and validation sets");
  }

  arch::ModelContext ctx(config);
  const arch::ParamLayout& layout = ctx.layout();
  const PreparedSet train_prep = prepare(config, train_set);
  const PreparedSet val_prep = prepare(config, val_set);
  if (train_prep.examples.empty()) throw NoData("fit: no labelled training epochs");
  if (val_prep.examples.empty()) throw NoData("fit: no labelled validation epochs");

  std::vector<float> params = arch::init_params(config, tcfg.seed);
  AdamState adam(layout.total);
  EarlyStopMonitor monitor(tcfg.patience);

  FitResult result;
  result.best_params = params;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  const sigdata::WindowOptions wopts{config.zscore};
  const int bs = tcfg.batch_size;
  std::vector<std::vector<float>> example_grads(bs);
  for (auto& g : example_grads) g.resize(layout.total);
  std::vector<double> batch_grad(layout.total);
  std::vector<double> iter_losses(train_prep.examples.size());

  // per-worker state reused across batches and iterations
  struct Worker {
    arch::Workspace ws;
    std::vector<float> window;
    explicit Worker(const arch::ModelContext& c)
        : ws(c), window(std::size_t(c.config().input_channels) *
                        c.config().input_length()) {}
  };
  std::vector<Worker> workers;
  workers.reserve(tcfg.threads);
  for (int w = 0; w < tcfg.threads; ++w) workers.emplace_back(ctx);

  const std::uint64_t dropout_root = mix_seed(tcfg.seed, 0xD80F);

  for (int iteration = 1; iteration <= tcfg.max_iterations; ++iteration) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Batch> batches =
        make_batches(train_set, tcfg.patients_per_batch, bs, tcfg.seed, iteration);

    std::size_t ordinal = 0;
    for (const Batch& batch : batches) {
      const std::size_t batch_ordinal_base = ordinal;
      parallel_for(batch.size(), tcfg.threads,
                   [&](std::size_t begin, std::size_t end, int worker) {
                     arch::Workspace& ws = workers[worker].ws;
                     std::vector<float>& window = workers[worker].window;
                     for (std::size_t i = begin; i < end; ++i) {
                       const ExampleRef& ref = batch[i];
                       const sigdata::Recording& rec = *train_set[ref.recording];
                       sigdata::fill_window(rec, ref.epoch, config.signals, wopts,
                                            train_prep.stats[ref.recording],
                                            window.data());
                       Rng drop = Rng::derived(
                           mix_seed(dropout_root, std::uint64_t(iteration)),
                           std::uint64_t(batch_ordinal_base + i));
                       const auto probs =
                           ws.forward(ctx, params, window, arch::Mode::Train, &drop);
                       const int target = int(*rec.hypnogram[ref.epoch]);
                       iter_losses[batch_ordinal_base + i] =
                           -std::log(std::max(probs[target], 1e-300));
                       ws.backward(ctx, params, target, example_grads[i]);
                     }
                   });
      ordinal += batch.size();

      // mean gradient; parallel over parameter ranges, example order fixed
      const double inv = 1.0 / double(batch.size());
      parallel_for(batch_grad.size(), tcfg.threads,
                   [&](std::size_t begin, std::size_t end, int) {
                     std::fill(batch_grad.begin() + begin, batch_grad.begin() + end,
                               0.0);
                     for (std::size_t e = 0; e < batch.size(); ++e) {
                       const float* g = example_grads[e].data();
                       for (std::size_t j = begin; j < end; ++j)
                         batch_grad[j] += double(g[j]);
                     }
                     for (std::size_t j = begin; j < end; ++j) batch_grad[j] *= inv;
                   });
      adam_step(params, batch_grad, adam, tcfg.learning_rate, &layout);
    }

    const double train_loss = pairwise_sum(iter_losses.data(), ordinal) / double(ordinal);
    const double val_loss = mean_loss(ctx, params, val_prep, tcfg.threads);
    const auto t1 = std::chrono::steady_clock::now();

    IterationStat stat;
    stat.iteration = iteration;
    stat.train_loss = train_loss;
    stat.val_loss = val_loss;
    stat.seconds = std::chrono::duration<double>(t1 - t0).count();
    result.history.iterations.push_back(stat);
    if (on_iteration) on_iteration(stat);

    if (monitor.record(iteration, val_loss)) {
      result.best_params = params;
      result.best_val_loss = val_loss;
    }
    if (monitor.should_stop()) {
      result.history.stop_reason = StopReason::Patience;
      break;
    }
    result.history.stop_reason = StopReason::MaxIterations;
  }
  result.history.best_iteration = monitor.best_iteration();
  return result;
}

}  // namespace somnoscore::train
