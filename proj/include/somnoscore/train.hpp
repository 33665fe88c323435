#pragma once

// Training protocol: Adam optimization over patient-mixing mini-batches
// with validation-based early stopping and best-model restoration.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "somnoscore/arch.hpp"
#include "somnoscore/sigdata.hpp"

namespace somnoscore::train {

struct TrainConfig {
  double learning_rate = 1e-4;
  int max_iterations = 100;  // full passes over the training set
  int batch_size = 32;
  int patience = 10;         // iterations without validation improvement
  int patients_per_batch = 1;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;  // throws BadArg
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update. Throws NonFiniteGradient naming the
// offending parameter (the layout is optional and only used for naming).
void adam_step(std::span<float> params, std::span<const double> grads, AdamState& state,
               double lr, const arch::ParamLayout* layout = nullptr);

struct IterationStat {
  int iteration = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

enum class StopReason { Patience, MaxIterations };

struct FitHistory {
  std::vector<IterationStat> iterations;
  int best_iteration = 0;
  StopReason stop_reason = StopReason::MaxIterations;
};

void history_write_csv(const FitHistory& history, const std::filesystem::path& file);

// Tracks the lowest validation loss and the patience counter. Improvement
// means strictly lower than the best seen so far.
class EarlyStopMonitor {
 public:
  explicit EarlyStopMonitor(int patience) : patience_(patience) {}
  bool record(int iteration, double val_loss);  // true when improved
  bool should_stop() const { return since_best_ >= patience_; }
  int best_iteration() const { return best_iteration_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  int best_iteration_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  int since_best_ = 0;
};

using RecordingRefs = std::vector<const sigdata::Recording*>;

struct ExampleRef {
  int recording = 0;  // index into the recording list
  int epoch = 0;
};
using Batch = std::vector<ExampleRef>;

// Mini-batch plan for one iteration. Patients are shuffled per iteration
// by (seed, iteration); `patients_per_batch` streams are open at a time,
// each yielding its patient's labelled epochs in shuffled order; batches
// fill round-robin across the streams and an exhausted stream is replaced
// by the next unopened patient. Every labelled epoch appears exactly once.
std::vector<Batch> make_batches(const RecordingRefs& recordings, int patients_per_batch,
                                int batch_size, std::uint64_t seed, int iteration);

// Mean cross-entropy over every labelled epoch, dropout disabled.
// Pairwise-summed in double; parallel evaluation does not change the result.
double evaluate_loss(const arch::ModelConfig& config, std::span<const float> params,
                     const RecordingRefs& recordings, int threads = 1);

struct FitResult {
  std::vector<float> best_params;
  double best_val_loss = 0.0;
  FitHistory history;
};

using IterationCallback = std::function<void(const IterationStat&)>;

// Runs up to max_iterations passes, evaluating validation loss after each;
// stops once `patience` iterations pass without improvement and returns the
// parameters from the best iteration. Deterministic given the seed,
// including under threads > 1.
FitResult fit(const arch::ModelConfig& config, const TrainConfig& tcfg,
              const RecordingRefs& train_set, const RecordingRefs& val_set,
              const IterationCallback& on_iteration = {});

}  // namespace somnoscore::train
