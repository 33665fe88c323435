#pragma once

// The separable-convolution scoring model: a configurable stack of
// depthwise conv -> pointwise conv -> ReLU -> max-pool blocks followed by
// flatten, dropout and a softmax classifier, plus shape propagation,
// parameter/operation accounting and checkpoint serialization.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "somnoscore/nncore.hpp"
#include "somnoscore/sigdata.hpp"

namespace somnoscore::arch {

using nncore::Mode;

struct BlockSpec {
  int kernel = 1;
  int filters = 1;
  int pool = 1;
};

struct ModelConfig {
  int input_channels = 1;
  int sections = sigdata::kWindowSections;
  int section_samples = sigdata::kEpochSamples;
  std::vector<BlockSpec> blocks;
  double dropout_p = 0.5;
  int num_classes = sigdata::kNumStages;
  std::vector<sigdata::ChannelKind> signals;  // input channel order
  bool zscore = false;                        // windowing normalization

  int input_length() const { return sections * section_samples; }

  // Seven blocks, kernels 7..3, pool 2 throughout, 10..20 filters; final
  // feature map is 20 x 143 = 2860 values.
  static ModelConfig reference(std::vector<sigdata::ChannelKind> signals);
};

struct LayerShape {
  int channels = 0;
  int length = 0;
};

struct ShapeInfo {
  std::vector<LayerShape> after_block;
  int flatten_size = 0;
};

// Per block: length -> (length - K + 1) then floor(/M); channels -> F.
// Throws ConfigError naming the first block whose length collapses.
ShapeInfo shape_propagate(const ModelConfig& config);

// Offsets of each parameter group inside the flat parameter vector. The
// serialization order is fixed: per block depthwise weights (row-major),
// pointwise weights (row-major), pointwise bias; then classifier weights
// (row-major) and bias.
struct ParamLayout {
  struct BlockOffsets {
    std::size_t depthwise = 0;
    std::size_t pointwise_w = 0;
    std::size_t pointwise_b = 0;
    int in_channels = 0;
    int kernel = 0;
    int filters = 0;
  };
  std::vector<BlockOffsets> blocks;
  std::size_t dense_w = 0;
  std::size_t dense_b = 0;
  std::size_t total = 0;
  int flatten_size = 0;
  int num_classes = 0;
};

ParamLayout param_layout(const ModelConfig& config);

// Human-readable location of a flat parameter index, e.g.
// "block3.pointwise.w[5]" or "classifier.bias[2]".
std::string param_name(const ParamLayout& layout, std::size_t index);

struct LayerCost {
  int block = 0;
  int in_channels = 0;
  int kernel = 0;
  int filters = 0;
  int in_length = 0;
  std::int64_t params_depthwise = 0;
  std::int64_t params_pointwise = 0;
  std::int64_t ops_standard = 0;   // Ch * K * (S - K) * F
  std::int64_t ops_separable = 0;  // Ch * K * (S - K) + Ch * (S - K) * F
  double ratio = 0.0;              // 1/K + 1/F
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::int64_t params_classifier = 0;
  std::int64_t params_total = 0;
  std::int64_t ops_standard_total = 0;
  std::int64_t ops_separable_total = 0;
};

// Depthwise carries no bias; pointwise carries one bias per filter.
CostReport param_count(const ModelConfig& config);

// Operation counts of a standard vs separable convolution layer.
// Throws BadArg when signal_length <= kernel.
std::pair<std::int64_t, std::int64_t> op_counts(int channels, int kernel,
                                                int signal_length, int filters);
double reduction_ratio(int kernel, int filters);

// He-style init: weights ~ Normal(0, 2/fan_in), biases zero.
std::vector<float> init_params(const ModelConfig& config, std::uint64_t seed);

// --- forward / backward ------------------------------------------------------

// Immutable evaluation context shared across threads.
class ModelContext {
 public:
  explicit ModelContext(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ShapeInfo& shapes() const { return shapes_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t param_total() const { return layout_.total; }

 private:
  ModelConfig config_;
  ShapeInfo shapes_;
  ParamLayout layout_;
};

// Per-thread buffers and taped activations for one example at a time.
class Workspace {
 public:
  explicit Workspace(const ModelContext& ctx);

  // Runs the block stack + classifier. Train mode applies dropout (rng
  // required) and records everything needed for one backward() call.
  std::array<double, sigdata::kNumStages> forward(const ModelContext& ctx,
                                                  std::span<const float> params,
                                                  std::span<const float> window,
                                                  Mode mode, Rng* dropout_rng = nullptr);

  // Gradient of the cross-entropy loss at `target` w.r.t. all parameters,
  // written into grad_out (size param_total). Must follow a train-mode
  // forward on this workspace; a second call without a new forward throws
  // TapeConsumed.
  void backward(const ModelContext& ctx, std::span<const float> params, int target,
                std::span<float> grad_out);

 private:
  struct BlockBuffers {
    std::vector<float> conv;      // depthwise output
    std::vector<float> pooled;    // fused pointwise + ReLU + max-pool output
    std::vector<std::int32_t> argmax;  // global conv-position per pooled element
  };
  std::vector<BlockBuffers> blocks_;
  std::vector<float> input_;          // copy of the window (backward needs it)
  std::vector<float> dropped_;        // after dropout
  std::vector<std::uint8_t> dropout_mask_;
  double dropout_scale_ = 1.0;
  std::array<float, sigdata::kNumStages> logits_{};
  std::array<float, sigdata::kNumStages> probs_{};
  std::vector<double> scratch_;       // accumulation buffer
  std::vector<float> grad_a_, grad_b_;  // ping-pong activation gradients
  nncore::GradTape tape_;
  bool have_forward_ = false;
};

// Convenience single-shot forward matching the module contract; allocates
// a workspace internally.
std::array<double, sigdata::kNumStages> forward(const ModelConfig& config,
                                                std::span<const float> params,
                                                std::span<const float> window,
                                                Mode mode = Mode::Eval,
                                                Rng* dropout_rng = nullptr);

// --- checkpoints --------------------------------------------------------------
//
// A checkpoint file is a single-line JSON header followed by the raw
// little-endian float32 parameter blob in ParamLayout order.

// JSON form of a ModelConfig as stored in checkpoint headers.
std::string config_to_json_string(const ModelConfig& config);
ModelConfig config_from_json_string(const std::string& text);

struct CheckpointMeta {
  int format_version = 1;
  ModelConfig config;
  std::uint64_t seed = 0;
  double val_loss = 0.0;
  int best_iteration = 0;
};

void save_checkpoint(const std::filesystem::path& file, const CheckpointMeta& meta,
                     std::span<const float> params);

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<float> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace somnoscore::arch
