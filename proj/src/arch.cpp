#include "somnoscore/arch.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace somnoscore::arch {

using nlohmann::json;

ModelConfig ModelConfig::reference(std::vector<sigdata::ChannelKind> signals) {
  ModelConfig cfg;
  cfg.input_channels = static_cast<int>(signals.size());
  cfg.signals = std::move(signals);
  cfg.blocks = {{7, 10, 2}, {7, 12, 2}, {7, 14, 2}, {5, 16, 2},
                {5, 18, 2}, {3, 20, 2}, {3, 20, 2}};
  return cfg;
}

namespace {

void validate_config(const ModelConfig& config) {
  if (config.input_channels < 1 || config.input_channels > 3)
    throw ConfigError("input_channels must be 1, 2 or 3");
  if (config.sections < 1 || config.section_samples < 1)
    throw ConfigError("sections and section_samples must be positive");
  if (config.blocks.empty()) throw ConfigError("model needs at least one block");
  if (config.dropout_p < 0.0 || config.dropout_p >= 1.0)
    throw ConfigError("dropout_p must be in [0, 1)");
  if (config.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const BlockSpec& b = config.blocks[i];
    if (b.kernel < 1 || b.filters < 1 || b.pool < 1)
      throw ConfigError("block " + std::to_string(i) +
                        ": kernel, filters and pool must be >= 1");
  }
  if (!config.signals.empty() &&
      static_cast<int>(config.signals.size()) != config.input_channels)
    throw ConfigError("signal list does not match input_channels");
}

}  // namespace

ShapeInfo shape_propagate(const ModelConfig& config) {
  validate_config(config);
  ShapeInfo info;
  int channels = config.input_channels;
  int length = config.input_length();
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const BlockSpec& b = config.blocks[i];
    const int conv_len = length - b.kernel + 1;
    if (conv_len <= 0)
      throw ConfigError("block " + std::to_string(i) + ": kernel " +
                        std::to_string(b.kernel) + " exceeds input length " +
                        std::to_string(length));
    const int pooled = conv_len / b.pool;
    if (pooled <= 0)
      throw ConfigError("block " + std::to_string(i) + ": pool " +
                        std::to_string(b.pool) + " collapses length " +
                        std::to_string(conv_len));
    channels = b.filters;
    length = pooled;
    info.after_block.push_back({channels, length});
  }
  info.flatten_size = channels * length;
  return info;
}

ParamLayout param_layout(const ModelConfig& config) {
  const ShapeInfo shapes = shape_propagate(config);
  ParamLayout layout;
  std::size_t off = 0;
  int ch = config.input_channels;
  for (const BlockSpec& b : config.blocks) {
    ParamLayout::BlockOffsets bo;
    bo.in_channels = ch;
    bo.kernel = b.kernel;
    bo.filters = b.filters;
    bo.depthwise = off;
    off += std::size_t(ch) * b.kernel;
    bo.pointwise_w = off;
    off += std::size_t(b.filters) * ch;
    bo.pointwise_b = off;
    off += std::size_t(b.filters);
    layout.blocks.push_back(bo);
    ch = b.filters;
  }
  layout.dense_w = off;
  off += std::size_t(config.num_classes) * shapes.flatten_size;
  layout.dense_b = off;
  off += std::size_t(config.num_classes);
  layout.total = off;
  layout.flatten_size = shapes.flatten_size;
  layout.num_classes = config.num_classes;
  return layout;
}

std::string param_name(const ParamLayout& layout, std::size_t index) {
  for (std::size_t i = 0; i < layout.blocks.size(); ++i) {
    const auto& b = layout.blocks[i];
    if (index < b.pointwise_w)
      return "block" + std::to_string(i) + ".depthwise.w[" +
             std::to_string(index - b.depthwise) + "]";
    if (index < b.pointwise_b)
      return "block" + std::to_string(i) + ".pointwise.w[" +
             std::to_string(index - b.pointwise_w) + "]";
    if (index < b.pointwise_b + std::size_t(b.filters))
      return "block" + std::to_string(i) + ".pointwise.b[" +
             std::to_string(index - b.pointwise_b) + "]";
  }
  if (index < layout.dense_b)
    return "classifier.w[" + std::to_string(index - layout.dense_w) + "]";
  if (index < layout.total)
    return "classifier.b[" + std::to_string(index - layout.dense_b) + "]";
  return "param[" + std::to_string(index) + "]";
}

std::pair<std::int64_t, std::int64_t> op_counts(int channels, int kernel,
                                                int signal_length, int filters) {
  if (channels < 1 || kernel < 1 || signal_length < 1 || filters < 1)
    throw BadArg("op_counts: all arguments must be >= 1");
  if (signal_length <= kernel)
    throw BadArg("op_counts: signal length must exceed kernel size");
  const std::int64_t ch = channels, k = kernel, s = signal_length, f = filters;
  const std::int64_t standard = ch * k * (s - k) * f;
  const std::int64_t separable = ch * k * (s - k) + ch * (s - k) * f;
  return {standard, separable};
}

double reduction_ratio(int kernel, int filters) {
  if (kernel < 1 || filters < 1) throw BadArg("reduction_ratio: arguments must be >= 1");
  return 1.0 / kernel + 1.0 / filters;
}

CostReport param_count(const ModelConfig& config) {
  const ShapeInfo shapes = shape_propagate(config);
  CostReport report;
  int ch = config.input_channels;
  int length = config.input_length();
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const BlockSpec& b = config.blocks[i];
    LayerCost cost;
    cost.block = static_cast<int>(i);
    cost.in_channels = ch;
    cost.kernel = b.kernel;
    cost.filters = b.filters;
    cost.in_length = length;
    cost.params_depthwise = std::int64_t(ch) * b.kernel;
    cost.params_pointwise = std::int64_t(b.filters) * ch + b.filters;
    auto [standard, separable] = op_counts(ch, b.kernel, length, b.filters);
    cost.ops_standard = standard;
    cost.ops_separable = separable;
    cost.ratio = reduction_ratio(b.kernel, b.filters);
    report.layers.push_back(cost);
    report.ops_standard_total += standard;
    report.ops_separable_total += separable;
    report.params_total += cost.params_depthwise + cost.params_pointwise;
    ch = b.filters;
    length = (length - b.kernel + 1) / b.pool;
  }
  report.params_classifier =
      std::int64_t(shapes.flatten_size) * config.num_classes + config.num_classes;
  report.params_total += report.params_classifier;
  return report;
}

std::vector<float> init_params(const ModelConfig& config, std::uint64_t seed) {
  const ParamLayout layout = param_layout(config);
  std::vector<float> params(layout.total, 0.0f);
  Rng rng = Rng::derived(seed, 0x1417);

  auto fill_normal = [&](std::size_t offset, std::size_t count, int fan_in) {
    const double sigma = std::sqrt(2.0 / double(fan_in));
    for (std::size_t i = 0; i < count; ++i)
      params[offset + i] = static_cast<float>(sigma * rng.normal());
  };

  for (const auto& b : layout.blocks) {
    fill_normal(b.depthwise, std::size_t(b.in_channels) * b.kernel, b.kernel);
    fill_normal(b.pointwise_w, std::size_t(b.filters) * b.in_channels, b.in_channels);
    // pointwise bias stays zero
  }
  fill_normal(layout.dense_w, std::size_t(layout.num_classes) * layout.flatten_size,
              layout.flatten_size);
  return params;
}

// --- forward / backward -------------------------------------------------------

ModelContext::ModelContext(ModelConfig config)
    : config_(std::move(config)),
      shapes_(shape_propagate(config_)),
      layout_(param_layout(config_)) {}

Workspace::Workspace(const ModelContext& ctx) {
  const ModelConfig& cfg = ctx.config();
  const ShapeInfo& shapes = ctx.shapes();
  int ch = cfg.input_channels;
  int length = cfg.input_length();
  std::size_t max_elems = std::size_t(ch) * length;
  blocks_.resize(cfg.blocks.size());
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockSpec& b = cfg.blocks[i];
    const int conv_len = length - b.kernel + 1;
    const int pooled = conv_len / b.pool;
    blocks_[i].conv.resize(std::size_t(ch) * conv_len);
    blocks_[i].pooled.resize(std::size_t(b.filters) * pooled);
    blocks_[i].argmax.resize(std::size_t(b.filters) * pooled);
    max_elems = std::max({max_elems, blocks_[i].conv.size(),
                          std::size_t(b.filters) * conv_len});
    ch = b.filters;
    length = pooled;
  }
  input_.resize(std::size_t(cfg.input_channels) * cfg.input_length());
  dropped_.resize(shapes.flatten_size);
  dropout_mask_.resize(shapes.flatten_size);
  scratch_.resize(std::size_t(cfg.input_length()));
  grad_a_.resize(max_elems);
  grad_b_.resize(max_elems);
}

std::array<double, sigdata::kNumStages> Workspace::forward(
    const ModelContext& ctx, std::span<const float> params,
    std::span<const float> window, Mode mode, Rng* dropout_rng) {
  const ModelConfig& cfg = ctx.config();
  const ParamLayout& layout = ctx.layout();
  if (window.size() != input_.size())
    throw ShapeError("forward: window has " + std::to_string(window.size()) +
                     " values, model expects " + std::to_string(input_.size()));
  if (params.size() != layout.total)
    throw ShapeError("forward: parameter vector size mismatch");
  std::copy(window.begin(), window.end(), input_.begin());

  const float* x = input_.data();
  int ch = cfg.input_channels;
  int length = cfg.input_length();
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockSpec& b = cfg.blocks[i];
    const auto& off = layout.blocks[i];
    BlockBuffers& buf = blocks_[i];
    const int conv_len = length - b.kernel + 1;
    const int pooled_len = conv_len / b.pool;

    nncore::depthwise_forward(x, ch, length, params.data() + off.depthwise, b.kernel,
                              buf.conv.data());
    nncore::pointwise_relu_pool(buf.conv.data(), ch, conv_len,
                                params.data() + off.pointwise_w,
                                params.data() + off.pointwise_b, b.filters, b.pool,
                                buf.pooled.data(), buf.argmax.data(), scratch_.data());

    x = buf.pooled.data();
    ch = b.filters;
    length = pooled_len;
  }

  // flatten is the last pooled buffer viewed as one row
  const float* flat = x;
  const std::size_t flat_n = std::size_t(layout.flatten_size);
  if (mode == Mode::Train) {
    if (dropout_rng == nullptr)
      throw BadArg("forward: train mode requires a dropout rng");
    const double p = cfg.dropout_p;
    dropout_scale_ = p > 0.0 ? 1.0 / (1.0 - p) : 1.0;
    for (std::size_t i = 0; i < flat_n; ++i) {
      const bool keep = p == 0.0 || dropout_rng->uniform() >= p;
      dropout_mask_[i] = keep ? 1 : 0;
      dropped_[i] = keep ? static_cast<float>(double(flat[i]) * dropout_scale_) : 0.0f;
    }
  } else {
    dropout_scale_ = 1.0;
    std::fill(dropout_mask_.begin(), dropout_mask_.end(), 1);
    std::copy(flat, flat + flat_n, dropped_.begin());
  }

  nncore::dense_forward(dropped_.data(), layout.flatten_size,
                        params.data() + layout.dense_w, params.data() + layout.dense_b,
                        layout.num_classes, logits_.data());
  nncore::softmax(logits_.data(), layout.num_classes, probs_.data());

  have_forward_ = (mode == Mode::Train);
  if (mode == Mode::Train) tape_.reset();

  std::array<double, sigdata::kNumStages> out{};
  for (int i = 0; i < layout.num_classes; ++i) out[i] = double(probs_[i]);
  return out;
}

void Workspace::backward(const ModelContext& ctx, std::span<const float> params,
                         int target, std::span<float> grad_out) {
  const ModelConfig& cfg = ctx.config();
  const ParamLayout& layout = ctx.layout();
  if (!have_forward_)
    throw TapeConsumed("backward requires a preceding train-mode forward");
  tape_.consume();
  if (target < 0 || target >= layout.num_classes)
    throw BadArg("backward: target class out of range");
  if (grad_out.size() != layout.total)
    throw ShapeError("backward: gradient vector size mismatch");

  std::array<float, sigdata::kNumStages> dlogits{};
  nncore::softmax_cross_entropy_backward(probs_.data(), layout.num_classes, target,
                                         dlogits.data());

  // classifier
  float* gflat = grad_a_.data();
  nncore::dense_backward(dropped_.data(), layout.flatten_size,
                         params.data() + layout.dense_w, layout.num_classes,
                         dlogits.data(), gflat, grad_out.data() + layout.dense_w,
                         grad_out.data() + layout.dense_b);

  // dropout
  for (int i = 0; i < layout.flatten_size; ++i)
    gflat[i] = dropout_mask_[i]
                   ? static_cast<float>(double(gflat[i]) * dropout_scale_)
                   : 0.0f;

  // blocks, last to first; gflat currently holds the gradient w.r.t. the
  // last pooled feature map
  float* gcur = gflat;
  float* gnext = grad_b_.data();
  for (int bi = static_cast<int>(cfg.blocks.size()) - 1; bi >= 0; --bi) {
    const BlockSpec& b = cfg.blocks[bi];
    const auto& off = layout.blocks[bi];
    BlockBuffers& buf = blocks_[bi];
    const int in_ch = off.in_channels;
    const int in_len = bi == 0 ? cfg.input_length()
                               : ctx.shapes().after_block[bi - 1].length;
    const int conv_len = in_len - b.kernel + 1;
    const int pooled_len = conv_len / b.pool;
    const float* block_input = bi == 0 ? input_.data() : blocks_[bi - 1].pooled.data();

    // max-pool routing and the ReLU mask in one scatter
    nncore::maxpool_relu_backward(buf.argmax.data(), buf.pooled.data(), gcur,
                                  b.filters, conv_len, pooled_len, gnext);
    std::swap(gcur, gnext);
    // pointwise
    nncore::pointwise_backward(buf.conv.data(), in_ch, conv_len,
                               params.data() + off.pointwise_w, b.filters, gcur, gnext,
                               grad_out.data() + off.pointwise_w,
                               grad_out.data() + off.pointwise_b, scratch_.data());
    std::swap(gcur, gnext);
    // depthwise; no input gradient needed at the first block
    nncore::depthwise_backward(block_input, in_ch, in_len,
                               params.data() + off.depthwise, b.kernel, gcur,
                               bi == 0 ? nullptr : gnext,
                               grad_out.data() + off.depthwise, scratch_.data());
    std::swap(gcur, gnext);
  }
  have_forward_ = false;
}

std::array<double, sigdata::kNumStages> forward(const ModelConfig& config,
                                                std::span<const float> params,
                                                std::span<const float> window,
                                                Mode mode, Rng* dropout_rng) {
  ModelContext ctx(config);
  Workspace ws(ctx);
  return ws.forward(ctx, params, window, mode, dropout_rng);
}

// --- checkpoints ---------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["input_channels"] = cfg.input_channels;
  j["sections"] = cfg.sections;
  j["section_samples"] = cfg.section_samples;
  json blocks = json::array();
  for (const BlockSpec& b : cfg.blocks)
    blocks.push_back({{"kernel", b.kernel}, {"filters", b.filters}, {"pool", b.pool}});
  j["blocks"] = blocks;
  j["dropout_p"] = cfg.dropout_p;
  j["num_classes"] = cfg.num_classes;
  json signals = json::array();
  for (sigdata::ChannelKind k : cfg.signals) signals.push_back(sigdata::to_string(k));
  j["signals"] = signals;
  j["zscore"] = cfg.zscore;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  try {
    cfg.input_channels = j.at("input_channels").get<int>();
    cfg.sections = j.at("sections").get<int>();
    cfg.section_samples = j.at("section_samples").get<int>();
    cfg.blocks.clear();
    for (const auto& b : j.at("blocks"))
      cfg.blocks.push_back({b.at("kernel").get<int>(), b.at("filters").get<int>(),
                            b.at("pool").get<int>()});
    cfg.dropout_p = j.at("dropout_p").get<double>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.signals.clear();
    for (const auto& s : j.at("signals")) {
      auto kind = sigdata::channel_from_string(s.get<std::string>());
      if (!kind) throw FormatError("checkpoint: unknown signal '" + s.get<std::string>() + "'");
      cfg.signals.push_back(*kind);
    }
    cfg.zscore = j.value("zscore", false);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed config: ") + e.what());
  }
  return cfg;
}

}  // namespace

std::string config_to_json_string(const ModelConfig& config) {
  return config_to_json(config).dump();
}

ModelConfig config_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

void save_checkpoint(const std::filesystem::path& file, const CheckpointMeta& meta,
                     std::span<const float> params) {
  const ParamLayout layout = param_layout(meta.config);
  if (params.size() != layout.total)
    throw ShapeError("save_checkpoint: parameter count " + std::to_string(params.size()) +
                     " does not match config (" + std::to_string(layout.total) + ")");
  json header;
  header["format_version"] = meta.format_version;
  header["config"] = config_to_json(meta.config);
  header["seed"] = meta.seed;
  header["metrics_at_save"] = {{"val_loss", meta.val_loss},
                               {"best_iteration", meta.best_iteration}};
  std::ofstream out(file, std::ios::binary);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(params.data()),
            static_cast<std::streamsize>(params.size() * sizeof(float)));
  if (!out) throw FormatError("write failed: " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + file.string());
  std::string header_line;
  if (!std::getline(in, header_line))
    throw FormatError(file.string() + ": missing header line");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": invalid header JSON: " + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.meta.format_version = header.at("format_version").get<int>();
    ckpt.meta.config = config_from_json(header.at("config"));
    ckpt.meta.seed = header.at("seed").get<std::uint64_t>();
    const auto& m = header.at("metrics_at_save");
    ckpt.meta.val_loss = m.at("val_loss").get<double>();
    ckpt.meta.best_iteration = m.at("best_iteration").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": malformed header: " + e.what());
  }
  if (ckpt.meta.format_version != 1)
    throw FormatError(file.string() + ": unsupported format_version " +
                      std::to_string(ckpt.meta.format_version));
  const ParamLayout layout = param_layout(ckpt.meta.config);
  ckpt.params.resize(layout.total);
  in.read(reinterpret_cast<char*>(ckpt.params.data()),
          static_cast<std::streamsize>(layout.total * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != layout.total * sizeof(float))
    throw FormatError(file.string() + ": parameter blob truncated");
  char extra;
  if (in.read(&extra, 1))
    throw FormatError(file.string() + ": trailing bytes after parameter blob");
  return ckpt;
}

}  // namespace somnoscore::arch
