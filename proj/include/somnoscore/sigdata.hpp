#pragma once

// Data model for polysomnogram recordings: stage labels, epoch windowing,
// patient-level splits, synthetic signal generation and the on-disk dataset
// format. All types are immutable after construction; the operations are
// pure functions.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "somnoscore/errors.hpp"

namespace somnoscore::sigdata {

inline constexpr int kSampleRateHz = 125;
inline constexpr int kEpochSeconds = 30;
inline constexpr int kEpochSamples = kSampleRateHz * kEpochSeconds;  // 3750
inline constexpr int kContextSections = 2;  // sections added before and after
inline constexpr int kWindowSections = 2 * kContextSections + 1;    // 5
inline constexpr int kWindowSamples = kWindowSections * kEpochSamples;  // 18750
inline constexpr int kNumStages = 5;

// R&K scoring vocabulary as found in the source annotations.
enum class StageRK : std::uint8_t { Awake, S1, S2, S3, S4, REM, Unknown };

// AASM target classes; the class index used everywhere is the enum value,
// in this order.
enum class StageAASM : std::uint8_t { Awake = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };

enum class ChannelKind : std::uint8_t { EEG_C3A2 = 0, EEG_C4A1 = 1, EMG = 2 };
inline constexpr int kNumChannelKinds = 3;

std::string to_string(StageAASM s);
std::string to_string(ChannelKind k);
std::optional<ChannelKind> channel_from_string(const std::string& name);

// hypnogram token per epoch; nullopt marks an excluded epoch (no target)
using EpochLabel = std::optional<StageAASM>;
std::string epoch_label_token(const EpochLabel& l);  // W N1 N2 N3 R X
std::optional<EpochLabel> epoch_label_from_token(const std::string& token);

// Awake->Awake, S1->N1, S2->N2, S3/S4->N3, REM->REM, Unknown->excluded.
EpochLabel map_rk_to_aasm(StageRK label);

// One patient's simultaneous channels plus the per-epoch hypnogram.
// epoch_count = samples / kEpochSamples (floor); the hypnogram has exactly
// epoch_count entries and all channel arrays have the same length.
struct Recording {
  std::string patient_id;
  int sample_rate = kSampleRateHz;
  std::map<ChannelKind, std::vector<float>> channels;
  std::vector<EpochLabel> hypnogram;

  int epoch_count() const { return static_cast<int>(hypnogram.size()); }
  std::size_t samples() const {
    return channels.empty() ? 0 : channels.begin()->second.size();
  }
  bool has(ChannelKind k) const { return channels.count(k) != 0; }
  void validate() const;  // throws IntegrityError on shape violations
};

// One training pattern: the labelled epoch plus two context sections on
// each side, per requested channel, in the requested order.
struct Example {
  std::vector<float> window;  // [kinds.size()][kWindowSamples], row-major
  int num_channels = 0;
  StageAASM target = StageAASM::Awake;
  std::string patient_id;
  int epoch_index = 0;
};

struct WindowOptions {
  bool zscore = false;  // per-recording, per-channel standardization
};

// Sections outside the recording are zero-filled so that every labelled
// epoch yields exactly one example.
Example make_example(const Recording& rec, int epoch_index,
                     const std::vector<ChannelKind>& kinds,
                     const WindowOptions& opts = {});

// Fills a caller-owned buffer of kinds.size() * kWindowSamples floats;
// normalization statistics may be precomputed with channel_stats().
struct ChannelStats {
  double mean = 0.0;
  double stddev = 1.0;
};
ChannelStats channel_stats(const Recording& rec, ChannelKind kind);
void fill_window(const Recording& rec, int epoch_index,
                 const std::vector<ChannelKind>& kinds, const WindowOptions& opts,
                 const std::vector<ChannelStats>& stats, float* out);

struct SplitSpec {
  std::uint64_t seed = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

// Patient-level split: shuffle by seed, then round-half-up sizes for train
// and val, remainder to test.
SplitSpec split_patients(const std::vector<std::string>& ids,
                         const SplitRatios& ratios = {}, std::uint64_t seed = 0);

void split_write(const SplitSpec& spec, const std::filesystem::path& file);
SplitSpec split_read(const std::filesystem::path& file);

// --- synthetic polysomnograms ---------------------------------------------

struct BandSpec {
  double center_hz = 10.0;
  double bandwidth_hz = 4.0;
  double amplitude = 10.0;  // target RMS, microvolts
};

// Per stage and channel: a sustained band plus an optional burst band that
// switches on for short intervals (spindle-like activity).
struct StageChannelRecipe {
  BandSpec band;
  std::optional<BandSpec> bursts;
};

struct SynthSpec {
  int num_patients = 2;
  int epochs_per_patient = 20;
  std::array<std::array<double, kNumStages>, kNumStages> transitions{};  // row-stochastic
  // recipes[stage][channel kind]
  std::array<std::array<StageChannelRecipe, kNumChannelKinds>, kNumStages> recipes{};
  double noise_floor = 2.0;
  std::uint64_t seed = 0;
  std::vector<ChannelKind> channels = {ChannelKind::EEG_C3A2, ChannelKind::EEG_C4A1,
                                       ChannelKind::EMG};

  // Stage dynamics and spectral content tuned for class separability at
  // desk scale; EMG alone cannot distinguish N1 from N2 by construction.
  static SynthSpec defaults(int num_patients, int epochs_per_patient,
                            std::uint64_t seed);
  void validate() const;  // throws BadSpec
};

std::vector<Recording> synth_dataset(const SynthSpec& spec);

// --- dataset directory format ---------------------------------------------
//
//   manifest.json          patient list, sample rate, channel kinds, files
//   <patient>_<kind>.f32   raw little-endian float32 samples
//   <patient>.hyp          one token per line: W N1 N2 N3 R X

void manifest_write(const std::vector<Recording>& recordings,
                    const std::filesystem::path& dir);
std::vector<Recording> manifest_read(const std::filesystem::path& dir);

// loads only the listed patients; unknown ids raise IntegrityError
std::vector<Recording> manifest_read_subset(const std::filesystem::path& dir,
                                            const std::vector<std::string>& ids);

// patient ids only, without loading signal data
std::vector<std::string> manifest_patient_ids(const std::filesystem::path& dir);

}  // namespace somnoscore::sigdata
