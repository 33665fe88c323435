#include "somnoscore/sigdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "somnoscore/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "signal files are little-endian float32");

namespace somnoscore::sigdata {

using nlohmann::json;

std::string to_string(StageAASM s) {
  switch (s) {
    case StageAASM::Awake: return "W";
    case StageAASM::N1: return "N1";
    case StageAASM::N2: return "N2";
    case StageAASM::N3: return "N3";
    case StageAASM::REM: return "R";
  }
  return "?";
}

std::string to_string(ChannelKind k) {
  switch (k) {
    case ChannelKind::EEG_C3A2: return "C3A2";
    case ChannelKind::EEG_C4A1: return "C4A1";
    case ChannelKind::EMG: return "EMG";
  }
  return "?";
}

std::optional<ChannelKind> channel_from_string(const std::string& name) {
  if (name == "C3A2") return ChannelKind::EEG_C3A2;
  if (name == "C4A1") return ChannelKind::EEG_C4A1;
  if (name == "EMG") return ChannelKind::EMG;
  return std::nullopt;
}

std::string epoch_label_token(const EpochLabel& l) {
  return l.has_value() ? to_string(*l) : "X";
}

std::optional<EpochLabel> epoch_label_from_token(const std::string& token) {
  if (token == "X") return EpochLabel{std::nullopt};
  if (token == "W") return EpochLabel{StageAASM::Awake};
  if (token == "N1") return EpochLabel{StageAASM::N1};
  if (token == "N2") return EpochLabel{StageAASM::N2};
  if (token == "N3") return EpochLabel{StageAASM::N3};
  if (token == "R") return EpochLabel{StageAASM::REM};
  return std::nullopt;
}

EpochLabel map_rk_to_aasm(StageRK label) {
  switch (label) {
    case StageRK::Awake: return StageAASM::Awake;
    case StageRK::S1: return StageAASM::N1;
    case StageRK::S2: return StageAASM::N2;
    case StageRK::S3: return StageAASM::N3;
    case StageRK::S4: return StageAASM::N3;
    case StageRK::REM: return StageAASM::REM;
    case StageRK::Unknown: return std::nullopt;
  }
  return std::nullopt;
}

void Recording::validate() const {
  if (channels.empty())
    throw IntegrityError("recording " + patient_id + ": no channels");
  const std::size_t n = channels.begin()->second.size();
  for (const auto& [kind, samples] : channels) {
    if (samples.size() != n)
      throw IntegrityError("recording " + patient_id + ": channel " + to_string(kind) +
                           " has " + std::to_string(samples.size()) +
                           " samples, expected " + std::to_string(n));
  }
  const std::size_t epochs = n / kEpochSamples;
  if (hypnogram.size() != epochs)
    throw IntegrityError("recording " + patient_id + ": hypnogram has " +
                         std::to_string(hypnogram.size()) + " epochs, signal has " +
                         std::to_string(epochs));
}

ChannelStats channel_stats(const Recording& rec, ChannelKind kind) {
  auto it = rec.channels.find(kind);
  if (it == rec.channels.end())
    throw MissingChannel("recording " + rec.patient_id + ": channel " +
                         to_string(kind) + " not present");
  const auto& s = it->second;
  if (s.empty()) return {};
  double sum = 0.0;
  for (float v : s) sum += v;
  const double mean = sum / double(s.size());
  double var = 0.0;
  for (float v : s) {
    const double d = double(v) - mean;
    var += d * d;
  }
  var /= double(s.size());
  ChannelStats st;
  st.mean = mean;
  st.stddev = var > 0.0 ? std::sqrt(var) : 1.0;
  return st;
}

void fill_window(const Recording& rec, int epoch_index,
                 const std::vector<ChannelKind>& kinds, const WindowOptions& opts,
                 const std::vector<ChannelStats>& stats, float* out) {
  const int epochs = rec.epoch_count();
  if (epoch_index < 0 || epoch_index >= epochs)
    throw BadIndex("epoch index " + std::to_string(epoch_index) + " out of range [0, " +
                   std::to_string(epochs) + ")");
  for (std::size_t ci = 0; ci < kinds.size(); ++ci) {
    auto it = rec.channels.find(kinds[ci]);
    if (it == rec.channels.end())
      throw MissingChannel("recording " + rec.patient_id + ": channel " +
                           to_string(kinds[ci]) + " not present");
    const std::vector<float>& sig = it->second;
    float* row = out + ci * std::size_t(kWindowSamples);
    for (int sec = -kContextSections; sec <= kContextSections; ++sec) {
      const int e = epoch_index + sec;
      float* dst = row + std::size_t(sec + kContextSections) * kEpochSamples;
      if (e < 0 || e >= epochs) {
        std::fill(dst, dst + kEpochSamples, 0.0f);
      } else {
        const float* src = sig.data() + std::size_t(e) * kEpochSamples;
        if (opts.zscore) {
          const ChannelStats& st = stats[ci];
          const float inv = static_cast<float>(1.0 / st.stddev);
          const float mean = static_cast<float>(st.mean);
          for (int i = 0; i < kEpochSamples; ++i) dst[i] = (src[i] - mean) * inv;
        } else {
          std::copy(src, src + kEpochSamples, dst);
        }
      }
    }
  }
}

Example make_example(const Recording& rec, int epoch_index,
                     const std::vector<ChannelKind>& kinds, const WindowOptions& opts) {
  const int epochs = rec.epoch_count();
  if (epoch_index < 0 || epoch_index >= epochs)
    throw BadIndex("epoch index " + std::to_string(epoch_index) + " out of range [0, " +
                   std::to_string(epochs) + ")");
  const EpochLabel& label = rec.hypnogram[epoch_index];
  if (!label.has_value())
    throw ExcludedEpoch("recording " + rec.patient_id + ": epoch " +
                        std::to_string(epoch_index) + " is excluded");
  std::vector<ChannelStats> stats;
  if (opts.zscore) {
    stats.reserve(kinds.size());
    for (ChannelKind k : kinds) stats.push_back(channel_stats(rec, k));
  } else {
    stats.resize(kinds.size());
  }
  Example ex;
  ex.num_channels = static_cast<int>(kinds.size());
  ex.window.resize(kinds.size() * std::size_t(kWindowSamples));
  ex.target = *label;
  ex.patient_id = rec.patient_id;
  ex.epoch_index = epoch_index;
  fill_window(rec, epoch_index, kinds, opts, stats, ex.window.data());
  return ex;
}

namespace {
int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }
}  // namespace

SplitSpec split_patients(const std::vector<std::string>& ids, const SplitRatios& ratios,
                         std::uint64_t seed) {
  if (ids.empty()) throw BadArg("split_patients: empty patient list");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw BadArg("split_patients: ratios must sum to 1");
  {
    std::set<std::string> uniq(ids.begin(), ids.end());
    if (uniq.size() != ids.size())
      throw DuplicatePatient("split_patients: duplicate patient id in input");
  }
  std::vector<std::string> shuffled = ids;
  Rng rng = Rng::derived(seed, 0x5713A7);
  rng.shuffle(shuffled);

  const int n = static_cast<int>(shuffled.size());
  const int n_train = round_half_up(ratios.train * n);
  const int n_val = round_half_up(ratios.val * n);
  const int n_test = n - n_train - n_val;
  if (n_train < 0 || n_val < 0 || n_test < 0)
    throw BadArg("split_patients: ratios produce a negative subset size");

  SplitSpec spec;
  spec.seed = seed;
  spec.train.assign(shuffled.begin(), shuffled.begin() + n_train);
  spec.val.assign(shuffled.begin() + n_train, shuffled.begin() + n_train + n_val);
  spec.test.assign(shuffled.begin() + n_train + n_val, shuffled.end());
  return spec;
}

void split_write(const SplitSpec& spec, const std::filesystem::path& file) {
  json j;
  j["seed"] = spec.seed;
  j["train"] = spec.train;
  j["val"] = spec.val;
  j["test"] = spec.test;
  std::ofstream out(file);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out << j.dump(2) << "\n";
}

SplitSpec split_read(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open split file " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": invalid JSON: " + e.what());
  }
  SplitSpec spec;
  try {
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.train = j.at("train").get<std::vector<std::string>>();
    spec.val = j.at("val").get<std::vector<std::string>>();
    spec.test = j.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": missing or malformed field: " + e.what());
  }
  return spec;
}

// --- synthetic polysomnograms ----------------------------------------------

SynthSpec SynthSpec::defaults(int num_patients, int epochs_per_patient,
                              std::uint64_t seed) {
  SynthSpec s;
  s.num_patients = num_patients;
  s.epochs_per_patient = epochs_per_patient;
  s.seed = seed;
  s.noise_floor = 1.5;
  s.transitions = {{
      {0.66, 0.26, 0.04, 0.01, 0.03},  // Awake
      {0.08, 0.55, 0.29, 0.03, 0.05},  // N1
      {0.03, 0.08, 0.65, 0.15, 0.09},  // N2
      {0.02, 0.01, 0.17, 0.75, 0.05},  // N3
      {0.05, 0.10, 0.09, 0.01, 0.75},  // REM
  }};

  auto eeg = [](double center, double bw, double amp) {
    StageChannelRecipe r;
    r.band = {center, bw, amp};
    return r;
  };
  auto emg = [](double amp) {
    StageChannelRecipe r;
    r.band = {32.0, 26.0, amp};
    return r;
  };

  // stage order: Awake, N1, N2, N3, REM; channel order: C3A2, C4A1, EMG.
  // EMG amplitudes for N1 and N2 are identical on purpose: the EMG channel
  // alone cannot separate those two stages.
  s.recipes[0] = {eeg(11.0, 4.0, 28.0), eeg(11.0, 4.0, 30.0), emg(30.0)};
  s.recipes[1] = {eeg(5.5, 3.0, 11.0), eeg(5.5, 3.0, 12.0), emg(8.0)};
  s.recipes[2] = {eeg(6.0, 4.0, 30.0), eeg(6.0, 4.0, 32.0), emg(8.0)};
  s.recipes[3] = {eeg(2.2, 3.4, 55.0), eeg(2.2, 3.4, 60.0), emg(3.0)};
  s.recipes[4] = {eeg(8.0, 4.0, 9.0), eeg(8.0, 4.0, 10.0), emg(0.5)};
  BandSpec spindle{13.0, 2.0, 45.0};
  s.recipes[2][0].bursts = spindle;
  s.recipes[2][1].bursts = spindle;
  return s;
}

void SynthSpec::validate() const {
  if (num_patients <= 0) throw BadSpec("synth: num_patients must be positive");
  if (epochs_per_patient <= 0) throw BadSpec("synth: epochs_per_patient must be positive");
  if (channels.empty()) throw BadSpec("synth: channel list is empty");
  if (noise_floor < 0.0) throw BadSpec("synth: noise floor must be non-negative");
  for (int r = 0; r < kNumStages; ++r) {
    double sum = 0.0;
    for (int c = 0; c < kNumStages; ++c) {
      if (transitions[r][c] < 0.0)
        throw BadSpec("synth: negative transition probability in row " + std::to_string(r));
      sum += transitions[r][c];
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw BadSpec("synth: transition row " + std::to_string(r) + " sums to " +
                    std::to_string(sum) + ", expected 1");
  }
  for (int st = 0; st < kNumStages; ++st) {
    for (ChannelKind k : channels) {
      const StageChannelRecipe& r = recipes[st][static_cast<int>(k)];
      if (r.band.amplitude <= 0.0)
        throw BadSpec("synth: non-positive band amplitude for stage " + std::to_string(st));
      if (r.bursts && r.bursts->amplitude <= 0.0)
        throw BadSpec("synth: non-positive burst amplitude for stage " + std::to_string(st));
    }
  }
}

namespace {

// Sum of Nsin random-phase sinusoids drawn uniformly from the band, scaled
// so the expected RMS equals the recipe amplitude. Phasor rotation avoids a
// sin() call per sample.
constexpr int kSinusoidsPerBand = 12;

struct Phasor {
  double re, im;     // current phase
  double rre, rim;   // per-sample rotation
  double amp;
};

void init_band(const BandSpec& band, double amp_scale, Rng& rng,
               std::vector<Phasor>& out) {
  const double lo = std::max(0.05, band.center_hz - 0.5 * band.bandwidth_hz);
  const double hi = band.center_hz + 0.5 * band.bandwidth_hz;
  const double per_sin = band.amplitude * amp_scale * std::sqrt(2.0 / kSinusoidsPerBand);
  for (int i = 0; i < kSinusoidsPerBand; ++i) {
    const double f = lo + (hi - lo) * rng.uniform();
    const double w = 2.0 * M_PI * f / double(kSampleRateHz);
    const double phase = 2.0 * M_PI * rng.uniform();
    Phasor p;
    p.re = std::cos(phase);
    p.im = std::sin(phase);
    p.rre = std::cos(w);
    p.rim = std::sin(w);
    p.amp = per_sin;
    out.push_back(p);
  }
}

void add_band(std::vector<Phasor>& ph, float* dst, int begin, int end) {
  for (Phasor& p : ph) {
    double re = p.re, im = p.im;
    for (int t = begin; t < end; ++t) {
      dst[t] += static_cast<float>(p.amp * im);
      const double nre = re * p.rre - im * p.rim;
      im = re * p.rim + im * p.rre;
      re = nre;
    }
    p.re = re;
    p.im = im;
  }
}

}  // namespace

std::vector<Recording> synth_dataset(const SynthSpec& spec) {
  spec.validate();
  std::vector<Recording> out;
  out.reserve(spec.num_patients);

  for (int p = 0; p < spec.num_patients; ++p) {
    Recording rec;
    {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "p%04d", p);
      rec.patient_id = buf;
    }

    // stage sequence from the Markov chain, starting awake
    Rng stage_rng = Rng::derived(mix_seed(spec.seed, 0x57A6E5), p);
    std::vector<int> stages(spec.epochs_per_patient);
    int cur = 0;
    for (int e = 0; e < spec.epochs_per_patient; ++e) {
      stages[e] = cur;
      const double u = stage_rng.uniform();
      double acc = 0.0;
      int next = kNumStages - 1;
      for (int s = 0; s < kNumStages; ++s) {
        acc += spec.transitions[cur][s];
        if (u < acc) {
          next = s;
          break;
        }
      }
      cur = next;
    }

    rec.hypnogram.reserve(stages.size());
    for (int s : stages) rec.hypnogram.push_back(static_cast<StageAASM>(s));

    const std::size_t total = std::size_t(spec.epochs_per_patient) * kEpochSamples;
    for (ChannelKind k : spec.channels) rec.channels[k] = std::vector<float>(total, 0.0f);

    Rng sig_rng = Rng::derived(mix_seed(spec.seed, 0x516DA1), p);
    std::vector<Phasor> phasors;
    for (int e = 0; e < spec.epochs_per_patient; ++e) {
      const int stage = stages[e];
      for (ChannelKind k : spec.channels) {
        const StageChannelRecipe& recipe = spec.recipes[stage][static_cast<int>(k)];
        float* dst = rec.channels[k].data() + std::size_t(e) * kEpochSamples;

        phasors.clear();
        init_band(recipe.band, 1.0, sig_rng, phasors);
        add_band(phasors, dst, 0, kEpochSamples);

        if (recipe.bursts) {
          const int n_bursts = 2 + static_cast<int>(sig_rng.below(3));
          for (int b = 0; b < n_bursts; ++b) {
            const double dur_s = 0.7 + 0.7 * sig_rng.uniform();
            const int dur = static_cast<int>(dur_s * kSampleRateHz);
            const int start =
                static_cast<int>(sig_rng.below(std::uint64_t(kEpochSamples - dur)));
            phasors.clear();
            init_band(*recipe.bursts, 1.0, sig_rng, phasors);
            add_band(phasors, dst, start, start + dur);
          }
        }

        if (spec.noise_floor > 0.0) {
          const float nf = static_cast<float>(spec.noise_floor);
          for (int t = 0; t < kEpochSamples; ++t)
            dst[t] += nf * static_cast<float>(sig_rng.normal());
        }
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// --- dataset directory format -----------------------------------------------

namespace {

void write_f32(const std::filesystem::path& file, const std::vector<float>& data) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw FormatError("cannot open " + file.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw FormatError("write failed: " + file.string());
}

std::vector<float> read_f32(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot open signal file " + file.string());
  const std::streamsize bytes = in.tellg();
  if (bytes % 4 != 0)
    throw FormatError(file.string() + ": size " + std::to_string(bytes) +
                      " is not a multiple of 4");
  std::vector<float> data(static_cast<std::size_t>(bytes) / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  if (!in) throw FormatError("read failed: " + file.string());
  return data;
}

}  // namespace

void manifest_write(const std::vector<Recording>& recordings,
                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json patients = json::array();
  std::set<std::string> kinds_seen;
  for (const Recording& rec : recordings) {
    rec.validate();
    json entry;
    entry["id"] = rec.patient_id;
    entry["epochs"] = rec.epoch_count();
    entry["hypnogram"] = rec.patient_id + ".hyp";
    json files = json::object();
    for (const auto& [kind, samples] : rec.channels) {
      const std::string name = rec.patient_id + "_" + to_string(kind) + ".f32";
      files[to_string(kind)] = name;
      kinds_seen.insert(to_string(kind));
      write_f32(dir / name, samples);
    }
    entry["files"] = files;
    patients.push_back(entry);

    std::ofstream hyp(dir / (rec.patient_id + ".hyp"));
    if (!hyp) throw FormatError("cannot open hypnogram file for writing");
    for (const EpochLabel& l : rec.hypnogram) hyp << epoch_label_token(l) << "\n";
  }

  json manifest;
  manifest["format_version"] = 1;
  manifest["sample_rate"] = kSampleRateHz;
  manifest["channels"] = json::array();
  for (const std::string& k : kinds_seen) manifest["channels"].push_back(k);
  manifest["patients"] = patients;

  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot open manifest.json for writing");
  out << manifest.dump(2) << "\n";
}

namespace {

json load_manifest(const std::filesystem::path& dir) {
  const auto file = dir / "manifest.json";
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": invalid JSON: " + e.what());
  }
  if (!j.contains("patients") || !j["patients"].is_array())
    throw FormatError(file.string() + ": missing field 'patients'");
  return j;
}

std::vector<EpochLabel> read_hypnogram(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open hypnogram file " + file.string());
  std::vector<EpochLabel> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    auto label = epoch_label_from_token(line);
    if (!label)
      throw FormatError(file.string() + ":" + std::to_string(lineno) +
                        ": unknown stage token '" + line + "'");
    out.push_back(*label);
  }
  return out;
}

std::vector<Recording> manifest_read_impl(const std::filesystem::path& dir,
                                          const std::set<std::string>* wanted) {
  const json j = load_manifest(dir);
  std::vector<Recording> out;
  for (const auto& p : j["patients"]) {
    Recording rec;
    try {
      rec.patient_id = p.at("id").get<std::string>();
    } catch (const json::exception&) {
      throw FormatError((dir / "manifest.json").string() + ": patient entry missing 'id'");
    }
    if (wanted != nullptr && !wanted->count(rec.patient_id)) continue;
    if (!p.contains("files") || !p["files"].is_object())
      throw FormatError((dir / "manifest.json").string() + ": patient " + rec.patient_id +
                        " missing field 'files'");
    for (const auto& [kname, fname] : p["files"].items()) {
      auto kind = channel_from_string(kname);
      if (!kind)
        throw FormatError((dir / "manifest.json").string() + ": patient " +
                          rec.patient_id + ": unknown channel kind '" + kname + "'");
      rec.channels[*kind] = read_f32(dir / fname.get<std::string>());
    }
    const std::string hyp_name =
        p.contains("hypnogram") ? p["hypnogram"].get<std::string>() : rec.patient_id + ".hyp";
    rec.hypnogram = read_hypnogram(dir / hyp_name);

    if (rec.channels.empty())
      throw FormatError((dir / "manifest.json").string() + ": patient " + rec.patient_id +
                        " lists no channels");
    const std::size_t n = rec.channels.begin()->second.size();
    for (const auto& [kind, samples] : rec.channels) {
      if (samples.size() != n)
        throw IntegrityError("patient " + rec.patient_id + ": channel " + to_string(kind) +
                             " length " + std::to_string(samples.size()) +
                             " differs from other channels (" + std::to_string(n) + ")");
    }
    const std::size_t epochs = n / kEpochSamples;
    if (rec.hypnogram.size() != epochs)
      throw IntegrityError("patient " + rec.patient_id + ": hypnogram has " +
                           std::to_string(rec.hypnogram.size()) +
                           " lines but the signal spans " + std::to_string(epochs) +
                           " epochs");
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace

std::vector<std::string> manifest_patient_ids(const std::filesystem::path& dir) {
  const json j = load_manifest(dir);
  std::vector<std::string> ids;
  for (const auto& p : j["patients"]) {
    if (!p.contains("id"))
      throw FormatError((dir / "manifest.json").string() + ": patient entry missing 'id'");
    ids.push_back(p["id"].get<std::string>());
  }
  return ids;
}

std::vector<Recording> manifest_read(const std::filesystem::path& dir) {
  return manifest_read_impl(dir, nullptr);
}

std::vector<Recording> manifest_read_subset(const std::filesystem::path& dir,
                                            const std::vector<std::string>& ids) {
  const std::set<std::string> wanted(ids.begin(), ids.end());
  auto out = manifest_read_impl(dir, &wanted);
  std::set<std::string> found;
  for (const auto& r : out) found.insert(r.patient_id);
  for (const auto& id : wanted)
    if (!found.count(id))
      throw IntegrityError("dataset " + dir.string() + " has no patient '" + id + "'");
  return out;
}

}  // namespace somnoscore::sigdata
