#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "somnoscore/rng.hpp"
#include "somnoscore/sigdata.hpp"

using namespace somnoscore;
using namespace somnoscore::sigdata;
namespace fs = std::filesystem;

namespace {

Recording tiny_recording(int epochs, std::vector<ChannelKind> kinds,
                         std::uint64_t seed = 1) {
  Recording rec;
  rec.patient_id = "t0";
  Rng rng(seed);
  for (ChannelKind k : kinds) {
    std::vector<float> sig(std::size_t(epochs) * kEpochSamples);
    for (auto& v : sig) v = float(rng.normal());
    rec.channels[k] = std::move(sig);
  }
  for (int e = 0; e < epochs; ++e)
    rec.hypnogram.push_back(static_cast<StageAASM>(e % kNumStages));
  return rec;
}

// Independent oracle: plain periodogram power inside a frequency band, via a
// naive DFT restricted to the band's bins.
double band_power(const float* x, int n, double lo_hz, double hi_hz) {
  const double df = double(kSampleRateHz) / n;
  const int k_lo = std::max(1, int(std::ceil(lo_hz / df)));
  const int k_hi = std::min(n / 2, int(std::floor(hi_hz / df)));
  double power = 0.0;
  for (int k = k_lo; k <= k_hi; ++k) {
    double re = 0.0, im = 0.0;
    const double w = -2.0 * M_PI * k / n;
    for (int t = 0; t < n; ++t) {
      re += x[t] * std::cos(w * t);
      im += x[t] * std::sin(w * t);
    }
    power += (re * re + im * im) / (double(n) * n);
  }
  return power;
}

}  // namespace

TEST_CASE("R&K to AASM mapping matches the conversion table cell for cell") {
  CHECK(map_rk_to_aasm(StageRK::Awake) == EpochLabel{StageAASM::Awake});
  CHECK(map_rk_to_aasm(StageRK::S1) == EpochLabel{StageAASM::N1});
  CHECK(map_rk_to_aasm(StageRK::S2) == EpochLabel{StageAASM::N2});
  CHECK(map_rk_to_aasm(StageRK::S3) == EpochLabel{StageAASM::N3});
  CHECK(map_rk_to_aasm(StageRK::S4) == EpochLabel{StageAASM::N3});
  CHECK(map_rk_to_aasm(StageRK::REM) == EpochLabel{StageAASM::REM});
  CHECK(!map_rk_to_aasm(StageRK::Unknown).has_value());
}

TEST_CASE("stage and channel token round trips") {
  for (int s = 0; s < kNumStages; ++s) {
    const EpochLabel l = static_cast<StageAASM>(s);
    CHECK(epoch_label_from_token(epoch_label_token(l)) == std::optional<EpochLabel>{l});
  }
  CHECK(epoch_label_from_token("X") == std::optional<EpochLabel>{EpochLabel{}});
  CHECK(!epoch_label_from_token("Q").has_value());
  CHECK(channel_from_string("C4A1") == ChannelKind::EEG_C4A1);
  CHECK(!channel_from_string("EOG").has_value());
}

TEST_CASE("make_example: interior window has 56,250 values for 3 channels") {
  const auto rec = tiny_recording(21, {ChannelKind::EEG_C3A2, ChannelKind::EEG_C4A1,
                                       ChannelKind::EMG});
  const auto ex = make_example(
      rec, 10, {ChannelKind::EEG_C3A2, ChannelKind::EEG_C4A1, ChannelKind::EMG});
  CHECK(ex.window.size() == 56250);
  CHECK(ex.num_channels == 3);
  CHECK(ex.target == StageAASM::Awake);  // 10 % 5 == 0
  CHECK(ex.epoch_index == 10);

  // interior values equal the raw signal exactly
  const auto& sig = rec.channels.at(ChannelKind::EEG_C3A2);
  for (int i = 0; i < kWindowSamples; ++i)
    CHECK(ex.window[i] == sig[std::size_t(8) * kEpochSamples + i]);
}

TEST_CASE("make_example: edge epochs zero-fill the missing sections") {
  const auto rec = tiny_recording(8, {ChannelKind::EMG});
  const auto first = make_example(rec, 0, {ChannelKind::EMG});
  for (int i = 0; i < 2 * kEpochSamples; ++i) CHECK(first.window[i] == 0.0f);
  CHECK(first.window[2 * kEpochSamples] == rec.channels.at(ChannelKind::EMG)[0]);

  const auto last = make_example(rec, 7, {ChannelKind::EMG});
  for (int i = 3 * kEpochSamples; i < 5 * kEpochSamples; ++i)
    CHECK(last.window[i] == 0.0f);
}

TEST_CASE("make_example: error paths") {
  auto rec = tiny_recording(6, {ChannelKind::EMG});
  rec.hypnogram[3] = std::nullopt;
  CHECK_THROWS_AS(make_example(rec, 3, {ChannelKind::EMG}), ExcludedEpoch);
  CHECK_THROWS_AS(make_example(rec, 0, {ChannelKind::EEG_C4A1}), MissingChannel);
  CHECK_THROWS_AS(make_example(rec, 6, {ChannelKind::EMG}), BadIndex);
  CHECK_THROWS_AS(make_example(rec, -1, {ChannelKind::EMG}), BadIndex);
}

TEST_CASE("make_example: zscore standardizes while default leaves samples raw") {
  auto rec = tiny_recording(6, {ChannelKind::EMG});
  for (auto& v : rec.channels[ChannelKind::EMG]) v = v * 3.0f + 10.0f;
  const auto raw = make_example(rec, 2, {ChannelKind::EMG});
  const auto& sig = rec.channels.at(ChannelKind::EMG);
  for (int i = 0; i < kWindowSamples; ++i) CHECK(raw.window[i] == sig[i]);

  WindowOptions opts;
  opts.zscore = true;
  const auto normed = make_example(rec, 2, {ChannelKind::EMG}, opts);
  double mean = 0.0;
  for (float v : normed.window) mean += v;
  mean /= double(normed.window.size());
  CHECK(std::abs(mean) < 0.05);
}

TEST_CASE("split: reproduces the published patient counts at N=5804") {
  std::vector<std::string> ids;
  for (int i = 0; i < 5804; ++i) ids.push_back("p" + std::to_string(i));
  const auto spec = split_patients(ids, {}, 7);
  CHECK(spec.train.size() == 4063);
  CHECK(spec.val.size() == 580);
  CHECK(spec.test.size() == 1161);
}

TEST_CASE("split: exact ratios at N=10 and determinism") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("p" + std::to_string(i));
  const auto a = split_patients(ids, {}, 42);
  CHECK(a.train.size() == 7);
  CHECK(a.val.size() == 1);
  CHECK(a.test.size() == 2);
  const auto b = split_patients(ids, {}, 42);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  const auto c = split_patients(ids, {}, 43);
  CHECK((a.train != c.train || a.val != c.val || a.test != c.test));
}

TEST_CASE("split: partition property for all N >= 3") {
  Rng rng(99);
  for (int n = 3; n <= 60; ++n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("p" + std::to_string(i));
    const auto spec = split_patients(ids, {}, rng.next_u64());
    std::set<std::string> all;
    all.insert(spec.train.begin(), spec.train.end());
    all.insert(spec.val.begin(), spec.val.end());
    all.insert(spec.test.begin(), spec.test.end());
    CHECK(all.size() == std::size_t(n));  // disjoint and exhaustive
    CHECK(spec.train.size() + spec.val.size() + spec.test.size() == std::size_t(n));
  }
}

TEST_CASE("split: duplicate ids rejected") {
  CHECK_THROWS_AS(split_patients({"a", "b", "a"}, {}, 1), DuplicatePatient);
  CHECK_THROWS_AS(split_patients({}, {}, 1), BadArg);
}

TEST_CASE("split json round trip") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_split_test";
  fs::create_directories(dir);
  std::vector<std::string> ids;
  for (int i = 0; i < 12; ++i) ids.push_back("p" + std::to_string(i));
  const auto spec = split_patients(ids, {}, 5);
  split_write(spec, dir / "split.json");
  const auto loaded = split_read(dir / "split.json");
  CHECK(loaded.seed == spec.seed);
  CHECK(loaded.train == spec.train);
  CHECK(loaded.val == spec.val);
  CHECK(loaded.test == spec.test);
  fs::remove_all(dir);
}

TEST_CASE("synth: shape contract and determinism") {
  const auto spec = SynthSpec::defaults(2, 20, 11);
  const auto recs = synth_dataset(spec);
  REQUIRE(recs.size() == 2);
  for (const auto& rec : recs) {
    CHECK(rec.epoch_count() == 20);
    CHECK(rec.channels.size() == 3);
    for (const auto& [k, sig] : rec.channels) CHECK(sig.size() == 20u * kEpochSamples);
    rec.validate();
  }
  const auto again = synth_dataset(spec);
  for (std::size_t r = 0; r < recs.size(); ++r) {
    CHECK(recs[r].hypnogram == again[r].hypnogram);
    for (const auto& [k, sig] : recs[r].channels) {
      const auto& other = again[r].channels.at(k);
      CHECK(std::equal(sig.begin(), sig.end(), other.begin()));
    }
  }
}

TEST_CASE("synth: invalid transition matrix rejected") {
  auto spec = SynthSpec::defaults(1, 5, 0);
  spec.transitions[2][0] += 0.01;
  CHECK_THROWS_AS(synth_dataset(spec), BadSpec);
  spec = SynthSpec::defaults(0, 5, 0);
  CHECK_THROWS_AS(synth_dataset(spec), BadSpec);
}

TEST_CASE("synth: N3 epochs carry more 0.5-4 Hz EEG power than Awake epochs") {
  // generate until we have 100 epochs of each class, then compare the
  // periodogram band power means
  auto spec = SynthSpec::defaults(30, 60, 404);
  const auto recs = synth_dataset(spec);
  double p_n3 = 0.0, p_wake = 0.0;
  int n_n3 = 0, n_wake = 0;
  for (const auto& rec : recs) {
    const auto& eeg = rec.channels.at(ChannelKind::EEG_C4A1);
    for (int e = 0; e < rec.epoch_count() && (n_n3 < 100 || n_wake < 100); ++e) {
      if (!rec.hypnogram[e].has_value()) continue;
      const float* x = eeg.data() + std::size_t(e) * kEpochSamples;
      if (*rec.hypnogram[e] == StageAASM::N3 && n_n3 < 100) {
        p_n3 += band_power(x, kEpochSamples, 0.5, 4.0);
        ++n_n3;
      } else if (*rec.hypnogram[e] == StageAASM::Awake && n_wake < 100) {
        p_wake += band_power(x, kEpochSamples, 0.5, 4.0);
        ++n_wake;
      }
    }
  }
  REQUIRE(n_n3 == 100);
  REQUIRE(n_wake == 100);
  CHECK(p_n3 / n_n3 > p_wake / n_wake);
}

TEST_CASE("manifest: round trip is bit exact") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_manifest_test";
  fs::remove_all(dir);
  auto spec = SynthSpec::defaults(3, 6, 21);
  auto recs = synth_dataset(spec);
  recs[1].hypnogram[2] = std::nullopt;  // include an excluded epoch
  manifest_write(recs, dir);

  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "p0000_C3A2.f32"));
  CHECK(fs::exists(dir / "p0002.hyp"));

  const auto loaded = manifest_read(dir);
  REQUIRE(loaded.size() == recs.size());
  for (std::size_t r = 0; r < recs.size(); ++r) {
    CHECK(loaded[r].patient_id == recs[r].patient_id);
    CHECK(loaded[r].hypnogram == recs[r].hypnogram);
    REQUIRE(loaded[r].channels.size() == recs[r].channels.size());
    for (const auto& [k, sig] : recs[r].channels) {
      const auto& other = loaded[r].channels.at(k);
      REQUIRE(other.size() == sig.size());
      CHECK(std::equal(sig.begin(), sig.end(), other.begin()));
    }
  }
  CHECK(manifest_patient_ids(dir) == std::vector<std::string>{"p0000", "p0001", "p0002"});
  fs::remove_all(dir);
}

TEST_CASE("manifest: hypnogram length mismatch is an integrity error") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_manifest_bad";
  fs::remove_all(dir);
  auto recs = synth_dataset(SynthSpec::defaults(1, 20, 3));
  manifest_write(recs, dir);
  {
    std::ofstream hyp(dir / "p0000.hyp", std::ios::app);
    hyp << "W\n";  // line 21 for a 20-epoch signal
  }
  CHECK_THROWS_AS(manifest_read(dir), IntegrityError);
  fs::remove_all(dir);
}

TEST_CASE("manifest: unknown stage token names the line") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_manifest_tok";
  fs::remove_all(dir);
  auto recs = synth_dataset(SynthSpec::defaults(1, 5, 3));
  manifest_write(recs, dir);
  {
    std::ifstream in(dir / "p0000.hyp");
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    all[all.find('\n') + 1] = 'Q';  // corrupt line 2
    std::ofstream out(dir / "p0000.hyp");
    out << all;
  }
  try {
    manifest_read(dir);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(":2:") != std::string::npos);
    CHECK(msg.find("unknown stage token") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("manifest: malformed json names the file") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_manifest_json";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "manifest.json") << "{not json";
  CHECK_THROWS_AS(manifest_read(dir), FormatError);
  fs::remove_all(dir);
}
