#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "somnoscore/ensemble.hpp"

using namespace somnoscore;
using namespace somnoscore::ensemble;
using sigdata::ChannelKind;
namespace fs = std::filesystem;

namespace {

arch::ModelConfig small_config(std::vector<ChannelKind> signals) {
  arch::ModelConfig cfg;
  cfg.input_channels = static_cast<int>(signals.size());
  cfg.signals = std::move(signals);
  cfg.blocks = {{7, 4, 8}, {5, 6, 8}, {3, 8, 4}};
  return cfg;
}

Member make_member(const std::string& name, std::vector<ChannelKind> signals,
                   std::uint64_t seed) {
  Member m;
  m.name = name;
  m.meta.config = small_config(std::move(signals));
  m.meta.seed = seed;
  m.params = arch::init_params(m.meta.config, seed);
  return m;
}

}  // namespace

TEST_CASE("combine_scores: forced arithmetic and tie breaking") {
  std::vector<std::array<double, 5>> scores = {{0.6, 0.4, 0.0, 0.0, 0.0},
                                               {0.3, 0.7, 0.0, 0.0, 0.0}};
  const auto c = combine_scores(scores);
  CHECK(c.scores[0] == doctest::Approx(0.9));
  CHECK(c.scores[1] == doctest::Approx(1.1));
  CHECK(c.predicted == 1);

  // exact tie -> lowest class index
  const auto tie = combine_scores({{0.25, 0.25, 0.25, 0.25, 0.0}});
  CHECK(tie.predicted == 0);
  CHECK_THROWS_AS(combine_scores({}), BadArg);
}

TEST_CASE("combine_scores: member order and positive scaling never change the argmax") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::array<double, 5>> scores(3);
    for (auto& s : scores) {
      double sum = 0.0;
      for (auto& v : s) {
        v = rng.uniform() + 1e-3;
        sum += v;
      }
      for (auto& v : s) v /= sum;
    }
    const int base = combine_scores(scores).predicted;
    std::swap(scores[0], scores[2]);
    CHECK(combine_scores(scores).predicted == base);
    for (auto& s : scores)
      for (auto& v : s) v *= 3.5;
    CHECK(combine_scores(scores).predicted == base);
    // duplicating the member set keeps every prediction
    std::vector<std::array<double, 5>> doubled = scores;
    doubled.insert(doubled.end(), scores.begin(), scores.end());
    CHECK(combine_scores(doubled).predicted == base);
  }
}

TEST_CASE("enumerate_ensembles: binomial counts in lexicographic order") {
  const auto c73 = enumerate_ensembles(7, {3});
  CHECK(c73.size() == 35);
  CHECK(c73.front().members == std::vector<int>{0, 1, 2});
  CHECK(c73.back().members == std::vector<int>{4, 5, 6});

  const auto singles = enumerate_ensembles(7, {1});
  CHECK(singles.size() == 7);

  const auto sizes123 = enumerate_ensembles(7, {1, 2, 3});
  CHECK(sizes123.size() == 7 + 21 + 35);

  CHECK_THROWS_AS(enumerate_ensembles(3, {4}), BadArg);
  CHECK_THROWS_AS(enumerate_ensembles(3, {0}), BadArg);
}

TEST_CASE("singleton ensemble reproduces the member exactly") {
  const auto recs = sigdata::synth_dataset(sigdata::SynthSpec::defaults(2, 10, 5));
  std::vector<Member> members;
  members.push_back(make_member("m0", {ChannelKind::EEG_C4A1, ChannelKind::EMG}, 1));
  const Member& m = members[0];
  const arch::ModelContext ctx(m.meta.config);
  Evaluator eval(std::move(members));

  for (int e = 0; e < recs[0].epoch_count(); ++e) {
    const auto ens = eval.predict({{0}}, recs[0], e);
    const auto ex = sigdata::make_example(recs[0], e, m.meta.config.signals, {});
    const auto probs = arch::forward(m.meta.config, m.params, ex.window);
    int direct = 0;
    for (int k = 1; k < 5; ++k)
      if (probs[k] > probs[direct]) direct = k;
    CHECK(ens.predicted == direct);
    for (int k = 0; k < 5; ++k) CHECK(ens.scores[k] == probs[k]);
  }
}

TEST_CASE("three copies of one member predict identically to the single model") {
  const auto recs = sigdata::synth_dataset(sigdata::SynthSpec::defaults(2, 20, 6));
  std::vector<Member> members;
  for (int i = 0; i < 3; ++i)
    members.push_back(make_member("m", {ChannelKind::EEG_C4A1}, 42));  // same seed
  Evaluator eval(std::move(members));
  std::vector<const sigdata::Recording*> rr = {&recs[0], &recs[1]};

  const auto cm_single = eval.evaluate({{0}}, rr);
  const auto cm_triple = eval.evaluate({{0, 1, 2}}, rr);
  for (int p = 0; p < 5; ++p)
    for (int t = 0; t < 5; ++t) CHECK(cm_single.at(p, t) == cm_triple.at(p, t));
}

TEST_CASE("missing channel names the member") {
  auto recs = sigdata::synth_dataset(sigdata::SynthSpec::defaults(1, 4, 5));
  recs[0].channels.erase(ChannelKind::EMG);
  std::vector<Member> members;
  members.push_back(make_member("needs_emg", {ChannelKind::EMG}, 2));
  Evaluator eval(std::move(members));
  try {
    eval.predict({{0}}, recs[0], 1);
    FAIL("expected MissingChannel");
  } catch (const MissingChannel& e) {
    const std::string msg = e.what();
    CHECK(msg.find("needs_emg") != std::string::npos);
    CHECK(msg.find("EMG") != std::string::npos);
  }
}

TEST_CASE("compare: ensemble of three seeds plus members gives four ranked rows") {
  const auto recs = sigdata::synth_dataset(sigdata::SynthSpec::defaults(3, 12, 8));
  std::vector<Member> members;
  for (int i = 0; i < 3; ++i)
    members.push_back(
        make_member("m" + std::to_string(i), {ChannelKind::EEG_C4A1}, 100 + i));
  Evaluator eval(std::move(members));
  std::vector<const sigdata::Recording*> rr;
  for (const auto& r : recs) rr.push_back(&r);

  std::vector<EnsembleSpec> specs = {{{0}}, {{1}}, {{2}}, {{0, 1, 2}}};
  const auto rows = compare(eval, specs, rr, 2);
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 1; i < rows.size(); ++i)
    CHECK(rows[i - 1].report.f1_macro >= rows[i].report.f1_macro);
  // ranked table carries parameter totals
  for (const auto& row : rows) CHECK(row.params_total > 0);

  CHECK_THROWS_AS(compare(eval, specs, {}, 1), NoData);
}

TEST_CASE("compare: {M} and {M,M,M} produce identical metric rows") {
  const auto recs = sigdata::synth_dataset(sigdata::SynthSpec::defaults(2, 10, 9));
  std::vector<Member> members;
  for (int i = 0; i < 3; ++i)
    members.push_back(make_member("m", {ChannelKind::EMG}, 7));
  Evaluator eval(std::move(members));
  std::vector<const sigdata::Recording*> rr = {&recs[0], &recs[1]};
  const auto rows = compare(eval, {{{0}}, {{0, 1, 2}}}, rr);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].report.accuracy == rows[1].report.accuracy);
  CHECK(rows[0].report.kappa == rows[1].report.kappa);
  CHECK(rows[0].report.f1_macro == rows[1].report.f1_macro);
}

TEST_CASE("comparison csv and ensemble json artifacts") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_ens_test";
  fs::create_directories(dir);
  const auto recs = sigdata::synth_dataset(sigdata::SynthSpec::defaults(2, 8, 3));
  std::vector<Member> members;
  members.push_back(make_member("alpha", {ChannelKind::EEG_C4A1}, 1));
  members.push_back(make_member("beta", {ChannelKind::EMG}, 2));
  std::vector<fs::path> paths = {dir / "alpha.ckpt", dir / "beta.ckpt"};
  write_ensemble_json(paths, members, dir / "ensemble.json");
  {
    std::ifstream in(dir / "ensemble.json");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find("alpha.ckpt") != std::string::npos);
    CHECK(text.find("C4A1") != std::string::npos);
  }

  Evaluator eval(std::move(members));
  std::vector<const sigdata::Recording*> rr = {&recs[0], &recs[1]};
  const auto rows = compare(eval, enumerate_ensembles(2, {1, 2}), rr);
  write_comparison_csv(rows, dir / "comparison.csv");
  std::ifstream in(dir / "comparison.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "members,accuracy,kappa,f1_macro,params_total");
  int data_rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++data_rows;
  CHECK(data_rows == 3);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip through load_member") {
  const fs::path dir = fs::temp_directory_path() / "somnoscore_member_test";
  fs::create_directories(dir);
  const Member m = make_member("m0", {ChannelKind::EEG_C3A2}, 5);
  arch::save_checkpoint(dir / "m0.ckpt", m.meta, m.params);
  const Member loaded = load_member(dir / "m0.ckpt");
  CHECK(loaded.name == "m0");
  CHECK(loaded.params == m.params);
  CHECK(loaded.meta.config.signals == m.meta.config.signals);
  fs::remove_all(dir);
}
