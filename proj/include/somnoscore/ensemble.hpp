#pragma once

// Stacking by softmax summation: each member scores the same epoch from its
// own channel subset, the score vectors are summed elementwise and the
// prediction is the argmax (ties to the lowest class index).

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "somnoscore/arch.hpp"
#include "somnoscore/metrics.hpp"
#include "somnoscore/sigdata.hpp"

namespace somnoscore::ensemble {

struct Member {
  std::string name;  // label used in reports (file stem by default)
  arch::CheckpointMeta meta;
  std::vector<float> params;
};

Member load_member(const std::filesystem::path& checkpoint_file);

// Indices into a shared member pool.
struct EnsembleSpec {
  std::vector<int> members;
};

// All subsets of each requested size, lexicographic by member index.
std::vector<EnsembleSpec> enumerate_ensembles(int num_models,
                                              const std::vector<int>& sizes);

// Elementwise sum of member score vectors; argmax with ties resolved to the
// lowest class index.
struct Combined {
  int predicted = 0;
  std::array<double, sigdata::kNumStages> scores{};
};
Combined combine_scores(const std::vector<std::array<double, sigdata::kNumStages>>& member_scores);

// Evaluation driver holding the member pool and per-member contexts.
class Evaluator {
 public:
  explicit Evaluator(std::vector<Member> members);

  const std::vector<Member>& members() const { return members_; }

  // Scores one epoch of one recording; throws MissingChannel naming the
  // member whose channels the recording lacks.
  Combined predict(const EnsembleSpec& spec, const sigdata::Recording& rec,
                   int epoch_index) const;

  // Confusion matrix over every labelled epoch of the given recordings.
  metrics::ConfusionMatrix evaluate(const EnsembleSpec& spec,
                                    const std::vector<const sigdata::Recording*>& recs,
                                    int threads = 1) const;

 private:
  std::vector<Member> members_;
  std::vector<arch::ModelContext> contexts_;
};

struct ComparisonRow {
  EnsembleSpec spec;
  std::string members_label;  // "+"-joined member names
  metrics::MetricsReport report;
  std::int64_t params_total = 0;
};

// One row per spec, ranked by macro F1 descending; ties keep the input
// order (stable).
std::vector<ComparisonRow> compare(const Evaluator& eval,
                                   const std::vector<EnsembleSpec>& specs,
                                   const std::vector<const sigdata::Recording*>& recs,
                                   int threads = 1);

void write_comparison_csv(const std::vector<ComparisonRow>& rows,
                          const std::filesystem::path& file);

// ensemble.json: member checkpoint paths plus their channel lists.
void write_ensemble_json(const std::vector<std::filesystem::path>& checkpoints,
                         const std::vector<Member>& members,
                         const std::filesystem::path& file);

}  // namespace somnoscore::ensemble
