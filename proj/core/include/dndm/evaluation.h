#ifndef DNDM_EVALUATION_H_
#define DNDM_EVALUATION_H_

#include <cstddef>
#include <span>
#include <vector>

#include "dndm/dataset.h"
#include "dndm/model.h"

namespace dndm {

// Accuracy split by whether each example's bias label matches its class.
struct EvalReport {
  size_t aligned_count = 0;
  size_t aligned_correct = 0;
  size_t conflicting_count = 0;
  size_t conflicting_correct = 0;

  size_t count() const { return aligned_count + conflicting_count; }
  double overall() const;
  // 0 when the cell is empty.
  double aligned() const;
  double conflicting() const;
};

// Scores given predictions against `split`. Sizes must match.
EvalReport EvaluatePredictions(std::span<const int> predictions,
                               const BiasedDataset& split);

// Lowest-index argmax of head(sum gate_i * branch_i(x)) for every example.
std::vector<int> PredictGated(std::span<const ConstGatedBranch> branches,
                              const Head& head, const BiasedDataset& split);

// Evaluates the gated ensemble; an empty split is a ValidationError.
EvalReport EvaluateGated(std::span<const ConstGatedBranch> branches, const Head& head,
                         const BiasedDataset& split);

// One branch alone through the head (gate one-hot on that branch).
EvalReport EvaluateBranch(const Branch& branch, const Head& head,
                          const BiasedDataset& split);

}  // namespace dndm

#endif  // DNDM_EVALUATION_H_
