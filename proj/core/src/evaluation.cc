#include "dndm/evaluation.h"

#include <algorithm>
#include <string>

#include "dndm/errors.h"
#include "dndm/graph.h"

namespace dndm {
namespace {

double Ratio(size_t num, size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double EvalReport::overall() const {
  return Ratio(aligned_correct + conflicting_correct, count());
}
double EvalReport::aligned() const { return Ratio(aligned_correct, aligned_count); }
double EvalReport::conflicting() const {
  return Ratio(conflicting_correct, conflicting_count);
}

EvalReport EvaluatePredictions(std::span<const int> predictions,
                               const BiasedDataset& split) {
  if (predictions.size() != split.size()) {
    throw ShapeError("evaluation: " + std::to_string(predictions.size()) +
                     " predictions for " + std::to_string(split.size()) + " examples");
  }
  EvalReport report;
  for (size_t i = 0; i < split.size(); ++i) {
    const bool correct = predictions[i] == split.labels()[i];
    if (split.aligned(i)) {
      ++report.aligned_count;
      report.aligned_correct += correct;
    } else {
      ++report.conflicting_count;
      report.conflicting_correct += correct;
    }
  }
  return report;
}

std::vector<int> PredictGated(std::span<const ConstGatedBranch> branches,
                              const Head& head, const BiasedDataset& split) {
  constexpr size_t kChunk = 2048;
  const size_t dim = split.feature_dim();
  std::vector<int> predictions;
  predictions.reserve(split.size());
  for (size_t start = 0; start < split.size(); start += kChunk) {
    const size_t rows = std::min(kChunk, split.size() - start);
    std::span<const float> src = split.pixels().subspan(start * dim, rows * dim);
    const Tensor x({rows, dim}, std::vector<float>(src.begin(), src.end()));
    const Tensor logits = GatedLogits(x, branches, head);
    for (size_t r = 0; r < rows; ++r) {
      predictions.push_back(static_cast<int>(ArgmaxLowestIndex<float>(logits.row(r))));
    }
  }
  return predictions;
}

EvalReport EvaluateGated(std::span<const ConstGatedBranch> branches, const Head& head,
                         const BiasedDataset& split) {
  if (split.empty()) throw ValidationError("cannot evaluate on an empty split");
  return EvaluatePredictions(PredictGated(branches, head, split), split);
}

EvalReport EvaluateBranch(const Branch& branch, const Head& head,
                          const BiasedDataset& split) {
  const ConstGatedBranch branches[] = {{&branch, 1.0f}};
  return EvaluateGated(branches, head, split);
}

}  // namespace dndm
