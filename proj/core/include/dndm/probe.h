#ifndef DNDM_PROBE_H_
#define DNDM_PROBE_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dndm/dataset.h"
#include "dndm/model.h"
#include "dndm/tensor.h"

namespace dndm {

struct ProbeConfig {
  int epochs = 30;
  float learning_rate = 1e-2f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  // Up to this many examples the probe is trained full-batch.
  size_t full_batch_limit = 10000;
  size_t batch_size = 256;
  uint64_t seed = 1;
  // Fit on per-feature standardized inputs (statistics from the fit set). The
  // affine map is folded into the returned layer, so it still reads raw
  // features.
  bool standardize = true;

  void Validate() const;

  bool operator==(const ProbeConfig&) const = default;
};

// Single linear layer read out through softmax.
struct LinearProbe {
  LinearLayer layer;

  // Detached B x M logits.
  Tensor Logits(const Tensor& features) const;
  std::vector<int> Predict(const Tensor& features) const;
};

// Fits a probe with softmax cross-entropy. Weights start at zero, so the fit
// depends on the seed only through minibatch order. Features with zero spread
// on the fit set are centered but not rescaled. `features` must not be
// attached to a graph (ValidationError otherwise).
LinearProbe TrainLinearProbe(const Tensor& features, std::span<const int> labels,
                             int num_classes, const ProbeConfig& config);

// Fraction of rows whose lowest-index argmax equals the label.
double ProbeAccuracy(const LinearProbe& probe, const Tensor& features,
                     std::span<const int> labels);

enum class Attribute { kClass, kBias };

std::string_view AttributeName(Attribute attribute);

// Trains a probe on `fit` features of `branch` and scores it on `score`.
double BranchDecodability(const Branch& branch, const BiasedDataset& fit,
                          const BiasedDataset& score, Attribute attribute,
                          const ProbeConfig& config);

struct ProbeResult {
  int64_t step = 0;
  std::string branch;
  std::string attribute;
  std::string split;
  double accuracy = 0.0;

  bool operator==(const ProbeResult&) const = default;
};

// Snapshots penultimate features of named branches at scheduled steps and
// records class and bias decodability for each. Probes are fit on `val` and
// scored on `test`; every snapshot gets a fresh probe.
class DecodabilityRecorder {
 public:
  DecodabilityRecorder(std::vector<std::pair<std::string, const Branch*>> branches,
                       const BiasedDataset& val, const BiasedDataset& test,
                       std::vector<int64_t> schedule, ProbeConfig config);

  bool Due(int64_t step) const;
  // Records every branch x attribute at `step` (whether scheduled or not).
  void Capture(int64_t step);
  // Captures only if `step` is scheduled and not yet captured.
  void MaybeCapture(int64_t step);

  const std::vector<ProbeResult>& results() const { return results_; }

 private:
  std::vector<std::pair<std::string, const Branch*>> branches_;
  const BiasedDataset* val_;
  const BiasedDataset* test_;
  std::vector<int64_t> schedule_;
  ProbeConfig config_;
  int64_t last_captured_ = -1;
  std::vector<ProbeResult> results_;
};

// CSV with header "step,branch,attribute,split,accuracy".
void WriteDecodabilityCsv(std::span<const ProbeResult> results,
                          const std::filesystem::path& path);
std::vector<ProbeResult> ReadDecodabilityCsv(const std::filesystem::path& path);

}  // namespace dndm

#endif  // DNDM_PROBE_H_
