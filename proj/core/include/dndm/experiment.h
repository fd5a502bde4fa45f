#ifndef DNDM_EXPERIMENT_H_
#define DNDM_EXPERIMENT_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dndm/config.h"
#include "dndm/dataset.h"
#include "dndm/evaluation.h"
#include "dndm/model.h"
#include "dndm/probe.h"

namespace dndm {

// One long-format row of metrics.csv.
struct MetricRow {
  std::string run_id;
  std::string stage;
  int epoch = 0;
  std::string branch;
  std::string split;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRow&) const = default;
};

inline constexpr std::string_view kMetricsHeader =
    "run_id,stage,epoch,branch,split,metric,value";

void WriteMetricsCsv(std::span<const MetricRow> rows, const std::filesystem::path& path);
std::vector<MetricRow> ReadMetricsCsv(const std::filesystem::path& path);

struct ExperimentData {
  BiasedDataset train;
  BiasedDataset val;
  BiasedDataset test;
};

// Loads or synthesizes the grayscale pool, carves the training / unbiased
// pools and colorizes them. Deterministic in config.run.seed.
ExperimentData BuildExperimentData(const ExperimentConfig& config);

// Seed of a named random stream of a run (data, inits, batching).
uint64_t RunSeed(const ExperimentConfig& config, std::string_view stream);

struct Stage1Models {
  Branch deep;
  Branch shallow;
  Head head;
};

struct Stage2Models {
  Branch target;
  Head head;
};

struct SummaryInputs {
  std::string run_id;
  uint64_t config_hash = 0;
  std::vector<MetricRow> metrics;
  // Epoch reported per stage; stages not listed report their last epoch.
  std::map<std::string, int> reported_epochs;
  std::map<std::string, uint64_t> seeds;
  std::map<std::string, double> durations;
};

// Builds summary.json from the metrics rows: per_branch holds the stage-1
// deep / shallow branches (and ERM when present), target the stage-2 branch,
// each as {overall, aligned, conflicting}. Missing rows are a DataError.
std::string SummaryJson(const SummaryInputs& inputs);
void EmitSummary(const SummaryInputs& inputs, const std::filesystem::path& path);

struct RunResult {
  EvalReport deep;
  EvalReport shallow;
  EvalReport target;
  EvalReport erm;
  bool has_erm = false;
  std::vector<MetricRow> metrics;
  std::vector<ProbeResult> decodability;
  std::filesystem::path output_dir;
};

// Generates data, trains stage 1, evaluates each branch, trains stage 2 and
// the ERM baseline, probes on the configured schedule, and writes
// resolved_config.txt, metrics.csv, summary.json, decodability.csv (when
// probes are scheduled) and checkpoints/ under config.run.output_dir.
// On failure a FAILED file with the stage-tagged message is left next to the
// partial artifacts and the error is rethrown with the stage prefixed.
RunResult RunPipeline(const ExperimentConfig& config);

// Runs one of the ablation grids and writes ablation_<kind>.csv plus the
// per-run artifacts under config.run.output_dir.
void RunAblation(const ExperimentConfig& config, std::string_view kind);

// Depth study: for every depth in config.probe.depths, an MLP of that depth
// (optionally trained with ERM for probe.erm_epochs) is probed for class and
// bias decodability. Rows use branch "depth<d>" and step = erm_epochs.
std::vector<ProbeResult> RunDepthStudy(const ExperimentConfig& config,
                                       const ExperimentData& data);

// Evaluates every branch stored in a checkpoint on the test split; rows use
// stage "eval".
std::vector<MetricRow> EvaluateCheckpoint(const ExperimentConfig& config,
                                          const ExperimentData& data,
                                          const Checkpoint& checkpoint);

// Writes train.dndm, val.dndm and test.dndm.
void WriteExperimentData(const ExperimentData& data, const std::filesystem::path& dir);

}  // namespace dndm

#endif  // DNDM_EXPERIMENT_H_
