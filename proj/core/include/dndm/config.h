#ifndef DNDM_CONFIG_H_
#define DNDM_CONFIG_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dndm/dataset.h"
#include "dndm/probe.h"
#include "dndm/training.h"

namespace dndm {

struct RunSpec {
  std::string run_id = "run";
  uint64_t seed = 1;
  // Not part of the config hash: moving a run does not change what it computes.
  std::filesystem::path output_dir = "runs/run";
  // Report the stage-2 / ERM epoch with the best unbiased-val accuracy
  // instead of the final one.
  bool select_best_on_val = false;

  bool operator==(const RunSpec&) const = default;
};

struct DatasetSpec {
  // "idx" or "synthetic".
  std::string source;
  // IDX training pool; resolved to absolute paths at parse time.
  std::filesystem::path images;
  std::filesystem::path labels;
  // Optional IDX pool for the unbiased splits. Without it, `unbiased_size`
  // examples are carved out of the training pool.
  std::filesystem::path test_images;
  std::filesystem::path test_labels;
  // 0 keeps every remaining example.
  size_t train_size = 0;
  // Size of the unbiased pool (0 with test files = the whole test file).
  size_t unbiased_size = 2000;
  // Fraction of the unbiased pool used for validation (probe fitting).
  double val_fraction = 0.1;
  double conflict_ratio = 0.01;
  // Synthetic source only.
  int num_classes = 10;
  Palette palette = Palette::Default();

  bool operator==(const DatasetSpec&) const = default;
};

// Depths count linear layers including the classifier head, so a branch of
// depth d has d - 1 Linear + ReLU blocks.
struct ModelSpec {
  size_t deep_depth = 5;
  size_t shallow_depth = 3;
  size_t target_depth = 5;
  size_t erm_depth = 5;
  size_t deep_width = 100;
  size_t shallow_width = 100;
  size_t target_width = 100;
  size_t erm_width = 100;
  // Shared penultimate width F.
  size_t feature_dim = 100;
  bool allow_equal_depth = false;

  bool operator==(const ModelSpec&) const = default;
};

struct ProbeSpec {
  ProbeConfig config;
  // Stage-1 optimizer steps at which decodability is recorded.
  std::vector<int64_t> schedule = {0, 25, 50, 100, 200, 400, 800};
  // Depths compared by the depth-decodability study.
  std::vector<size_t> depths = {3, 4, 5};
  // ERM epochs before probing in that study (0 = untrained networks).
  int erm_epochs = 0;

  bool operator==(const ProbeSpec&) const = default;
};

struct AblationSpec {
  std::string kind = "none";
  std::vector<double> ratios = {0.01, 0.1, 0.2};
  // (deep width, shallow width) pairs for the parameter-count ablation.
  std::vector<std::pair<size_t, size_t>> widths = {{50, 100}, {100, 100}, {100, 50}};

  bool operator==(const AblationSpec&) const = default;
};

struct ExperimentConfig {
  RunSpec run;
  DatasetSpec dataset;
  ModelSpec model;
  TrainConfig stage1 = TrainConfig::Stage1Defaults();
  TrainConfig stage2 = TrainConfig::Stage2Defaults();
  TrainConfig erm = TrainConfig::ErmDefaults();
  bool erm_enabled = true;
  ProbeSpec probe;
  AblationSpec ablation;

  bool operator==(const ExperimentConfig&) const = default;
};

// Parses `key = value` lines grouped under [run], [dataset], [model],
// [stage1], [stage2], [erm], [probe] and [ablation]. '#' and ';' start
// comments. Unknown sections or keys, a missing dataset.source, malformed
// values and constraint violations are ConfigErrors. Relative data paths are
// looked up in $DNDM_DATA_DIR, then next to the config file, then in the
// working directory. Without run.run_id the file's stem names the run;
// without run.output_dir it goes to runs/<run_id>.
ExperimentConfig ParseConfig(const std::filesystem::path& path);
ExperimentConfig ParseConfigText(std::string_view text,
                                 const std::filesystem::path& base_dir = ".",
                                 std::string_view origin = "<config>",
                                 std::string_view default_run_id = "run");

// Every key with its resolved value; parsing it back yields an equal config.
std::string ResolvedConfigText(const ExperimentConfig& config);

// FNV-1a over the resolved text without run.output_dir.
uint64_t ConfigHash(const ExperimentConfig& config);
std::string ConfigHashHex(uint64_t hash);

// Constraint checks shared by the parser and programmatic callers.
void ValidateConfig(const ExperimentConfig& config);

// Overrides run.seed.
void ApplySeed(ExperimentConfig& config, uint64_t seed);

}  // namespace dndm

#endif  // DNDM_CONFIG_H_
