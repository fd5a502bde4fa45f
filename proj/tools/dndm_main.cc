// dndm: command line front end for data generation, training, ablations,
// probing and checkpoint evaluation.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
// failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dndm/config.h"
#include "dndm/errors.h"
#include "dndm/experiment.h"
#include "dndm/probe.h"

namespace {

namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;

struct CommonOptions {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
  bool allow_equal_depth = false;
};

void AddCommon(CLI::App* cmd, CommonOptions& options) {
  cmd->add_option("--config", options.config, "Experiment config file")->required();
  cmd->add_option("--out", options.out, "Output directory (overrides run.output_dir)");
  cmd->add_option("--seed", options.seed, "Master seed (overrides run.seed)");
}

dndm::ExperimentConfig LoadConfig(const CommonOptions& options) {
  dndm::ExperimentConfig config = dndm::ParseConfig(options.config);
  if (options.seed) dndm::ApplySeed(config, *options.seed);
  if (!options.out.empty()) config.run.output_dir = options.out;
  if (options.allow_equal_depth) config.model.allow_equal_depth = true;
  dndm::ValidateConfig(config);
  return config;
}

void PrintReport(const char* name, const dndm::EvalReport& r) {
  std::printf("%-8s overall %.4f  aligned %.4f  conflicting %.4f\n", name, r.overall(),
              r.aligned(), r.conflicting());
}

int Train(const CommonOptions& options) {
  const dndm::ExperimentConfig config = LoadConfig(options);
  const dndm::RunResult result = dndm::RunPipeline(config);
  PrintReport("deep", result.deep);
  PrintReport("shallow", result.shallow);
  PrintReport("target", result.target);
  if (result.has_erm) PrintReport("erm", result.erm);
  std::printf("artifacts in %s\n", result.output_dir.string().c_str());
  return 0;
}

int GenerateData(const CommonOptions& options) {
  const dndm::ExperimentConfig config = LoadConfig(options);
  const dndm::ExperimentData data = dndm::BuildExperimentData(config);
  dndm::WriteExperimentData(data, config.run.output_dir);
  std::printf("train %zu (conflicting %zu), val %zu, test %zu -> %s\n", data.train.size(),
              data.train.conflicting_count(), data.val.size(), data.test.size(),
              config.run.output_dir.string().c_str());
  return 0;
}

int Ablate(const CommonOptions& options, const std::string& kind_flag) {
  const dndm::ExperimentConfig config = LoadConfig(options);
  const std::string kind = kind_flag.empty() ? config.ablation.kind : kind_flag;
  if (kind == "none") {
    throw dndm::ConfigError("no ablation selected: pass --kind or set ablation.kind");
  }
  dndm::RunAblation(config, kind);
  std::printf("ablation %s written to %s\n", kind.c_str(),
              config.run.output_dir.string().c_str());
  return 0;
}

int Probe(const CommonOptions& options, std::optional<int> erm_epochs) {
  dndm::ExperimentConfig config = LoadConfig(options);
  if (erm_epochs) config.probe.erm_epochs = *erm_epochs;
  dndm::ValidateConfig(config);
  const dndm::ExperimentData data = dndm::BuildExperimentData(config);
  const std::vector<dndm::ProbeResult> results = dndm::RunDepthStudy(config, data);
  fs::create_directories(config.run.output_dir);
  dndm::WriteDecodabilityCsv(results, config.run.output_dir / "decodability.csv");
  for (const dndm::ProbeResult& r : results) {
    std::printf("%-8s %-6s %.4f\n", r.branch.c_str(), r.attribute.c_str(), r.accuracy);
  }
  return 0;
}

int Eval(const CommonOptions& options, const std::string& checkpoint_path) {
  const dndm::ExperimentConfig config = LoadConfig(options);
  const dndm::Checkpoint checkpoint = dndm::LoadCheckpoint(checkpoint_path);
  if (checkpoint.config_hash != dndm::ConfigHash(config)) {
    std::fprintf(stderr, "warning: checkpoint config hash %s differs from config %s\n",
                 dndm::ConfigHashHex(checkpoint.config_hash).c_str(),
                 dndm::ConfigHashHex(dndm::ConfigHash(config)).c_str());
  }
  const dndm::ExperimentData data = dndm::BuildExperimentData(config);
  const std::vector<dndm::MetricRow> rows = dndm::EvaluateCheckpoint(config, data, checkpoint);
  fs::create_directories(config.run.output_dir);
  dndm::WriteMetricsCsv(rows, config.run.output_dir / "eval.csv");
  for (const dndm::MetricRow& r : rows) {
    std::printf("%-8s %-11s %.4f\n", r.branch.c_str(), r.metric.c_str(), r.value);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep/shallow branch debiasing experiments"};
  app.require_subcommand(1);

  CommonOptions generate_options, train_options, ablate_options, probe_options, eval_options;
  std::string kind, checkpoint;
  std::optional<int> erm_epochs;

  CLI::App* generate = app.add_subcommand("generate-data", "Write the colored train/val/test splits");
  AddCommon(generate, generate_options);

  CLI::App* train = app.add_subcommand("train", "Run stage 1, stage 2 and the ERM baseline");
  AddCommon(train, train_options);
  train->add_flag("--allow-equal-depth", train_options.allow_equal_depth,
                  "Permit depth(deep) == depth(shallow)");

  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  AddCommon(ablate, ablate_options);
  ablate->add_option("--kind", kind, "same-depth | loss-components | param-count | ratio-sweep");
  ablate->add_flag("--allow-equal-depth", ablate_options.allow_equal_depth,
                   "Permit depth(deep) == depth(shallow)");

  CLI::App* probe = app.add_subcommand("probe", "Linear decodability of MLPs of several depths");
  AddCommon(probe, probe_options);
  probe->add_option("--erm-epochs", erm_epochs, "Train each MLP with ERM first");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the unbiased test split");
  AddCommon(eval, eval_options);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*generate) return GenerateData(generate_options);
    if (*train) return Train(train_options);
    if (*ablate) return Ablate(ablate_options, kind);
    if (*probe) return Probe(probe_options, erm_epochs);
    if (*eval) return Eval(eval_options, checkpoint);
  } catch (const dndm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dndm::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return kExitTraining;
  }
  return 0;
}
