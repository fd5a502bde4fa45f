#include "dndm/experiment.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "json.hpp"

#include "dndm/errors.h"
#include "dndm/random.h"
#include "dndm/training.h"

namespace dndm {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

// Shortest representation that parses back to the same double.
std::string FormatDouble(double value) {
  char buffer[64];
  const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, ptr);
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

struct Table {
  std::string header;
  std::vector<std::string> rows;

  void Write(const fs::path& path) const {
    std::string text = header + "\n";
    for (const std::string& row : rows) text += row + "\n";
    WriteText(path, text);
  }
};

[[noreturn]] void RethrowTagged(const std::string& stage) {
  const std::string p = stage + ": ";
  try {
    throw;
  } catch (const FormatError& e) {
    throw FormatError(p + e.what());
  } catch (const LengthError& e) {
    throw LengthError(p + e.what());
  } catch (const DataError& e) {
    throw DataError(p + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(p + e.what());
  } catch (const TrainingError& e) {
    throw TrainingError(p + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(p + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(p + e.what());
  } catch (const Error& e) {
    throw Error(p + e.what());
  } catch (const fs::filesystem_error& e) {
    throw DataError(p + e.what());
  } catch (const std::exception& e) {
    throw Error(p + e.what());
  }
}

GrayscaleImages TakeImages(const GrayscaleImages& images, std::span<const size_t> order,
                           size_t begin, size_t count) {
  return images.Subset(order.subspan(begin, count));
}

std::vector<size_t> Shuffled(size_t n, uint64_t seed, std::string_view stream) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng = MakeRng(seed, stream);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Branch MakeBranch(const ExperimentConfig& config, size_t input_dim, size_t depth,
                  size_t width, std::string_view stream) {
  return BuildMlp(input_dim, width, depth - 1, RunSeed(config, stream),
                  config.model.feature_dim);
}

// Trains the stages of one run and collects their metric rows.
class Runner {
 public:
  Runner(const ExperimentConfig& config, const ExperimentData& data)
      : config_(config), data_(data) {}

  std::vector<MetricRow>& rows() { return rows_; }
  std::map<std::string, int>& reported_epochs() { return reported_; }

  Stage1Models MakeStage1() const {
    const size_t d = data_.train.feature_dim();
    const ModelSpec& m = config_.model;
    return {MakeBranch(config_, d, m.deep_depth, m.deep_width, "init.deep"),
            MakeBranch(config_, d, m.shallow_depth, m.shallow_width, "init.shallow"),
            BuildHead(m.feature_dim, static_cast<size_t>(data_.train.num_classes()),
                      RunSeed(config_, "init.head"))};
  }

  // Trains and then freezes `models`. Decodability snapshots go to `probes`
  // when given.
  void TrainStage1(Stage1Models& models, std::vector<ProbeResult>* probes) {
    TrainConfig cfg = config_.stage1;
    cfg.seed = RunSeed(config_, "stage1");
    cfg.allow_equal_depth = config_.model.allow_equal_depth;
    Stage1Trainer trainer(models.deep, models.shallow, models.head, cfg);

    std::optional<DecodabilityRecorder> recorder;
    if (probes != nullptr && !config_.probe.schedule.empty()) {
      ProbeConfig probe = config_.probe.config;
      probe.seed = RunSeed(config_, "probe");
      recorder.emplace(
          std::vector<std::pair<std::string, const Branch*>>{{"deep", &models.deep},
                                                             {"shallow", &models.shallow}},
          data_.val, data_.test, config_.probe.schedule, probe);
      recorder->MaybeCapture(0);
      trainer.set_step_callback([&](int64_t step) { recorder->MaybeCapture(step); });
    }

    EvalStage1(models, 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const double loss = trainer.RunEpoch(data_.train, epoch - 1);
      Add("stage1", epoch, "ensemble", "train", "loss", loss);
      EvalStage1(models, epoch);
    }
    models.deep.set_frozen(true);
    models.shallow.set_frozen(true);
    models.head.set_frozen(true);
    if (recorder) *probes = recorder->results();
  }

  Stage2Models TrainStage2(const Stage1Models& s1, TrainConfig cfg, const std::string& stage) {
    cfg.seed = RunSeed(config_, "stage2");
    Stage2Models models{MakeBranch(config_, data_.train.feature_dim(),
                                   config_.model.target_depth, config_.model.target_width,
                                   "init.target"),
                        CloneHead(s1.head)};
    Stage2Trainer trainer(s1.deep, s1.shallow, s1.head, models.target, models.head, cfg);
    Selection best;
    EvalSingle(stage, 0, "target", models.target, models.head, &best);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const double loss = trainer.RunEpoch(data_.train, epoch - 1);
      double target = 0.0, distillation = 0.0;
      for (const Stage2BatchLoss& batch : trainer.last_epoch_losses()) {
        target += batch.target;
        distillation += batch.distillation;
      }
      const double batches = static_cast<double>(trainer.last_epoch_losses().size());
      Add(stage, epoch, "target", "train", "loss", loss);
      Add(stage, epoch, "target", "train", "target_loss", target / batches);
      Add(stage, epoch, "target", "train", "distillation_loss", distillation / batches);
      EvalSingle(stage, epoch, "target", models.target, models.head, &best);
    }
    return Select(stage, std::move(models), best);
  }

  Stage2Models TrainErmBaseline() {
    TrainConfig cfg = config_.erm;
    cfg.seed = RunSeed(config_, "erm");
    const size_t d = data_.train.feature_dim();
    Stage2Models models{
        MakeBranch(config_, d, config_.model.erm_depth, config_.model.erm_width, "init.erm"),
        BuildHead(config_.model.feature_dim, static_cast<size_t>(data_.train.num_classes()),
                  RunSeed(config_, "init.erm_head"))};
    ErmTrainer trainer(models.target, models.head, cfg);
    Selection best;
    EvalSingle("erm", 0, "erm", models.target, models.head, &best);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Add("erm", epoch, "erm", "train", "loss", trainer.RunEpoch(data_.train, epoch - 1));
      EvalSingle("erm", epoch, "erm", models.target, models.head, &best);
    }
    return Select("erm", std::move(models), best);
  }

 private:
  // Best-on-val bookkeeping; ties keep the earlier epoch.
  struct Selection {
    double val_accuracy = -1.0;
    int epoch = 0;
    std::optional<Stage2Models> models;
  };

  void Add(const std::string& stage, int epoch, const std::string& branch,
           const std::string& split, const std::string& metric, double value) {
    rows_.push_back({config_.run.run_id, stage, epoch, branch, split, metric, value});
  }

  void AddReport(const std::string& stage, int epoch, const std::string& branch,
                 const std::string& split, const EvalReport& report) {
    Add(stage, epoch, branch, split, "overall", report.overall());
    Add(stage, epoch, branch, split, "aligned", report.aligned());
    Add(stage, epoch, branch, split, "conflicting", report.conflicting());
  }

  void EvalStage1(const Stage1Models& m, int epoch) {
    AddReport("stage1", epoch, "deep", "test", EvaluateBranch(m.deep, m.head, data_.test));
    AddReport("stage1", epoch, "shallow", "test",
              EvaluateBranch(m.shallow, m.head, data_.test));
    const ConstGatedBranch both[] = {{&m.deep, 1.0f}, {&m.shallow, 1.0f}};
    AddReport("stage1", epoch, "ensemble", "test", EvaluateGated(both, m.head, data_.test));
  }

  void EvalSingle(const std::string& stage, int epoch, const std::string& name,
                  const Branch& branch, const Head& head, Selection* best) {
    AddReport(stage, epoch, name, "test", EvaluateBranch(branch, head, data_.test));
    if (!config_.run.select_best_on_val) return;
    const EvalReport val = EvaluateBranch(branch, head, data_.val);
    AddReport(stage, epoch, name, "val", val);
    if (val.overall() > best->val_accuracy) {
      best->val_accuracy = val.overall();
      best->epoch = epoch;
      best->models = Stage2Models{branch, head};
    }
  }

  Stage2Models Select(const std::string& stage, Stage2Models final_models,
                      Selection& best) {
    if (!config_.run.select_best_on_val || !best.models) return final_models;
    reported_[stage] = best.epoch;
    return std::move(*best.models);
  }

  const ExperimentConfig& config_;
  const ExperimentData& data_;
  std::vector<MetricRow> rows_;
  std::map<std::string, int> reported_;
};

void AddReportRow(Table& table, const std::vector<std::string>& prefix,
                  const std::string& branch, const EvalReport& report) {
  std::string row;
  for (const std::string& p : prefix) row += p + ",";
  row += branch + "," + FormatDouble(report.overall()) + "," +
         FormatDouble(report.aligned()) + "," + FormatDouble(report.conflicting());
  table.rows.push_back(row);
}

struct Stage1Run {
  Stage1Models models;
  std::vector<MetricRow> metrics;
  EvalReport deep;
  EvalReport shallow;
};

// Stage 1 only, with resolved config, metrics and checkpoint in `dir`.
Stage1Run RunStage1Only(const ExperimentConfig& config, const fs::path& dir) {
  fs::create_directories(dir / "checkpoints");
  WriteText(dir / "resolved_config.txt", ResolvedConfigText(config));
  std::string stage = "data";
  try {
    const ExperimentData data = BuildExperimentData(config);
    stage = "stage1";
    Runner runner(config, data);
    Stage1Models models = runner.MakeStage1();
    runner.TrainStage1(models, nullptr);
    Stage1Run run{models, runner.rows(), EvaluateBranch(models.deep, models.head, data.test),
                  EvaluateBranch(models.shallow, models.head, data.test)};
    stage = "artifacts";
    WriteMetricsCsv(run.metrics, dir / "metrics.csv");
    SaveCheckpoint({ConfigHash(config), {{"deep", models.deep}, {"shallow", models.shallow}},
                    {{"head", models.head}}},
                   dir / "checkpoints" / "stage1.ckpt");
    return run;
  } catch (const std::exception& e) {
    WriteText(dir / "FAILED", stage + ": " + e.what() + "\n");
    RethrowTagged(stage);
  }
}

std::string RatioTag(double ratio) {
  std::string tag = FormatDouble(ratio);
  std::replace(tag.begin(), tag.end(), '.', 'p');
  return tag;
}

void RunSameDepth(const ExperimentConfig& config) {
  if (!config.model.allow_equal_depth) {
    throw ConfigError("same-depth ablation requires allow_equal_depth "
                      "(--allow-equal-depth or model.allow_equal_depth = true)");
  }
  const fs::path out = config.run.output_dir;
  Table table{"deep_depth,shallow_depth,branch,overall,aligned,conflicting", {}};
  for (size_t shallow_depth : {config.model.shallow_depth, config.model.deep_depth}) {
    ExperimentConfig run = config;
    run.model.shallow_depth = shallow_depth;
    const std::string name = "depth_" + std::to_string(run.model.deep_depth) + "_" +
                             std::to_string(shallow_depth);
    run.run.run_id = config.run.run_id + "-" + name;
    run.run.output_dir = out / name;
    const Stage1Run result = RunStage1Only(run, run.run.output_dir);
    const std::vector<std::string> prefix = {std::to_string(run.model.deep_depth),
                                             std::to_string(shallow_depth)};
    AddReportRow(table, prefix, "deep", result.deep);
    AddReportRow(table, prefix, "shallow", result.shallow);
  }
  table.Write(out / "ablation_same-depth.csv");
}

void RunLossComponents(const ExperimentConfig& config) {
  const fs::path out = config.run.output_dir;
  fs::create_directories(out / "checkpoints");
  WriteText(out / "resolved_config.txt", ResolvedConfigText(config));
  std::string stage = "data";
  std::vector<MetricRow> metrics;
  try {
    const ExperimentData data = BuildExperimentData(config);
    Runner runner(config, data);
    stage = "stage1";
    Stage1Models s1 = runner.MakeStage1();
    runner.TrainStage1(s1, nullptr);
    // One row per combination of active loss terms.
    Table table{"idx,l_ce,l_dist,l_t,branch,overall,aligned,conflicting", {}};
    AddReportRow(table, {"1", "1", "0", "0"}, "shallow",
                 EvaluateBranch(s1.shallow, s1.head, data.test));
    struct Variant {
      int idx;
      bool dist;
      bool target;
    };
    for (const Variant v : {Variant{2, false, true}, Variant{3, true, false},
                            Variant{4, true, true}}) {
      stage = "stage2_idx" + std::to_string(v.idx);
      TrainConfig cfg = config.stage2;
      cfg.use_distillation = v.dist;
      cfg.use_target_loss = v.target;
      const Stage2Models s2 = runner.TrainStage2(s1, cfg, stage);
      AddReportRow(table,
                   {std::to_string(v.idx), "1", v.dist ? "1" : "0", v.target ? "1" : "0"},
                   "target", EvaluateBranch(s2.target, s2.head, data.test));
    }
    stage = "artifacts";
    WriteMetricsCsv(runner.rows(), out / "metrics.csv");
    table.Write(out / "ablation_loss-components.csv");
  } catch (const std::exception& e) {
    WriteText(out / "FAILED", stage + ": " + e.what() + "\n");
    RethrowTagged(stage);
  }
}

void RunParamCount(const ExperimentConfig& config) {
  const fs::path out = config.run.output_dir;
  Table table{"case,deep_width,shallow_width,deep_params,shallow_params,branch,overall,"
              "aligned,conflicting",
              {}};
  for (auto [deep_width, shallow_width] : config.ablation.widths) {
    ExperimentConfig run = config;
    run.model.deep_width = deep_width;
    run.model.shallow_width = shallow_width;
    const std::string name =
        "widths_" + std::to_string(deep_width) + "_" + std::to_string(shallow_width);
    run.run.run_id = config.run.run_id + "-" + name;
    run.run.output_dir = out / name;
    const Stage1Run result = RunStage1Only(run, run.run.output_dir);
    const size_t deep_params = result.models.deep.parameter_count();
    const size_t shallow_params = result.models.shallow.parameter_count();
    // Within 10% counts as comparable.
    const double ratio = static_cast<double>(deep_params) / static_cast<double>(shallow_params);
    const std::string label = ratio < 0.9 ? "deep<shallow" : ratio > 1.1 ? "deep>shallow"
                                                                          : "deep~shallow";
    const std::vector<std::string> prefix = {label, std::to_string(deep_width),
                                             std::to_string(shallow_width),
                                             std::to_string(deep_params),
                                             std::to_string(shallow_params)};
    AddReportRow(table, prefix, "deep", result.deep);
    AddReportRow(table, prefix, "shallow", result.shallow);
  }
  table.Write(out / "ablation_param-count.csv");
}

void RunRatioSweep(const ExperimentConfig& config) {
  const fs::path out = config.run.output_dir;
  Table table{"conflict_ratio,branch,overall,aligned,conflicting", {}};
  for (double ratio : config.ablation.ratios) {
    ExperimentConfig run = config;
    run.dataset.conflict_ratio = ratio;
    const std::string name = "rho_" + RatioTag(ratio);
    run.run.run_id = config.run.run_id + "-" + name;
    run.run.output_dir = out / name;
    const RunResult result = RunPipeline(run);
    const std::vector<std::string> prefix = {FormatDouble(ratio)};
    AddReportRow(table, prefix, "deep", result.deep);
    AddReportRow(table, prefix, "shallow", result.shallow);
    AddReportRow(table, prefix, "target", result.target);
    if (result.has_erm) AddReportRow(table, prefix, "erm", result.erm);
  }
  table.Write(out / "ablation_ratio-sweep.csv");
}

}  // namespace

void WriteMetricsCsv(std::span<const MetricRow> rows, const fs::path& path) {
  std::string text(kMetricsHeader);
  text += "\n";
  for (const MetricRow& r : rows) {
    text += r.run_id + "," + r.stage + "," + std::to_string(r.epoch) + "," + r.branch + "," +
            r.split + "," + r.metric + "," + FormatDouble(r.value) + "\n";
  }
  WriteText(path, text);
}

std::vector<MetricRow> ReadMetricsCsv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError(path.string() + ": unexpected metrics header");
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream stream(line);
    std::string field;
    while (std::getline(stream, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw FormatError(path.string() + ": malformed row '" + line + "'");
    MetricRow row{fields[0], fields[1], 0, fields[3], fields[4], fields[5], 0.0};
    const auto [p1, e1] = std::from_chars(fields[2].data(), fields[2].data() + fields[2].size(),
                                          row.epoch);
    const auto [p2, e2] = std::from_chars(fields[6].data(), fields[6].data() + fields[6].size(),
                                          row.value);
    if (e1 != std::errc() || e2 != std::errc()) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

uint64_t RunSeed(const ExperimentConfig& config, std::string_view stream) {
  return DeriveSeed(config.run.seed, stream);
}

ExperimentData BuildExperimentData(const ExperimentConfig& config) {
  const DatasetSpec& d = config.dataset;
  const uint64_t seed = RunSeed(config, "data");
  GrayscaleImages pool;
  if (d.source == "synthetic") {
    pool = MakeSyntheticImages(d.num_classes, d.train_size + d.unbiased_size, seed);
  } else {
    pool = LoadIdx(d.images, d.labels);
  }
  std::vector<size_t> order = Shuffled(pool.count, seed, "split");

  GrayscaleImages unbiased;
  if (d.source == "idx" && !d.test_images.empty()) {
    unbiased = LoadIdx(d.test_images, d.test_labels);
    if (d.unbiased_size > 0 && d.unbiased_size < unbiased.count) {
      const std::vector<size_t> subset = Shuffled(unbiased.count, seed, "unbiased.subset");
      unbiased = TakeImages(unbiased, subset, 0, d.unbiased_size);
    }
  } else {
    if (d.unbiased_size >= pool.count) {
      throw DataError("unbiased_size " + std::to_string(d.unbiased_size) +
                      " leaves no training examples out of " + std::to_string(pool.count));
    }
    unbiased = TakeImages(pool, order, 0, d.unbiased_size);
    order.erase(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(d.unbiased_size));
  }
  const size_t train_count = d.train_size == 0 ? order.size() : d.train_size;
  if (train_count > order.size()) {
    throw DataError("requested " + std::to_string(train_count) + " training examples but only " +
                    std::to_string(order.size()) + " are available");
  }
  const GrayscaleImages train_images = TakeImages(pool, order, 0, train_count);

  const std::vector<size_t> split = Shuffled(unbiased.count, seed, "unbiased");
  const size_t val_count = std::max<size_t>(
      1, static_cast<size_t>(std::llround(d.val_fraction * static_cast<double>(unbiased.count))));
  if (val_count >= unbiased.count) {
    throw DataError("unbiased pool of " + std::to_string(unbiased.count) +
                    " examples is too small to split into val and test");
  }

  Palette palette = d.palette;
  if (palette.size() < static_cast<size_t>(pool.num_classes)) {
    throw ConfigError("palette has " + std::to_string(palette.size()) + " colors for " +
                      std::to_string(pool.num_classes) + " classes");
  }
  palette.colors.resize(static_cast<size_t>(pool.num_classes));
  unbiased.num_classes = pool.num_classes;

  ExperimentData data;
  data.train = Colorize(train_images, d.conflict_ratio, palette, DeriveSeed(seed, "train"));
  data.val = MakeUnbiasedSplit(TakeImages(unbiased, split, 0, val_count), palette,
                               DeriveSeed(seed, "val"), SplitTag::kUnbiasedVal);
  data.test = MakeUnbiasedSplit(TakeImages(unbiased, split, val_count, unbiased.count - val_count),
                                palette, DeriveSeed(seed, "test"), SplitTag::kUnbiasedTest);
  return data;
}

std::string SummaryJson(const SummaryInputs& inputs) {
  auto last_epoch = [&](const std::string& stage) -> std::optional<int> {
    if (auto it = inputs.reported_epochs.find(stage); it != inputs.reported_epochs.end()) {
      return it->second;
    }
    std::optional<int> last;
    for (const MetricRow& r : inputs.metrics) {
      if (r.stage == stage) last = std::max(last.value_or(r.epoch), r.epoch);
    }
    return last;
  };
  auto lookup = [&](const std::string& stage, int epoch, const std::string& branch,
                    const std::string& metric) {
    for (const MetricRow& r : inputs.metrics) {
      if (r.stage == stage && r.epoch == epoch && r.branch == branch && r.split == "test" &&
          r.metric == metric) {
        return r.value;
      }
    }
    throw DataError("summary: missing metric " + stage + "/" + branch + "/" + metric +
                    " at epoch " + std::to_string(epoch));
  };
  auto report = [&](const std::string& stage, const std::string& branch) {
    const std::optional<int> epoch = last_epoch(stage);
    if (!epoch) throw DataError("summary: no metrics for stage " + stage);
    nlohmann::ordered_json j;
    j["overall"] = lookup(stage, *epoch, branch, "overall");
    j["aligned"] = lookup(stage, *epoch, branch, "aligned");
    j["conflicting"] = lookup(stage, *epoch, branch, "conflicting");
    j["epoch"] = *epoch;
    return j;
  };

  nlohmann::ordered_json summary;
  summary["run_id"] = inputs.run_id;
  summary["config_hash"] = ConfigHashHex(inputs.config_hash);
  summary["per_branch"]["deep"] = report("stage1", "deep");
  summary["per_branch"]["shallow"] = report("stage1", "shallow");
  if (last_epoch("erm")) summary["per_branch"]["erm"] = report("erm", "erm");
  summary["target"] = report("stage2", "target");
  summary["seeds"] = nlohmann::ordered_json::object();
  for (const auto& [name, seed] : inputs.seeds) summary["seeds"][name] = seed;
  summary["durations"] = nlohmann::ordered_json::object();
  for (const auto& [name, seconds] : inputs.durations) summary["durations"][name] = seconds;
  return summary.dump(2) + "\n";
}

void EmitSummary(const SummaryInputs& inputs, const fs::path& path) {
  WriteText(path, SummaryJson(inputs));
}

RunResult RunPipeline(const ExperimentConfig& config) {
  const fs::path out = config.run.output_dir;
  RunResult result;
  result.output_dir = out;
  std::string stage = "config";
  std::optional<Runner> runner;
  const Clock::time_point start = Clock::now();
  SummaryInputs summary;
  summary.run_id = config.run.run_id;
  summary.config_hash = ConfigHash(config);
  try {
    ValidateConfig(config);
    fs::create_directories(out / "checkpoints");
    fs::remove(out / "FAILED");
    WriteText(out / "resolved_config.txt", ResolvedConfigText(config));

    stage = "data";
    Clock::time_point t = Clock::now();
    const ExperimentData data = BuildExperimentData(config);
    summary.durations["data_s"] = Seconds(t);
    runner.emplace(config, data);

    stage = "stage1";
    t = Clock::now();
    Stage1Models s1 = runner->MakeStage1();
    runner->TrainStage1(s1, &result.decodability);
    SaveCheckpoint({summary.config_hash, {{"deep", s1.deep}, {"shallow", s1.shallow}},
                    {{"head", s1.head}}},
                   out / "checkpoints" / "stage1.ckpt");
    result.deep = EvaluateBranch(s1.deep, s1.head, data.test);
    result.shallow = EvaluateBranch(s1.shallow, s1.head, data.test);
    summary.durations["stage1_s"] = Seconds(t);

    stage = "stage2";
    t = Clock::now();
    const Stage2Models s2 = runner->TrainStage2(s1, config.stage2, "stage2");
    SaveCheckpoint({summary.config_hash, {{"target", s2.target}}, {{"target_head", s2.head}}},
                   out / "checkpoints" / "stage2.ckpt");
    result.target = EvaluateBranch(s2.target, s2.head, data.test);
    summary.durations["stage2_s"] = Seconds(t);

    if (config.erm_enabled) {
      stage = "erm";
      t = Clock::now();
      const Stage2Models erm = runner->TrainErmBaseline();
      SaveCheckpoint({summary.config_hash, {{"erm", erm.target}}, {{"erm_head", erm.head}}},
                     out / "checkpoints" / "erm.ckpt");
      result.erm = EvaluateBranch(erm.target, erm.head, data.test);
      result.has_erm = true;
      summary.durations["erm_s"] = Seconds(t);
    }

    stage = "artifacts";
    result.metrics = runner->rows();
    WriteMetricsCsv(result.metrics, out / "metrics.csv");
    if (!config.probe.schedule.empty()) {
      WriteDecodabilityCsv(result.decodability, out / "decodability.csv");
    }
    summary.metrics = result.metrics;
    summary.reported_epochs = runner->reported_epochs();
    summary.seeds = {{"run", config.run.seed},
                     {"data", RunSeed(config, "data")},
                     {"stage1", RunSeed(config, "stage1")},
                     {"stage2", RunSeed(config, "stage2")},
                     {"erm", RunSeed(config, "erm")}};
    summary.durations["total_s"] = Seconds(start);
    EmitSummary(summary, out / "summary.json");
    return result;
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (runner && stage != "artifacts") {
      try {
        WriteMetricsCsv(runner->rows(), out / "metrics.csv");
      } catch (const std::exception&) {
        // The FAILED marker below is what matters.
      }
    }
    std::ofstream(out / "FAILED") << stage << ": " << e.what() << "\n";
    RethrowTagged(stage);
  }
}

void RunAblation(const ExperimentConfig& config, std::string_view kind) {
  ValidateConfig(config);
  fs::create_directories(config.run.output_dir);
  if (kind == "same-depth") {
    RunSameDepth(config);
  } else if (kind == "loss-components") {
    RunLossComponents(config);
  } else if (kind == "param-count") {
    RunParamCount(config);
  } else if (kind == "ratio-sweep") {
    RunRatioSweep(config);
  } else {
    throw ConfigError("unknown ablation kind '" + std::string(kind) +
                      "' (expected same-depth, loss-components, param-count or ratio-sweep)");
  }
}

std::vector<ProbeResult> RunDepthStudy(const ExperimentConfig& config,
                                       const ExperimentData& data) {
  std::vector<ProbeResult> results;
  const size_t input_dim = data.train.feature_dim();
  for (size_t depth : config.probe.depths) {
    const std::string name = "depth" + std::to_string(depth);
    Branch mlp = MakeBranch(config, input_dim, depth, config.model.deep_width,
                            "study.init." + name);
    if (config.probe.erm_epochs > 0) {
      Head head = BuildHead(config.model.feature_dim,
                            static_cast<size_t>(data.train.num_classes()),
                            RunSeed(config, "study.head." + name));
      TrainConfig erm = config.erm;
      erm.epochs = config.probe.erm_epochs;
      erm.seed = RunSeed(config, "study.erm." + name);
      TrainErm(data.train, mlp, head, erm);
    }
    for (Attribute attribute : {Attribute::kClass, Attribute::kBias}) {
      ProbeConfig probe = config.probe.config;
      probe.seed = RunSeed(config, "study.probe." + name);
      results.push_back({config.probe.erm_epochs, name, std::string(AttributeName(attribute)),
                         std::string(SplitTagName(data.test.split())),
                         BranchDecodability(mlp, data.val, data.test, attribute, probe)});
    }
  }
  return results;
}

std::vector<MetricRow> EvaluateCheckpoint(const ExperimentConfig& config,
                                          const ExperimentData& data,
                                          const Checkpoint& checkpoint) {
  auto find_head = [&](const std::string& name) -> const Head* {
    for (const auto& [head_name, head] : checkpoint.heads) {
      if (head_name == name) return &head;
    }
    return nullptr;
  };
  std::vector<MetricRow> rows;
  auto add = [&](const std::string& branch, const EvalReport& report) {
    for (auto [metric, value] : {std::pair{"overall", report.overall()},
                                 std::pair{"aligned", report.aligned()},
                                 std::pair{"conflicting", report.conflicting()}}) {
      rows.push_back({config.run.run_id, "eval", 0, branch, "test", metric, value});
    }
  };
  const Branch* deep = nullptr;
  const Branch* shallow = nullptr;
  for (const auto& [name, branch] : checkpoint.branches) {
    const Head* head = find_head(name + "_head");
    if (head == nullptr) head = find_head("head");
    if (head == nullptr) throw DataError("checkpoint has no head for branch '" + name + "'");
    add(name, EvaluateBranch(branch, *head, data.test));
    if (name == "deep") deep = &branch;
    if (name == "shallow") shallow = &branch;
  }
  if (deep != nullptr && shallow != nullptr && find_head("head") != nullptr) {
    const ConstGatedBranch both[] = {{deep, 1.0f}, {shallow, 1.0f}};
    add("ensemble", EvaluateGated(both, *find_head("head"), data.test));
  }
  return rows;
}

void WriteExperimentData(const ExperimentData& data, const fs::path& dir) {
  fs::create_directories(dir);
  SaveDataset(data.train, dir / "train.dndm");
  SaveDataset(data.val, dir / "val.dndm");
  SaveDataset(data.test, dir / "test.dndm");
}

}  // namespace dndm
