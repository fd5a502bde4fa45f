// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//
// Usage: acceptance [--out DIR] [--known-failures FILE] [--only N,...]
//
// A known-failures file lists criteria, one per line as "<id> <reason>", that
// are documented as out of reach at desk scale. They are still run and still
// print FAIL; they just do not set the exit status.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "dndm/config.h"
#include "dndm/experiment.h"
#include "dndm/probe.h"

namespace {

namespace fs = std::filesystem;
using dndm::ExperimentConfig;

using Clock = std::chrono::steady_clock;

double Since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* format, auto... args) {
  char buffer[512];
  std::snprintf(buffer, sizeof(buffer), format, args...);
  return buffer;
}

ExperimentConfig DeskConfig(const fs::path& out, uint64_t seed) {
  ExperimentConfig c =
      dndm::ParseConfig(fs::path(DNDM_SOURCE_DIR) / "configs" / "cmnist_desk.cfg");
  dndm::ApplySeed(c, seed);
  c.run.run_id = "desk_seed" + std::to_string(seed);
  c.run.output_dir = out;
  return c;
}

// Probe-study variant of the desk data: a larger unbiased pool split evenly,
// so probes are fit on 2,000 examples and scored on 2,000.
ExperimentConfig StudyConfig(const fs::path& out, uint64_t seed, int erm_epochs) {
  ExperimentConfig c = DeskConfig(out, seed);
  c.dataset.train_size = 6000;
  c.dataset.unbiased_size = 4000;
  c.dataset.val_fraction = 0.5;
  c.probe.depths = {3, 5};
  c.probe.erm_epochs = erm_epochs;
  return c;
}

struct Decodability {
  double digit = 0.0;
  double color = 0.0;
};

std::map<size_t, Decodability> RunStudy(const ExperimentConfig& config) {
  const dndm::ExperimentData data = dndm::BuildExperimentData(config);
  std::map<size_t, Decodability> out;
  for (const dndm::ProbeResult& r : dndm::RunDepthStudy(config, data)) {
    const size_t depth = std::stoul(r.branch.substr(5));
    (r.attribute == "class" ? out[depth].digit : out[depth].color) = r.accuracy;
  }
  return out;
}

// Runs the listed gtest binaries; passes when all of them exit 0 within
// two minutes in total.
Outcome PropertySuite() {
  const std::vector<std::string> binaries = {
      DNDM_TENSOR_CORE_TEST, DNDM_MODELS_TEST, DNDM_DATASETS_TEST,
      DNDM_TRAINING_TEST + std::string(" --gtest_filter=Sgd*:Distillation*:*Replay*:"
                                       "*Decomposes*:*Frozen*"),
      DNDM_PROBES_EVAL_TEST};
  const Clock::time_point start = Clock::now();
  std::vector<std::string> failed;
  for (const std::string& binary : binaries) {
    const int status = std::system((binary + " --gtest_brief=1 > /dev/null 2>&1").c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      failed.push_back(fs::path(binary.substr(0, binary.find(' '))).filename().string());
    }
  }
  const double seconds = Since(start);
  std::string detail = Fmt("%zu suites in %.1f s (limit 120 s)", binaries.size(), seconds);
  for (const std::string& name : failed) detail += "; failed: " + name;
  return {failed.empty() && seconds < 120.0, detail};
}

Outcome UntrainedTrend(const fs::path& out) {
  Decodability d3, d5;
  for (uint64_t seed : {1, 2, 3}) {
    const auto study = RunStudy(StudyConfig(out / ("seed" + std::to_string(seed)), seed, 0));
    d3.digit += study.at(3).digit / 3.0;
    d3.color += study.at(3).color / 3.0;
    d5.digit += study.at(5).digit / 3.0;
    d5.color += study.at(5).color / 3.0;
  }
  const bool pass = d3.digit - d5.digit >= 0.02 && d3.color - d5.color >= 0.02;
  return {pass, Fmt("mean over 3 seeds: digit %.4f (depth 3) vs %.4f (depth 5), "
                    "color %.4f vs %.4f; need both drops >= 0.02",
                    d3.digit, d5.digit, d3.color, d5.color)};
}

Outcome ErmDynamics(const fs::path& out) {
  int votes = 0;
  std::string detail;
  for (uint64_t seed : {1, 2, 3}) {
    const auto study = RunStudy(StudyConfig(out / ("seed" + std::to_string(seed)), seed, 2));
    const Decodability& d3 = study.at(3);
    const Decodability& d5 = study.at(5);
    const double gap3 = d3.color - d3.digit;
    const double gap5 = d5.color - d5.digit;
    const bool ok = gap3 > 0.0 && gap5 > 0.0 && gap5 > gap3;
    votes += ok ? 1 : 0;
    detail += Fmt("%sseed %d gap3 %.4f gap5 %.4f%s", detail.empty() ? "" : "; ",
                  static_cast<int>(seed), gap3, gap5, ok ? "" : " (x)");
  }
  return {votes >= 2, detail + Fmt("; %d/3 seeds agree", votes)};
}

struct DeskRuns {
  dndm::RunResult preset;                 // seed 1, lambda from the preset, with ERM
  std::vector<double> with_distillation;  // conflicting accuracy, seeds 1..3
  std::vector<double> without;            // same at lambda = 0
  double seconds = 0.0;
};

DeskRuns RunDesk(const fs::path& out) {
  DeskRuns runs;
  const Clock::time_point start = Clock::now();
  for (uint64_t seed : {1, 2, 3}) {
    ExperimentConfig with = DeskConfig(out / ("seed" + std::to_string(seed)), seed);
    with.probe.schedule.clear();
    with.erm_enabled = seed == 1;
    const dndm::RunResult result = dndm::RunPipeline(with);
    if (seed == 1) {
      runs.preset = result;
      runs.seconds = Since(start);
    }
    runs.with_distillation.push_back(result.target.conflicting());

    ExperimentConfig without = with;
    without.erm_enabled = false;
    without.stage2.lambda = 0.0f;
    without.run.run_id += "_lambda0";
    without.run.output_dir = out / ("seed" + std::to_string(seed) + "_lambda0");
    runs.without.push_back(dndm::RunPipeline(without).target.conflicting());
  }
  return runs;
}

Outcome Segregation(const DeskRuns& runs) {
  const dndm::EvalReport& deep = runs.preset.deep;
  const dndm::EvalReport& shallow = runs.preset.shallow;
  const bool pass = deep.conflicting() <= 0.15 && deep.aligned() >= 0.90 &&
                    shallow.conflicting() >= 0.55 && runs.seconds < 1200.0;
  return {pass, Fmt("deep conflicting %.4f (<= 0.15), deep aligned %.4f (>= 0.90), "
                    "shallow conflicting %.4f (>= 0.55); preset run %.0f s",
                    deep.conflicting(), deep.aligned(), shallow.conflicting(), runs.seconds)};
}

Outcome StageTwo(const DeskRuns& runs) {
  const double target = runs.preset.target.overall();
  const double shallow = runs.preset.shallow.overall();
  int wins = 0;
  std::string per_seed;
  for (size_t i = 0; i < runs.without.size(); ++i) {
    wins += runs.with_distillation[i] > runs.without[i] ? 1 : 0;
    per_seed += Fmt("%s%.4f vs %.4f", i == 0 ? "" : ", ", runs.with_distillation[i],
                    runs.without[i]);
  }
  const bool first = target >= shallow - 0.01;
  const bool second = wins >= 2;
  return {first && second,
          Fmt("target overall %.4f vs shallow %.4f - 0.01 [%s]; ", target, shallow,
              first ? "ok" : "x") +
              "conflicting lambda>0 vs lambda=0: " + per_seed +
              Fmt(" -> %d/3 wins [%s]", wins, second ? "ok" : "x")};
}

Outcome ErmGap(const DeskRuns& runs) {
  const double target = runs.preset.target.overall();
  const double erm = runs.preset.erm.overall();
  return {target - erm >= 0.10,
          Fmt("target overall %.4f vs ERM %.4f: gap %.4f (>= 0.10)", target, erm, target - erm)};
}

std::map<int, std::string> ReadKnownFailures(const fs::path& path) {
  std::map<int, std::string> known;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    int id = 0;
    std::string reason;
    fields >> id;
    std::getline(fields >> std::ws, reason);
    known[id] = reason;
  }
  return known;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_runs";
  std::map<int, std::string> known;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else if (arg == "--known-failures" && i + 1 < argc) {
      known = ReadKnownFailures(argv[++i]);
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      for (std::string id; std::getline(list, id, ',');) only.insert(std::stoi(id));
    } else {
      std::fprintf(stderr, "usage: acceptance [--out DIR] [--known-failures FILE] [--only N,...]\n");
      return 2;
    }
  }
  fs::remove_all(out);
  fs::create_directories(out);

  std::optional<DeskRuns> desk;
  auto desk_runs = [&]() -> const DeskRuns& {
    if (!desk) desk = RunDesk(out / "desk");
    return *desk;
  };

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, [] { return PropertySuite(); }},
      {2, [&] { return UntrainedTrend(out / "untrained"); }},
      {3, [&] { return ErmDynamics(out / "erm2"); }},
      {4, [&] { return Segregation(desk_runs()); }},
      {5, [&] { return StageTwo(desk_runs()); }},
      {6, [&] { return ErmGap(desk_runs()); }},
  };

  int unexpected = 0;
  for (const auto& [id, check] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const Clock::time_point start = Clock::now();
    Outcome outcome;
    try {
      outcome = check();
    } catch (const std::exception& e) {
      outcome = {false, std::string("error: ") + e.what()};
    }
    const auto it = known.find(id);
    std::string note;
    if (!outcome.pass && it != known.end()) note = " [documented: " + it->second + "]";
    if (outcome.pass && it != known.end()) note = " [listed as a known failure but passed]";
    if (!outcome.pass && it == known.end()) ++unexpected;
    std::printf("%s criterion %d: %s (%.0f s)%s\n", outcome.pass ? "PASS" : "FAIL", id,
                outcome.detail.c_str(), Since(start), note.c_str());
    std::fflush(stdout);
  }
  std::printf("criterion 7: full-scale reproduction (configs/cmnist_full.cfg) is not gated\n");
  return unexpected == 0 ? 0 : 1;
}
