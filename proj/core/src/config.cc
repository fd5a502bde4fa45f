#include "dndm/config.h"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "dndm/errors.h"

namespace dndm {
namespace {

namespace fs = std::filesystem;

std::string_view Trim(std::string_view s) {
  const size_t begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  const size_t end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string_view> SplitList(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  if (Trim(s).empty()) return out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    out.push_back(Trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Raised by value parsers; the caller adds the key and location.
struct BadValue {
  std::string what;
};

template <typename T>
T ParseNumber(std::string_view s) {
  s = Trim(s);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw BadValue{"expected a number, got '" + std::string(s) + "'"};
  }
  return value;
}

bool ParseBool(std::string_view s) {
  s = Trim(s);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw BadValue{"expected true or false, got '" + std::string(s) + "'"};
}

template <typename T>
std::string Format(T value) {
  if constexpr (std::is_same_v<T, bool>) {
    return value ? "true" : "false";
  } else {
    char buffer[64];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, ptr);
  }
}

template <typename T>
std::string FormatList(const std::vector<T>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ", ";
    out += Format(values[i]);
  }
  return out;
}

template <typename T>
std::vector<T> ParseList(std::string_view s) {
  std::vector<T> out;
  for (std::string_view item : SplitList(s, ',')) out.push_back(ParseNumber<T>(item));
  return out;
}

std::vector<std::array<float, 3>> ParsePalette(std::string_view s) {
  std::vector<std::array<float, 3>> colors;
  for (std::string_view triple : SplitList(s, ';')) {
    std::array<float, 3> color{};
    std::istringstream in{std::string(triple)};
    std::string token;
    size_t n = 0;
    while (in >> token) {
      if (n == 3) throw BadValue{"palette colors take three components"};
      color[n++] = ParseNumber<float>(token);
    }
    if (n != 3) throw BadValue{"palette colors take three components"};
    colors.push_back(color);
  }
  return colors;
}

std::string FormatPalette(const std::vector<std::array<float, 3>>& colors) {
  std::string out;
  for (size_t i = 0; i < colors.size(); ++i) {
    if (i > 0) out += "; ";
    out += Format(colors[i][0]) + " " + Format(colors[i][1]) + " " + Format(colors[i][2]);
  }
  return out;
}

std::vector<std::pair<size_t, size_t>> ParseWidthPairs(std::string_view s) {
  std::vector<std::pair<size_t, size_t>> out;
  for (std::string_view item : SplitList(s, ',')) {
    const size_t colon = item.find(':');
    if (colon == std::string_view::npos) {
      throw BadValue{"expected deep:shallow width pairs, got '" + std::string(item) + "'"};
    }
    out.emplace_back(ParseNumber<size_t>(item.substr(0, colon)),
                     ParseNumber<size_t>(item.substr(colon + 1)));
  }
  return out;
}

std::string FormatWidthPairs(const std::vector<std::pair<size_t, size_t>>& pairs) {
  std::string out;
  for (size_t i = 0; i < pairs.size(); ++i) {
    if (i > 0) out += ", ";
    out += Format(pairs[i].first) + ":" + Format(pairs[i].second);
  }
  return out;
}

struct ParseContext {
  fs::path base_dir;
};

struct Field {
  std::string_view section;
  std::string_view key;
  std::function<void(ExperimentConfig&, std::string_view, const ParseContext&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T, typename Access>
Field Number(std::string_view section, std::string_view key, Access access) {
  return {section, key,
          [access](ExperimentConfig& c, std::string_view v, const ParseContext&) {
            access(c) = ParseNumber<T>(v);
          },
          [access](const ExperimentConfig& c) {
            return Format(access(c));
          }};
}

template <typename Access>
Field Bool(std::string_view section, std::string_view key, Access access) {
  return {section, key,
          [access](ExperimentConfig& c, std::string_view v, const ParseContext&) {
            access(c) = ParseBool(v);
          },
          [access](const ExperimentConfig& c) {
            return Format(access(c));
          }};
}

template <typename Access>
Field Text(std::string_view section, std::string_view key, Access access) {
  return {section, key,
          [access](ExperimentConfig& c, std::string_view v, const ParseContext&) {
            access(c) = std::string(Trim(v));
          },
          [access](const ExperimentConfig& c) {
            return std::string(access(c));
          }};
}

fs::path ResolveDataPath(std::string_view raw, const ParseContext& context) {
  const fs::path path{std::string(Trim(raw))};
  if (path.empty()) return path;
  std::vector<fs::path> candidates;
  if (path.is_absolute()) {
    candidates.push_back(path);
  } else {
    if (const char* env = std::getenv("DNDM_DATA_DIR"); env != nullptr && *env != '\0') {
      candidates.push_back(fs::path(env) / path);
    }
    candidates.push_back(context.base_dir / path);
    candidates.push_back(fs::current_path() / path);
  }
  std::string searched;
  for (const fs::path& candidate : candidates) {
    std::error_code ec;
    if (fs::is_regular_file(candidate, ec)) return fs::absolute(candidate).lexically_normal();
    searched += (searched.empty() ? "" : ", ") + candidate.string();
  }
  throw BadValue{"file '" + path.string() + "' not found (searched " + searched + ")"};
}

template <typename Access>
Field DataPath(std::string_view section, std::string_view key, Access access) {
  return {section, key,
          [access](ExperimentConfig& c, std::string_view v, const ParseContext& context) {
            access(c) = ResolveDataPath(v, context);
          },
          [access](const ExperimentConfig& c) {
            return access(c).string();
          }};
}

void AddStageFields(std::vector<Field>& fields, std::string_view section,
                    TrainConfig ExperimentConfig::*member) {
  auto stage = [member](auto& c) -> auto& { return c.*member; };
  fields.push_back(Number<float>(section, "learning_rate",
                                 [stage](auto& c) -> auto& { return stage(c).learning_rate; }));
  fields.push_back(Number<size_t>(section, "batch_size",
                                  [stage](auto& c) -> auto& { return stage(c).batch_size; }));
  fields.push_back(Number<float>(section, "momentum",
                                 [stage](auto& c) -> auto& { return stage(c).momentum; }));
  fields.push_back(Number<float>(section, "weight_decay",
                                 [stage](auto& c) -> auto& { return stage(c).weight_decay; }));
  fields.push_back(Number<int>(section, "epochs",
                               [stage](auto& c) -> auto& { return stage(c).epochs; }));
}

const std::vector<Field>& Fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    // [run]
    f.push_back(Text("run", "run_id", [](auto& c) -> auto& { return c.run.run_id; }));
    f.push_back(Number<uint64_t>("run", "seed", [](auto& c) -> auto& { return c.run.seed; }));
    f.push_back({"run", "output_dir",
                 [](ExperimentConfig& c, std::string_view v, const ParseContext&) {
                   c.run.output_dir = fs::path(std::string(Trim(v)));
                 },
                 [](const ExperimentConfig& c) { return c.run.output_dir.string(); }});
    f.push_back(Bool("run", "select_best_on_val",
                     [](auto& c) -> auto& { return c.run.select_best_on_val; }));
    // [dataset]
    f.push_back(Text("dataset", "source", [](auto& c) -> auto& { return c.dataset.source; }));
    f.push_back(DataPath("dataset", "images", [](auto& c) -> auto& { return c.dataset.images; }));
    f.push_back(DataPath("dataset", "labels", [](auto& c) -> auto& { return c.dataset.labels; }));
    f.push_back(DataPath("dataset", "test_images",
                         [](auto& c) -> auto& { return c.dataset.test_images; }));
    f.push_back(DataPath("dataset", "test_labels",
                         [](auto& c) -> auto& { return c.dataset.test_labels; }));
    f.push_back(Number<size_t>("dataset", "train_size",
                               [](auto& c) -> auto& { return c.dataset.train_size; }));
    f.push_back(Number<size_t>("dataset", "unbiased_size",
                               [](auto& c) -> auto& { return c.dataset.unbiased_size; }));
    f.push_back(Number<double>("dataset", "val_fraction",
                               [](auto& c) -> auto& { return c.dataset.val_fraction; }));
    f.push_back(Number<double>("dataset", "conflict_ratio",
                               [](auto& c) -> auto& { return c.dataset.conflict_ratio; }));
    f.push_back(Number<float>("dataset", "noise_sigma",
                              [](auto& c) -> auto& { return c.dataset.palette.noise_sigma; }));
    f.push_back(Number<int>("dataset", "num_classes",
                            [](auto& c) -> auto& { return c.dataset.num_classes; }));
    f.push_back({"dataset", "palette",
                 [](ExperimentConfig& c, std::string_view v, const ParseContext&) {
                   c.dataset.palette.colors = ParsePalette(v);
                 },
                 [](const ExperimentConfig& c) { return FormatPalette(c.dataset.palette.colors); }});
    // [model]
    f.push_back(Number<size_t>("model", "deep_depth", [](auto& c) -> auto& { return c.model.deep_depth; }));
    f.push_back(Number<size_t>("model", "shallow_depth",
                               [](auto& c) -> auto& { return c.model.shallow_depth; }));
    f.push_back(Number<size_t>("model", "target_depth",
                               [](auto& c) -> auto& { return c.model.target_depth; }));
    f.push_back(Number<size_t>("model", "erm_depth", [](auto& c) -> auto& { return c.model.erm_depth; }));
    f.push_back(Number<size_t>("model", "deep_width", [](auto& c) -> auto& { return c.model.deep_width; }));
    f.push_back(Number<size_t>("model", "shallow_width",
                               [](auto& c) -> auto& { return c.model.shallow_width; }));
    f.push_back(Number<size_t>("model", "target_width",
                               [](auto& c) -> auto& { return c.model.target_width; }));
    f.push_back(Number<size_t>("model", "erm_width", [](auto& c) -> auto& { return c.model.erm_width; }));
    f.push_back(Number<size_t>("model", "feature_dim",
                               [](auto& c) -> auto& { return c.model.feature_dim; }));
    f.push_back(Bool("model", "allow_equal_depth",
                     [](auto& c) -> auto& { return c.model.allow_equal_depth; }));
    // [stage1], [stage2], [erm]
    AddStageFields(f, "stage1", &ExperimentConfig::stage1);
    AddStageFields(f, "stage2", &ExperimentConfig::stage2);
    f.push_back(Number<float>("stage2", "lambda", [](auto& c) -> auto& { return c.stage2.lambda; }));
    f.push_back(Number<float>("stage2", "tau", [](auto& c) -> auto& { return c.stage2.tau; }));
    f.push_back(Bool("stage2", "use_target_loss",
                     [](auto& c) -> auto& { return c.stage2.use_target_loss; }));
    f.push_back(Bool("stage2", "use_distillation",
                     [](auto& c) -> auto& { return c.stage2.use_distillation; }));
    f.push_back(Bool("erm", "enabled", [](auto& c) -> auto& { return c.erm_enabled; }));
    AddStageFields(f, "erm", &ExperimentConfig::erm);
    // [probe]
    f.push_back({"probe", "schedule",
                 [](ExperimentConfig& c, std::string_view v, const ParseContext&) {
                   c.probe.schedule = ParseList<int64_t>(v);
                 },
                 [](const ExperimentConfig& c) { return FormatList(c.probe.schedule); }});
    f.push_back({"probe", "depths",
                 [](ExperimentConfig& c, std::string_view v, const ParseContext&) {
                   c.probe.depths = ParseList<size_t>(v);
                 },
                 [](const ExperimentConfig& c) { return FormatList(c.probe.depths); }});
    f.push_back(Number<int>("probe", "erm_epochs", [](auto& c) -> auto& { return c.probe.erm_epochs; }));
    f.push_back(Number<int>("probe", "epochs", [](auto& c) -> auto& { return c.probe.config.epochs; }));
    f.push_back(Number<float>("probe", "learning_rate",
                              [](auto& c) -> auto& { return c.probe.config.learning_rate; }));
    f.push_back(Number<float>("probe", "momentum",
                              [](auto& c) -> auto& { return c.probe.config.momentum; }));
    f.push_back(Number<float>("probe", "weight_decay",
                              [](auto& c) -> auto& { return c.probe.config.weight_decay; }));
    f.push_back(Number<size_t>("probe", "full_batch_limit",
                               [](auto& c) -> auto& { return c.probe.config.full_batch_limit; }));
    f.push_back(Number<size_t>("probe", "batch_size",
                               [](auto& c) -> auto& { return c.probe.config.batch_size; }));
    f.push_back(Bool("probe", "standardize",
                     [](auto& c) -> auto& { return c.probe.config.standardize; }));
    // [ablation]
    f.push_back(Text("ablation", "kind", [](auto& c) -> auto& { return c.ablation.kind; }));
    f.push_back({"ablation", "ratios",
                 [](ExperimentConfig& c, std::string_view v, const ParseContext&) {
                   c.ablation.ratios = ParseList<double>(v);
                 },
                 [](const ExperimentConfig& c) { return FormatList(c.ablation.ratios); }});
    f.push_back({"ablation", "widths",
                 [](ExperimentConfig& c, std::string_view v, const ParseContext&) {
                   c.ablation.widths = ParseWidthPairs(v);
                 },
                 [](const ExperimentConfig& c) { return FormatWidthPairs(c.ablation.widths); }});
    return f;
  }();
  return fields;
}

bool KnownSection(std::string_view section) {
  for (const Field& field : Fields()) {
    if (field.section == section) return true;
  }
  return false;
}

const Field* FindField(std::string_view section, std::string_view key) {
  for (const Field& field : Fields()) {
    if (field.section == section && field.key == key) return &field;
  }
  return nullptr;
}

void Require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void CheckDataFile(const fs::path& path, std::string_view key) {
  std::error_code ec;
  Require(fs::is_regular_file(path, ec),
          "dataset." + std::string(key) + ": file '" + path.string() + "' not found");
}

}  // namespace

void ValidateConfig(const ExperimentConfig& c) {
  Require(!c.run.run_id.empty() &&
              c.run.run_id.find_first_of(",\n\r\"") == std::string::npos,
          "run.run_id must be non-empty without commas, quotes or newlines");
  Require(!c.run.output_dir.empty(), "run.output_dir must not be empty");

  const DatasetSpec& d = c.dataset;
  Require(!d.source.empty(), "missing mandatory key dataset.source");
  Require(d.source == "idx" || d.source == "synthetic",
          "dataset.source must be 'idx' or 'synthetic', got '" + d.source + "'");
  if (d.source == "idx") {
    Require(!d.images.empty(), "dataset.images is required for source = idx");
    Require(!d.labels.empty(), "dataset.labels is required for source = idx");
    CheckDataFile(d.images, "images");
    CheckDataFile(d.labels, "labels");
    Require(d.test_images.empty() == d.test_labels.empty(),
            "dataset.test_images and dataset.test_labels go together");
    if (!d.test_images.empty()) {
      CheckDataFile(d.test_images, "test_images");
      CheckDataFile(d.test_labels, "test_labels");
    } else {
      Require(d.unbiased_size > 0, "dataset.unbiased_size must be > 0 without test files");
    }
  } else {
    Require(d.num_classes >= 2, "dataset.num_classes must be >= 2");
    Require(d.train_size > 0, "dataset.train_size must be > 0 for source = synthetic");
    Require(d.unbiased_size > 0, "dataset.unbiased_size must be > 0 for source = synthetic");
  }
  Require(d.conflict_ratio >= 0.0 && d.conflict_ratio <= 0.5,
          "dataset.conflict_ratio must be in [0, 0.5]");
  Require(d.val_fraction > 0.0 && d.val_fraction < 1.0,
          "dataset.val_fraction must be in (0, 1)");
  Require(d.palette.noise_sigma >= 0.0f, "dataset.noise_sigma must be >= 0");
  const size_t classes = d.source == "synthetic" ? static_cast<size_t>(d.num_classes) : 10;
  Require(d.palette.size() >= classes,
          "dataset.palette needs at least " + std::to_string(classes) + " colors");
  try {
    d.palette.Validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("dataset.palette: ") + e.what());
  }

  const ModelSpec& m = c.model;
  for (auto [name, depth] : {std::pair{"deep_depth", m.deep_depth},
                             std::pair{"shallow_depth", m.shallow_depth},
                             std::pair{"target_depth", m.target_depth},
                             std::pair{"erm_depth", m.erm_depth}}) {
    Require(depth >= 2, std::string("model.") + name + " must be >= 2");
  }
  for (auto [name, width] : {std::pair{"deep_width", m.deep_width},
                             std::pair{"shallow_width", m.shallow_width},
                             std::pair{"target_width", m.target_width},
                             std::pair{"erm_width", m.erm_width},
                             std::pair{"feature_dim", m.feature_dim}}) {
    Require(width >= 1, std::string("model.") + name + " must be >= 1");
  }
  if (m.allow_equal_depth) {
    Require(m.deep_depth >= m.shallow_depth,
            "model: requires depth(phi_b) >= depth(phi_d) even with allow_equal_depth");
  } else {
    Require(m.deep_depth > m.shallow_depth,
            "model: requires depth(phi_b) > depth(phi_d) (deep_depth " +
                std::to_string(m.deep_depth) + ", shallow_depth " +
                std::to_string(m.shallow_depth) + "); set allow_equal_depth for the "
                "same-depth ablation");
  }

  c.stage1.Validate();
  c.stage2.Validate();
  c.erm.Validate();
  Require(c.stage2.use_target_loss || c.stage2.use_distillation,
          "stage2: at least one of use_target_loss and use_distillation must be true");

  c.probe.config.Validate();
  for (int64_t step : c.probe.schedule) Require(step >= 0, "probe.schedule steps must be >= 0");
  for (size_t depth : c.probe.depths) Require(depth >= 2, "probe.depths must be >= 2");
  Require(c.probe.erm_epochs >= 0, "probe.erm_epochs must be >= 0");

  static const std::set<std::string> kinds = {"none", "same-depth", "loss-components",
                                              "param-count", "ratio-sweep"};
  Require(kinds.count(c.ablation.kind) == 1,
          "ablation.kind must be one of none, same-depth, loss-components, param-count, "
          "ratio-sweep; got '" + c.ablation.kind + "'");
  for (double ratio : c.ablation.ratios) {
    Require(ratio >= 0.0 && ratio <= 0.5, "ablation.ratios must lie in [0, 0.5]");
  }
  for (auto [deep, shallow] : c.ablation.widths) {
    Require(deep >= 1 && shallow >= 1, "ablation.widths must be positive");
  }
}

ExperimentConfig ParseConfigText(std::string_view text, const fs::path& base_dir,
                                 std::string_view origin, std::string_view default_run_id) {
  ExperimentConfig config;
  config.run.run_id = std::string(default_run_id);
  config.stage1.stage = Stage::kStage1;
  config.stage2.stage = Stage::kStage2;
  config.erm.stage = Stage::kErm;
  const ParseContext context{base_dir};
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  size_t line_number = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_number;
    const std::string where = std::string(origin) + ":" + std::to_string(line_number);
    std::string_view line = raw;
    if (const size_t hash = line.find_first_of("#;"); hash != std::string_view::npos) {
      // ';' also separates palette colors, so only a leading ';' is a comment.
      if (line[hash] == '#' || Trim(line.substr(0, hash)).empty()) line = line.substr(0, hash);
    }
    line = Trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = std::string(Trim(line.substr(1, line.size() - 2)));
      if (!KnownSection(section)) {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(where + ": expected 'key = value'");
    }
    const std::string key(Trim(line.substr(0, eq)));
    if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside a section");
    const Field* field = FindField(section, key);
    if (field == nullptr) {
      throw ConfigError(where + ": unknown key '" + key + "' in section [" + section + "]");
    }
    if (!seen.emplace(section, key).second) {
      throw ConfigError(where + ": duplicate key '" + section + "." + key + "'");
    }
    try {
      field->set(config, line.substr(eq + 1), context);
    } catch (const BadValue& bad) {
      throw ConfigError(where + ": " + section + "." + key + ": " + bad.what);
    }
  }
  if (!seen.count({"run", "output_dir"})) config.run.output_dir = fs::path("runs") / config.run.run_id;
  ValidateConfig(config);
  return config;
}

ExperimentConfig ParseConfig(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return ParseConfigText(buffer.str(), fs::absolute(path).parent_path(), path.string(),
                         path.stem().string());
}

std::string ResolvedConfigText(const ExperimentConfig& config) {
  std::string out;
  std::string_view section;
  for (const Field& field : Fields()) {
    if (field.section != section) {
      if (!section.empty()) out += "\n";
      section = field.section;
      out += "[" + std::string(section) + "]\n";
    }
    out += std::string(field.key) + " = " + field.get(config) + "\n";
  }
  return out;
}

uint64_t ConfigHash(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  copy.run.output_dir = ".";
  const std::string text = ResolvedConfigText(copy);
  uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string ConfigHashHex(uint64_t hash) {
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016llx", static_cast<unsigned long long>(hash));
  return buffer;
}

void ApplySeed(ExperimentConfig& config, uint64_t seed) { config.run.seed = seed; }

}  // namespace dndm
