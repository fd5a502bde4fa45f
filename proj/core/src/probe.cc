#include "dndm/probe.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "dndm/errors.h"
#include "dndm/graph.h"
#include "dndm/optimizer.h"
#include "dndm/random.h"

namespace dndm {

void ProbeConfig::Validate() const {
  if (epochs < 0) throw ConfigError("probe: epochs must be >= 0");
  if (!(learning_rate > 0.0f)) throw ConfigError("probe: learning_rate must be > 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw ConfigError("probe: momentum must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0f)) throw ConfigError("probe: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("probe: batch_size must be >= 1");
}

Tensor LinearProbe::Logits(const Tensor& features) const {
  Graph graph;
  const Var logits = graph.Linear(graph.Constant(features), graph.Constant(layer.weight),
                                  graph.Constant(layer.bias));
  return graph.value(logits).Detached();
}

std::vector<int> LinearProbe::Predict(const Tensor& features) const {
  const Tensor logits = Logits(features);
  std::vector<int> out(logits.rows());
  for (size_t r = 0; r < logits.rows(); ++r) {
    out[r] = static_cast<int>(ArgmaxLowestIndex<float>(logits.row(r)));
  }
  return out;
}

namespace {

Tensor GatherRows(const Tensor& features, std::span<const size_t> rows) {
  const size_t cols = features.cols();
  Tensor out({rows.size(), cols});
  for (size_t i = 0; i < rows.size(); ++i) {
    std::span<const float> src = features.row(rows[i]);
    std::copy(src.begin(), src.end(), out.data() + i * cols);
  }
  return out;
}

struct Standardizer {
  std::vector<float> mean;
  std::vector<float> inv_std;
};

Standardizer FitStandardizer(const Tensor& features) {
  const size_t rows = features.rows();
  const size_t cols = features.cols();
  std::vector<double> sum(cols, 0.0), sq(cols, 0.0);
  for (size_t r = 0; r < rows; ++r) {
    std::span<const float> row = features.row(r);
    for (size_t c = 0; c < cols; ++c) sum[c] += row[c];
  }
  Standardizer s{std::vector<float>(cols, 0.0f), std::vector<float>(cols, 1.0f)};
  if (rows == 0) return s;
  for (size_t c = 0; c < cols; ++c) s.mean[c] = static_cast<float>(sum[c] / rows);
  for (size_t r = 0; r < rows; ++r) {
    std::span<const float> row = features.row(r);
    for (size_t c = 0; c < cols; ++c) {
      const double d = row[c] - s.mean[c];
      sq[c] += d * d;
    }
  }
  for (size_t c = 0; c < cols; ++c) {
    const double sd = std::sqrt(sq[c] / rows);
    if (sd > 1e-6) s.inv_std[c] = static_cast<float>(1.0 / sd);
  }
  return s;
}

Tensor ApplyStandardizer(const Standardizer& s, const Tensor& features) {
  Tensor out({features.rows(), features.cols()});
  const size_t cols = features.cols();
  for (size_t r = 0; r < features.rows(); ++r) {
    std::span<const float> row = features.row(r);
    for (size_t c = 0; c < cols; ++c) {
      out.data()[r * cols + c] = (row[c] - s.mean[c]) * s.inv_std[c];
    }
  }
  return out;
}

// z = (x - m) * k feeds W, b; the same logits from raw x use W' = diag(k) W
// and b' = b - m^T W'.
void FoldStandardizer(const Standardizer& s, LinearLayer& layer) {
  const size_t in = layer.weight.rows();
  const size_t out = layer.weight.cols();
  float* w = layer.weight.data();
  float* b = layer.bias.data();
  for (size_t i = 0; i < in; ++i) {
    for (size_t j = 0; j < out; ++j) {
      w[i * out + j] *= s.inv_std[i];
      b[j] -= s.mean[i] * w[i * out + j];
    }
  }
}

// Penultimate features of a whole dataset, evaluated in row chunks.
Tensor DatasetFeatures(const Branch& branch, const BiasedDataset& data) {
  constexpr size_t kChunk = 2048;
  Tensor out({data.size(), branch.feature_dim()});
  for (size_t start = 0; start < data.size(); start += kChunk) {
    const size_t rows = std::min(kChunk, data.size() - start);
    std::span<const float> src =
        data.pixels().subspan(start * data.feature_dim(), rows * data.feature_dim());
    const Tensor x({rows, data.feature_dim()}, std::vector<float>(src.begin(), src.end()));
    const Tensor features = PenultimateFeatures(branch, x);
    std::copy(features.values().begin(), features.values().end(),
              out.data() + start * branch.feature_dim());
  }
  return out;
}

const std::vector<int>& AttributeLabels(const BiasedDataset& data, Attribute attribute) {
  return attribute == Attribute::kClass ? data.labels() : data.bias_labels();
}

}  // namespace

LinearProbe TrainLinearProbe(const Tensor& features, std::span<const int> labels,
                             int num_classes, const ProbeConfig& config) {
  config.Validate();
  if (features.attached()) {
    throw ValidationError("probe features must be detached from any graph");
  }
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw ShapeError("probe: features " + ShapeToString(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  LinearProbe probe{LinearLayer{Tensor({features.cols(), static_cast<size_t>(num_classes)}),
                                Tensor({static_cast<size_t>(num_classes)})}};
  const Tensor one_hot = OneHot(labels, num_classes);
  std::optional<Standardizer> standardizer;
  Tensor standardized;
  if (config.standardize) {
    standardizer = FitStandardizer(features);
    standardized = ApplyStandardizer(*standardizer, features);
  }
  const Tensor& inputs = standardizer ? standardized : features;
  SgdOptimizer optimizer({{"probe.weight", &probe.layer.weight},
                          {"probe.bias", &probe.layer.bias}},
                         {config.learning_rate, config.momentum, config.weight_decay});

  auto step = [&](const Tensor& x, const Tensor& y) {
    optimizer.ZeroGrad();
    Graph graph;
    const Var logits = graph.Linear(graph.Constant(x), graph.Parameter(probe.layer.weight),
                                    graph.Parameter(probe.layer.bias));
    graph.Backward(graph.SoftmaxCrossEntropy(logits, y));
    optimizer.Step();
  };

  const size_t n = labels.size();
  if (n <= config.full_batch_limit) {
    for (int epoch = 0; epoch < config.epochs; ++epoch) step(inputs, one_hot);
  } else {
    std::vector<size_t> order(n);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), size_t{0});
      Rng rng = MakeRng(config.seed, "probe.batches", static_cast<uint64_t>(epoch));
      std::shuffle(order.begin(), order.end(), rng);
      for (size_t start = 0; start < n; start += config.batch_size) {
        const std::span<const size_t> rows =
            std::span<const size_t>(order).subspan(start, std::min(config.batch_size, n - start));
        step(GatherRows(inputs, rows), GatherRows(one_hot, rows));
      }
    }
  }
  probe.layer.weight.ClearGrad();
  probe.layer.bias.ClearGrad();
  if (standardizer) FoldStandardizer(*standardizer, probe.layer);
  return probe;
}

double ProbeAccuracy(const LinearProbe& probe, const Tensor& features,
                     std::span<const int> labels) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw ShapeError("probe accuracy: features " + ShapeToString(features.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  const std::vector<int> predictions = probe.Predict(features);
  size_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::string_view AttributeName(Attribute attribute) {
  return attribute == Attribute::kClass ? "class" : "bias";
}

double BranchDecodability(const Branch& branch, const BiasedDataset& fit,
                          const BiasedDataset& score, Attribute attribute,
                          const ProbeConfig& config) {
  const LinearProbe probe =
      TrainLinearProbe(DatasetFeatures(branch, fit), AttributeLabels(fit, attribute),
                       fit.num_classes(), config);
  return ProbeAccuracy(probe, DatasetFeatures(branch, score),
                       AttributeLabels(score, attribute));
}

DecodabilityRecorder::DecodabilityRecorder(
    std::vector<std::pair<std::string, const Branch*>> branches, const BiasedDataset& val,
    const BiasedDataset& test, std::vector<int64_t> schedule, ProbeConfig config)
    : branches_(std::move(branches)),
      val_(&val),
      test_(&test),
      schedule_(std::move(schedule)),
      config_(config) {
  config_.Validate();
  std::sort(schedule_.begin(), schedule_.end());
  schedule_.erase(std::unique(schedule_.begin(), schedule_.end()), schedule_.end());
}

bool DecodabilityRecorder::Due(int64_t step) const {
  return std::binary_search(schedule_.begin(), schedule_.end(), step);
}

void DecodabilityRecorder::Capture(int64_t step) {
  for (const auto& [name, branch] : branches_) {
    const Tensor fit = DatasetFeatures(*branch, *val_);
    const Tensor score = DatasetFeatures(*branch, *test_);
    for (Attribute attribute : {Attribute::kClass, Attribute::kBias}) {
      ProbeConfig config = config_;
      config.seed = DeriveSeed(config_.seed, name + "." + std::string(AttributeName(attribute)),
                               static_cast<uint64_t>(step));
      const LinearProbe probe = TrainLinearProbe(
          fit, AttributeLabels(*val_, attribute), val_->num_classes(), config);
      results_.push_back(
          {step, name, std::string(AttributeName(attribute)),
           std::string(SplitTagName(test_->split())),
           ProbeAccuracy(probe, score, AttributeLabels(*test_, attribute))});
    }
  }
  last_captured_ = step;
}

void DecodabilityRecorder::MaybeCapture(int64_t step) {
  if (Due(step) && step != last_captured_) Capture(step);
}

void WriteDecodabilityCsv(std::span<const ProbeResult> results,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "step,branch,attribute,split,accuracy\n";
  out.precision(17);
  for (const ProbeResult& r : results) {
    out << r.step << ',' << r.branch << ',' << r.attribute << ',' << r.split << ','
        << r.accuracy << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<ProbeResult> ReadDecodabilityCsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "step,branch,attribute,split,accuracy") {
    throw FormatError(path.string() + ": unexpected decodability header");
  }
  std::vector<ProbeResult> results;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream fields(line);
    std::string step, accuracy;
    ProbeResult r;
    if (!std::getline(fields, step, ',') || !std::getline(fields, r.branch, ',') ||
        !std::getline(fields, r.attribute, ',') || !std::getline(fields, r.split, ',') ||
        !std::getline(fields, accuracy)) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
    try {
      r.step = std::stoll(step);
      r.accuracy = std::stod(accuracy);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace dndm
