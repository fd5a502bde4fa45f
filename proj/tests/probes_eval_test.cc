#include <algorithm>
#include <filesystem>
#include <map>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <gtest/gtest.h>

#include "dndm/config.h"
#include "dndm/dataset.h"
#include "dndm/errors.h"
#include "dndm/evaluation.h"
#include "dndm/experiment.h"
#include "dndm/graph.h"
#include "dndm/model.h"
#include "dndm/probe.h"
#include "dndm/training.h"
#include "support/oracles.h"

namespace dndm {
namespace {

using testing::RandomTensor;

std::vector<int> BalancedLabels(size_t n, int m) {
  std::vector<int> labels(n);
  for (size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<size_t>(m));
  return labels;
}

Tensor PixelMatrix(const BiasedDataset& d) {
  return Tensor({d.size(), d.feature_dim()},
                std::vector<float>(d.pixels().begin(), d.pixels().end()));
}

TEST(LinearProbeTest, ConstantFeaturesGiveChance) {
  const std::vector<int> labels = BalancedLabels(1000, 10);
  Tensor features({1000, 5});
  for (float& v : features.values()) v = 3.0f;
  for (bool standardize : {true, false}) {
    ProbeConfig c;
    c.standardize = standardize;
    const LinearProbe probe = TrainLinearProbe(features, labels, 10, c);
    EXPECT_NEAR(ProbeAccuracy(probe, features, labels), 0.1, 1e-9) << standardize;
  }
}

TEST(LinearProbeTest, OneHotFeaturesAreDecodable) {
  const std::vector<int> labels = BalancedLabels(500, 10);
  for (bool standardize : {true, false}) {
    ProbeConfig c;
    c.standardize = standardize;
    const Tensor features = OneHot(labels, 10);
    const LinearProbe probe = TrainLinearProbe(features, labels, 10, c);
    EXPECT_GE(ProbeAccuracy(probe, features, labels), 0.99) << standardize;
  }
}

TEST(LinearProbeTest, StandardizationCopesWithLargeOffsets) {
  // Class signal of +-0.01 riding on an offset of 1000.
  std::mt19937_64 rng(1);
  std::normal_distribution<float> noise(0.0f, 0.002f);
  const std::vector<int> labels = BalancedLabels(400, 2);
  Tensor features({400, 3});
  for (size_t i = 0; i < 400; ++i) {
    features.at(i, 0) = 1000.0f + (labels[i] == 0 ? -0.01f : 0.01f) + noise(rng);
    features.at(i, 1) = 1000.0f + noise(rng);
    features.at(i, 2) = -500.0f;
  }
  const LinearProbe probe = TrainLinearProbe(features, labels, 2, ProbeConfig{});
  EXPECT_GE(ProbeAccuracy(probe, features, labels), 0.99);
}

TEST(LinearProbeTest, AttachedFeaturesAreRejected) {
  Tensor features({4, 2});
  Graph g;
  const Var v = g.Parameter(features);
  Tensor attached = g.value(g.Relu(v));
  ASSERT_TRUE(attached.attached());
  EXPECT_THROW(TrainLinearProbe(attached, BalancedLabels(4, 2), 2, ProbeConfig{}),
               ValidationError);
}

TEST(LinearProbeTest, SameSeedSameDecoder) {
  std::mt19937_64 rng(2);
  const Tensor features = RandomTensor<float>({600, 8}, rng);
  const std::vector<int> labels = BalancedLabels(600, 3);
  ProbeConfig c;
  c.full_batch_limit = 100;  // exercise the shuffled minibatch path
  c.seed = 77;
  const LinearProbe a = TrainLinearProbe(features, labels, 3, c);
  const LinearProbe b = TrainLinearProbe(features, labels, 3, c);
  EXPECT_TRUE(a.layer.weight.BitwiseEquals(b.layer.weight));
  EXPECT_TRUE(a.layer.bias.BitwiseEquals(b.layer.bias));
  EXPECT_EQ(ProbeAccuracy(a, features, labels), ProbeAccuracy(b, features, labels));
  c.seed = 78;
  const LinearProbe other = TrainLinearProbe(features, labels, 3, c);
  EXPECT_FALSE(a.layer.weight.BitwiseEquals(other.layer.weight));
}

TEST(ProbeAccuracyTest, PerfectDecoder) {
  const std::vector<int> labels = {0, 2, 1, 1};
  LinearProbe identity{{Tensor::Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor({3})}};
  EXPECT_EQ(ProbeAccuracy(identity, OneHot(labels, 3), labels), 1.0);
}

TEST(ProbeAccuracyTest, ConstantLogitsPickClassZero) {
  const std::vector<int> labels = {0, 1, 2, 0, 2, 2, 1, 0};
  LinearProbe flat{{Tensor({4, 3}), Tensor::Vector({0.5f, 0.5f, 0.5f})}};
  std::mt19937_64 rng(3);
  const double freq0 = 3.0 / 8.0;
  EXPECT_DOUBLE_EQ(ProbeAccuracy(flat, RandomTensor<float>({8, 4}, rng), labels), freq0);
}

TEST(ProbeAccuracyTest, RandomDecoderIsNearChance) {
  std::mt19937_64 rng(4);
  const size_t n = 5000;
  const std::vector<int> labels = BalancedLabels(n, 10);
  const LinearProbe random{{RandomTensor<float>({16, 10}, rng), RandomTensor<float>({10}, rng)}};
  const double acc = ProbeAccuracy(random, RandomTensor<float>({n, 16}, rng), labels);
  EXPECT_NEAR(acc, 0.1, testing::BinomialHalfWidth(0.1, n, 3.0));
}

TEST(ProbeAccuracyTest, ShapeMismatchIsAnError) {
  LinearProbe p{{Tensor({2, 2}), Tensor({2})}};
  EXPECT_THROW(ProbeAccuracy(p, Tensor({3, 2}), std::vector<int>{0, 1}), ShapeError);
}

TEST(DecodabilityTest, ShuffledLabelsSitAtTheChanceFloor) {
  const Branch branch = BuildMlp(2352, 64, 2, 5);
  const BiasedDataset fit = MakeSynthetic(10, 2000, 0.0, 6);
  const BiasedDataset score = MakeSynthetic(10, 3000, 0.0, 7);
  std::vector<int> fit_labels = fit.labels(), score_labels = score.labels();
  std::mt19937_64 rng(8);
  std::shuffle(fit_labels.begin(), fit_labels.end(), rng);
  std::shuffle(score_labels.begin(), score_labels.end(), rng);
  const LinearProbe probe = TrainLinearProbe(PenultimateFeatures(branch, PixelMatrix(fit)),
                                             fit_labels, 10, ProbeConfig{});
  const double acc =
      ProbeAccuracy(probe, PenultimateFeatures(branch, PixelMatrix(score)), score_labels);
  EXPECT_NEAR(acc, 0.1, testing::BinomialHalfWidth(0.1, score.size(), 2.576));
}

TEST(DecodabilityTest, ProbingDoesNotMutateTheBranch) {
  const Branch branch = BuildMlp(2352, 32, 3, 9);
  const Branch before = branch;
  const BiasedDataset val = MakeSynthetic(10, 200, 0.0, 10);
  const BiasedDataset test = MakeSynthetic(10, 200, 0.0, 11);
  BranchDecodability(branch, val, test, Attribute::kBias, ProbeConfig{});
  BranchDecodability(branch, val, test, Attribute::kClass, ProbeConfig{});
  EXPECT_TRUE(branch.BitwiseEquals(before));
}

TEST(DecodabilityRecorderTest, StepZeroMatchesUntrainedProbe) {
  const Branch deep = BuildMlp(2352, 32, 4, 12);
  const Branch shallow = BuildMlp(2352, 32, 2, 13);
  const BiasedDataset val = MakeUnbiasedSplit(MakeSyntheticImages(10, 300, 14),
                                              Palette::Default(), 15, SplitTag::kUnbiasedVal);
  const BiasedDataset test =
      MakeUnbiasedSplit(MakeSyntheticImages(10, 300, 16), Palette::Default(), 17);
  DecodabilityRecorder recorder({{"deep", &deep}, {"shallow", &shallow}}, val, test, {0, 5, 5, 2},
                                ProbeConfig{});
  EXPECT_TRUE(recorder.Due(0));
  EXPECT_TRUE(recorder.Due(2));
  EXPECT_FALSE(recorder.Due(3));
  recorder.MaybeCapture(0);
  recorder.MaybeCapture(0);
  recorder.MaybeCapture(1);
  ASSERT_EQ(recorder.results().size(), 4u);
  for (const ProbeResult& r : recorder.results()) {
    EXPECT_EQ(r.step, 0);
    EXPECT_EQ(r.split, "test");
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    const Branch& b = r.branch == "deep" ? deep : shallow;
    const Attribute a = r.attribute == "class" ? Attribute::kClass : Attribute::kBias;
    EXPECT_EQ(r.accuracy, BranchDecodability(b, val, test, a, ProbeConfig{}))
        << r.branch << " " << r.attribute;
  }
}

TEST(DecodabilityRecorderTest, ColorDecodabilityRisesEarlyInBothBranches) {
  // Bundled digits with an even 2,000 / 2,000 probe split.
  ExperimentConfig config =
      ParseConfig(std::filesystem::path(DNDM_SOURCE_DIR) / "configs" / "cmnist_desk.cfg");
  config.dataset.train_size = 6000;
  config.dataset.unbiased_size = 4000;
  config.dataset.val_fraction = 0.5;
  const ExperimentData data = BuildExperimentData(config);
  Branch deep = BuildMlp(2352, 100, 4, 31);
  Branch shallow = BuildMlp(2352, 100, 2, 32);
  Head head = BuildHead(100, 10, 33);
  DecodabilityRecorder recorder({{"deep", &deep}, {"shallow", &shallow}}, data.val, data.test,
                                {0, 100}, ProbeConfig{});
  recorder.MaybeCapture(0);
  Stage1Trainer trainer(deep, shallow, head, TrainConfig::Stage1Defaults());
  trainer.set_step_callback([&](int64_t step) { recorder.MaybeCapture(step); });
  trainer.RunEpoch(data.train, 0);
  trainer.RunEpoch(data.train, 1);
  ASSERT_GE(trainer.step(), 100);
  std::map<std::tuple<std::string, std::string, int64_t>, double> acc;
  for (const ProbeResult& r : recorder.results()) acc[{r.branch, r.attribute, r.step}] = r.accuracy;
  ASSERT_EQ(acc.size(), 8u);
  for (const std::string branch : {"deep", "shallow"}) {
    const double color_rise = acc[{branch, "bias", 100}] - acc[{branch, "bias", 0}];
    const double digit_rise = acc[{branch, "class", 100}] - acc[{branch, "class", 0}];
    EXPECT_GE(color_rise, 0.1) << branch;
    EXPECT_GT(color_rise, digit_rise) << branch;
  }
}

TEST(DecodabilityRecorderTest, CsvRoundTrip) {
  const std::vector<ProbeResult> results = {{0, "deep", "class", "test", 0.1234567890123},
                                            {25, "shallow", "bias", "test", 1.0 / 3.0}};
  const auto path = std::filesystem::temp_directory_path() / "dndm_decodability.csv";
  WriteDecodabilityCsv(results, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,branch,attribute,split,accuracy");
  EXPECT_EQ(ReadDecodabilityCsv(path), results);
  std::filesystem::remove(path);
}

BiasedDataset HandMadeSplit() {
  // (label, bias): three aligned, three conflicting.
  BiasedDataset d(3, 1, 0.0, 1, SplitTag::kUnbiasedTest);
  const float px[] = {0.0f};
  const std::initializer_list<std::pair<int, int>> cells = {{0, 0}, {1, 1}, {2, 2},
                                                            {0, 1}, {1, 2}, {2, 0}};
  for (auto [y, b] : cells) d.Add(px, y, b);
  return d;
}

TEST(EvalReportTest, BiasOracleIsPerfectOnAlignedOnly) {
  const BiasedDataset d = HandMadeSplit();
  const EvalReport r = EvaluatePredictions(d.bias_labels(), d);
  EXPECT_EQ(r.aligned(), 1.0);
  EXPECT_EQ(r.conflicting(), 0.0);
  EXPECT_EQ(r.overall(), 0.5);
  const EvalReport c = EvaluatePredictions(d.labels(), d);
  EXPECT_EQ(c.aligned(), 1.0);
  EXPECT_EQ(c.conflicting(), 1.0);
}

TEST(EvalReportTest, CountsAreConsistent) {
  std::mt19937_64 rng(18);
  const BiasedDataset d = MakeUnbiasedSplit(MakeSyntheticImages(10, 997, 19), Palette::Default(), 20);
  std::uniform_int_distribution<int> guess(0, 9);
  std::vector<int> predictions(d.size());
  for (int& p : predictions) p = guess(rng);
  const EvalReport r = EvaluatePredictions(predictions, d);
  EXPECT_EQ(r.count(), d.size());
  EXPECT_EQ(r.aligned_count + r.conflicting_count, d.size());
  // Exact: both sides are the same ratio of integers.
  EXPECT_EQ(r.overall(),
            static_cast<double>(r.aligned_correct + r.conflicting_correct) / d.size());
  const double weighted = (r.aligned() * r.aligned_count + r.conflicting() * r.conflicting_count) /
                          static_cast<double>(r.count());
  EXPECT_NEAR(r.overall(), weighted, 1e-15);
  for (double v : {r.overall(), r.aligned(), r.conflicting()}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(EvalReportTest, EmptyCellsReportZero) {
  const EvalReport r;
  EXPECT_EQ(r.overall(), 0.0);
  EXPECT_EQ(r.aligned(), 0.0);
  EXPECT_EQ(r.conflicting(), 0.0);
}

TEST(EvaluateBranchTest, MatchesOneHotGatedEnsemble) {
  const Branch deep = BuildMlp(2352, 16, 3, 21);
  const Branch shallow = BuildMlp(2352, 16, 1, 22);
  const Head head = BuildHead(16, 10, 23);
  const BiasedDataset d = MakeSynthetic(10, 300, 0.2, 24);
  const ConstGatedBranch gates[] = {{&deep, 0.0f}, {&shallow, 1.0f}};
  const EvalReport gated = EvaluateGated(gates, head, d);
  const EvalReport alone = EvaluateBranch(shallow, head, d);
  EXPECT_EQ(gated.aligned_correct, alone.aligned_correct);
  EXPECT_EQ(gated.conflicting_correct, alone.conflicting_correct);
  EXPECT_EQ(PredictGated(gates, head, d).size(), d.size());
}

TEST(EvaluateBranchTest, EmptySplitIsAnError) {
  const Branch b = BuildMlp(2352, 8, 1, 25);
  const Head head = BuildHead(8, 10, 26);
  const BiasedDataset empty(10, 2352, 0.0, 1, SplitTag::kUnbiasedTest);
  EXPECT_THROW(EvaluateBranch(b, head, empty), ValidationError);
}

}  // namespace
}  // namespace dndm
