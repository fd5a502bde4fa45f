#include "dndm/training.h"

#include <cmath>
#include <optional>
#include <string>

#include "dndm/errors.h"
#include "dndm/random.h"

namespace dndm {

std::string_view StageName(Stage stage) {
  switch (stage) {
    case Stage::kStage1: return "stage1";
    case Stage::kStage2: return "stage2";
    case Stage::kErm: return "erm";
  }
  return "unknown";
}

TrainConfig TrainConfig::Stage1Defaults() {
  TrainConfig config;
  config.stage = Stage::kStage1;
  config.weight_decay = 1e-3f;
  return config;
}

TrainConfig TrainConfig::Stage2Defaults() {
  TrainConfig config;
  config.stage = Stage::kStage2;
  config.weight_decay = 0.0f;
  return config;
}

TrainConfig TrainConfig::ErmDefaults() {
  TrainConfig config;
  config.stage = Stage::kErm;
  config.weight_decay = 1e-3f;
  return config;
}

void TrainConfig::Validate() const {
  const std::string where(StageName(stage));
  if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate)) {
    throw ConfigError(where + ": learning_rate must be > 0");
  }
  if (batch_size < 1) throw ConfigError(where + ": batch_size must be >= 1");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw ConfigError(where + ": momentum must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0f)) {
    throw ConfigError(where + ": weight_decay must be >= 0");
  }
  if (epochs < 0) throw ConfigError(where + ": epochs must be >= 0");
  if (!(lambda >= 0.0f && lambda <= 1.0f)) {
    throw ConfigError(where + ": lambda must be in [0,1], got " +
                      std::to_string(lambda));
  }
  if (!(tau > 0.0f) || !std::isfinite(tau)) {
    throw ConfigError(where + ": tau must be > 0, got " + std::to_string(tau));
  }
  for (float gate : gates) {
    if (gate != 0.0f && gate != 1.0f) {
      throw ConfigError(where + ": gates must be 0 or 1");
    }
  }
}

uint64_t EpochSeed(const TrainConfig& config, int epoch) {
  return DeriveSeed(config.seed, StageName(config.stage),
                    static_cast<uint64_t>(epoch));
}

Var DistillationLoss(Graph& graph, Var student_logits, Var teacher_logits, float tau) {
  if (!(tau > 0.0f)) {
    throw ValidationError("distillation temperature must be > 0, got " +
                          std::to_string(tau));
  }
  const Tensor& student = graph.value(student_logits);
  const Tensor& teacher = graph.value(teacher_logits);
  if (student.shape() != teacher.shape()) {
    throw ShapeError("distillation: student " + ShapeToString(student.shape()) +
                     " vs teacher " + ShapeToString(teacher.shape()));
  }
  Tensor teacher_probs = teacher.Detached();
  for (float& v : teacher_probs.values()) v /= tau;
  teacher_probs = SoftmaxRows(teacher_probs);
  const Var softened = graph.Scale(student_logits, 1.0f / tau);
  return graph.SoftTargetCrossEntropy(softened, teacher_probs);
}

namespace {

std::vector<NamedParameter> Concat(std::vector<NamedParameter> a,
                                   std::vector<NamedParameter> b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void CheckFinite(double loss, Stage stage, int epoch, int64_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingError(std::string(StageName(stage)) +
                        ": non-finite loss at epoch " + std::to_string(epoch) +
                        ", step " + std::to_string(step));
  }
}

TrainConfig WithStage(TrainConfig config, Stage stage) {
  config.stage = stage;
  config.Validate();
  return config;
}

}  // namespace

Stage1Trainer::Stage1Trainer(Branch& deep, Branch& shallow, Head& head,
                             const TrainConfig& config)
    : deep_(&deep),
      shallow_(&shallow),
      head_(&head),
      config_(WithStage(config, Stage::kStage1)),
      optimizer_(Concat(Concat(deep.Parameters("deep"), shallow.Parameters("shallow")),
                        head.Parameters("head")),
                 config_.sgd()) {
  const bool equal = deep.depth() == shallow.depth();
  if (deep.depth() < shallow.depth() || (equal && !config_.allow_equal_depth)) {
    throw ConfigError("stage1 requires depth(phi_b) > depth(phi_d), got " +
                      std::to_string(deep.depth()) + " vs " +
                      std::to_string(shallow.depth()) +
                      (equal ? " (set allow_equal_depth for the same-depth ablation)"
                             : ""));
  }
  if (config_.gates != std::array<float, 2>{1.0f, 1.0f}) {
    throw ConfigError("stage1 trains with both gates set to 1");
  }
  if (deep.frozen() || shallow.frozen() || head.frozen()) {
    throw ConfigError("stage1 branches and head must be trainable");
  }
}

double Stage1Trainer::RunEpoch(const BiasedDataset& data, int epoch) {
  BatchSampler sampler(data, config_.batch_size, EpochSeed(config_, epoch));
  const GatedBranch branches[] = {{deep_, config_.gates[0]},
                                  {shallow_, config_.gates[1]}};
  double total = 0.0;
  for (size_t b = 0; b < sampler.num_batches(); ++b) {
    const Batch batch = sampler.batch(b);
    optimizer_.ZeroGrad();
    Graph graph;
    const Var x = graph.Constant(batch.pixels);
    const GatedOutput out = GatedForward(graph, x, branches, *head_);
    const Var loss = graph.SoftmaxCrossEntropy(out.logits, batch.one_hot);
    const double value = graph.value(loss)[0];
    CheckFinite(value, Stage::kStage1, epoch, step_);
    graph.Backward(loss);
    optimizer_.Step();
    total += value;
    ++step_;
    if (callback_) callback_(step_);
  }
  return total / static_cast<double>(sampler.num_batches());
}

Stage2Trainer::Stage2Trainer(const Branch& deep, const Branch& shallow,
                             const Head& head, Branch& target, Head& target_head,
                             const TrainConfig& config)
    : deep_(&deep),
      shallow_(&shallow),
      head_(&head),
      target_(&target),
      target_head_(&target_head),
      config_(WithStage(config, Stage::kStage2)),
      optimizer_(Concat(target.Parameters("target"),
                        target_head.Parameters("target_head")),
                 config_.sgd()) {
  if (!deep.frozen() || !shallow.frozen() || !head.frozen()) {
    throw ConfigError("stage2 requires frozen phi_b, phi_d and f");
  }
  if (target.frozen() || target_head.frozen()) {
    throw ConfigError("stage2 target branch and head must be trainable");
  }
  if (!config_.use_target_loss && !config_.use_distillation) {
    throw ConfigError("stage2 needs at least one of L_t and L_dist");
  }
}

double Stage2Trainer::RunEpoch(const BiasedDataset& data, int epoch) {
  BatchSampler sampler(data, config_.batch_size, EpochSeed(config_, epoch));
  losses_.clear();
  double total = 0.0;
  for (size_t b = 0; b < sampler.num_batches(); ++b) {
    const Batch batch = sampler.batch(b);
    optimizer_.ZeroGrad();
    Graph graph;
    const Var x = graph.Constant(batch.pixels);

    // Shared target features feed both the PoE term and the student.
    const Var target_features = target_->Forward(graph, x);
    Stage2BatchLoss parts;
    std::optional<Var> loss;
    if (config_.use_target_loss) {
      std::optional<Var> features;
      if (config_.gates[0] != 0.0f) features = deep_->ForwardConstant(graph, x);
      if (config_.gates[1] != 0.0f) {
        features = features ? graph.Add(*features, target_features) : target_features;
      }
      if (!features) {
        features = graph.Constant(Tensor({batch.size(), target_head_->feature_dim()}));
      }
      const Var logits = target_head_->Forward(graph, *features);
      const Var target_loss = graph.SoftmaxCrossEntropy(logits, batch.one_hot);
      parts.target = graph.value(target_loss)[0];
      loss = target_loss;
    }
    if (config_.use_distillation) {
      const Var student = target_head_->Forward(graph, target_features);
      const Var teacher =
          head_->ForwardConstant(graph, shallow_->ForwardConstant(graph, x));
      const Var dist = DistillationLoss(graph, student, teacher, config_.tau);
      parts.distillation = graph.value(dist)[0];
      const Var weighted = graph.Scale(dist, config_.lambda);
      loss = loss ? graph.Add(*loss, weighted) : weighted;
    }
    parts.total = graph.value(*loss)[0];
    CheckFinite(parts.total, Stage::kStage2, epoch, step_);
    graph.Backward(*loss);
    optimizer_.Step();
    losses_.push_back(parts);
    total += parts.total;
    ++step_;
  }
  return total / static_cast<double>(sampler.num_batches());
}

ErmTrainer::ErmTrainer(Branch& branch, Head& head, const TrainConfig& config)
    : branch_(&branch),
      head_(&head),
      config_(WithStage(config, Stage::kErm)),
      optimizer_(Concat(branch.Parameters("erm"), head.Parameters("erm_head")),
                 config_.sgd()) {}

double ErmTrainer::RunEpoch(const BiasedDataset& data, int epoch) {
  BatchSampler sampler(data, config_.batch_size, EpochSeed(config_, epoch));
  const GatedBranch branches[] = {{branch_, 1.0f}};
  double total = 0.0;
  for (size_t b = 0; b < sampler.num_batches(); ++b) {
    const Batch batch = sampler.batch(b);
    optimizer_.ZeroGrad();
    Graph graph;
    const GatedOutput out =
        GatedForward(graph, graph.Constant(batch.pixels), branches, *head_);
    const Var loss = graph.SoftmaxCrossEntropy(out.logits, batch.one_hot);
    const double value = graph.value(loss)[0];
    CheckFinite(value, Stage::kErm, epoch, step_);
    graph.Backward(loss);
    optimizer_.Step();
    total += value;
    ++step_;
    if (callback_) callback_(step_);
  }
  return total / static_cast<double>(sampler.num_batches());
}

std::vector<double> TrainErm(const BiasedDataset& data, Branch& branch, Head& head,
                             const TrainConfig& config) {
  ErmTrainer trainer(branch, head, config);
  std::vector<double> losses;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    losses.push_back(trainer.RunEpoch(data, epoch));
  }
  return losses;
}

}  // namespace dndm
