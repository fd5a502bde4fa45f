#ifndef DNDM_TRAINING_H_
#define DNDM_TRAINING_H_

#include <array>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "dndm/batching.h"
#include "dndm/dataset.h"
#include "dndm/graph.h"
#include "dndm/model.h"
#include "dndm/optimizer.h"

namespace dndm {

enum class Stage { kStage1, kStage2, kErm };

std::string_view StageName(Stage stage);

// Hyperparameters of one training stage.
struct TrainConfig {
  Stage stage = Stage::kStage1;
  float learning_rate = 1e-3f;
  size_t batch_size = 64;
  float momentum = 0.9f;
  float weight_decay = 1e-3f;
  int epochs = 100;
  // Weight of the distillation term, in [0, 1].
  float lambda = 0.5f;
  // Distillation temperature, > 0.
  float tau = 1.0f;
  uint64_t seed = 1;
  // Stage 1: (alpha_b, alpha_d); stage 2: (beta_b, beta_t).
  std::array<float, 2> gates = {1.0f, 1.0f};
  // Stage 2 loss terms, for the loss-component ablation.
  bool use_target_loss = true;
  bool use_distillation = true;
  // Lets stage 1 run with depth(deep) == depth(shallow).
  bool allow_equal_depth = false;

  // Stage-1 / stage-2 / ERM defaults for CMNIST.
  static TrainConfig Stage1Defaults();
  static TrainConfig Stage2Defaults();
  static TrainConfig ErmDefaults();

  // Throws ConfigError on out-of-range values.
  void Validate() const;
  SgdOptions sgd() const { return {learning_rate, momentum, weight_decay}; }

  bool operator==(const TrainConfig&) const = default;
};

// Temperature-softened distillation: batch mean of
//   -sum_c softmax(teacher/tau)_c * log softmax(student/tau)_c.
// The teacher is read by value and never receives gradient.
Var DistillationLoss(Graph& graph, Var student_logits, Var teacher_logits, float tau);

// Called after every optimizer update with the number of completed updates.
using StepCallback = std::function<void(int64_t step)>;

// Stage 1: the deep and shallow branches are summed in feature space, passed
// through the shared head and trained jointly with cross-entropy.
class Stage1Trainer {
 public:
  // Throws ConfigError unless depth(deep) > depth(shallow) (or equal depths
  // with allow_equal_depth set).
  Stage1Trainer(Branch& deep, Branch& shallow, Head& head, const TrainConfig& config);

  // One pass over seeded minibatches; returns the mean batch loss.
  double RunEpoch(const BiasedDataset& data, int epoch);

  int64_t step() const { return step_; }
  void set_step_callback(StepCallback callback) { callback_ = std::move(callback); }

 private:
  Branch* deep_;
  Branch* shallow_;
  Head* head_;
  TrainConfig config_;
  SgdOptimizer optimizer_;
  int64_t step_ = 0;
  StepCallback callback_;
};

struct Stage2BatchLoss {
  double total = 0.0;
  double target = 0.0;        // L_t
  double distillation = 0.0;  // L_dist
};

// Stage 2: the target branch and a fresh head (cloned from the stage-1 head)
// are trained against the frozen deep branch with the PoE loss, plus
// distillation from the frozen shallow branch through the frozen stage-1 head.
class Stage2Trainer {
 public:
  // Throws ConfigError unless deep, shallow and head are frozen.
  Stage2Trainer(const Branch& deep, const Branch& shallow, const Head& head,
                Branch& target, Head& target_head, const TrainConfig& config);

  double RunEpoch(const BiasedDataset& data, int epoch);
  // Loss terms of every batch of the last epoch.
  const std::vector<Stage2BatchLoss>& last_epoch_losses() const { return losses_; }
  int64_t step() const { return step_; }

 private:
  const Branch* deep_;
  const Branch* shallow_;
  const Head* head_;
  Branch* target_;
  Head* target_head_;
  TrainConfig config_;
  SgdOptimizer optimizer_;
  std::vector<Stage2BatchLoss> losses_;
  int64_t step_ = 0;
};

// Plain cross-entropy training of a single branch with its head.
class ErmTrainer {
 public:
  ErmTrainer(Branch& branch, Head& head, const TrainConfig& config);

  double RunEpoch(const BiasedDataset& data, int epoch);
  int64_t step() const { return step_; }
  void set_step_callback(StepCallback callback) { callback_ = std::move(callback); }

 private:
  Branch* branch_;
  Head* head_;
  TrainConfig config_;
  SgdOptimizer optimizer_;
  int64_t step_ = 0;
  StepCallback callback_;
};

// Runs config.epochs of ERM; returns the per-epoch mean losses.
std::vector<double> TrainErm(const BiasedDataset& data, Branch& branch, Head& head,
                             const TrainConfig& config);

// Seed of the minibatch permutation for a given stage and epoch.
uint64_t EpochSeed(const TrainConfig& config, int epoch);

}  // namespace dndm

#endif  // DNDM_TRAINING_H_
