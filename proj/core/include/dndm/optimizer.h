#ifndef DNDM_OPTIMIZER_H_
#define DNDM_OPTIMIZER_H_

#include <vector>

#include "dndm/model.h"
#include "dndm/tensor.h"

namespace dndm {

struct SgdOptions {
  float learning_rate = 1e-3f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
};

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   v <- momentum * v + (grad + weight_decay * param)
//   param <- param - learning_rate * v
// Velocities start at zero and mirror the parameter shapes.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<NamedParameter> parameters, SgdOptions options);

  // Applies one update. Every parameter must carry a gradient; a missing one
  // is a TrainingError naming it.
  void Step();
  void ZeroGrad();

  const std::vector<NamedParameter>& parameters() const { return parameters_; }
  const std::vector<Tensor>& velocities() const { return velocities_; }
  const SgdOptions& options() const { return options_; }

 private:
  std::vector<NamedParameter> parameters_;
  std::vector<Tensor> velocities_;
  SgdOptions options_;
};

}  // namespace dndm

#endif  // DNDM_OPTIMIZER_H_
