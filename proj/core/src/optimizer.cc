#include "dndm/optimizer.h"

#include "dndm/errors.h"

namespace dndm {

SgdOptimizer::SgdOptimizer(std::vector<NamedParameter> parameters,
                           SgdOptions options)
    : parameters_(std::move(parameters)), options_(options) {
  velocities_.reserve(parameters_.size());
  for (const NamedParameter& p : parameters_) {
    if (p.tensor == nullptr) {
      throw ValidationError("parameter '" + p.name + "' is null");
    }
    velocities_.emplace_back(p.tensor->shape());
  }
}

void SgdOptimizer::Step() {
  for (const NamedParameter& p : parameters_) {
    if (!p.tensor->has_grad()) {
      throw TrainingError("parameter '" + p.name + "' has no gradient");
    }
  }
  const float lr = options_.learning_rate;
  const float momentum = options_.momentum;
  const float decay = options_.weight_decay;
  for (size_t i = 0; i < parameters_.size(); ++i) {
    std::span<float> values = parameters_[i].tensor->values();
    std::span<const float> grad = parameters_[i].tensor->grad();
    std::span<float> velocity = velocities_[i].values();
    for (size_t k = 0; k < values.size(); ++k) {
      velocity[k] = momentum * velocity[k] + (grad[k] + decay * values[k]);
      values[k] -= lr * velocity[k];
    }
  }
}

void SgdOptimizer::ZeroGrad() {
  for (const NamedParameter& p : parameters_) p.tensor->ZeroGrad();
}

}  // namespace dndm
