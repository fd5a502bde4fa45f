#ifndef DNDM_MODEL_H_
#define DNDM_MODEL_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dndm/graph.h"
#include "dndm/tensor.h"

namespace dndm {

struct LinearLayer {
  Tensor weight;  // in x out
  Tensor bias;    // out

  size_t in() const { return weight.rows(); }
  size_t out() const { return weight.cols(); }
};

struct NamedParameter {
  std::string name;
  Tensor* tensor = nullptr;
};

// Feature extractor: a stack of Linear + ReLU blocks whose last width is the
// feature dimension F fed to a separate head.
class Branch {
 public:
  Branch() = default;
  explicit Branch(std::vector<LinearLayer> layers);

  // Number of linear layers.
  size_t depth() const { return layers_.size(); }
  size_t input_dim() const { return layers_.front().in(); }
  size_t feature_dim() const { return layers_.back().out(); }
  size_t parameter_count() const;

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  const std::vector<LinearLayer>& layers() const { return layers_; }

  // Records the forward pass. Parameters of a frozen branch enter the graph
  // as constants, so nothing upstream of it receives gradient.
  Var Forward(Graph& graph, Var x);
  // Forward pass with every parameter as a constant.
  Var ForwardConstant(Graph& graph, Var x) const;

  std::vector<NamedParameter> Parameters(std::string_view prefix);
  bool BitwiseEquals(const Branch& other) const;

 private:
  void CheckInput(const Tensor& x) const;

  std::vector<LinearLayer> layers_;
  bool frozen_ = false;
};

// Single linear map F -> M, no hidden activation.
class Head {
 public:
  Head() = default;
  explicit Head(LinearLayer layer) : layer_(std::move(layer)) {}

  size_t feature_dim() const { return layer_.in(); }
  size_t num_classes() const { return layer_.out(); }
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }
  const LinearLayer& layer() const { return layer_; }
  LinearLayer& mutable_layer() { return layer_; }

  Var Forward(Graph& graph, Var features);
  Var ForwardConstant(Graph& graph, Var features) const;
  std::vector<NamedParameter> Parameters(std::string_view prefix);
  bool BitwiseEquals(const Head& other) const;

 private:
  LinearLayer layer_;
  bool frozen_ = false;
};

// He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
LinearLayer MakeLinearLayer(size_t in, size_t out, uint64_t seed,
                            std::string_view stream);

// Linear(input_dim -> hidden_width), ReLU, then (n_hidden - 1) blocks of
// Linear + ReLU. The last block outputs `feature_dim` (defaults to
// hidden_width), which lets branches of different widths share one head.
Branch BuildMlp(size_t input_dim, size_t hidden_width, size_t n_hidden,
                uint64_t seed, size_t feature_dim = 0);

Head BuildHead(size_t feature_dim, size_t num_classes, uint64_t seed);

// Copies values into a fresh, unfrozen head with no gradient state.
Head CloneHead(const Head& head);

struct GatedBranch {
  Branch* branch = nullptr;
  float gate = 1.0f;
};

struct ConstGatedBranch {
  const Branch* branch = nullptr;
  float gate = 1.0f;
};

struct GatedOutput {
  Var logits;
  Tensor probs;
};

// logits = head(sum_i gate_i * branch_i(x)), probs = softmax(logits).
// Gates must be 0 or 1; gate-0 branches are not evaluated. Branches and head
// follow their frozen flags.
GatedOutput GatedForward(Graph& graph, Var x, std::span<const GatedBranch> branches,
                         Head& head);
// Same, with every parameter entering as a constant.
GatedOutput GatedForwardConstant(Graph& graph, Var x,
                                 std::span<const ConstGatedBranch> branches,
                                 const Head& head);

// Logits for a whole matrix of inputs, detached.
Tensor GatedLogits(const Tensor& x, std::span<const ConstGatedBranch> branches,
                   const Head& head);

// Penultimate (pre-head) activations, detached from any graph.
Tensor PenultimateFeatures(const Branch& branch, const Tensor& x);

// "DNDMCKPT1" checkpoint: named branches and heads plus the hash of the
// resolved config that produced them.
struct Checkpoint {
  uint64_t config_hash = 0;
  std::vector<std::pair<std::string, Branch>> branches;
  std::vector<std::pair<std::string, Head>> heads;

  const Branch& branch(std::string_view name) const;
  const Head& head(std::string_view name) const;
};

void SaveCheckpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

}  // namespace dndm

#endif  // DNDM_MODEL_H_
