#include "dndm/model.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>

#include "dndm/errors.h"
#include "dndm/random.h"

namespace dndm {
namespace {

bool LayerBitwiseEquals(const LinearLayer& a, const LinearLayer& b) {
  return a.weight.BitwiseEquals(b.weight) && a.bias.BitwiseEquals(b.bias);
}

Var LayerForward(Graph& graph, Var x, LinearLayer& layer, bool trainable) {
  if (trainable) {
    return graph.Linear(x, graph.Parameter(layer.weight),
                        graph.Parameter(layer.bias));
  }
  return graph.Linear(x, graph.Constant(layer.weight), graph.Constant(layer.bias));
}

Var LayerForwardConstant(Graph& graph, Var x, const LinearLayer& layer) {
  return graph.Linear(x, graph.Constant(layer.weight), graph.Constant(layer.bias));
}

void CheckGate(float gate) {
  if (gate != 0.0f && gate != 1.0f) {
    throw ValidationError("gates must be 0 or 1, got " + std::to_string(gate));
  }
}

// Shared skeleton of the gated ensemble; `branch_forward(i)` records branch i.
template <typename BranchForward, typename HeadForward>
GatedOutput GatedImpl(Graph& graph, Var x, size_t count,
                      std::span<const float> gates,
                      std::span<const size_t> feature_dims, size_t head_dim,
                      BranchForward branch_forward, HeadForward head_forward) {
  for (size_t i = 0; i < count; ++i) {
    CheckGate(gates[i]);
    if (feature_dims[i] != head_dim) {
      throw ShapeError("branch " + std::to_string(i) + " has feature dim " +
                       std::to_string(feature_dims[i]) + " but the head expects " +
                       std::to_string(head_dim));
    }
  }
  std::optional<Var> features;
  for (size_t i = 0; i < count; ++i) {
    if (gates[i] == 0.0f) continue;
    Var f = branch_forward(i);
    features = features ? graph.Add(*features, f) : f;
  }
  if (!features) {
    const Tensor& xv = graph.value(x);
    features = graph.Constant(Tensor({xv.rows(), head_dim}));
  }
  GatedOutput out;
  out.logits = head_forward(*features);
  out.probs = SoftmaxRows(graph.value(out.logits));
  return out;
}

}  // namespace

Branch::Branch(std::vector<LinearLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ValidationError("a branch needs at least one layer");
  for (size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in() != layers_[i - 1].out()) {
      throw ShapeError("layer " + std::to_string(i) + " expects " +
                       std::to_string(layers_[i].in()) + " inputs but layer " +
                       std::to_string(i - 1) + " produces " +
                       std::to_string(layers_[i - 1].out()));
    }
  }
}

size_t Branch::parameter_count() const {
  size_t n = 0;
  for (const LinearLayer& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return n;
}

void Branch::CheckInput(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != input_dim()) {
    throw ShapeError("branch expects inputs of width " +
                     std::to_string(input_dim()) + ", got " +
                     ShapeToString(x.shape()));
  }
}

Var Branch::Forward(Graph& graph, Var x) {
  CheckInput(graph.value(x));
  Var h = x;
  for (LinearLayer& layer : layers_) {
    h = graph.Relu(LayerForward(graph, h, layer, !frozen_));
  }
  return h;
}

Var Branch::ForwardConstant(Graph& graph, Var x) const {
  CheckInput(graph.value(x));
  Var h = x;
  for (const LinearLayer& layer : layers_) {
    h = graph.Relu(LayerForwardConstant(graph, h, layer));
  }
  return h;
}

std::vector<NamedParameter> Branch::Parameters(std::string_view prefix) {
  std::vector<NamedParameter> out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const std::string base = std::string(prefix) + ".layer" + std::to_string(i);
    out.push_back({base + ".weight", &layers_[i].weight});
    out.push_back({base + ".bias", &layers_[i].bias});
  }
  return out;
}

bool Branch::BitwiseEquals(const Branch& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (!LayerBitwiseEquals(layers_[i], other.layers_[i])) return false;
  }
  return true;
}

Var Head::Forward(Graph& graph, Var features) {
  return LayerForward(graph, features, layer_, !frozen_);
}

Var Head::ForwardConstant(Graph& graph, Var features) const {
  return LayerForwardConstant(graph, features, layer_);
}

std::vector<NamedParameter> Head::Parameters(std::string_view prefix) {
  const std::string base(prefix);
  return {{base + ".weight", &layer_.weight}, {base + ".bias", &layer_.bias}};
}

bool Head::BitwiseEquals(const Head& other) const {
  return LayerBitwiseEquals(layer_, other.layer_);
}

LinearLayer MakeLinearLayer(size_t in, size_t out, uint64_t seed,
                            std::string_view stream) {
  if (in == 0 || out == 0) {
    throw ValidationError("layer dimensions must be positive");
  }
  Rng rng = MakeRng(seed, stream);
  const float bound = std::sqrt(6.0f / static_cast<float>(in));
  std::uniform_real_distribution<float> uniform(-bound, bound);
  LinearLayer layer{Tensor({in, out}), Tensor({out})};
  for (float& w : layer.weight.values()) w = uniform(rng);
  return layer;
}

Branch BuildMlp(size_t input_dim, size_t hidden_width, size_t n_hidden,
                uint64_t seed, size_t feature_dim) {
  if (input_dim == 0 || hidden_width == 0) {
    throw ValidationError("MLP dimensions must be positive");
  }
  if (n_hidden < 1) throw ValidationError("an MLP branch needs n_hidden >= 1");
  if (feature_dim == 0) feature_dim = hidden_width;
  std::vector<LinearLayer> layers;
  for (size_t i = 0; i < n_hidden; ++i) {
    const size_t in = i == 0 ? input_dim : hidden_width;
    const size_t out = i + 1 == n_hidden ? feature_dim : hidden_width;
    layers.push_back(MakeLinearLayer(in, out, seed, "mlp.layer" + std::to_string(i)));
  }
  return Branch(std::move(layers));
}

Head BuildHead(size_t feature_dim, size_t num_classes, uint64_t seed) {
  return Head(MakeLinearLayer(feature_dim, num_classes, seed, "head"));
}

Head CloneHead(const Head& head) {
  return Head(LinearLayer{head.layer().weight.Detached(),
                          head.layer().bias.Detached()});
}

GatedOutput GatedForward(Graph& graph, Var x, std::span<const GatedBranch> branches,
                         Head& head) {
  std::vector<float> gates;
  std::vector<size_t> dims;
  for (const GatedBranch& b : branches) {
    gates.push_back(b.gate);
    dims.push_back(b.branch->feature_dim());
  }
  return GatedImpl(
      graph, x, branches.size(), gates, dims, head.feature_dim(),
      [&](size_t i) { return branches[i].branch->Forward(graph, x); },
      [&](Var f) { return head.Forward(graph, f); });
}

GatedOutput GatedForwardConstant(Graph& graph, Var x,
                                 std::span<const ConstGatedBranch> branches,
                                 const Head& head) {
  std::vector<float> gates;
  std::vector<size_t> dims;
  for (const ConstGatedBranch& b : branches) {
    gates.push_back(b.gate);
    dims.push_back(b.branch->feature_dim());
  }
  return GatedImpl(
      graph, x, branches.size(), gates, dims, head.feature_dim(),
      [&](size_t i) { return branches[i].branch->ForwardConstant(graph, x); },
      [&](Var f) { return head.ForwardConstant(graph, f); });
}

Tensor GatedLogits(const Tensor& x, std::span<const ConstGatedBranch> branches,
                   const Head& head) {
  Graph graph;
  const GatedOutput out =
      GatedForwardConstant(graph, graph.Constant(x), branches, head);
  return graph.value(out.logits).Detached();
}

Tensor PenultimateFeatures(const Branch& branch, const Tensor& x) {
  Graph graph;
  const Var features = branch.ForwardConstant(graph, graph.Constant(x));
  return graph.value(features).Detached();
}

// Checkpoints ---------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[9] = {'D', 'N', 'D', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr uint8_t kBranchRecord = 0;
constexpr uint8_t kHeadRecord = 1;

void PutU32(std::ostream& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void PutU64(std::ostream& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t GetBytes(std::istream& in, int count, const std::filesystem::path& path) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), count)) {
    throw LengthError(path.string() + " is truncated");
  }
  uint64_t v = 0;
  for (int i = 0; i < count; ++i) v |= uint64_t{bytes[i]} << (8 * i);
  return v;
}

void PutLayer(std::ostream& out, const LinearLayer& layer) {
  PutU32(out, static_cast<uint32_t>(layer.in()));
  PutU32(out, static_cast<uint32_t>(layer.out()));
  for (float v : layer.weight.values()) PutU32(out, std::bit_cast<uint32_t>(v));
  for (float v : layer.bias.values()) PutU32(out, std::bit_cast<uint32_t>(v));
}

LinearLayer GetLayer(std::istream& in, const std::filesystem::path& path) {
  const auto rows = static_cast<size_t>(GetBytes(in, 4, path));
  const auto cols = static_cast<size_t>(GetBytes(in, 4, path));
  if (rows == 0 || cols == 0 || rows * cols > (size_t{1} << 30)) {
    throw FormatError(path.string() + ": implausible layer shape");
  }
  LinearLayer layer{Tensor({rows, cols}), Tensor({cols})};
  for (float& v : layer.weight.values()) {
    v = std::bit_cast<float>(static_cast<uint32_t>(GetBytes(in, 4, path)));
  }
  for (float& v : layer.bias.values()) {
    v = std::bit_cast<float>(static_cast<uint32_t>(GetBytes(in, 4, path)));
  }
  return layer;
}

void PutName(std::ostream& out, const std::string& name) {
  PutU32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

std::string GetName(std::istream& in, const std::filesystem::path& path) {
  const auto size = static_cast<size_t>(GetBytes(in, 4, path));
  if (size > 4096) throw FormatError(path.string() + ": implausible name length");
  std::string name(size, '\0');
  if (!in.read(name.data(), static_cast<std::streamsize>(size))) {
    throw LengthError(path.string() + " is truncated");
  }
  return name;
}

}  // namespace

const Branch& Checkpoint::branch(std::string_view name) const {
  for (const auto& [key, value] : branches) {
    if (key == name) return value;
  }
  throw DataError("checkpoint has no branch named '" + std::string(name) + "'");
}

const Head& Checkpoint::head(std::string_view name) const {
  for (const auto& [key, value] : heads) {
    if (key == name) return value;
  }
  throw DataError("checkpoint has no head named '" + std::string(name) + "'");
}

void SaveCheckpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  PutU64(out, checkpoint.config_hash);
  PutU32(out, static_cast<uint32_t>(checkpoint.branches.size() +
                                    checkpoint.heads.size()));
  for (const auto& [name, branch] : checkpoint.branches) {
    out.put(static_cast<char>(kBranchRecord));
    PutName(out, name);
    PutU32(out, static_cast<uint32_t>(branch.depth()));
    for (const LinearLayer& layer : branch.layers()) PutLayer(out, layer);
  }
  for (const auto& [name, head] : checkpoint.heads) {
    out.put(static_cast<char>(kHeadRecord));
    PutName(out, name);
    PutU32(out, 1);
    PutLayer(out, head.layer());
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError(path.string() + " is not a DNDMCKPT1 checkpoint");
  }
  Checkpoint checkpoint;
  checkpoint.config_hash = GetBytes(in, 8, path);
  const auto records = GetBytes(in, 4, path);
  for (uint64_t r = 0; r < records; ++r) {
    const auto kind = static_cast<uint8_t>(GetBytes(in, 1, path));
    std::string name = GetName(in, path);
    const auto layer_count = GetBytes(in, 4, path);
    if (layer_count == 0 || layer_count > 1024) {
      throw FormatError(path.string() + ": implausible layer count");
    }
    std::vector<LinearLayer> layers;
    for (uint64_t i = 0; i < layer_count; ++i) layers.push_back(GetLayer(in, path));
    if (kind == kBranchRecord) {
      checkpoint.branches.emplace_back(std::move(name), Branch(std::move(layers)));
    } else if (kind == kHeadRecord && layers.size() == 1) {
      checkpoint.heads.emplace_back(std::move(name), Head(std::move(layers[0])));
    } else {
      throw FormatError(path.string() + ": unknown record kind");
    }
  }
  return checkpoint;
}

}  // namespace dndm
