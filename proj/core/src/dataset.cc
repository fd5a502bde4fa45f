#include "dndm/dataset.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include "dndm/errors.h"
#include "dndm/random.h"

namespace dndm {

Palette Palette::Default() {
  Palette palette;
  palette.colors = {
      {1.0f, 0.0f, 0.0f},  // red
      {0.0f, 1.0f, 0.0f},  // green
      {0.0f, 0.0f, 1.0f},  // blue
      {1.0f, 1.0f, 0.0f},  // yellow
      {1.0f, 0.0f, 1.0f},  // magenta
      {0.0f, 1.0f, 1.0f},  // cyan
      {1.0f, 0.5f, 0.0f},  // orange
      {0.5f, 0.0f, 1.0f},  // violet
      {0.5f, 1.0f, 0.5f},  // mint
      {1.0f, 1.0f, 1.0f},  // white
  };
  palette.noise_sigma = 0.05f;
  return palette;
}

void Palette::Validate() const {
  if (colors.size() < 2) {
    throw ValidationError("palette needs at least 2 colors");
  }
  if (!(noise_sigma >= 0.0f)) {
    throw ValidationError("palette noise sigma must be >= 0");
  }
  for (size_t i = 0; i < colors.size(); ++i) {
    for (float channel : colors[i]) {
      if (!(channel >= 0.0f && channel <= 1.0f)) {
        throw ValidationError("palette color " + std::to_string(i) +
                              " has a channel outside [0,1]");
      }
    }
    for (size_t j = 0; j < i; ++j) {
      float d2 = 0.0f;
      for (int c = 0; c < 3; ++c) {
        const float d = colors[i][c] - colors[j][c];
        d2 += d * d;
      }
      if (std::sqrt(d2) < kMinColorDistance) {
        throw ValidationError("palette colors " + std::to_string(j) + " and " +
                              std::to_string(i) + " are closer than " +
                              std::to_string(kMinColorDistance));
      }
    }
  }
}

std::string_view SplitTagName(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kUnbiasedVal: return "val";
    case SplitTag::kUnbiasedTest: return "test";
  }
  return "unknown";
}

BiasedDataset::BiasedDataset(int num_classes, size_t feature_dim,
                             double conflict_ratio, uint64_t seed, SplitTag split)
    : num_classes_(num_classes),
      feature_dim_(feature_dim),
      conflict_ratio_(conflict_ratio),
      seed_(seed),
      split_(split) {}

void BiasedDataset::Reserve(size_t count) {
  pixels_.reserve(count * feature_dim_);
  labels_.reserve(count);
  bias_labels_.reserve(count);
}

void BiasedDataset::Add(std::span<const float> pixels, int label, int bias_label) {
  if (pixels.size() != feature_dim_) {
    throw ValidationError("example has " + std::to_string(pixels.size()) +
                          " features, dataset expects " +
                          std::to_string(feature_dim_));
  }
  if (label < 0 || label >= num_classes_ || bias_label < 0 ||
      bias_label >= num_classes_) {
    throw ValidationError("labels (" + std::to_string(label) + ", " +
                          std::to_string(bias_label) + ") outside [0, " +
                          std::to_string(num_classes_) + ")");
  }
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  labels_.push_back(label);
  bias_labels_.push_back(bias_label);
}

BiasedExample BiasedDataset::example(size_t i) const {
  return BiasedExample{pixels(i), labels_.at(i), bias_labels_.at(i)};
}

size_t BiasedDataset::conflicting_count() const {
  size_t n = 0;
  for (size_t i = 0; i < size(); ++i) n += aligned(i) ? 0 : 1;
  return n;
}

double BiasedDataset::conflicting_fraction() const {
  return empty() ? 0.0
                 : static_cast<double>(conflicting_count()) /
                       static_cast<double>(size());
}

namespace {

void CheckPaletteFits(const GrayscaleImages& images, const Palette& palette) {
  palette.Validate();
  if (palette.size() != static_cast<size_t>(images.num_classes)) {
    throw ValidationError("palette has " + std::to_string(palette.size()) +
                          " colors but the data has " +
                          std::to_string(images.num_classes) + " classes");
  }
  for (int label : images.labels) {
    if (label < 0 || label >= images.num_classes) {
      throw ValidationError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(images.num_classes) + ")");
    }
  }
}

// Appends one colored example: channel-major intensity * (color + jitter).
void AppendColored(const GrayscaleImages& images, size_t index, int label,
                   int bias_label, const Palette& palette, Rng& rng,
                   std::vector<float>& scratch, BiasedDataset& out) {
  std::normal_distribution<float> jitter(0.0f, 1.0f);
  float tint[3];
  for (int c = 0; c < 3; ++c) {
    const float noise = palette.noise_sigma > 0.0f
                            ? palette.noise_sigma * jitter(rng)
                            : 0.0f;
    tint[c] = palette.colors[bias_label][c] + noise;
  }
  std::span<const float> gray = images.image(index);
  const size_t plane = gray.size();
  scratch.resize(3 * plane);
  for (int c = 0; c < 3; ++c) {
    for (size_t p = 0; p < plane; ++p) {
      scratch[c * plane + p] = std::clamp(gray[p] * tint[c], 0.0f, 1.0f);
    }
  }
  out.Add(scratch, label, bias_label);
}

}  // namespace

BiasedDataset Colorize(const GrayscaleImages& images, double conflict_ratio,
                       const Palette& palette, uint64_t seed) {
  if (!(conflict_ratio >= 0.0 && conflict_ratio <= 0.5)) {
    throw ValidationError("conflict ratio " + std::to_string(conflict_ratio) +
                          " outside [0, 0.5]");
  }
  CheckPaletteFits(images, palette);
  const int classes = images.num_classes;
  Rng rng = MakeRng(seed, "colorize");

  const size_t n = images.count;
  const auto conflicting =
      static_cast<size_t>(std::llround(conflict_ratio * static_cast<double>(n)));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_conflicting(n, false);
  for (size_t i = 0; i < conflicting; ++i) is_conflicting[order[i]] = true;

  BiasedDataset out(classes, 3 * images.pixels_per_image(), conflict_ratio,
                    seed, SplitTag::kTrain);
  out.Reserve(n);
  std::uniform_int_distribution<int> other(0, classes - 2);
  std::vector<float> scratch;
  for (size_t i = 0; i < n; ++i) {
    const int label = images.labels[i];
    int bias = label;
    if (is_conflicting[i]) {
      bias = other(rng);
      if (bias >= label) ++bias;
    }
    AppendColored(images, i, label, bias, palette, rng, scratch, out);
  }
  return out;
}

BiasedDataset MakeUnbiasedSplit(const GrayscaleImages& images,
                                const Palette& palette, uint64_t seed,
                                SplitTag tag) {
  CheckPaletteFits(images, palette);
  const int classes = images.num_classes;
  Rng rng = MakeRng(seed, "unbiased");
  BiasedDataset out(classes, 3 * images.pixels_per_image(),
                    1.0 - 1.0 / classes, seed, tag);
  out.Reserve(images.count);
  std::uniform_int_distribution<int> color(0, classes - 1);
  std::vector<float> scratch;
  for (size_t i = 0; i < images.count; ++i) {
    AppendColored(images, i, images.labels[i], color(rng), palette, rng,
                  scratch, out);
  }
  return out;
}

namespace {

constexpr size_t kSyntheticSide = 28;
constexpr size_t kSyntheticBlock = 4;
constexpr size_t kSyntheticBlocksPerSide = kSyntheticSide / kSyntheticBlock;
constexpr float kSyntheticNoise = 0.15f;

}  // namespace

std::vector<float> SyntheticPattern(int num_classes, int k) {
  const size_t blocks = kSyntheticBlocksPerSide * kSyntheticBlocksPerSide;
  if (num_classes < 2 || static_cast<size_t>(num_classes) > blocks) {
    throw ValidationError("synthetic data supports 2.." + std::to_string(blocks) +
                          " classes, got " + std::to_string(num_classes));
  }
  std::vector<float> pattern(kSyntheticSide * kSyntheticSide, 0.0f);
  // Block b belongs to class (7 * b) mod M: a fixed scatter so that patterns
  // are spatially interleaved yet disjoint.
  for (size_t b = 0; b < blocks; ++b) {
    if (static_cast<int>((7 * b) % num_classes) != k) continue;
    const size_t by = b / kSyntheticBlocksPerSide;
    const size_t bx = b % kSyntheticBlocksPerSide;
    for (size_t y = 0; y < kSyntheticBlock; ++y) {
      for (size_t x = 0; x < kSyntheticBlock; ++x) {
        pattern[(by * kSyntheticBlock + y) * kSyntheticSide +
                bx * kSyntheticBlock + x] = 1.0f;
      }
    }
  }
  return pattern;
}

GrayscaleImages MakeSyntheticImages(int num_classes, size_t count, uint64_t seed) {
  if (count < static_cast<size_t>(num_classes)) {
    throw ValidationError("synthetic data needs at least one example per class (N=" +
                          std::to_string(count) + " < M=" +
                          std::to_string(num_classes) + ")");
  }
  std::vector<std::vector<float>> patterns;
  for (int k = 0; k < num_classes; ++k) {
    patterns.push_back(SyntheticPattern(num_classes, k));
  }
  GrayscaleImages out;
  out.count = count;
  out.rows = kSyntheticSide;
  out.cols = kSyntheticSide;
  out.num_classes = num_classes;
  out.pixels.reserve(count * kSyntheticSide * kSyntheticSide);
  out.labels.reserve(count);
  Rng rng = MakeRng(seed, "synthetic");
  std::normal_distribution<float> noise(0.0f, kSyntheticNoise);
  for (size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % num_classes);
    for (float p : patterns[label]) {
      out.pixels.push_back(std::clamp(p + noise(rng), 0.0f, 1.0f));
    }
    out.labels.push_back(label);
  }
  return out;
}

BiasedDataset MakeSynthetic(int num_classes, size_t count, double conflict_ratio,
                            uint64_t seed, const Palette& palette) {
  if (num_classes < 2) {
    throw ValidationError("synthetic data needs M >= 2");
  }
  if (palette.size() < static_cast<size_t>(num_classes)) {
    throw ValidationError("palette has fewer colors than classes");
  }
  Palette used = palette;
  used.colors.resize(num_classes);
  return Colorize(MakeSyntheticImages(num_classes, count, seed), conflict_ratio,
                  used, seed);
}

// DNDM1 cache ---------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[5] = {'D', 'N', 'D', 'M', '1'};

template <typename T>
void PutLittle(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, uint64_t,
                               std::conditional_t<sizeof(T) == 4, uint32_t, uint8_t>>;
  U bits = std::bit_cast<U>(value);
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

template <typename T>
T GetLittle(std::istream& in, const std::filesystem::path& path) {
  using U = std::conditional_t<sizeof(T) == 8, uint64_t,
                               std::conditional_t<sizeof(T) == 4, uint32_t, uint8_t>>;
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw LengthError(path.string() + " is truncated");
  }
  U bits = 0;
  for (size_t i = 0; i < sizeof(T); ++i) bits |= U{bytes[i]} << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace

void SaveDataset(const BiasedDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kDatasetMagic, sizeof(kDatasetMagic));
  PutLittle<uint32_t>(out, static_cast<uint32_t>(dataset.num_classes()));
  PutLittle<uint64_t>(out, dataset.size());
  PutLittle<double>(out, dataset.conflict_ratio());
  PutLittle<uint64_t>(out, dataset.seed());
  PutLittle<uint8_t>(out, static_cast<uint8_t>(dataset.split()));
  PutLittle<uint32_t>(out, static_cast<uint32_t>(dataset.feature_dim()));
  for (size_t i = 0; i < dataset.size(); ++i) {
    PutLittle<int32_t>(out, dataset.labels()[i]);
    PutLittle<int32_t>(out, dataset.bias_labels()[i]);
    for (float v : dataset.pixels(i)) PutLittle<float>(out, v);
  }
  if (!out) throw DataError("write failed for " + path.string());
}

BiasedDataset LoadDataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[sizeof(kDatasetMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0) {
    throw FormatError(path.string() + " is not a DNDM1 dataset");
  }
  const auto classes = GetLittle<uint32_t>(in, path);
  const auto count = GetLittle<uint64_t>(in, path);
  const auto ratio = GetLittle<double>(in, path);
  const auto seed = GetLittle<uint64_t>(in, path);
  const auto split = GetLittle<uint8_t>(in, path);
  const auto dim = GetLittle<uint32_t>(in, path);
  if (split > static_cast<uint8_t>(SplitTag::kUnbiasedTest)) {
    throw FormatError(path.string() + ": unknown split tag " +
                      std::to_string(split));
  }
  BiasedDataset out(static_cast<int>(classes), dim, ratio, seed,
                    static_cast<SplitTag>(split));
  out.Reserve(count);
  std::vector<float> pixels(dim);
  for (uint64_t i = 0; i < count; ++i) {
    const auto label = GetLittle<int32_t>(in, path);
    const auto bias = GetLittle<int32_t>(in, path);
    for (float& v : pixels) v = GetLittle<float>(in, path);
    out.Add(pixels, label, bias);
  }
  return out;
}

}  // namespace dndm
