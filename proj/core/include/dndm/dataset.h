#ifndef DNDM_DATASET_H_
#define DNDM_DATASET_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dndm {

// Single-channel images with integer class labels, pixels scaled to [0, 1].
struct GrayscaleImages {
  size_t count = 0;
  size_t rows = 0;
  size_t cols = 0;
  int num_classes = 10;
  std::vector<float> pixels;  // count x rows x cols
  std::vector<int> labels;

  size_t pixels_per_image() const { return rows * cols; }
  std::span<const float> image(size_t i) const {
    return std::span<const float>(pixels).subspan(i * rows * cols, rows * cols);
  }
  GrayscaleImages Subset(std::span<const size_t> indices) const;
};

inline constexpr uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr uint32_t kIdxLabelsMagic = 0x00000801;

// Reads an MNIST-style IDX image/label pair. Gzip-compressed files are
// decompressed transparently. Throws FormatError on a wrong magic number or
// mismatched counts and LengthError on truncated payloads.
GrayscaleImages LoadIdx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

struct Palette {
  std::vector<std::array<float, 3>> colors;
  // Standard deviation of the per-example Gaussian color jitter.
  float noise_sigma = 0.05f;

  // Ten fixed, well separated RGB colors; see README for the table.
  static Palette Default();
  size_t size() const { return colors.size(); }
  // Throws ValidationError unless colors are within [0,1] and pairwise L2
  // distances are at least kMinColorDistance.
  void Validate() const;

  static constexpr float kMinColorDistance = 0.25f;

  bool operator==(const Palette&) const = default;
};

enum class SplitTag : uint8_t { kTrain = 0, kUnbiasedVal = 1, kUnbiasedTest = 2 };

std::string_view SplitTagName(SplitTag tag);

struct BiasedExample {
  std::span<const float> pixels;
  int label = 0;
  int bias_label = 0;
  bool aligned() const { return label == bias_label; }
};

// Colored images with class and bias labels, stored contiguously.
class BiasedDataset {
 public:
  BiasedDataset() = default;
  BiasedDataset(int num_classes, size_t feature_dim, double conflict_ratio,
                uint64_t seed, SplitTag split);

  void Add(std::span<const float> pixels, int label, int bias_label);
  void Reserve(size_t count);

  size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  int num_classes() const { return num_classes_; }
  size_t feature_dim() const { return feature_dim_; }
  double conflict_ratio() const { return conflict_ratio_; }
  uint64_t seed() const { return seed_; }
  SplitTag split() const { return split_; }

  BiasedExample example(size_t i) const;
  std::span<const float> pixels() const { return pixels_; }
  std::span<const float> pixels(size_t i) const {
    return std::span<const float>(pixels_).subspan(i * feature_dim_, feature_dim_);
  }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<int>& bias_labels() const { return bias_labels_; }
  bool aligned(size_t i) const { return labels_[i] == bias_labels_[i]; }
  size_t conflicting_count() const;
  double conflicting_fraction() const;

  friend bool operator==(const BiasedDataset&, const BiasedDataset&) = default;

 private:
  int num_classes_ = 0;
  size_t feature_dim_ = 0;
  double conflict_ratio_ = 0.0;
  uint64_t seed_ = 0;
  SplitTag split_ = SplitTag::kTrain;
  std::vector<float> pixels_;
  std::vector<int> labels_;
  std::vector<int> bias_labels_;
};

// Biased training split: exactly round(ratio * N) examples, chosen at random,
// get a color different from their class color (uniform over the others);
// the rest get their class color. Pixels are intensity * (color + noise),
// clamped to [0,1], laid out channel-major (3 x rows x cols).
BiasedDataset Colorize(const GrayscaleImages& images, double conflict_ratio,
                       const Palette& palette, uint64_t seed);

// Unbiased split: color drawn uniformly from all classes independently of y.
BiasedDataset MakeUnbiasedSplit(const GrayscaleImages& images,
                                const Palette& palette, uint64_t seed,
                                SplitTag tag = SplitTag::kUnbiasedTest);

// Grayscale stand-in for MNIST: class k is one of `num_classes` disjoint
// (hence orthogonal) block patterns on a 28x28 grid, plus pixel noise.
// Labels cycle through the classes so every class is equally represented.
GrayscaleImages MakeSyntheticImages(int num_classes, size_t count, uint64_t seed);

// The binary pattern of class `k` used by MakeSyntheticImages.
std::vector<float> SyntheticPattern(int num_classes, int k);

// Colorized synthetic training set; the palette's first num_classes colors
// are used.
BiasedDataset MakeSynthetic(int num_classes, size_t count, double conflict_ratio,
                            uint64_t seed, const Palette& palette = Palette::Default());

// "DNDM1" binary cache: little-endian header (classes, count, ratio, seed,
// split, feature dim) followed by (label, bias label, pixels) records.
void SaveDataset(const BiasedDataset& dataset, const std::filesystem::path& path);
BiasedDataset LoadDataset(const std::filesystem::path& path);

}  // namespace dndm

#endif  // DNDM_DATASET_H_
