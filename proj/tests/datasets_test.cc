#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <zlib.h>

#include "dndm/batching.h"
#include "dndm/dataset.h"
#include "dndm/errors.h"
#include "dndm/probe.h"
#include "support/oracles.h"

namespace dndm {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("dndm_datasets_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void PutBigEndian(std::string& out, uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>(v >> shift));
}

void WriteFile(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string IdxImages(uint32_t magic, uint32_t count, uint32_t rows, uint32_t cols,
                      const std::vector<uint8_t>& pixels) {
  std::string out;
  PutBigEndian(out, magic);
  PutBigEndian(out, count);
  PutBigEndian(out, rows);
  PutBigEndian(out, cols);
  out.append(pixels.begin(), pixels.end());
  return out;
}

std::string IdxLabels(uint32_t magic, const std::vector<uint8_t>& labels) {
  std::string out;
  PutBigEndian(out, magic);
  PutBigEndian(out, static_cast<uint32_t>(labels.size()));
  out.append(labels.begin(), labels.end());
  return out;
}

TEST(LoadIdxTest, ScalesBytesAndKeepsLabels) {
  TempDir dir;
  WriteFile(dir.path() / "img", IdxImages(kIdxImagesMagic, 2, 2, 2, {0, 255, 51, 102, 1, 2, 3, 4}));
  WriteFile(dir.path() / "lbl", IdxLabels(kIdxLabelsMagic, {7, 3}));
  const GrayscaleImages images = LoadIdx(dir.path() / "img", dir.path() / "lbl");
  EXPECT_EQ(images.count, 2u);
  EXPECT_EQ(images.rows, 2u);
  EXPECT_EQ(images.cols, 2u);
  EXPECT_EQ(images.labels, (std::vector<int>{7, 3}));
  EXPECT_FLOAT_EQ(images.pixels[1], 1.0f);
  EXPECT_FLOAT_EQ(images.pixels[2], 51.0f / 255.0f);
}

TEST(LoadIdxTest, ImagesMagicOnLabelsIsFormatError) {
  TempDir dir;
  WriteFile(dir.path() / "img", IdxImages(kIdxImagesMagic, 1, 1, 1, {9}));
  WriteFile(dir.path() / "lbl", IdxLabels(kIdxImagesMagic, {1}));
  EXPECT_THROW(LoadIdx(dir.path() / "img", dir.path() / "lbl"), FormatError);
}

TEST(LoadIdxTest, TruncatedImageIsLengthErrorWithCounts) {
  TempDir dir;
  // Header promises 2 images of 2x2 = 8 bytes; only 5 follow. Counts include
  // the 16-byte header.
  WriteFile(dir.path() / "img", IdxImages(kIdxImagesMagic, 2, 2, 2, {1, 2, 3, 4, 5}));
  WriteFile(dir.path() / "lbl", IdxLabels(kIdxLabelsMagic, {0, 1}));
  try {
    LoadIdx(dir.path() / "img", dir.path() / "lbl");
    FAIL() << "expected LengthError";
  } catch (const LengthError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("expected 24"), std::string::npos) << what;
    EXPECT_NE(what.find("got 21"), std::string::npos) << what;
  }
}

TEST(LoadIdxTest, CountMismatchIsFormatError) {
  TempDir dir;
  WriteFile(dir.path() / "img", IdxImages(kIdxImagesMagic, 2, 1, 1, {1, 2}));
  WriteFile(dir.path() / "lbl", IdxLabels(kIdxLabelsMagic, {0, 1, 2}));
  EXPECT_THROW(LoadIdx(dir.path() / "img", dir.path() / "lbl"), FormatError);
}

TEST(LoadIdxTest, MissingFileIsDataError) {
  EXPECT_THROW(LoadIdx("/nonexistent/img", "/nonexistent/lbl"), DataError);
}

// Reads the header of a gzipped IDX file directly, as an oracle for LoadIdx.
std::vector<uint32_t> GzHeader(const fs::path& path, int words) {
  gzFile f = gzopen(path.c_str(), "rb");
  EXPECT_NE(f, nullptr);
  std::vector<uint32_t> out;
  for (int i = 0; i < words; ++i) {
    unsigned char b[4];
    EXPECT_EQ(gzread(f, b, 4), 4);
    out.push_back(uint32_t{b[0]} << 24 | uint32_t{b[1]} << 16 | uint32_t{b[2]} << 8 | b[3]);
  }
  gzclose(f);
  return out;
}

TEST(LoadIdxTest, BundledDigitsMatchTheirHeaders) {
  const fs::path dir = DNDM_DATA_DIR_FOR_TESTS;
  const fs::path images = dir / "mnist10k-images-idx3-ubyte.gz";
  const fs::path labels = dir / "mnist10k-labels-idx1-ubyte.gz";
  const std::vector<uint32_t> header = GzHeader(images, 4);
  const GrayscaleImages loaded = LoadIdx(images, labels);
  EXPECT_EQ(header[0], kIdxImagesMagic);
  EXPECT_EQ(loaded.count, header[1]);
  EXPECT_EQ(loaded.rows, header[2]);
  EXPECT_EQ(loaded.cols, header[3]);
  EXPECT_EQ(loaded.count, 10000u);
  EXPECT_EQ(loaded.rows, 28u);
  EXPECT_EQ(GzHeader(labels, 2)[1], loaded.count);
  for (float p : loaded.pixels) ASSERT_TRUE(p >= 0.0f && p <= 1.0f);
}

// Tiny grayscale pool: every image is a single lit pixel pattern so that
// large counts stay cheap.
GrayscaleImages TinyImages(size_t count, int classes, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> intensity(0.2f, 1.0f);
  GrayscaleImages images;
  images.count = count;
  images.rows = 1;
  images.cols = 2;
  images.num_classes = classes;
  for (size_t i = 0; i < count; ++i) {
    images.labels.push_back(static_cast<int>(i % static_cast<size_t>(classes)));
    images.pixels.push_back(intensity(rng));
    images.pixels.push_back(0.0f);
  }
  return images;
}

TEST(PaletteTest, DefaultIsValidAndSeparated) {
  const Palette p = Palette::Default();
  EXPECT_EQ(p.size(), 10u);
  EXPECT_FLOAT_EQ(p.noise_sigma, 0.05f);
  EXPECT_NO_THROW(p.Validate());
  for (size_t i = 0; i < p.size(); ++i) {
    for (size_t j = i + 1; j < p.size(); ++j) {
      float d2 = 0.0f;
      for (int c = 0; c < 3; ++c) d2 += (p.colors[i][c] - p.colors[j][c]) * (p.colors[i][c] - p.colors[j][c]);
      EXPECT_GE(std::sqrt(d2), 0.25f) << i << " vs " << j;
    }
  }
}

TEST(PaletteTest, RejectsCloseOrOutOfRangeColors) {
  Palette close = Palette::Default();
  close.colors[1] = close.colors[0];
  close.colors[1][0] += 0.1f;
  EXPECT_THROW(close.Validate(), ValidationError);
  Palette bright = Palette::Default();
  bright.colors[0][2] = 1.5f;
  EXPECT_THROW(bright.Validate(), ValidationError);
}

TEST(ColorizeTest, ZeroRatioIsFullyAligned) {
  const BiasedDataset d = Colorize(TinyImages(1000, 10, 1), 0.0, Palette::Default(), 5);
  for (size_t i = 0; i < d.size(); ++i) ASSERT_EQ(d.bias_labels()[i], d.labels()[i]);
  EXPECT_EQ(d.conflicting_count(), 0u);
}

TEST(ColorizeTest, OnePercentOfSixtyThousand) {
  Palette palette = Palette::Default();
  palette.noise_sigma = 0.0f;
  const BiasedDataset d = Colorize(TinyImages(60000, 10, 2), 0.01, palette, 7);
  EXPECT_GE(d.conflicting_count(), 540u);
  EXPECT_LE(d.conflicting_count(), 660u);
  for (size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.example(i).aligned(), d.labels()[i] == d.bias_labels()[i]);
  }
}

TEST(ColorizeTest, RatioPropertyAcrossRatios) {
  for (double rho : {0.0, 0.005, 0.01, 0.05, 0.1, 0.2, 0.37, 0.5}) {
    for (size_t n : {5000u, 12345u}) {
      const BiasedDataset d = Colorize(TinyImages(n, 10, 3), rho, Palette::Default(), 11);
      EXPECT_LE(std::abs(d.conflicting_fraction() - rho), 0.005) << rho << " " << n;
      EXPECT_DOUBLE_EQ(d.conflict_ratio(), rho);
      EXPECT_EQ(d.split(), SplitTag::kTrain);
    }
  }
}

TEST(ColorizeTest, ConflictingColorsCoverTheOtherClasses) {
  const BiasedDataset d = Colorize(TinyImages(20000, 10, 4), 0.5, Palette::Default(), 13);
  std::array<std::set<int>, 10> seen;
  for (size_t i = 0; i < d.size(); ++i) {
    if (!d.aligned(i)) {
      ASSERT_NE(d.bias_labels()[i], d.labels()[i]);
      seen[d.labels()[i]].insert(d.bias_labels()[i]);
    }
  }
  for (int y = 0; y < 10; ++y) EXPECT_EQ(seen[y].size(), 9u) << y;
}

TEST(ColorizeTest, PixelsStayInUnitIntervalUnderHeavyNoise) {
  Palette noisy = Palette::Default();
  noisy.noise_sigma = 0.8f;
  GrayscaleImages bright = TinyImages(3000, 10, 5);
  for (float& p : bright.pixels) p = 1.0f;
  const BiasedDataset d = Colorize(bright, 0.2, noisy, 17);
  for (float p : d.pixels()) ASSERT_TRUE(p >= 0.0f && p <= 1.0f) << p;
}

TEST(ColorizeTest, PixelsAreIntensityTimesColorWithoutNoise) {
  Palette palette = Palette::Default();
  palette.noise_sigma = 0.0f;
  const GrayscaleImages images = TinyImages(50, 10, 6);
  const BiasedDataset d = Colorize(images, 0.2, palette, 19);
  const size_t ppi = images.pixels_per_image();
  for (size_t i = 0; i < d.size(); ++i) {
    const auto color = palette.colors[d.bias_labels()[i]];
    for (size_t c = 0; c < 3; ++c) {
      for (size_t k = 0; k < ppi; ++k) {
        EXPECT_FLOAT_EQ(d.pixels(i)[c * ppi + k], images.image(i)[k] * color[c]);
      }
    }
  }
}

TEST(ColorizeTest, CmnistFeatureLength) {
  const BiasedDataset d = MakeSynthetic(10, 20, 0.1, 1);
  EXPECT_EQ(d.feature_dim(), 2352u);
  EXPECT_EQ(d.pixels(0).size(), 3u * 28u * 28u);
}

TEST(ColorizeTest, RejectsBadRatioAndPaletteSize) {
  const GrayscaleImages images = TinyImages(100, 10, 7);
  EXPECT_THROW(Colorize(images, -0.1, Palette::Default(), 1), ValidationError);
  EXPECT_THROW(Colorize(images, 0.6, Palette::Default(), 1), ValidationError);
  Palette short_palette = Palette::Default();
  short_palette.colors.resize(9);
  EXPECT_THROW(Colorize(images, 0.1, short_palette, 1), ValidationError);
}

TEST(UnbiasedSplitTest, AlignedFractionNearOneInM) {
  const BiasedDataset d = MakeUnbiasedSplit(TinyImages(10000, 10, 8), Palette::Default(), 23);
  const double aligned = 1.0 - d.conflicting_fraction();
  EXPECT_NEAR(aligned, 0.1, 0.01);
  EXPECT_EQ(d.split(), SplitTag::kUnbiasedTest);
  const BiasedDataset v =
      MakeUnbiasedSplit(TinyImages(100, 10, 8), Palette::Default(), 23, SplitTag::kUnbiasedVal);
  EXPECT_EQ(v.split(), SplitTag::kUnbiasedVal);
}

TEST(UnbiasedSplitTest, SameSeedSameDataset) {
  const GrayscaleImages images = TinyImages(500, 10, 9);
  EXPECT_TRUE(MakeUnbiasedSplit(images, Palette::Default(), 29) ==
              MakeUnbiasedSplit(images, Palette::Default(), 29));
  EXPECT_FALSE(MakeUnbiasedSplit(images, Palette::Default(), 29) ==
               MakeUnbiasedSplit(images, Palette::Default(), 30));
}

TEST(UnbiasedSplitTest, ClassAndColorAreIndependent) {
  for (uint64_t seed : {31u, 32u, 33u}) {
    const BiasedDataset d = MakeUnbiasedSplit(TinyImages(10000, 10, seed), Palette::Default(), seed);
    std::vector<std::vector<double>> table(10, std::vector<double>(10, 0.0));
    for (size_t i = 0; i < d.size(); ++i) table[d.labels()[i]][d.bias_labels()[i]] += 1.0;
    EXPECT_LT(testing::ChiSquareIndependence(table), testing::kChiSquare81Critical01) << seed;
  }
}

TEST(UnbiasedSplitTest, BiasedSplitFailsTheIndependenceCheck) {
  const BiasedDataset d = Colorize(TinyImages(10000, 10, 34), 0.5, Palette::Default(), 34);
  std::vector<std::vector<double>> table(10, std::vector<double>(10, 0.0));
  for (size_t i = 0; i < d.size(); ++i) table[d.labels()[i]][d.bias_labels()[i]] += 1.0;
  EXPECT_GT(testing::ChiSquareIndependence(table), testing::kChiSquare81Critical01);
}

TEST(SyntheticTest, PatternsArePairwiseOrthogonal) {
  for (int m : {2, 5, 10}) {
    for (int a = 0; a < m; ++a) {
      const std::vector<float> pa = SyntheticPattern(m, a);
      EXPECT_GT(std::count(pa.begin(), pa.end(), 1.0f), 0);
      for (int b = a + 1; b < m; ++b) {
        const std::vector<float> pb = SyntheticPattern(m, b);
        float dot = 0.0f;
        for (size_t i = 0; i < pa.size(); ++i) dot += pa[i] * pb[i];
        EXPECT_EQ(dot, 0.0f) << m << ": " << a << " vs " << b;
      }
    }
  }
}

TEST(SyntheticTest, HalfConflictingAtRatioHalf) {
  const BiasedDataset d = MakeSynthetic(10, 5000, 0.5, 37);
  EXPECT_NEAR(1.0 - d.conflicting_fraction(), 0.5, 0.02);
}

TEST(SyntheticTest, RejectsFewerExamplesThanClasses) {
  EXPECT_THROW(MakeSynthetic(10, 9, 0.0, 1), ValidationError);
  EXPECT_THROW(MakeSynthetic(1, 10, 0.0, 1), ValidationError);
}

TEST(SyntheticTest, RawPixelProbeRecoversColor) {
  const BiasedDataset fit = MakeSynthetic(10, 2000, 0.0, 41);
  const BiasedDataset score = MakeSynthetic(10, 2000, 0.0, 42);
  const Tensor x_fit({fit.size(), fit.feature_dim()},
                     std::vector<float>(fit.pixels().begin(), fit.pixels().end()));
  const Tensor x_score({score.size(), score.feature_dim()},
                       std::vector<float>(score.pixels().begin(), score.pixels().end()));
  const LinearProbe probe = TrainLinearProbe(x_fit, fit.bias_labels(), 10, ProbeConfig{});
  EXPECT_GE(ProbeAccuracy(probe, x_score, score.bias_labels()), 0.99);
}

TEST(BatchSamplerTest, LastBatchIsShort) {
  const BiasedDataset d = MakeSynthetic(10, 10, 0.0, 43);
  const BatchSampler sampler(d, 3, 1);
  ASSERT_EQ(sampler.num_batches(), 4u);
  std::vector<size_t> sizes;
  for (size_t b = 0; b < sampler.num_batches(); ++b) sizes.push_back(sampler.batch(b).size());
  EXPECT_EQ(sizes, (std::vector<size_t>{3, 3, 3, 1}));
}

TEST(BatchSamplerTest, EpochSeedsPermuteTheSameMultiset) {
  const BiasedDataset d = MakeSynthetic(10, 200, 0.1, 44);
  const BatchSampler a(d, 32, 1);
  const BatchSampler b(d, 32, 2);
  EXPECT_NE(a.order(), b.order());
  std::vector<size_t> sa = a.order(), sb = b.order();
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  EXPECT_EQ(sa, sb);
  for (size_t i = 0; i < sa.size(); ++i) ASSERT_EQ(sa[i], i);
}

TEST(BatchSamplerTest, FixedSeedReplaysTheSameBatches) {
  const BiasedDataset d = MakeSynthetic(10, 100, 0.1, 45);
  const BatchSampler a(d, 16, 99);
  const BatchSampler b(d, 16, 99);
  for (size_t i = 0; i < a.num_batches(); ++i) {
    const Batch x = a.batch(i), y = b.batch(i);
    EXPECT_EQ(x.indices, y.indices);
    EXPECT_TRUE(x.pixels.BitwiseEquals(y.pixels));
  }
}

TEST(BatchSamplerTest, BatchCarriesLabelsAndFlags) {
  const BiasedDataset d = MakeSynthetic(10, 100, 0.3, 46);
  const Batch batch = BatchSampler(d, 64, 5).batch(0);
  ASSERT_EQ(batch.size(), 64u);
  EXPECT_EQ(batch.one_hot.shape(), (Shape{64, 10}));
  for (size_t r = 0; r < batch.size(); ++r) {
    const size_t i = batch.indices[r];
    EXPECT_EQ(batch.labels[r], d.labels()[i]);
    EXPECT_EQ(batch.bias_labels[r], d.bias_labels()[i]);
    EXPECT_EQ(batch.aligned[r] != 0, d.aligned(i));
    EXPECT_EQ(batch.one_hot.at(r, batch.labels[r]), 1.0f);
  }
}

TEST(BatchSamplerTest, RejectsEmptyDataAndZeroBatch) {
  const BiasedDataset empty(10, 4, 0.0, 1, SplitTag::kTrain);
  EXPECT_THROW(BatchSampler(empty, 4, 1), DataError);
  const BiasedDataset d = MakeSynthetic(10, 10, 0.0, 47);
  EXPECT_THROW(BatchSampler(d, 0, 1), ValidationError);
}

TEST(DatasetFileTest, RoundTripIsBitIdentical) {
  TempDir dir;
  const BiasedDataset d = MakeSynthetic(10, 300, 0.2, 48);
  SaveDataset(d, dir.path() / "d.dndm");
  const BiasedDataset back = LoadDataset(dir.path() / "d.dndm");
  EXPECT_TRUE(back == d);
  EXPECT_EQ(0, std::memcmp(back.pixels().data(), d.pixels().data(), d.pixels().size_bytes()));
}

TEST(DatasetFileTest, RejectsForeignAndTruncatedFiles) {
  TempDir dir;
  WriteFile(dir.path() / "bad.dndm", "NOTDNDM-------------------------");
  EXPECT_THROW(LoadDataset(dir.path() / "bad.dndm"), FormatError);
  SaveDataset(MakeSynthetic(10, 20, 0.0, 49), dir.path() / "ok.dndm");
  fs::resize_file(dir.path() / "ok.dndm", fs::file_size(dir.path() / "ok.dndm") - 7);
  EXPECT_THROW(LoadDataset(dir.path() / "ok.dndm"), LengthError);
}

}  // namespace
}  // namespace dndm
