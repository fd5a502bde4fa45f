#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dndm/dataset.h"
#include "dndm/errors.h"

namespace dndm {
namespace {

// Reads a whole file; gzip streams are inflated, plain files pass through.
std::vector<unsigned char> ReadAll(const std::filesystem::path& path) {
  std::unique_ptr<gzFile_s, decltype(&gzclose)> file(
      gzopen(path.c_str(), "rb"), &gzclose);
  if (file == nullptr) {
    throw DataError("cannot open " + path.string());
  }
  std::vector<unsigned char> out;
  unsigned char buffer[1 << 16];
  while (true) {
    const int n = gzread(file.get(), buffer, sizeof(buffer));
    if (n < 0) throw DataError("read error in " + path.string());
    if (n == 0) break;
    out.insert(out.end(), buffer, buffer + n);
  }
  return out;
}

uint32_t ReadBigEndian32(const std::vector<unsigned char>& bytes, size_t offset) {
  return (uint32_t{bytes[offset]} << 24) | (uint32_t{bytes[offset + 1]} << 16) |
         (uint32_t{bytes[offset + 2]} << 8) | uint32_t{bytes[offset + 3]};
}

void CheckLength(const std::filesystem::path& path, size_t expected,
                 size_t actual) {
  if (actual < expected) {
    throw LengthError(path.string() + " is truncated: expected " +
                      std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));
  }
}

void CheckMagic(const std::filesystem::path& path, uint32_t expected,
                uint32_t actual) {
  if (actual != expected) {
    char message[128];
    std::snprintf(message, sizeof(message),
                  ": bad IDX magic 0x%08x (expected 0x%08x)", actual, expected);
    throw FormatError(path.string() + message);
  }
}

}  // namespace

GrayscaleImages LoadIdx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const std::vector<unsigned char> image_bytes = ReadAll(images_path);
  CheckLength(images_path, 16, image_bytes.size());
  CheckMagic(images_path, kIdxImagesMagic, ReadBigEndian32(image_bytes, 0));
  GrayscaleImages out;
  out.count = ReadBigEndian32(image_bytes, 4);
  out.rows = ReadBigEndian32(image_bytes, 8);
  out.cols = ReadBigEndian32(image_bytes, 12);
  const size_t pixel_count = out.count * out.rows * out.cols;
  CheckLength(images_path, 16 + pixel_count, image_bytes.size());

  const std::vector<unsigned char> label_bytes = ReadAll(labels_path);
  CheckLength(labels_path, 8, label_bytes.size());
  CheckMagic(labels_path, kIdxLabelsMagic, ReadBigEndian32(label_bytes, 0));
  const size_t label_count = ReadBigEndian32(label_bytes, 4);
  if (label_count != out.count) {
    throw FormatError(labels_path.string() + " holds " +
                      std::to_string(label_count) + " labels but " +
                      images_path.string() + " holds " +
                      std::to_string(out.count) + " images");
  }
  CheckLength(labels_path, 8 + label_count, label_bytes.size());

  out.pixels.resize(pixel_count);
  for (size_t i = 0; i < pixel_count; ++i) {
    out.pixels[i] = static_cast<float>(image_bytes[16 + i]) / 255.0f;
  }
  out.labels.resize(label_count);
  int max_label = 0;
  for (size_t i = 0; i < label_count; ++i) {
    out.labels[i] = label_bytes[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = std::max(10, max_label + 1);
  return out;
}

GrayscaleImages GrayscaleImages::Subset(std::span<const size_t> indices) const {
  GrayscaleImages out;
  out.count = indices.size();
  out.rows = rows;
  out.cols = cols;
  out.num_classes = num_classes;
  out.pixels.reserve(indices.size() * pixels_per_image());
  out.labels.reserve(indices.size());
  for (size_t index : indices) {
    std::span<const float> src = image(index);
    out.pixels.insert(out.pixels.end(), src.begin(), src.end());
    out.labels.push_back(labels.at(index));
  }
  return out;
}

}  // namespace dndm
