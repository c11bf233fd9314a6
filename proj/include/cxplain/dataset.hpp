#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cxplain/image.hpp"

namespace cxplain {

/// Index of an image inside its dataset; stable across runs for a given file.
using SourceId = std::uint32_t;

/// Labeled RGB images of one size, held as 8-bit pixels.
///
/// On-disk format (".cxds"): magic "CXDS0001", uint32 count, uint32 height,
/// uint32 width, then per image one int32 label followed by 3*height*width
/// bytes in channel-major order. CIFAR-10 binary batches ("*.bin", 1 label
/// byte + 3072 pixel bytes per record) are read directly as well.
class Dataset {
 public:
  Dataset() = default;
  Dataset(int height, int width) : height_(height), width_(width) {}

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int num_classes() const;

  Image image(SourceId id) const;
  int label(SourceId id) const { return labels_.at(id); }
  std::string id_string(SourceId id) const;

  void add(const Image& image, int label);

  void save(const std::filesystem::path& path) const;
  static Dataset load(const std::filesystem::path& path);
  static Dataset load_cifar10(const std::filesystem::path& path);

  /// FNV-1a over labels and pixels.
  std::uint64_t fingerprint() const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::int32_t> labels_;
  std::vector<std::uint8_t> pixels_;
};

}  // namespace cxplain
