#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace cxplain {

/// Axis-aligned pixel box; (x, y) is the top-left corner.
struct Box {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  friend bool operator==(const Box&, const Box&) = default;
};

/// RGB image in raw pixel space, values in [0, 1], stored channel-major.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  bool empty() const noexcept { return pixels_.empty(); }

  double& at(int c, int y, int x) noexcept { return pixels_[index(c, y, x)]; }
  double at(int c, int y, int x) const noexcept { return pixels_[index(c, y, x)]; }

  std::span<double> pixels() noexcept { return pixels_; }
  std::span<const double> pixels() const noexcept { return pixels_; }

  Image crop(const Box& box) const;
  /// Copies `patch` into this image with its top-left corner at (x, y).
  void paste(const Image& patch, int x, int y);
  Image resize_bilinear(int height, int width) const;

  /// Vertical concatenation; all parts must share a width.
  static Image vstack(std::span<const Image> parts);

  void write_png(const std::filesystem::path& path) const;
  static Image read_png(const std::filesystem::path& path);

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int c, int y, int x) const noexcept {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> pixels_;
};

}  // namespace cxplain
