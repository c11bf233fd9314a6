#include "cxplain/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "cxplain/error.hpp"

namespace cxplain {

Image::Image(int height, int width, double fill)
    : height_(height), width_(width), pixels_(static_cast<std::size_t>(3) * height * width, fill) {
  if (height < 0 || width < 0) fail(ErrorKind::shape, "negative image size");
}

Image Image::crop(const Box& box) const {
  if (box.x < 0 || box.y < 0 || box.width < 0 || box.height < 0 ||
      box.x + box.width > width_ || box.y + box.height > height_) {
    fail(ErrorKind::size, "crop box outside image bounds");
  }
  Image out(box.height, box.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < box.height; ++y) {
      for (int x = 0; x < box.width; ++x) out.at(c, y, x) = at(c, box.y + y, box.x + x);
    }
  }
  return out;
}

void Image::paste(const Image& patch, int x, int y) {
  if (x < 0 || y < 0 || x + patch.width() > width_ || y + patch.height() > height_) {
    fail(ErrorKind::size, "patch does not fit inside image");
  }
  for (int c = 0; c < 3; ++c) {
    for (int py = 0; py < patch.height(); ++py) {
      for (int px = 0; px < patch.width(); ++px) at(c, y + py, x + px) = patch.at(c, py, px);
    }
  }
}

Image Image::resize_bilinear(int height, int width) const {
  if (height == height_ && width == width_) return *this;
  if (height <= 0 || width <= 0 || empty()) fail(ErrorKind::size, "invalid resize target");
  Image out(height, width);
  // Half-pixel centers, edge clamped.
  const double sy = static_cast<double>(height_) / height;
  const double sx = static_cast<double>(width_) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(height_ - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, height_ - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(width_ - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, width_ - 1);
      const double ax = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = at(c, y0, x0) * (1 - ax) + at(c, y0, x1) * ax;
        const double bottom = at(c, y1, x0) * (1 - ax) + at(c, y1, x1) * ax;
        out.at(c, y, x) = top * (1 - ay) + bottom * ay;
      }
    }
  }
  return out;
}

Image Image::vstack(std::span<const Image> parts) {
  if (parts.empty()) return {};
  const int width = parts.front().width();
  int height = 0;
  for (const auto& p : parts) {
    if (p.width() != width) fail(ErrorKind::size, "vstack parts differ in width");
    height += p.height();
  }
  Image out(height, width);
  int y = 0;
  for (const auto& p : parts) {
    out.paste(p, 0, y);
    y += p.height();
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void Image::write_png(const std::filesystem::path& path) const {
  if (empty()) fail(ErrorKind::io, "refusing to write empty image " + path.string());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) fail(ErrorKind::io, "cannot open " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "libpng init failed");
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(width_) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "libpng write failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width_), static_cast<png_uint_32>(height_), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = to_byte(at(c, y, x));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image Image::read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) fail(ErrorKind::io, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "libpng init failed");
  }
  Image out;
  std::vector<std::uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "libpng read failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  out = Image(height, width);
  row.resize(png_get_rowbytes(png, info));
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace cxplain
