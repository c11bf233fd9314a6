#include "cxplain/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string_view>

#include "cxplain/error.hpp"
#include "cxplain/io.hpp"

namespace cxplain {

namespace {

constexpr std::array<char, 8> kDatasetMagic{'C', 'X', 'D', 'S', '0', '0', '0', '1'};

}  // namespace

int Dataset::num_classes() const {
  if (labels_.empty()) return 0;
  return *std::max_element(labels_.begin(), labels_.end()) + 1;
}

Image Dataset::image(SourceId id) const {
  if (id >= size()) fail(ErrorKind::input, "source id " + std::to_string(id) + " out of range");
  Image out(height_, width_);
  const std::size_t stride = static_cast<std::size_t>(3) * height_ * width_;
  const std::uint8_t* src = pixels_.data() + stride * id;
  auto dst = out.pixels();
  for (std::size_t i = 0; i < stride; ++i) dst[i] = src[i] / 255.0;
  return out;
}

std::string Dataset::id_string(SourceId id) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06u", static_cast<unsigned>(id));
  return buf;
}

void Dataset::add(const Image& image, int label) {
  if (image.height() != height_ || image.width() != width_) {
    fail(ErrorKind::shape, "dataset images must all be " + std::to_string(height_) + "x" +
                               std::to_string(width_));
  }
  if (label < 0) fail(ErrorKind::input, "negative label");
  labels_.push_back(label);
  for (double v : image.pixels()) {
    pixels_.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
}

void Dataset::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  const std::uint32_t header[3] = {static_cast<std::uint32_t>(size()),
                                   static_cast<std::uint32_t>(height_),
                                   static_cast<std::uint32_t>(width_)};
  out.write(kDatasetMagic.data(), kDatasetMagic.size());
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  const std::size_t stride = static_cast<std::size_t>(3) * height_ * width_;
  for (std::size_t i = 0; i < size(); ++i) {
    out.write(reinterpret_cast<const char*>(&labels_[i]), sizeof(std::int32_t));
    out.write(reinterpret_cast<const char*>(pixels_.data() + stride * i),
              static_cast<std::streamsize>(stride));
  }
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

Dataset Dataset::load(const std::filesystem::path& path) {
  if (path.extension() == ".bin") return load_cifar10(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read dataset " + path.string());
  std::array<char, 8> magic{};
  std::uint32_t header[3] = {0, 0, 0};
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || magic != kDatasetMagic) fail(ErrorKind::io, "not a dataset file: " + path.string());
  Dataset ds(static_cast<int>(header[1]), static_cast<int>(header[2]));
  const std::size_t stride = static_cast<std::size_t>(3) * ds.height_ * ds.width_;
  ds.labels_.resize(header[0]);
  ds.pixels_.resize(stride * header[0]);
  for (std::size_t i = 0; i < header[0]; ++i) {
    in.read(reinterpret_cast<char*>(&ds.labels_[i]), sizeof(std::int32_t));
    in.read(reinterpret_cast<char*>(ds.pixels_.data() + stride * i),
            static_cast<std::streamsize>(stride));
  }
  if (!in) fail(ErrorKind::io, "truncated dataset file: " + path.string());
  return ds;
}

Dataset Dataset::load_cifar10(const std::filesystem::path& path) {
  constexpr std::size_t kStride = 3 * 32 * 32;
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read dataset " + path.string());
  Dataset ds(32, 32);
  std::array<char, 1 + kStride> record{};
  while (in.read(record.data(), static_cast<std::streamsize>(record.size()))) {
    ds.labels_.push_back(static_cast<unsigned char>(record[0]));
    ds.pixels_.insert(ds.pixels_.end(), record.begin() + 1, record.end());
  }
  if (ds.empty()) fail(ErrorKind::io, "no CIFAR-10 records in " + path.string());
  return ds;
}

std::uint64_t Dataset::fingerprint() const {
  std::uint64_t h = fnv1a(std::string_view(reinterpret_cast<const char*>(labels_.data()),
                                           labels_.size() * sizeof(std::int32_t)));
  return fnv1a(std::string_view(reinterpret_cast<const char*>(pixels_.data()), pixels_.size()), h);
}

}  // namespace cxplain
