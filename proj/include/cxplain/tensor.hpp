#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cxplain {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t sample_size() const noexcept {
    return static_cast<std::size_t>(c) * h * w;
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense (batch, channels, height, width) tensor in row-major NCHW order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);

  const Shape& shape() const noexcept { return shape_; }
  int batch() const noexcept { return shape_.n; }
  int channels() const noexcept { return shape_.c; }
  int height() const noexcept { return shape_.h; }
  int width() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int n, int c, int y, int x) noexcept { return data_[index(n, c, y, x)]; }
  double at(int n, int c, int y, int x) const noexcept { return data_[index(n, c, y, x)]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> sample(int n) noexcept;
  std::span<const double> sample(int n) const noexcept;

  Tensor slice_batch(int begin, int count) const;
  static Tensor concat_batch(std::span<const Tensor> parts);

  double min() const;
  double max() const;
  bool all_finite() const;

 private:
  std::size_t index(int n, int c, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_{};
  std::vector<double> data_;
};

/// Row-wise softmax with max subtraction.
Matrix softmax(const Matrix& logits);

/// Argmax of one row; ties go to the lowest index.
int argmax(std::span<const double> row);
int argmax_row(const Matrix& m, Eigen::Index row);

}  // namespace cxplain
