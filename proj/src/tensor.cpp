#include "cxplain/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "cxplain/error.hpp"

namespace cxplain {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::input: return "input";
    case ErrorKind::catalog: return "catalog";
    case ErrorKind::shape: return "shape";
    case ErrorKind::domain: return "domain";
    case ErrorKind::rank: return "rank";
    case ErrorKind::insufficient_samples: return "insufficient-samples";
    case ErrorKind::empty_activations: return "empty-activations";
    case ErrorKind::degenerate_contrast: return "degenerate-contrast";
    case ErrorKind::degenerate_hyperplane: return "degenerate-hyperplane";
    case ErrorKind::unsupported_op: return "unsupported-op";
    case ErrorKind::size: return "size";
    case ErrorKind::build: return "build";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::fixture: return "fixture";
  }
  return "unknown";
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) +
         ", " + std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    fail(ErrorKind::shape, "negative tensor dimension " + shape.str());
  }
}

std::span<double> Tensor::sample(int n) noexcept {
  return std::span<double>(data_).subspan(static_cast<std::size_t>(n) * shape_.sample_size(),
                                          shape_.sample_size());
}

std::span<const double> Tensor::sample(int n) const noexcept {
  return std::span<const double>(data_).subspan(
      static_cast<std::size_t>(n) * shape_.sample_size(), shape_.sample_size());
}

Tensor Tensor::slice_batch(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > shape_.n) {
    fail(ErrorKind::shape, "batch slice out of range for " + shape_.str());
  }
  Shape s = shape_;
  s.n = count;
  Tensor out(s);
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * shape_.sample_size());
  std::copy(first, first + static_cast<std::ptrdiff_t>(out.size()), out.data_.begin());
  return out;
}

Tensor Tensor::concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  s.n = 0;
  for (const auto& p : parts) {
    if (p.channels() != s.c || p.height() != s.h || p.width() != s.w) {
      fail(ErrorKind::shape, "cannot concatenate " + p.shape().str() + " onto " + s.str());
    }
    s.n += p.batch();
  }
  Tensor out(s);
  auto it = out.data_.begin();
  for (const auto& p : parts) it = std::copy(p.data_.begin(), p.data_.end(), it);
  return out;
}

double Tensor::min() const {
  return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
  return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end());
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp(logits(r, c) - peak);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return out;
}

int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

int argmax_row(const Matrix& m, Eigen::Index row) {
  return argmax(std::span<const double>(m.data() + row * m.cols(), static_cast<std::size_t>(m.cols())));
}

}  // namespace cxplain
