#include "cxplain/nmf.hpp"

#include <cmath>
#include <random>
#include <string_view>

#include "cxplain/error.hpp"
#include "cxplain/io.hpp"

namespace cxplain {

namespace {

constexpr double kDenominatorFloor = 1e-300;

double uniform_open_closed(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return 1.0 - u(rng);
}

std::uint64_t row_key(const Matrix& V, Eigen::Index row) {
  const auto* bytes = reinterpret_cast<const char*>(V.data() + row * V.cols());
  return fnv1a(std::string_view(bytes, static_cast<std::size_t>(V.cols()) * sizeof(double)));
}

}  // namespace

NmfResult nmf_fit(const Matrix& V, int n, const NmfOptions& options) {
  const Eigen::Index rows = V.rows();
  const Eigen::Index cols = V.cols();
  if (n < 1 || n > std::min(rows, cols)) {
    fail(ErrorKind::rank, "NMF rank " + std::to_string(n) + " invalid for a " + std::to_string(rows) + "x" +
                              std::to_string(cols) + " matrix");
  }
  if (!V.allFinite()) fail(ErrorKind::domain, "NMF input contains non-finite values");
  if (V.minCoeff() < 0.0) fail(ErrorKind::domain, "NMF input has a negative entry");
  const double norm_v = V.norm();
  if (norm_v == 0.0) fail(ErrorKind::domain, "NMF input is all zero");

  const double scale = std::sqrt(V.mean() / n);
  NmfResult r;
  r.W.resize(rows, n);
  r.H.resize(n, cols);
  std::mt19937_64 rng(options.seed);
  for (Eigen::Index k = 0; k < r.H.size(); ++k) r.H.data()[k] = scale * uniform_open_closed(rng);
  for (Eigen::Index i = 0; i < rows; ++i) {
    std::mt19937_64 row_rng(derive_seed(options.seed, row_key(V, i)));
    for (Eigen::Index k = 0; k < n; ++k) r.W(i, k) = scale * uniform_open_closed(row_rng);
  }

  double err = (V - r.W * r.H).norm();
  r.objective.push_back(err);
  Matrix numer;
  Matrix denom;
  for (int it = 1; it <= options.max_iter; ++it) {
    numer.noalias() = r.W.transpose() * V;
    denom.noalias() = (r.W.transpose() * r.W) * r.H;
    r.H.array() *= numer.array() / denom.array().max(kDenominatorFloor);

    numer.noalias() = V * r.H.transpose();
    denom.noalias() = r.W * (r.H * r.H.transpose());
    r.W.array() *= numer.array() / denom.array().max(kDenominatorFloor);

    const double prev = err;
    err = (V - r.W * r.H).norm();
    r.objective.push_back(err);
    r.iterations = it;
    if (prev == 0.0 || (prev - err) / prev < options.tol) break;
  }
  r.final_rel_error = err / norm_v;
  return r;
}

}  // namespace cxplain
