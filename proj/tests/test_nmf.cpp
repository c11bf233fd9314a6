#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "cxplain/error.hpp"
#include "cxplain/nmf.hpp"

using namespace cxplain;

namespace {

Matrix random_nonneg(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

ErrorKind kind_of(const Matrix& v, int n) {
  try {
    nmf_fit(v, n);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::input;
}

}  // namespace

TEST_CASE("objective never increases") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const int rows = 10 + static_cast<int>(s * 7 % 60);
    const int cols = 3 + static_cast<int>(s % 9);
    const Matrix v = random_nonneg(rows, cols, s);
    const int n = 1 + static_cast<int>(s % static_cast<std::uint64_t>(std::min(rows, cols)));
    const NmfResult r = nmf_fit(v, n, {100, 0.0, s});
    REQUIRE(r.objective.size() == static_cast<std::size_t>(r.iterations) + 1);
    for (std::size_t i = 1; i < r.objective.size(); ++i) {
      CHECK(r.objective[i] <= r.objective[i - 1] * (1.0 + 1e-12));
    }
    CHECK(r.W.minCoeff() >= 0.0);
    CHECK(r.H.minCoeff() >= 0.0);
    CHECK(r.final_rel_error == doctest::Approx(r.objective.back() / v.norm()));
  }
}

TEST_CASE("rank one input is recovered") {
  const Matrix u = random_nonneg(80, 1, 1).array() + 0.1;
  const Matrix w = random_nonneg(1, 12, 2).array() + 0.1;
  const Matrix v = u * w;
  const NmfResult r = nmf_fit(v, 1);
  CHECK(r.final_rel_error <= 1e-3);
  const double cosine = r.H.row(0).dot(w.row(0)) / (r.H.row(0).norm() * w.row(0).norm());
  CHECK(cosine >= 1.0 - 1e-6);
}

TEST_CASE("noisy low-rank input is fit to within twice the noise floor") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.05);
  const Matrix clean = random_nonneg(300, 4, 3) * random_nonneg(4, 20, 4);
  Matrix v = clean;
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std::max(0.0, v.data()[i] + noise(rng));
  const double floor = (v - clean).norm() / v.norm();
  const NmfResult r = nmf_fit(v, 4, {1000, 1e-6, 0});
  CHECK(r.final_rel_error <= 2.0 * floor);
}

TEST_CASE("seeded fits are bit-identical") {
  const Matrix v = random_nonneg(50, 8, 5);
  const NmfResult a = nmf_fit(v, 3, {200, 1e-4, 42});
  const NmfResult b = nmf_fit(v, 3, {200, 1e-4, 42});
  CHECK(a.H == b.H);
  CHECK(a.W == b.W);
  CHECK(a.objective == b.objective);
  const NmfResult c = nmf_fit(v, 3, {200, 1e-4, 43});
  CHECK(c.H != a.H);
}

TEST_CASE("permuting rows permutes W and keeps H") {
  const Matrix v = random_nonneg(40, 6, 6);
  std::vector<int> perm(40);
  for (int i = 0; i < 40; ++i) perm[static_cast<std::size_t>(i)] = (i * 17 + 3) % 40;
  Matrix pv(40, 6);
  for (int i = 0; i < 40; ++i) pv.row(i) = v.row(perm[static_cast<std::size_t>(i)]);
  const NmfResult a = nmf_fit(v, 3, {50, 0.0, 1});
  const NmfResult b = nmf_fit(pv, 3, {50, 0.0, 1});
  CHECK((a.H - b.H).norm() <= 1e-9 * a.H.norm());
  for (int i = 0; i < 40; ++i) {
    CHECK((b.W.row(i) - a.W.row(perm[static_cast<std::size_t>(i)])).norm() <= 1e-9 * (1.0 + a.W.norm()));
  }
}

TEST_CASE("stopping rule honors max_iter and tol") {
  const Matrix v = random_nonneg(30, 5, 7);
  CHECK(nmf_fit(v, 2, {5, 0.0, 0}).iterations == 5);
  const NmfResult loose = nmf_fit(v, 2, {500, 1e-2, 0});
  CHECK(loose.iterations < 500);
  CHECK(loose.iterations >= 1);
}

TEST_CASE("invalid inputs are rejected") {
  const Matrix v = random_nonneg(6, 4, 8);
  CHECK(kind_of(v, 0) == ErrorKind::rank);
  CHECK(kind_of(v, 5) == ErrorKind::rank);
  Matrix neg = v;
  neg(2, 1) = -0.1;
  CHECK(kind_of(neg, 2) == ErrorKind::domain);
  Matrix nan = v;
  nan(0, 0) = std::nan("");
  CHECK(kind_of(nan, 2) == ErrorKind::domain);
  CHECK(kind_of(Matrix::Zero(6, 4), 2) == ErrorKind::domain);
  CHECK(nmf_fit(v, 4).H.rows() == 4);
}
