#pragma once

#include <cstdint>
#include <vector>

#include "cxplain/tensor.hpp"

namespace cxplain {

struct NmfOptions {
  int max_iter = 200;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

/// V (P x C) ~= W (P x n) * H (n x C).
struct NmfResult {
  Matrix W;
  Matrix H;
  int iterations = 0;
  double final_rel_error = 0.0;
  /// ||V - WH||_F after initialization (element 0) and after each iteration.
  std::vector<double> objective;
};

/// Lee-Seung multiplicative updates for the Frobenius objective.
///
/// H is initialized from `seed`; each row of W from a seed derived from
/// `seed` and the bytes of the matching row of V, so permuting the rows of
/// V permutes W's initialization with them. Both start uniform in (0, 1]
/// scaled by sqrt(mean(V) / n). Iteration stops once the relative error
/// improves by less than `tol` in one step, or after `max_iter` steps.
NmfResult nmf_fit(const Matrix& V, int n, const NmfOptions& options = {});

}  // namespace cxplain
