#pragma once

#include <functional>

#include "sgdc/tape.hpp"
#include "sgdc/tensor.hpp"

namespace sgdc {

// Scalar-valued function of one tensor, built on a fresh tape per call.
using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double tape_grad = 0.0;  // at worst_index
  double fd_grad = 0.0;    // at worst_index
};

// Central finite differences (f(x + e_i h) - f(x - e_i h)) / 2h against the
// tape gradient, element by element. h defaults to eps * max(1, |x_i|).
// Relative error uses the denominator max(|a|, |b|, 1e-8).
// Throws NumericError when f produces NaN/Inf.
FdResult finite_diff_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-4);

double relative_error(double a, double b);

}  // namespace sgdc
