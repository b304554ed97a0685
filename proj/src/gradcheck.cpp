#include "sgdc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sgdc {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {

double evaluate(const ScalarFn& f, const Tensor<double>& x) {
  Tape<double> tape;
  auto v = tape.constant(x);
  const auto out = f(tape, v);
  if (out.value().numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
  const double y = out.value()[0];
  if (!std::isfinite(y)) throw NumericError("finite_diff_check: f evaluated to a non-finite value");
  return y;
}

}  // namespace

FdResult finite_diff_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be > 0");
  Tape<double> tape;
  auto leaf = tape.leaf(x);
  auto out = f(tape, leaf);
  if (out.value().numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
  if (!std::isfinite(out.value()[0])) throw NumericError("finite_diff_check: f evaluated to a non-finite value");
  const auto grads = tape.backward(out);
  const Tensor<double>& g = grads[leaf];

  FdResult res;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double h = eps * std::max(1.0, std::abs(x[i]));
    probe[i] = x[i] + h;
    const double fp = evaluate(f, probe);
    probe[i] = x[i] - h;
    const double fm = evaluate(f, probe);
    probe[i] = x[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double err = relative_error(g[i], fd);
    if (err > res.max_rel_error || i == 0) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      if (err >= res.max_rel_error) {
        res.worst_index = i;
        res.tape_grad = g[i];
        res.fd_grad = fd;
      }
    }
  }
  return res;
}

}  // namespace sgdc
