#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "daqe/tensor.hpp"

namespace daqe {

enum class Precision { F32, F64 };

struct GradCheckOptions {
  double eps = 1e-5;
  Precision analytic = Precision::F64;  // precision of the backward pass under test
  std::size_t max_coords = 0;           // per tensor; 0 checks every coordinate
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

/// Compares the tape gradient of `analytic` with central differences of
/// `numeric` (always evaluated in 64-bit). Both closures must compute the same
/// scalar from their parameter lists, which are perturbed in place.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
template <typename TA>
GradCheckResult grad_check_params(const std::function<Var<TA>(Tape<TA>&)>& analytic,
                                  const std::vector<Tensor<TA>*>& analytic_params,
                                  const std::function<Var<double>(Tape<double>&)>& numeric,
                                  const std::vector<Tensor<double>*>& numeric_params,
                                  const GradCheckOptions& opts = {}) {
  if (analytic_params.size() != numeric_params.size())
    throw Error("grad_check: parameter lists differ in length");
  for (auto* p : analytic_params) {
    p->requires_grad = true;
    p->zero_grad();
  }
  {
    Tape<TA> tape;
    Var<TA> loss = analytic(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    const double v = numeric(tape).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };
  GradCheckResult result;
  for (std::size_t ti = 0; ti < numeric_params.size(); ++ti) {
    Tensor<double>& p = *numeric_params[ti];
    const Tensor<TA>& pa = *analytic_params[ti];
    if (p.numel() != pa.numel()) throw ShapeError("grad_check: parameter shapes differ");
    const std::size_t n = p.numel();
    const std::size_t stride =
        opts.max_coords == 0 || opts.max_coords >= n ? 1 : (n + opts.max_coords - 1) / opts.max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p.data[i];
      p.data[i] = saved + opts.eps;
      const double up = eval();
      p.data[i] = saved - opts.eps;
      const double down = eval();
      p.data[i] = saved;
      const double num = (up - down) / (2.0 * opts.eps);
      const double ana = static_cast<double>(pa.grad[i]);
      const double err = std::abs(ana - num) / std::max(1.0, std::abs(ana));
      if (!std::isfinite(err)) throw NumericError("grad_check: non-finite gradient");
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = ti;
        result.worst_index = i;
      }
    }
  }
  return result;
}

/// Checks d f / d inputs. `f` is a generic callable
///   template <class T> Var<T> f(Tape<T>&, const std::vector<Var<T>>&)
/// invoked in the analytic precision and in 64-bit.
template <typename F>
double grad_check(F&& f, const std::vector<Tensor<double>>& inputs, const GradCheckOptions& opts = {}) {
  auto run = [&]<typename TA>() {
    std::vector<Tensor<TA>> xa;
    std::vector<Tensor<double>> xn = inputs;
    for (const auto& x : inputs) xa.push_back(x.template cast<TA>());
    std::vector<Tensor<TA>*> pa;
    std::vector<Tensor<double>*> pn;
    for (auto& x : xa) pa.push_back(&x);
    for (auto& x : xn) pn.push_back(&x);
    std::function<Var<TA>(Tape<TA>&)> fa = [&](Tape<TA>& t) {
      std::vector<Var<TA>> vars;
      for (auto& x : xa) vars.push_back(t.param(x));
      return f(t, vars);
    };
    std::function<Var<double>(Tape<double>&)> fn = [&](Tape<double>& t) {
      std::vector<Var<double>> vars;
      for (auto& x : xn) vars.push_back(t.param(x));
      return f(t, vars);
    };
    return grad_check_params<TA>(fa, pa, fn, pn, opts).max_rel_error;
  };
  return opts.analytic == Precision::F32 ? run.template operator()<float>()
                                         : run.template operator()<double>();
}

}  // namespace daqe
