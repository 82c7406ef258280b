#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "nlic/ops.hpp"
#include "nlic/tensor.hpp"

namespace nlic::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  auto d = t.mutable_data();
  for (auto& v : d) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = lo + (hi - lo) * u;
  }
  return t;
}

// Central finite-difference gradient of a scalar functional with respect to
// every element of `param`, compared against the analytic gradient produced
// by backward(). Returns the relative error ||g_a - g_n|| / max(||g_a||, ||g_n||)
// (Euclidean norms over all elements of `param`).
inline double gradient_check(const std::function<Tensor()>& loss_fn, Tensor& param,
                             double h = 1e-5) {
  param.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  if (analytic.empty()) analytic.assign(param.numel(), 0.0);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  auto data = param.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = loss_fn().item();
    data[i] = saved - h;
    const double down = loss_fn().item();
    data[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
    a2 += analytic[i] * analytic[i];
    n2 += numeric * numeric;
  }
  param.zero_grad();
  const double denom = std::sqrt(std::max(a2, n2));
  return denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
}

// Scalar probe: weighted sum with fixed random coefficients, so every output
// element influences the loss differently.
inline Tensor probe(const Tensor& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor coeffs = random_tensor(t.shape(), rng);
  return sum(mul(t, coeffs));
}

}  // namespace nlic::testing
