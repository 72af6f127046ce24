#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <functional>
#include <vector>

#include "gmpstar/rng.hpp"
#include "gmpstar/tensor.hpp"

namespace gmpstar::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// ||a - b|| / max(||a|| + ||b||, 1e-6). The floor covers gradients that are
/// exactly zero in theory (such as attention key biases), where both sides are
/// pure round-off.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-6);
}

using ScalarFn = std::function<Tensor(Tape&)>;

/// Central finite differences of `f` with respect to every entry of `inputs`.
inline std::vector<std::vector<double>> numeric_gradients(const ScalarFn& f, std::vector<Tensor> inputs,
                                                          double step = 1e-5) {
  std::vector<std::vector<double>> grads;
  for (auto& t : inputs) {
    std::vector<double> g(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      Tape plus;
      const double up = f(plus).item();
      t[i] = saved - step;
      Tape minus;
      const double down = f(minus).item();
      t[i] = saved;
      g[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// Largest relative error between tape gradients and finite differences over `inputs`.
inline double gradient_check(const ScalarFn& f, std::vector<Tensor> inputs) {
  Tape tape;
  const Tensor loss = f(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  const auto numeric = numeric_gradients(f, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) worst = std::max(worst, relative_error(analytic[k], numeric[k]));
  return worst;
}

/// sum(x * r) for a fixed random r, so every output entry gets a distinct weight.
inline Tensor project(Tape& tape, const Tensor& x, const Tensor& r) { return ops::sum(tape, ops::mul(tape, x, r)); }

}  // namespace gmpstar::testing
