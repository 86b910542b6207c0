#pragma once

// Central finite-difference oracle. Independent of the backward pass: it only
// ever evaluates forward values on fresh, untraced graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ambient/autodiff.hpp"
#include "ambient/rng.hpp"

namespace ambient::testing {

using ScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

inline std::vector<Tensor> finite_difference(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                             double h = 1e-5) {
  auto eval = [&](const std::vector<Tensor>& xs) {
    Graph g(false);
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(g.constant(x));
    return fn(g, vars).value().item();
  };
  std::vector<Tensor> grads;
  std::vector<Tensor> work = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor grad = Tensor::zeros(inputs[t].shape());
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = work[t][i];
      work[t][i] = orig + h;
      const double plus = eval(work);
      work[t][i] = orig - h;
      const double minus = eval(work);
      work[t][i] = orig;
      grad[i] = (plus - minus) / (2.0 * h);
    }
    grads.push_back(std::move(grad));
  }
  return grads;
}

inline std::vector<Tensor> analytic_gradient(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  Graph g(true);
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(g.parameter("p" + std::to_string(i), inputs[i]));
  const GradientMap grads = g.backward(fn(g, vars));
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(grads.at("p" + std::to_string(i)));
  return out;
}

/// Max relative error between the backward pass and central differences.
inline double max_gradient_error(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h = 1e-5) {
  const auto a = analytic_gradient(fn, inputs);
  const auto n = finite_difference(fn, inputs, h);
  double worst = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) worst = std::max(worst, relative_error(a[t][i], n[t][i]));
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace ambient::testing
