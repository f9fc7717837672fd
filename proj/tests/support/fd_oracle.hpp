#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "natf/autograd.hpp"
#include "natf/rng.hpp"

namespace natf::testing {

using Builder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct FdResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
};

// Central differences with step h on every scalar of every input. The error
// per input tensor is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6 * max(1, |loss|));
// the floor keeps identically-zero gradients (e.g. key biases under softmax
// shift invariance) from turning roundoff into a large ratio. A step of 1e-4
// can straddle a relu kink in the small whole-model cases.
inline FdResult finite_difference_check(const Builder& build, std::vector<Var<double>> inputs, double h = 1e-5) {
  for (auto& v : inputs) {
    v.set_requires_grad(true);
    v.zero_grad();
  }
  double loss_value = 0.0;
  {
    Graph<double> g;
    const Var<double> loss = build(g, inputs);
    loss_value = loss.item();
    g.backward(loss);
  }
  const double floor = 1e-6 * std::max(1.0, std::abs(loss_value));
  auto eval = [&] {
    Graph<double> g(GradMode::kInference);
    return build(g, inputs).item();
  };
  FdResult result;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const Tensor<double> analytic = inputs[p].grad();
    auto& vals = inputs[p].mutable_value();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = eval();
      vals[i] = keep - h;
      const double down = eval();
      vals[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_param = p;
    }
  }
  return result;
}

inline Var<double> random_input(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return Var<double>::leaf(std::move(t), true);
}

// Fixed random projection so that non-scalar outputs reduce to a scalar with
// a non-uniform upstream gradient.
inline Var<double> project(Graph<double>& g, const Var<double>& x, std::uint64_t seed = 7) {
  Rng rng(seed);
  Tensor<double> w(x.shape());
  for (auto& v : w.storage()) v = rng.uniform(-1.0, 1.0);
  return g.dot(x, w);
}

}  // namespace natf::testing
