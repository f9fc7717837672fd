#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "natf/training.hpp"

namespace natf::testing {

// Every fertility sequence in {0..classes-1}^length.
inline std::vector<FertilitySeq> enumerate_fertilities(std::size_t length, std::size_t classes) {
  std::vector<FertilitySeq> out{FertilitySeq{}};
  for (std::size_t i = 0; i < length; ++i) {
    std::vector<FertilitySeq> next;
    for (const auto& prefix : out) {
      for (std::size_t c = 0; c < classes; ++c) {
        FertilitySeq f = prefix;
        f.push_back(c);
        next.push_back(f);
      }
    }
    out = std::move(next);
  }
  return out;
}

struct EnumerationBest {
  TokenSeq output;
  double score = -std::numeric_limits<double>::infinity();
};

// Brute force: translate under every fertility sequence with an explicit
// per-position argmax and score with the step-by-step teacher.
template <typename T, typename U>
EnumerationBest brute_force_best(const NatModel<T>& model, const TeacherModel<U>& teacher, const TokenSeq& source,
                                 const std::vector<FertilitySeq>& space) {
  EnumerationBest best;
  for (const auto& f : space) {
    const Tensor<T> table = nat_forward(model, source, copy_fertility(source, f));
    std::vector<TokenId> y;
    for (std::size_t t = 0; t < table.rows(); ++t) {
      TokenId b = kUnk;
      for (TokenId v = kUnk; v < static_cast<TokenId>(table.cols()); ++v) {
        if (table(t, static_cast<std::size_t>(v)) > table(t, static_cast<std::size_t>(b))) b = v;
      }
      y.push_back(b);
    }
    const double s = score_stepwise(teacher, source, TokenSeq(y));
    if (s > best.score) {
      best.score = s;
      best.output = TokenSeq(y);
    }
  }
  return best;
}

struct GradientComparison {
  double max_abs_diff = 0.0;
  double max_abs_exact = 0.0;
};

// Expectation over all fertility outcomes of the single-sample REINFORCE
// gradient, against the exact gradient of sum_f p(f) * R(f) with R held
// constant. R(f) is the rkl loss of the floor-ruled sequence.
template <typename U>
GradientComparison reinforce_vs_exact(NatModel<double>& model, const TeacherModel<U>& teacher, const TokenSeq& source) {
  const std::size_t classes = model.fertility_classes();
  const auto space = enumerate_fertilities(source.size(), classes);
  const FertilityDist dist = predict_fertility(model, source);
  const FertilitySeq avg = average_fertilities(dist);
  const double baseline = rkl_loss(model, teacher, source, avg).loss;
  std::vector<double> reward;
  for (const auto& f : space) {
    FertilitySeq floored = f;
    apply_length_floor(floored, dist);
    reward.push_back(rkl_loss(model, teacher, source, floored).loss);
  }
  const auto& params = model.params().vars();
  auto grads = [&]() {
    std::vector<double> flat;
    for (const auto& p : params) {
      if (p.has_grad()) {
        const Tensor<double> gr = p.grad();
        flat.insert(flat.end(), gr.values().begin(), gr.values().end());
      } else {
        flat.insert(flat.end(), p.size(), 0.0);
      }
    }
    return flat;
  };
  const PackedBatch src = single(source);

  std::vector<double> expected;
  for (std::size_t k = 0; k < space.size(); ++k) {
    model.params().zero_grad();
    Graph<double> g;
    const Var<double> lp = model.fertility_log_probs(g, model.encode(g, src));
    g.backward(reinforce_surrogate(g, lp, 0, space[k], reward[k] - baseline));
    const auto gk = grads();
    const double pk = std::exp(fertility_log_prob(dist, space[k]));
    if (expected.empty()) expected.assign(gk.size(), 0.0);
    for (std::size_t i = 0; i < gk.size(); ++i) expected[i] += pk * gk[i];
  }

  model.params().zero_grad();
  Graph<double> g;
  const Var<double> lp = model.fertility_log_probs(g, model.encode(g, src));
  Var<double> objective;
  for (std::size_t k = 0; k < space.size(); ++k) {
    Tensor<double> pick(lp.shape());
    for (std::size_t i = 0; i < source.size(); ++i) pick(i, space[k][i]) = 1.0;
    const Var<double> term = g.scale(g.exp(g.dot(lp, pick)), reward[k]);
    objective = objective ? g.add(objective, term) : term;
  }
  g.backward(objective);
  const auto exact = grads();
  model.params().zero_grad();

  GradientComparison cmp;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    cmp.max_abs_diff = std::max(cmp.max_abs_diff, std::abs(exact[i] - expected[i]));
    cmp.max_abs_exact = std::max(cmp.max_abs_exact, std::abs(exact[i]));
  }
  return cmp;
}

}  // namespace natf::testing
