#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "natf/autograd.hpp"
#include "natf/error.hpp"

namespace natf {

struct AdamConfig {
  double scale = 1.0;              // peak-rate multiplier of the warmup schedule
  std::size_t warmup_steps = 746;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// scale * min(t^-0.5, t * warmup^-1.5): linear warmup, then inverse-sqrt decay.
inline double warmup_rate(double scale, std::size_t step, std::size_t warmup_steps) {
  if (step == 0 || warmup_steps == 0) {
    throw UsageError("warmup_rate: step and warmup must be positive");
  }
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return scale * std::min(1.0 / std::sqrt(t), t * std::pow(w, -1.5));
}

template <typename T>
struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
};

// One bias-corrected Adam update of a single parameter array at step t
// (already incremented) with learning rate `rate`.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments<T>& moments, std::size_t t,
                 double rate, const AdamConfig& cfg) {
  if (grad.size() != param.size() || moments.first.size() != param.size() ||
      moments.second.size() != param.size()) {
    throw UsageError("adam_update: parameter has " + std::to_string(param.size()) + " values, gradient " +
                     std::to_string(grad.size()) + ", moments " + std::to_string(moments.first.size()));
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    double& m = moments.first[i];
    double& v = moments.second[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / c1;
    const double vhat = v / c2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) - rate * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

// Adam with the warmup schedule over a fixed parameter list. step() consumes
// the accumulated gradients and clears them.
template <typename T>
class AdamWarmup {
 public:
  AdamWarmup(std::vector<Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    moments_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      moments_[i].first.assign(params_[i].size(), 0.0);
      moments_[i].second.assign(params_[i].size(), 0.0);
    }
  }

  void step() {
    ++t_;
    last_rate_ = warmup_rate(cfg_.scale, t_, cfg_.warmup_steps);
    std::vector<T> zeros;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<T>& p = params_[i];
      if (!p.requires_grad()) continue;
      std::span<const T> g;
      if (p.has_grad()) {
        g = p.node()->grad;
      } else {
        zeros.assign(p.size(), T(0));
        g = zeros;
      }
      adam_update<T>(p.mutable_value().values(), g, moments_[i], t_, last_rate_, cfg_);
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t t() const noexcept { return t_; }
  double last_rate() const noexcept { return last_rate_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  const std::vector<AdamMoments<T>>& moments() const noexcept { return moments_; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<AdamMoments<T>> moments_;
  std::size_t t_ = 0;
  double last_rate_ = 0.0;
};

}  // namespace natf
