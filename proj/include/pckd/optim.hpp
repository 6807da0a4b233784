#pragma once

// Momentum SGD with coupled weight decay and a step-decay learning rate.

#include "pckd/nn.hpp"

#include <algorithm>
#include <vector>

namespace pckd {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const {
    require(std::isfinite(lr) && lr > 0, "lr must be positive");
    require(momentum >= 0 && momentum < 1, "momentum must be in [0, 1)");
    require(std::isfinite(weight_decay) && weight_decay >= 0, "weight_decay must be non-negative");
  }
  bool operator==(const SgdConfig&) const = default;
};

/// Piecewise-constant rate: base * factor^(number of milestones <= epoch).
inline double step_learning_rate(double base, const std::vector<int>& milestones, double factor, int epoch) {
  const auto passed = std::upper_bound(milestones.begin(), milestones.end(), epoch) - milestones.begin();
  return base * std::pow(factor, double(passed));
}

/// buf = momentum * buf + (grad + wd * w);  w -= lr * buf.
template <typename S>
class Sgd {
 public:
  Sgd(nn::ParameterList<S> params, SgdConfig config) : params_(), config_(config) {
    config_.validate();
    for (auto* p : params)
      if (p->trainable) params_.push_back(p);
    buffers_.reserve(params_.size());
    for (auto* p : params_) buffers_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
  }

  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }

  void step() {
    const S lr = S(config_.lr), mu = S(config_.momentum), wd = S(config_.weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      buffers_[k] = mu * buffers_[k] + p.grad + wd * p.value;
      p.value -= lr * buffers_[k];
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const nn::ParameterList<S>& parameters() const { return params_; }

 private:
  nn::ParameterList<S> params_;
  std::vector<Matrix<S>> buffers_;
  SgdConfig config_;
};

}  // namespace pckd
