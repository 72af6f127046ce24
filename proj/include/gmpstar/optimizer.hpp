#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmpstar/tensor.hpp"

namespace gmpstar {

struct AdamConfig {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  double weight_decay = 0.0;
  double beta1 = kBeta1;
  double beta2 = kBeta2;
  double epsilon = kEpsilon;
};

/// Adam with decoupled weight decay. The learning rate is not part of the
/// state; callers pass the scheduled value on every step.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    first_.reserve(params_.size());
    second_.reserve(params_.size());
    for (const auto& p : params_) {
      first_.emplace_back(p.size(), 0.0);
      second_.emplace_back(p.size(), 0.0);
    }
  }

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return steps_; }
  std::size_t num_params() const { return params_.size(); }

  std::span<double> first_moment(std::size_t i) { return first_.at(i); }
  std::span<double> second_moment(std::size_t i) { return second_.at(i); }
  std::span<const double> first_moment(std::size_t i) const { return first_.at(i); }
  std::span<const double> second_moment(std::size_t i) const { return second_.at(i); }

  /// Applies one update with learning rate `lr`, then drops all gradients.
  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) {
        throw std::logic_error("optimizer step: parameter " + std::to_string(i) + " has no gradient");
      }
    }
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double correction1 = 1.0 - std::pow(config_.beta1, t);
    const double correction2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto values = params_[i].values();
      auto grad = params_[i].grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * grad[j];
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * grad[j] * grad[j];
        const double update = (m[j] / correction1) / (std::sqrt(v[j] / correction2) + config_.epsilon);
        values[j] -= lr * (update + config_.weight_decay * values[j]);
      }
      params_[i].clear_grad();
    }
  }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace gmpstar
