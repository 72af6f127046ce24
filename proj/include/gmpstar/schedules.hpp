#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmpstar {

/// Cubic sparsity ramp with a jump to `initial_sparsity` at the first prune
/// event and `head_freeze_epochs` / `tail_freeze_epochs` of mask-fixed
/// training on either side of the pruning window.
struct SparsityScheduleParams {
  double initial_sparsity = 0.70;
  double final_sparsity = 0.90;
  std::size_t total_epochs = 10;
  std::size_t head_freeze_epochs = 2;
  std::size_t tail_freeze_epochs = 2;
  std::size_t prune_frequency_per_epoch = 10;
  std::size_t steps_per_epoch = 100;

  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
  std::size_t window_start() const { return head_freeze_epochs * steps_per_epoch; }
  std::size_t window_epochs() const { return total_epochs - head_freeze_epochs - tail_freeze_epochs; }
  std::size_t window_steps() const { return window_epochs() * steps_per_epoch; }
  std::size_t window_end() const { return window_start() + window_steps(); }
  std::size_t num_events() const { return prune_frequency_per_epoch * window_epochs(); }

  void validate() const {
    if (!(initial_sparsity >= 0.0 && initial_sparsity < 1.0)) {
      throw std::invalid_argument("sparsity schedule: initial_sparsity must be in [0, 1)");
    }
    if (!(final_sparsity > initial_sparsity && final_sparsity < 1.0)) {
      throw std::invalid_argument("sparsity schedule: final_sparsity must be in (initial_sparsity, 1)");
    }
    if (head_freeze_epochs + tail_freeze_epochs >= total_epochs) {
      throw std::invalid_argument("sparsity schedule: freeze windows leave no pruning epochs");
    }
    if (prune_frequency_per_epoch < 1) throw std::invalid_argument("sparsity schedule: prune frequency must be >= 1");
    if (steps_per_epoch < 1) throw std::invalid_argument("sparsity schedule: steps_per_epoch must be >= 1");
    if (num_events() < 2) {
      throw std::invalid_argument("sparsity schedule: at least 2 prune events are required, got " +
                                  std::to_string(num_events()));
    }
    if (steps_per_epoch < prune_frequency_per_epoch) {
      throw std::invalid_argument("sparsity schedule: steps_per_epoch " + std::to_string(steps_per_epoch) +
                                  " is below the prune frequency " + std::to_string(prune_frequency_per_epoch));
    }
  }
};

/// Target of the k-th prune event: s_f + (s_i - s_f) * (1 - k/(K-1))^3.
/// The endpoints are returned exactly.
inline double cubic_event_sparsity(const SparsityScheduleParams& p, std::size_t k) {
  const std::size_t events = p.num_events();
  if (k >= events) throw std::out_of_range("prune event index " + std::to_string(k) + " out of range");
  if (k == 0) return p.initial_sparsity;
  if (k + 1 == events) return p.final_sparsity;
  const double remaining = 1.0 - static_cast<double>(k) / static_cast<double>(events - 1);
  return p.final_sparsity + (p.initial_sparsity - p.final_sparsity) * remaining * remaining * remaining;
}

/// Global steps at which masks are extended. Event k sits at
/// window_start + floor(k * window_steps / K).
inline std::vector<std::size_t> prune_event_steps(const SparsityScheduleParams& p) {
  p.validate();
  const std::size_t events = p.num_events(), window = p.window_steps();
  std::vector<std::size_t> steps(events);
  for (std::size_t k = 0; k < events; ++k) steps[k] = p.window_start() + k * window / events;
  return steps;
}

/// Index of the last prune event at or before `global_step`, or -1 before the window.
inline std::int64_t last_event_index(const SparsityScheduleParams& p, std::size_t global_step) {
  if (global_step < p.window_start()) return -1;
  const std::size_t events = p.num_events(), window = p.window_steps();
  const std::size_t offset = global_step - p.window_start();
  // largest k with floor(k*W/K) <= offset
  const std::size_t k = ((offset + 1) * events - 1) / window;
  return static_cast<std::int64_t>(std::min(k, events - 1));
}

/// Piecewise-constant target sparsity for a training step.
inline double sparsity_at(const SparsityScheduleParams& p, std::size_t global_step) {
  p.validate();
  if (global_step >= p.total_steps()) {
    throw std::out_of_range("sparsity_at: step " + std::to_string(global_step) + " outside run of " +
                            std::to_string(p.total_steps()) + " steps");
  }
  const auto k = last_event_index(p, global_step);
  return k < 0 ? 0.0 : cubic_event_sparsity(p, static_cast<std::size_t>(k));
}

/// Recurring linear decay: each cycle falls linearly from lr_init at its
/// first step to lr_final at its last step, then the next cycle restarts.
struct LRScheduleParams {
  double lr_init = 1e-4;
  double lr_final = 1e-6;
  double cycle_length_epochs = 2.0;
  std::size_t total_epochs = 10;
  std::size_t steps_per_epoch = 100;

  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }

  std::size_t num_cycles() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(total_epochs) / cycle_length_epochs));
  }

  void validate() const {
    if (!(lr_init > lr_final && lr_final > 0.0)) {
      throw std::invalid_argument("lr schedule: need lr_init > lr_final > 0");
    }
    if (!(cycle_length_epochs > 0.0)) throw std::invalid_argument("lr schedule: cycle_length_epochs must be positive");
    if (total_epochs < 1 || steps_per_epoch < 1) {
      throw std::invalid_argument("lr schedule: total_epochs and steps_per_epoch must be positive");
    }
    const double cycles = static_cast<double>(total_epochs) / cycle_length_epochs;
    if (std::abs(cycles - std::round(cycles)) > 1e-9 || std::round(cycles) < 1.0) {
      throw std::invalid_argument("lr schedule: cycle length " + std::to_string(cycle_length_epochs) +
                                  " does not divide " + std::to_string(total_epochs) + " epochs");
    }
    if (num_cycles() > total_steps()) throw std::invalid_argument("lr schedule: cycles shorter than one step");
  }

  /// First global step of cycle c (c == num_cycles() gives total_steps()).
  std::size_t cycle_start(std::size_t c) const { return c * total_steps() / num_cycles(); }
};

inline double lr_at(const LRScheduleParams& p, std::size_t global_step) {
  p.validate();
  const std::size_t total = p.total_steps(), cycles = p.num_cycles();
  if (global_step >= total) {
    throw std::out_of_range("lr_at: step " + std::to_string(global_step) + " outside run of " +
                            std::to_string(total) + " steps");
  }
  const std::size_t c = std::min(((global_step + 1) * cycles - 1) / total, cycles - 1);
  const std::size_t start = p.cycle_start(c), length = p.cycle_start(c + 1) - start;
  const std::size_t pos = global_step - start;
  if (pos == 0 || length == 1) return p.lr_init;
  if (pos + 1 == length) return p.lr_final;
  const double fraction = static_cast<double>(pos) / static_cast<double>(length - 1);
  return p.lr_init + (p.lr_final - p.lr_init) * fraction;
}

/// Single linear decay to zero: lr_init * (1 - step / total_steps), step in [0, total_steps].
inline double linear_decay_lr(double lr_init, std::size_t total_steps, std::size_t global_step) {
  if (total_steps == 0) throw std::invalid_argument("linear_decay_lr: total_steps must be positive");
  if (global_step > total_steps) {
    throw std::out_of_range("linear_decay_lr: step " + std::to_string(global_step) + " beyond " +
                            std::to_string(total_steps));
  }
  return lr_init * (1.0 - static_cast<double>(global_step) / static_cast<double>(total_steps));
}

}  // namespace gmpstar
