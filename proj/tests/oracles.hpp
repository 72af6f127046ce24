#pragma once

// Reference implementations written without the library's shortcuts. They
// trade speed for obviousness: long double division instead of integer
// tricks, std::pow instead of repeated products, full sorts instead of
// selection, and row-by-row loss evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "gmpstar/pruning.hpp"
#include "gmpstar/schedules.hpp"
#include "gmpstar/tensor.hpp"

namespace gmpstar::oracle {

struct SparsitySchedule {
  std::vector<std::size_t> events;
  std::vector<double> targets;

  explicit SparsitySchedule(const SparsityScheduleParams& p) {
    const std::size_t window_epochs = p.total_epochs - p.head_freeze_epochs - p.tail_freeze_epochs;
    const long double K = static_cast<long double>(p.prune_frequency_per_epoch * window_epochs);
    const long double W = static_cast<long double>(p.steps_per_epoch * window_epochs);
    const auto count = static_cast<std::size_t>(K);
    for (std::size_t k = 0; k < count; ++k) {
      events.push_back(p.head_freeze_epochs * p.steps_per_epoch +
                       static_cast<std::size_t>(std::floor(static_cast<long double>(k) * W / K)));
      const double frac = 1.0 - static_cast<double>(k) / static_cast<double>(count - 1);
      targets.push_back(p.final_sparsity + (p.initial_sparsity - p.final_sparsity) * std::pow(frac, 3.0));
    }
  }

  double at(std::size_t step) const {
    double value = 0.0;
    for (std::size_t k = 0; k < events.size() && events[k] <= step; ++k) value = targets[k];
    return value;
  }
};

inline double lr(const LRScheduleParams& p, std::size_t step) {
  const std::size_t total = p.total_epochs * p.steps_per_epoch;
  const auto cycles = static_cast<std::size_t>(std::llround(p.total_epochs / p.cycle_length_epochs));
  std::vector<std::size_t> starts;
  for (std::size_t c = 0; c <= cycles; ++c) {
    starts.push_back(static_cast<std::size_t>(
        std::floor(static_cast<long double>(c) * static_cast<long double>(total) / static_cast<long double>(cycles))));
  }
  std::size_t c = 0;
  while (starts[c + 1] <= step) ++c;
  const double span = static_cast<double>(starts[c + 1] - starts[c] - 1);
  const double t = static_cast<double>(step - starts[c]);
  return span == 0.0 ? p.lr_init : p.lr_init - (p.lr_init - p.lr_final) * (t / span);
}

/// 0, the last step, then pseudo-random steps; every step when the run is short.
inline std::vector<std::size_t> sample_steps(std::size_t total, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> out;
  if (total <= n) {
    for (std::size_t s = 0; s < total; ++s) out.push_back(s);
    return out;
  }
  std::uint64_t x = seed;
  out.push_back(0);
  out.push_back(total - 1);
  while (out.size() < n) {
    x = x * 6364136223846793005ULL + 1442695040888963407ULL;
    out.push_back(static_cast<std::size_t>((x >> 17) % total));
  }
  return out;
}

using Keep = std::vector<std::vector<std::uint8_t>>;
using Key = std::tuple<double, std::size_t, std::size_t>;  // |w|, tensor, index

inline Keep keeps(const MaskSet& masks) {
  Keep out;
  for (const auto& m : masks) out.push_back(m.keep);
  return out;
}

inline Keep prune_uniform(const ParameterSet& params, const MaskSet& masks, double target) {
  Keep keep;
  for (std::size_t t = 0; t < masks.size(); ++t) {
    auto k = masks[t].keep;
    const auto values = params.at(masks[t].name).values();
    const auto count = static_cast<std::size_t>(std::floor(target * static_cast<double>(k.size()) + 0.5 + 1e-9));
    std::vector<Key> alive;
    for (std::size_t j = 0; j < k.size(); ++j) {
      if (k[j]) alive.emplace_back(std::abs(values[j]), t, j);
    }
    std::sort(alive.begin(), alive.end());
    const std::size_t already = masks[t].pruned();
    for (std::size_t r = 0; r + already < count; ++r) k[std::get<2>(alive[r])] = 0;
    keep.push_back(std::move(k));
  }
  return keep;
}

inline Keep prune_global(const ParameterSet& params, const MaskSet& masks, double target) {
  Keep keep;
  std::vector<Key> alive;
  std::size_t total = 0, already = 0;
  for (std::size_t t = 0; t < masks.size(); ++t) {
    keep.push_back(masks[t].keep);
    total += masks[t].keep.size();
    already += masks[t].pruned();
    const auto values = params.at(masks[t].name).values();
    for (std::size_t j = 0; j < masks[t].keep.size(); ++j) {
      if (masks[t].keep[j]) alive.emplace_back(std::abs(values[j]), t, j);
    }
  }
  std::sort(alive.begin(), alive.end());
  const auto count = static_cast<std::size_t>(std::floor(target * static_cast<double>(total) + 1e-9));
  for (std::size_t r = 0; r + already < count; ++r) keep[std::get<1>(alive[r])][std::get<2>(alive[r])] = 0;
  return keep;
}

inline std::vector<double> softmax(const std::vector<double>& z, double t) {
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += std::exp(z[i] / t);
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] / t) / total;
  return p;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) h -= v > 0.0 ? v * std::log(v) : 0.0;
  return h;
}

/// Batch-mean (1-h) CE + h * scale * KL(teacher || student), row by row.
inline double kd_loss(const Tensor& s, const Tensor& t, const std::vector<std::size_t>& labels, double hardness,
                      double temperature, bool kl_scaling) {
  const std::size_t rows = s.extent(0), classes = s.extent(1);
  double ce = 0.0, kl = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> zs(classes), zt(classes);
    for (std::size_t c = 0; c < classes; ++c) {
      zs[c] = s[r * classes + c];
      zt[c] = t[r * classes + c];
    }
    ce -= std::log(softmax(zs, 1.0)[labels[r]]);
    const auto ps = softmax(zs, temperature), pt = softmax(zt, temperature);
    for (std::size_t c = 0; c < classes; ++c) kl += pt[c] * std::log(pt[c] / ps[c]);
  }
  ce /= static_cast<double>(rows);
  kl /= static_cast<double>(rows);
  const double scale = kl_scaling ? temperature * temperature : 1.0;
  return (1.0 - hardness) * ce + hardness * scale * kl;
}

}  // namespace gmpstar::oracle
