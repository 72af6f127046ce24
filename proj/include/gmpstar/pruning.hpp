#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gmpstar/encoder.hpp"
#include "gmpstar/tensor.hpp"

namespace gmpstar {

/// How a target sparsity is spread over the prunable tensors.
enum class DistributionPolicy { uniform, global };

inline std::string_view to_string(DistributionPolicy p) { return p == DistributionPolicy::uniform ? "uniform" : "global"; }

inline DistributionPolicy parse_distribution_policy(std::string_view text) {
  if (text == "uniform") return DistributionPolicy::uniform;
  if (text == "global") return DistributionPolicy::global;
  throw std::invalid_argument("unknown distribution policy '" + std::string(text) + "'");
}

/// The tensors that count toward sparsity. Only encoder weight matrices are
/// eligible; embeddings, biases, normalization and the classifier head are not.
class PrunableSet {
 public:
  PrunableSet() = default;

  PrunableSet(const ParameterSet& params, std::vector<std::string> names) : names_(std::move(names)) {
    for (const auto& name : names_) {
      const Tensor* t = params.find(name);
      if (!t) throw std::invalid_argument("prunable set: no parameter named '" + name + "'");
      if (!is_eligible(name, *t)) throw std::invalid_argument("prunable set: '" + name + "' is not an encoder weight");
      sizes_.push_back(t->size());
      total_ += t->size();
    }
  }

  /// Every eligible tensor of `params`, in parameter order.
  static PrunableSet encoder_weights(const ParameterSet& params) {
    std::vector<std::string> names;
    for (const auto& e : params) {
      if (is_eligible(e.name, e.tensor)) names.push_back(e.name);
    }
    return PrunableSet(params, std::move(names));
  }

  static bool is_eligible(std::string_view name, const Tensor& t) {
    return parameter_group(name) == ParameterGroup::encoder && name.ends_with(".weight") && t.rank() == 2;
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size_of(std::size_t i) const { return sizes_.at(i); }
  std::size_t total_count() const { return total_; }
  std::size_t min_tensor_size() const { return sizes_.empty() ? 0 : *std::min_element(sizes_.begin(), sizes_.end()); }

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> sizes_;
  std::size_t total_ = 0;
};

struct TensorMask {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> keep;  // 1 = kept, 0 = pruned

  std::size_t pruned() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0)); }
  bool operator==(const TensorMask&) const = default;
};

/// Binary keep/prune state for every tensor of a PrunableSet. Masks only
/// ever gain zeros.
class MaskSet {
 public:
  MaskSet() = default;

  /// All-ones masks aligned with the prunable tensors.
  MaskSet(const ParameterSet& params, const PrunableSet& prunable) {
    for (const auto& name : prunable.names()) {
      const Tensor& t = params.at(name);
      masks_.push_back({name, t.shape(), std::vector<std::uint8_t>(t.size(), 1)});
    }
  }

  explicit MaskSet(std::vector<TensorMask> masks) : masks_(std::move(masks)) {
    for (const auto& m : masks_) {
      if (m.keep.size() != numel(m.shape)) throw ShapeError("mask '" + m.name + "' does not match its shape");
      for (auto v : m.keep) {
        if (v > 1) throw std::invalid_argument("mask '" + m.name + "' has a non-binary entry");
      }
    }
  }

  std::size_t size() const { return masks_.size(); }
  auto begin() const { return masks_.begin(); }
  auto end() const { return masks_.end(); }
  TensorMask& operator[](std::size_t i) { return masks_.at(i); }
  const TensorMask& operator[](std::size_t i) const { return masks_.at(i); }

  const TensorMask* find(std::string_view name) const {
    for (const auto& m : masks_) {
      if (m.name == name) return &m;
    }
    return nullptr;
  }

  std::size_t total_pruned() const {
    std::size_t n = 0;
    for (const auto& m : masks_) n += m.pruned();
    return n;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& m : masks_) n += m.keep.size();
    return n;
  }

  double achieved_sparsity() const {
    const auto total = total_count();
    return total == 0 ? 0.0 : static_cast<double>(total_pruned()) / static_cast<double>(total);
  }

  bool operator==(const MaskSet&) const = default;

 private:
  std::vector<TensorMask> masks_;
};

namespace detail {

// Absorbs representation error in products such as 0.29 * 100.
constexpr double kCountSlack = 1e-9;

inline std::size_t round_half_up_count(double target, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::floor(target * static_cast<double>(n) + 0.5 + kCountSlack)));
}

inline std::size_t floor_count(double target, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::floor(target * static_cast<double>(n) + kCountSlack)));
}

inline void check_mask_alignment(const ParameterSet& params, const MaskSet& masks) {
  for (const auto& m : masks) {
    const Tensor* t = params.find(m.name);
    if (!t) throw std::invalid_argument("mask refers to unknown parameter '" + m.name + "'");
    if (t->shape() != m.shape) {
      throw ShapeError("mask '" + m.name + "' has shape " + to_string(m.shape) + " but parameter has " +
                       to_string(t->shape()));
    }
  }
}

}  // namespace detail

/// Number of entries each mask must have pruned to reach `target`.
///
/// Uniform: round-half-up of target * n per tensor. Global: floor of
/// target * total for the union, returned as a single-element vector.
inline std::vector<std::size_t> required_prune_counts(const MaskSet& masks, double target, DistributionPolicy policy) {
  std::vector<std::size_t> counts;
  if (policy == DistributionPolicy::uniform) {
    for (const auto& m : masks) counts.push_back(detail::round_half_up_count(target, m.keep.size()));
  } else {
    counts.push_back(detail::floor_count(target, masks.total_count()));
  }
  return counts;
}

/// Extends `masks` so the prunable set reaches `target` sparsity, pruning the
/// smallest-magnitude surviving weights. Ties go to the lower flat index,
/// and for the global policy to the earlier tensor first.
inline void magnitude_prune(const ParameterSet& params, MaskSet& masks, double target, DistributionPolicy policy) {
  if (!(target >= 0.0 && target <= 1.0)) {
    throw std::invalid_argument("magnitude_prune: target " + std::to_string(target) + " outside [0, 1]");
  }
  detail::check_mask_alignment(params, masks);
  const auto counts = required_prune_counts(masks, target, policy);

  const auto below_current = [&](std::size_t want, std::size_t have) {
    if (want < have) {
      throw std::invalid_argument("magnitude_prune: target " + std::to_string(target) +
                                  " is below the current sparsity; masks never shrink");
    }
  };

  if (policy == DistributionPolicy::uniform) {
    for (std::size_t i = 0; i < masks.size(); ++i) below_current(counts[i], masks[i].pruned());
    for (std::size_t i = 0; i < masks.size(); ++i) {
      auto& mask = masks[i];
      const auto values = params.at(mask.name).values();
      const std::size_t need = counts[i] - mask.pruned();
      if (need == 0) continue;
      std::vector<std::size_t> alive;
      for (std::size_t j = 0; j < mask.keep.size(); ++j) {
        if (mask.keep[j]) alive.push_back(j);
      }
      const auto smaller = [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(values[a]), mb = std::abs(values[b]);
        return ma < mb || (ma == mb && a < b);
      };
      std::nth_element(alive.begin(), alive.begin() + static_cast<std::ptrdiff_t>(need - 1), alive.end(), smaller);
      for (std::size_t r = 0; r < need; ++r) mask.keep[alive[r]] = 0;
    }
    return;
  }

  below_current(counts[0], masks.total_pruned());
  const std::size_t need = counts[0] - masks.total_pruned();
  if (need == 0) return;
  struct Entry {
    double magnitude;
    std::size_t tensor;
    std::size_t index;
  };
  std::vector<Entry> alive;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto values = params.at(masks[i].name).values();
    for (std::size_t j = 0; j < masks[i].keep.size(); ++j) {
      if (masks[i].keep[j]) alive.push_back({std::abs(values[j]), i, j});
    }
  }
  const auto smaller = [](const Entry& a, const Entry& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.index < b.index;
  };
  std::nth_element(alive.begin(), alive.begin() + static_cast<std::ptrdiff_t>(need - 1), alive.end(), smaller);
  for (std::size_t r = 0; r < need; ++r) masks[alive[r].tensor].keep[alive[r].index] = 0;
}

/// Writes +0.0 into every masked parameter entry.
inline void apply_masks(ParameterSet& params, const MaskSet& masks) {
  detail::check_mask_alignment(params, masks);
  for (const auto& m : masks) {
    auto values = params.at(m.name).values();
    for (std::size_t j = 0; j < m.keep.size(); ++j) {
      if (!m.keep[j]) values[j] = 0.0;
    }
  }
}

/// Zeroes the gradient of every masked entry so pruned weights never move.
inline void zero_masked_grads(ParameterSet& params, const MaskSet& masks) {
  for (const auto& m : masks) {
    Tensor& t = params.at(m.name);
    if (!t.has_grad()) continue;
    auto grad = t.grad();
    for (std::size_t j = 0; j < m.keep.size(); ++j) {
      if (!m.keep[j]) grad[j] = 0.0;
    }
  }
}

struct TensorSparsity {
  std::string name;
  std::size_t pruned = 0;
  std::size_t total = 0;
  double sparsity = 0.0;
};

struct SparsityReport {
  std::vector<TensorSparsity> tensors;
  std::size_t pruned = 0;
  std::size_t total = 0;
  double aggregate = 0.0;
};

/// Per-tensor and aggregate sparsity over the prunable set.
inline SparsityReport sparsity_report(const MaskSet& masks, const PrunableSet& prunable) {
  SparsityReport report;
  for (std::size_t i = 0; i < prunable.names().size(); ++i) {
    const auto& name = prunable.names()[i];
    TensorSparsity row{name, 0, prunable.size_of(i), 0.0};
    if (const TensorMask* m = masks.find(name)) row.pruned = m->pruned();
    row.sparsity = static_cast<double>(row.pruned) / static_cast<double>(row.total);
    report.pruned += row.pruned;
    report.total += row.total;
    report.tensors.push_back(std::move(row));
  }
  report.aggregate = report.total == 0 ? 0.0 : static_cast<double>(report.pruned) / static_cast<double>(report.total);
  return report;
}

}  // namespace gmpstar
