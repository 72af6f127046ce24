#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmpstar/encoder.hpp"
#include "gmpstar/task.hpp"
#include "gmpstar/tensor.hpp"

namespace gmpstar {

/// Distillation settings: loss = (1 - hardness) * CE + hardness * scale * KL,
/// with scale = temperature^2 when kl_scaling is set.
struct KDConfig {
  double hardness = 1.0;
  double temperature = 5.5;
  bool kl_scaling = true;

  void validate() const {
    if (!(hardness >= 0.0 && hardness <= 1.0)) {
      throw std::invalid_argument("kd: hardness " + std::to_string(hardness) + " outside [0, 1]");
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw std::invalid_argument("kd: temperature must be positive");
    }
  }

  double kl_scale() const { return kl_scaling ? temperature * temperature : 1.0; }

  bool operator==(const KDConfig&) const = default;
};

/// softmax(logits / T) for one row of logits.
inline std::vector<double> soften(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("soften: temperature must be positive");
  if (logits.empty()) throw std::invalid_argument("soften: empty logits");
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] * (1.0 / temperature);
  const double peak = *std::max_element(scaled.begin(), scaled.end());
  double total = 0.0;
  for (auto& v : scaled) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : scaled) v /= total;
  return scaled;
}

/// Shannon entropy in nats.
inline double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

struct KDLoss {
  Tensor loss;       // differentiable w.r.t. the student logits
  double ce = 0.0;   // task cross-entropy
  double kl = 0.0;   // scale * KL(teacher || student), before hardness weighting
};

/// Cross-entropy on the labels mixed with temperature-softened KL divergence
/// to the teacher. With hardness 0 the teacher is ignored and the result is
/// the plain cross-entropy tensor.
inline KDLoss kd_loss(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
                      std::span<const std::size_t> labels, const KDConfig& cfg) {
  cfg.validate();
  for (double v : student_logits.values()) {
    if (!std::isfinite(v)) throw std::domain_error("kd_loss: non-finite student logits");
  }
  KDLoss out;
  const Tensor ce = ops::nll_loss(tape, ops::log_softmax(tape, student_logits), labels);
  out.ce = ce.item();
  if (cfg.hardness == 0.0) {
    out.loss = ce;
    return out;
  }

  if (!teacher_logits || teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("kd_loss: teacher logits " +
                     (teacher_logits ? to_string(teacher_logits.shape()) : std::string("missing")) +
                     " do not match student logits " + to_string(student_logits.shape()));
  }
  for (double v : teacher_logits.values()) {
    if (!std::isfinite(v)) throw std::domain_error("kd_loss: non-finite teacher logits");
  }
  const double inv_t = 1.0 / cfg.temperature;
  Tape constant;
  Tensor frozen = teacher_logits.clone();
  frozen.set_requires_grad(false);
  const Tensor target = ops::log_softmax(constant, ops::scale(constant, frozen, inv_t));
  const Tensor student = ops::log_softmax(tape, ops::scale(tape, student_logits, inv_t));
  const Tensor kl = ops::scale(tape, ops::kl_divergence(tape, student, target), cfg.kl_scale());
  out.kl = kl.item();

  if (cfg.hardness == 1.0) {
    out.loss = kl;
  } else {
    out.loss = ops::add(tape, ops::scale(tape, ce, 1.0 - cfg.hardness), ops::scale(tape, kl, cfg.hardness));
  }
  return out;
}

/// A dense model used only for inference; its parameters never take gradients.
class TeacherHandle {
 public:
  explicit TeacherHandle(TinyEncoder model) : model_(std::move(model)) { model_.parameters().set_requires_grad(false); }

  Tensor logits(std::span<const std::size_t> tokens, std::size_t batch) const {
    Tape scratch;
    return model_.forward(scratch, tokens, batch);
  }

  const TinyEncoder& model() const { return model_; }

 private:
  TinyEncoder model_;
};

struct TeacherStatsRow {
  std::size_t sample_id = 0;
  double temperature = 0.0;
  double max_prob = 0.0;
  double entropy = 0.0;
};

inline const std::vector<double>& default_temperature_grid() {
  static const std::vector<double> grid{1.0, 2.0, 5.5};
  return grid;
}

/// Max probability and entropy of softened rows of `logits` ([N, C]) for each temperature.
inline std::vector<TeacherStatsRow> distribution_stats(const Tensor& logits, std::span<const double> temperatures) {
  if (logits.rank() != 2) throw ShapeError("distribution_stats: logits must be [N, C], got " + to_string(logits.shape()));
  if (temperatures.empty()) throw std::invalid_argument("distribution_stats: no temperatures given");
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  std::vector<TeacherStatsRow> rows;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.values().subspan(i * c, c);
    for (double t : temperatures) {
      const auto p = soften(row, t);
      rows.push_back({i, t, *std::max_element(p.begin(), p.end()), entropy(p)});
    }
  }
  return rows;
}

/// Teacher output statistics on the first `count` examples of `data`.
inline std::vector<TeacherStatsRow> teacher_distribution_stats(const TeacherHandle& teacher, const Dataset& data,
                                                               std::size_t count,
                                                               std::span<const double> temperatures) {
  if (count == 0 || count > data.size()) {
    throw std::invalid_argument("teacher stats: sample count must be in [1, " + std::to_string(data.size()) + "]");
  }
  const auto tokens = std::span<const std::size_t>(data.tokens).first(count * data.sequence_length);
  return distribution_stats(teacher.logits(tokens, count), temperatures);
}

}  // namespace gmpstar
