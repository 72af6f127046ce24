#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmpstar/checkpoint.hpp"
#include "gmpstar/distillation.hpp"
#include "gmpstar/encoder.hpp"
#include "gmpstar/optimizer.hpp"
#include "gmpstar/pruning.hpp"
#include "gmpstar/recipe.hpp"
#include "gmpstar/rng.hpp"
#include "gmpstar/task.hpp"

namespace gmpstar {

/// One evaluation point. Loss columns average the training steps since the
/// previous record.
struct MetricRecord {
  std::size_t step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double target_sparsity = 0.0;
  double achieved_sparsity = 0.0;
  double train_loss = 0.0;
  double ce_loss = 0.0;
  double kl_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RunSummary {
  std::string recipe_name;
  std::string recipe_hash;
  std::uint64_t seed = 0;
  std::size_t total_steps = 0;
  double best_accuracy = 0.0;
  double final_accuracy = 0.0;
  double final_sparsity = 0.0;
  bool kl_scaling = true;
};

struct RunMetrics {
  std::vector<MetricRecord> records;
  RunSummary summary;
};

inline nlohmann::json summary_to_json(const RunSummary& s) {
  return {{"recipe", s.recipe_name},       {"recipe_hash", s.recipe_hash},
          {"seed", s.seed},                {"total_steps", s.total_steps},
          {"best_accuracy", s.best_accuracy}, {"final_accuracy", s.final_accuracy},
          {"final_sparsity", s.final_sparsity}, {"kl_scaling", s.kl_scaling}};
}

inline const char* kMetricsHeader =
    "step,epoch,lr,target_sparsity,achieved_sparsity,train_loss,ce_loss,kl_loss,val_accuracy";

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const RunMetrics& metrics, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kMetricsHeader << '\n';
  for (const auto& r : metrics.records) {
    out << r.step << ',' << format_metric(r.epoch) << ',' << format_metric(r.lr) << ','
        << format_metric(r.target_sparsity) << ',' << format_metric(r.achieved_sparsity) << ','
        << format_metric(r.train_loss) << ',' << format_metric(r.ce_loss) << ',' << format_metric(r.kl_loss) << ','
        << format_metric(r.val_accuracy) << '\n';
  }
}

/// Training stopped at `step()` because of non-finite values or a mask that shrank.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::size_t step, const std::string& reason)
      : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + reason), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct RunOptions {
  TinyEncoderConfig model;              // used when `init` is empty; its seed is replaced by `seed`
  std::optional<Checkpoint> init;       // starting weights, and masks for fixed-mask stages
  const TeacherHandle* teacher = nullptr;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 256;
  std::function<void(const MetricRecord&)> on_record;
};

struct RunResult {
  RunMetrics metrics;
  Checkpoint checkpoint;
  Timeline timeline;
};

/// Fraction of `data` classified correctly.
inline double evaluate_accuracy(TinyEncoder& model, const Dataset& data, std::size_t batch = 256) {
  if (data.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  model.parameters().set_requires_grad(false);
  std::size_t correct = 0;
  std::vector<std::size_t> indices, tokens, labels;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    indices.resize(n);
    std::iota(indices.begin(), indices.end(), start);
    data.gather(indices, tokens, labels);
    Tape tape;
    const Tensor logits = model.forward(tape, tokens, n);
    const std::size_t c = logits.extent(1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.values().subspan(i * c, c);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == labels[i]) ++correct;
    }
  }
  model.parameters().set_requires_grad(true);
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline std::size_t steps_per_epoch(const Recipe& recipe, const Dataset& train) {
  const std::size_t spe = train.size() / recipe.batch_size;
  if (spe == 0) {
    throw std::invalid_argument("batch size " + std::to_string(recipe.batch_size) + " exceeds the " +
                                std::to_string(train.size()) + " training examples");
  }
  return spe;
}

namespace detail {

inline std::uint64_t data_order_seed(std::uint64_t seed) { return seed * 0x9e3779b97f4a7c15ull + 0x5851f42d4c957f2dull; }

inline void check_finite(std::size_t step, const char* what, double v) {
  if (!std::isfinite(v)) throw TrainingAborted(step, std::string("non-finite ") + what);
}

}  // namespace detail

/// Runs one recipe with one seed.
///
/// Each step: extend masks if a prune event falls on this step (zeroing the
/// optimizer moments of newly masked entries), forward the student, mix CE and
/// teacher KL, backpropagate, zero masked gradients, apply Adam with the
/// scheduled learning rate. Evaluation follows the update of every epoch's
/// last step and of every epoch's first prune step.
inline RunResult run(const Recipe& recipe, const TaskData& data, const RunOptions& options) {
  validate_recipe(recipe);
  if (recipe.kd.hardness > 0.0 && options.teacher == nullptr) {
    throw std::invalid_argument("recipe '" + recipe.name + "' distills (hardness > 0) but no teacher was given");
  }
  if (recipe.stage == Stage::upstream_finetune && !(options.init && options.init->masks)) {
    throw std::invalid_argument("recipe '" + recipe.name + "' keeps masks fixed and needs an initial checkpoint with masks");
  }
  const std::size_t spe = steps_per_epoch(recipe, data.train);
  RunResult result;
  result.timeline = compile_timeline(recipe, spe);
  const Timeline& tl = result.timeline;
  const std::string hash = recipe_hash(recipe);

  TinyEncoder model = [&] {
    if (options.init) return TinyEncoder(options.init->config, options.init->params.clone());
    TinyEncoderConfig cfg = options.model;
    cfg.seed = options.seed;
    return TinyEncoder(cfg);
  }();
  if (model.config().max_sequence_length < data.train.sequence_length) {
    throw std::invalid_argument("model max_sequence_length is shorter than the task sequences");
  }
  ParameterSet& params = model.parameters();
  params.set_requires_grad(true);

  const PrunableSet prunable = PrunableSet::encoder_weights(params);
  const bool track_masks = recipe.sparsity.has_value() || (options.init && options.init->masks);
  MaskSet masks = (options.init && options.init->masks) ? *options.init->masks : MaskSet(params, prunable);
  if (track_masks) apply_masks(params, masks);

  std::vector<std::string> names;
  for (const auto& e : params) names.push_back(e.name);
  AdamOptimizer optimizer(params.tensors(), AdamConfig{.weight_decay = recipe.weight_decay});

  const auto reset_masked_moments = [&] {
    for (const auto& m : masks) {
      const auto idx = static_cast<std::size_t>(std::find(names.begin(), names.end(), m.name) - names.begin());
      auto first = optimizer.first_moment(idx);
      auto second = optimizer.second_moment(idx);
      for (std::size_t j = 0; j < m.keep.size(); ++j) {
        if (!m.keep[j]) first[j] = second[j] = 0.0;
      }
    }
  };

  // The teacher is frozen, so its logits are computed once per training example.
  std::vector<double> teacher_table;
  std::size_t num_classes = model.config().num_classes;
  if (recipe.kd.hardness > 0.0) {
    const auto& train = data.train;
    for (std::size_t start = 0; start < train.size(); start += options.eval_batch) {
      const std::size_t n = std::min(options.eval_batch, train.size() - start);
      const auto tokens = std::span<const std::size_t>(train.tokens).subspan(start * train.sequence_length,
                                                                             n * train.sequence_length);
      const Tensor logits = options.teacher->logits(tokens, n);
      if (logits.extent(1) != num_classes) throw std::invalid_argument("teacher and student class counts differ");
      teacher_table.insert(teacher_table.end(), logits.values().begin(), logits.values().end());
    }
  }
  std::vector<double> teacher_batch(recipe.batch_size * num_classes);

  Rng order_rng(detail::data_order_seed(options.seed));
  std::vector<std::size_t> order(data.train.size());
  std::vector<std::size_t> batch_tokens, batch_labels;

  std::size_t next_event = 0, next_eval = 0, window_steps = 0;
  double loss_sum = 0.0, ce_sum = 0.0, kl_sum = 0.0;
  RunMetrics& metrics = result.metrics;
  metrics.summary = {recipe.name, hash, options.seed, tl.total_steps, 0.0, 0.0, 0.0, recipe.kd.kl_scaling};

  for (std::size_t step = 0; step < tl.total_steps; ++step) {
    const std::size_t within = step % spe;
    if (within == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      order_rng.shuffle(std::span<std::size_t>(order));
    }

    if (next_event < tl.prune_events.size() && tl.prune_events[next_event].step == step) {
      const MaskSet before = masks;
      try {
        magnitude_prune(params, masks, tl.prune_events[next_event].target, recipe.sparsity->distribution);
      } catch (const std::invalid_argument& e) {
        throw TrainingAborted(step, e.what());
      }
      for (std::size_t i = 0; i < masks.size(); ++i) {
        for (std::size_t j = 0; j < masks[i].keep.size(); ++j) {
          if (masks[i].keep[j] > before[i].keep[j]) throw TrainingAborted(step, "mask regrew on " + masks[i].name);
        }
      }
      apply_masks(params, masks);
      reset_masked_moments();
      ++next_event;
    }

    const auto batch_ids = std::span<const std::size_t>(order).subspan(within * recipe.batch_size, recipe.batch_size);
    data.train.gather(batch_ids, batch_tokens, batch_labels);
    try {
      Tape tape;
      const Tensor logits = model.forward(tape, batch_tokens, recipe.batch_size);
      Tensor teacher_logits;
      if (recipe.kd.hardness > 0.0) {
        for (std::size_t i = 0; i < batch_ids.size(); ++i) {
          std::copy_n(teacher_table.begin() + static_cast<std::ptrdiff_t>(batch_ids[i] * num_classes), num_classes,
                      teacher_batch.begin() + static_cast<std::ptrdiff_t>(i * num_classes));
        }
        teacher_logits = Tensor({recipe.batch_size, num_classes}, teacher_batch, false);
      }
      const KDLoss loss = kd_loss(tape, logits, teacher_logits, batch_labels, recipe.kd);
      detail::check_finite(step, "loss", loss.loss.item());
      tape.backward(loss.loss);
      if (track_masks) zero_masked_grads(params, masks);
      optimizer.step(tl.lr[step]);
      loss_sum += loss.loss.item();
      ce_sum += loss.ce;
      kl_sum += loss.kl;
      ++window_steps;
    } catch (const std::domain_error& e) {
      throw TrainingAborted(step, e.what());
    }
    for (const auto& e : params) {
      for (double v : e.tensor.values()) {
        if (!std::isfinite(v)) throw TrainingAborted(step, "non-finite parameter " + e.name);
      }
    }

    if (next_eval < tl.eval_points.size() && tl.eval_points[next_eval].step == step) {
      while (next_eval < tl.eval_points.size() && tl.eval_points[next_eval].step == step) ++next_eval;
      MetricRecord r;
      r.step = step;
      r.epoch = static_cast<double>(step + 1) / static_cast<double>(spe);
      r.lr = tl.lr[step];
      r.target_sparsity = tl.target_sparsity[step];
      r.achieved_sparsity = track_masks ? masks.achieved_sparsity() : 0.0;
      const double n = static_cast<double>(window_steps);
      r.train_loss = loss_sum / n;
      r.ce_loss = ce_sum / n;
      r.kl_loss = kl_sum / n;
      r.val_accuracy = evaluate_accuracy(model, data.validation, options.eval_batch);
      loss_sum = ce_sum = kl_sum = 0.0;
      window_steps = 0;
      metrics.records.push_back(r);
      metrics.summary.best_accuracy = std::max(metrics.summary.best_accuracy, r.val_accuracy);
      if (options.on_record) options.on_record(r);
    }
  }

  metrics.summary.final_accuracy = metrics.records.back().val_accuracy;
  metrics.summary.final_sparsity = track_masks ? masks.achieved_sparsity() : 0.0;

  Checkpoint& ckpt = result.checkpoint;
  ckpt.config = model.config();
  ckpt.params = params.clone();
  if (track_masks) ckpt.masks = masks;
  ckpt.metadata.recipe_hash = hash;
  ckpt.metadata.step = tl.total_steps;
  ckpt.metadata.achieved_sparsity = metrics.summary.final_sparsity;
  ckpt.metadata.validation_accuracy = metrics.summary.final_accuracy;
  ckpt.metadata.extra = {{"recipe", recipe.name},
                         {"stage", std::string(to_string(recipe.stage))},
                         {"seed", options.seed},
                         {"kl_scaling", recipe.kd.kl_scaling}};
  return result;
}

/// Dense training without a teacher: the recipe must have no sparsity
/// schedule and hardness 0.
inline RunResult train_teacher(const Recipe& recipe, const TaskData& data, const TinyEncoderConfig& model,
                               std::uint64_t seed) {
  if (recipe.sparsity) throw std::invalid_argument("teacher recipe '" + recipe.name + "' must not prune");
  if (recipe.kd.hardness != 0.0) throw std::invalid_argument("teacher recipe '" + recipe.name + "' must use hardness 0");
  RunOptions options;
  options.model = model;
  options.seed = seed;
  return run(recipe, data, options);
}

}  // namespace gmpstar
