#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmpstar/rng.hpp"
#include "json.hpp"

namespace gmpstar {

/// Row-major token sequences with integer class labels.
struct Dataset {
  std::size_t sequence_length = 0;
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }

  std::span<const std::size_t> sequence(std::size_t i) const {
    return std::span<const std::size_t>(tokens).subspan(i * sequence_length, sequence_length);
  }

  /// Copies the listed examples into a contiguous batch.
  void gather(std::span<const std::size_t> indices, std::vector<std::size_t>& batch_tokens,
              std::vector<std::size_t>& batch_labels) const {
    batch_tokens.clear();
    batch_labels.clear();
    for (auto i : indices) {
      auto s = sequence(i);
      batch_tokens.insert(batch_tokens.end(), s.begin(), s.end());
      batch_labels.push_back(labels[i]);
    }
  }

  bool operator==(const Dataset&) const = default;
};

struct TaskData {
  Dataset train;
  Dataset validation;
};

/// Marker-parity pattern detection.
///
/// Token ids 1..num_classes are markers, id 0 is unused, and the remaining ids
/// are filler. Each example contains some subset of the markers (each at most
/// once, at random positions); its label is the subset size modulo
/// num_classes. For two classes this is XOR of two marker presences, which
/// requires token mixing and so cannot be solved from the classifier head
/// alone. Labels are a deterministic function of the sequence, so the
/// achievable validation accuracy is 1.0.
///
/// `train_label_noise` reshuffles the labels of that fraction of training
/// examples among themselves, which keeps class counts exact while breaking
/// the label/sequence relation for those examples. Validation labels are
/// always clean.
struct SyntheticTask {
  std::string kind = "marker_parity";
  std::size_t num_classes = 2;
  std::size_t sequence_length = 32;
  std::size_t vocab_size = 64;
  std::uint64_t seed = 7;
  std::size_t train_size = 1024;
  std::size_t validation_size = 512;
  double train_label_noise = 0.0;

  void validate() const {
    if (kind != "marker_parity") throw std::invalid_argument("task: unknown kind '" + kind + "'");
    if (num_classes < 2) throw std::invalid_argument("task: num_classes must be at least 2");
    if (sequence_length < num_classes) throw std::invalid_argument("task: sequence_length must fit every marker");
    if (vocab_size < num_classes + 3) throw std::invalid_argument("task: vocab_size leaves fewer than 2 filler tokens");
    if (train_size < num_classes || validation_size < num_classes) {
      throw std::invalid_argument("task: train_size and validation_size must cover every class");
    }
    if (!(train_label_noise >= 0.0 && train_label_noise <= 1.0)) {
      throw std::invalid_argument("task: train_label_noise must be in [0, 1]");
    }
  }

  bool operator==(const SyntheticTask&) const = default;
};

inline void to_json(nlohmann::json& j, const SyntheticTask& t) {
  j = nlohmann::json{{"kind", t.kind},
                     {"num_classes", t.num_classes},
                     {"sequence_length", t.sequence_length},
                     {"vocab_size", t.vocab_size},
                     {"seed", t.seed},
                     {"train_size", t.train_size},
                     {"validation_size", t.validation_size},
                     {"train_label_noise", t.train_label_noise}};
}

inline void from_json(const nlohmann::json& j, SyntheticTask& t) {
  static const std::vector<std::string> known{"kind",       "num_classes",     "sequence_length", "vocab_size",
                                              "seed",       "train_size",      "validation_size", "train_label_noise"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("task: unknown field '" + key + "'");
    }
  }
  t = SyntheticTask{};
  if (j.contains("kind")) j.at("kind").get_to(t.kind);
  if (j.contains("num_classes")) j.at("num_classes").get_to(t.num_classes);
  if (j.contains("sequence_length")) j.at("sequence_length").get_to(t.sequence_length);
  if (j.contains("vocab_size")) j.at("vocab_size").get_to(t.vocab_size);
  if (j.contains("seed")) j.at("seed").get_to(t.seed);
  if (j.contains("train_size")) j.at("train_size").get_to(t.train_size);
  if (j.contains("validation_size")) j.at("validation_size").get_to(t.validation_size);
  if (j.contains("train_label_noise")) j.at("train_label_noise").get_to(t.train_label_noise);
}

namespace detail {

inline Dataset generate_split(const SyntheticTask& task, std::size_t count, Rng& rng) {
  const std::size_t c = task.num_classes, s = task.sequence_length;
  const std::size_t first_filler = c + 1;
  const std::size_t filler_count = task.vocab_size - first_filler;

  Dataset data;
  data.sequence_length = s;
  data.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) data.labels[i] = i % c;
  rng.shuffle(std::span<std::size_t>(data.labels));

  data.tokens.resize(count * s);
  std::vector<std::size_t> markers(c);
  std::vector<std::size_t> slots(s);
  for (std::size_t i = 0; i < count; ++i) {
    // subset sizes m in [0, c] with m % c == label
    std::vector<std::size_t> sizes;
    for (std::size_t m = 0; m <= c; ++m) {
      if (m % c == data.labels[i]) sizes.push_back(m);
    }
    const std::size_t present = sizes[rng.below(sizes.size())];

    std::iota(markers.begin(), markers.end(), std::size_t{1});
    rng.shuffle(std::span<std::size_t>(markers));
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(slots));

    auto row = std::span<std::size_t>(data.tokens).subspan(i * s, s);
    for (auto& t : row) t = first_filler + rng.below(filler_count);
    for (std::size_t m = 0; m < present; ++m) row[slots[m]] = markers[m];
  }
  return data;
}

}  // namespace detail

/// Deterministically builds the train and validation splits for `task`.
inline TaskData generate_task(const SyntheticTask& task) {
  task.validate();
  Rng rng(task.seed);
  TaskData out;
  out.train = detail::generate_split(task, task.train_size, rng);
  out.validation = detail::generate_split(task, task.validation_size, rng);

  const auto noisy = static_cast<std::size_t>(task.train_label_noise * static_cast<double>(task.train_size) + 0.5);
  if (noisy > 1) {
    std::vector<std::size_t> order(task.train_size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(noisy);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> picked;
    for (auto i : order) picked.push_back(out.train.labels[i]);
    rng.shuffle(std::span<std::size_t>(picked));
    for (std::size_t k = 0; k < order.size(); ++k) out.train.labels[order[k]] = picked[k];
  }
  return out;
}

}  // namespace gmpstar
