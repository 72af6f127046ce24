#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gmpstar/distillation.hpp"
#include "gmpstar/pruning.hpp"
#include "gmpstar/schedules.hpp"
#include "json.hpp"

namespace gmpstar {

/// Invalid recipe content. `path()` is a JSON pointer to the offending field.
class RecipeError : public std::invalid_argument {
 public:
  RecipeError(std::string path, const std::string& message)
      : std::invalid_argument(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class Stage { downstream, upstream, upstream_finetune };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::downstream: return "downstream";
    case Stage::upstream: return "upstream";
    case Stage::upstream_finetune: return "upstream-finetune";
  }
  return "?";
}

enum class LRKind { cyclic_linear, linear_decay };

inline std::string_view to_string(LRKind k) { return k == LRKind::cyclic_linear ? "cyclic_linear" : "linear_decay"; }

struct LRSpec {
  LRKind kind = LRKind::cyclic_linear;
  double lr_init = 1e-4;
  double lr_final = 1e-6;            // cyclic_linear only
  double cycle_length_epochs = 2.0;  // cyclic_linear only

  bool operator==(const LRSpec&) const = default;
};

struct SparsitySpec {
  double initial_sparsity = 0.70;
  double final_sparsity = 0.90;
  std::size_t head_freeze_epochs = 2;
  std::size_t tail_freeze_epochs = 2;
  std::size_t prune_frequency_per_epoch = 10;
  DistributionPolicy distribution = DistributionPolicy::uniform;

  bool operator==(const SparsitySpec&) const = default;
};

/// Declarative description of one training stage.
struct Recipe {
  std::string name;
  Stage stage = Stage::downstream;
  std::size_t total_epochs = 10;
  LRSpec lr;
  std::optional<SparsitySpec> sparsity;  // absent: dense training with fixed (or no) masks
  KDConfig kd;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> mask_source;  // upstream-finetune: where the fixed masks come from

  bool operator==(const Recipe&) const = default;

  SparsityScheduleParams sparsity_params(std::size_t steps_per_epoch) const {
    if (!sparsity) throw std::logic_error("recipe '" + name + "' has no sparsity schedule");
    return {sparsity->initial_sparsity, sparsity->final_sparsity, total_epochs, sparsity->head_freeze_epochs,
            sparsity->tail_freeze_epochs, sparsity->prune_frequency_per_epoch, steps_per_epoch};
  }

  LRScheduleParams lr_params(std::size_t steps_per_epoch) const {
    return {lr.lr_init, lr.lr_final, lr.cycle_length_epochs, total_epochs, steps_per_epoch};
  }
};

namespace detail {

class RecipeReader {
 public:
  static const nlohmann::json& object(const nlohmann::json& j, const std::string& path,
                                      std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) throw RecipeError(path.empty() ? "/" : path, "expected an object");
    for (const auto& [key, value] : j.items()) {
      bool known = false;
      for (auto a : allowed) known = known || key == a;
      if (!known) throw RecipeError(path + "/" + key, "unknown field");
    }
    return j;
  }

  static const nlohmann::json& field(const nlohmann::json& j, const std::string& path, const char* key) {
    if (!j.contains(key)) throw RecipeError(path + "/" + key, "missing required field");
    return j.at(key);
  }

  static double number(const nlohmann::json& j, const std::string& path, const char* key) {
    const auto& v = field(j, path, key);
    if (!v.is_number()) throw RecipeError(path + "/" + key, "expected a number");
    return v.get<double>();
  }

  static std::size_t count(const nlohmann::json& j, const std::string& path, const char* key) {
    const auto& v = field(j, path, key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw RecipeError(path + "/" + key, "expected a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  static std::string text(const nlohmann::json& j, const std::string& path, const char* key) {
    const auto& v = field(j, path, key);
    if (!v.is_string()) throw RecipeError(path + "/" + key, "expected a string");
    return v.get<std::string>();
  }

  static bool flag(const nlohmann::json& j, const std::string& path, const char* key) {
    const auto& v = field(j, path, key);
    if (!v.is_boolean()) throw RecipeError(path + "/" + key, "expected a boolean");
    return v.get<bool>();
  }
};

}  // namespace detail

/// Range and consistency checks shared by parsing and programmatic construction.
inline void validate_recipe(const Recipe& r) {
  if (r.name.empty()) throw RecipeError("/name", "must not be empty");
  if (r.total_epochs < 1) throw RecipeError("/total_epochs", "must be at least 1");
  if (r.batch_size < 1) throw RecipeError("/batch_size", "must be at least 1");
  if (!(r.weight_decay >= 0.0)) throw RecipeError("/weight_decay", "must be non-negative");
  if (r.seeds.empty()) throw RecipeError("/seeds", "needs at least one seed");

  if (!(r.lr.lr_init > 0.0)) throw RecipeError("/lr/lr_init", "must be positive");
  if (r.lr.kind == LRKind::cyclic_linear) {
    if (!(r.lr.lr_final > 0.0 && r.lr.lr_final < r.lr.lr_init)) {
      throw RecipeError("/lr/lr_final", "must be in (0, lr_init)");
    }
    if (!(r.lr.cycle_length_epochs > 0.0)) throw RecipeError("/lr/cycle_length_epochs", "must be positive");
    const double cycles = static_cast<double>(r.total_epochs) / r.lr.cycle_length_epochs;
    if (std::abs(cycles - std::round(cycles)) > 1e-9) {
      throw RecipeError("/lr/cycle_length_epochs", "does not divide total_epochs");
    }
  }

  if (r.kd.hardness < 0.0 || r.kd.hardness > 1.0 || !(r.kd.hardness == r.kd.hardness)) {
    throw RecipeError("/kd/hardness", "must be in [0, 1]");
  }
  if (!(r.kd.temperature > 0.0)) throw RecipeError("/kd/temperature", "must be positive");

  if (r.stage == Stage::upstream_finetune) {
    if (r.sparsity) throw RecipeError("/sparsity", "upstream-finetune recipes keep masks fixed");
    if (!r.mask_source) throw RecipeError("/mask_source", "upstream-finetune recipes need a mask source");
  } else if (r.mask_source) {
    throw RecipeError("/mask_source", "only upstream-finetune recipes take a mask source");
  }

  if (r.sparsity) {
    const auto& s = *r.sparsity;
    if (!(s.initial_sparsity >= 0.0 && s.initial_sparsity < 1.0)) {
      throw RecipeError("/sparsity/initial_sparsity", "must be in [0, 1)");
    }
    if (!(s.final_sparsity > s.initial_sparsity && s.final_sparsity < 1.0)) {
      throw RecipeError("/sparsity/final_sparsity", "must be in (initial_sparsity, 1)");
    }
    if (s.head_freeze_epochs + s.tail_freeze_epochs >= r.total_epochs) {
      throw RecipeError("/sparsity/tail_freeze_epochs", "freeze windows leave no pruning epochs");
    }
    if (s.prune_frequency_per_epoch < 1) throw RecipeError("/sparsity/prune_frequency_per_epoch", "must be >= 1");
    if (s.prune_frequency_per_epoch * (r.total_epochs - s.head_freeze_epochs - s.tail_freeze_epochs) < 2) {
      throw RecipeError("/sparsity/prune_frequency_per_epoch", "schedule needs at least 2 prune events");
    }
  }
}

/// Parses and validates a recipe document. Unknown keys are rejected.
inline Recipe parse_recipe(const nlohmann::json& doc) {
  using R = detail::RecipeReader;
  R::object(doc, "", {"name", "stage", "total_epochs", "lr", "sparsity", "kd", "weight_decay", "batch_size", "seeds",
                      "mask_source"});
  Recipe r;
  r.name = R::text(doc, "", "name");
  const auto stage = R::text(doc, "", "stage");
  if (stage == "downstream") {
    r.stage = Stage::downstream;
  } else if (stage == "upstream") {
    r.stage = Stage::upstream;
  } else if (stage == "upstream-finetune") {
    r.stage = Stage::upstream_finetune;
  } else {
    throw RecipeError("/stage", "unknown stage '" + stage + "'");
  }
  r.total_epochs = R::count(doc, "", "total_epochs");
  r.weight_decay = R::number(doc, "", "weight_decay");
  r.batch_size = R::count(doc, "", "batch_size");

  const auto& seeds = R::field(doc, "", "seeds");
  if (!seeds.is_array()) throw RecipeError("/seeds", "expected an array");
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!seeds[i].is_number_unsigned()) throw RecipeError("/seeds/" + std::to_string(i), "expected a seed");
    r.seeds.push_back(seeds[i].get<std::uint64_t>());
  }

  const auto& lr = R::field(doc, "", "lr");
  const auto schedule = lr.is_object() && lr.contains("schedule") ? lr.at("schedule") : nlohmann::json();
  if (schedule == "cyclic_linear") {
    R::object(lr, "/lr", {"schedule", "lr_init", "lr_final", "cycle_length_epochs"});
    r.lr.kind = LRKind::cyclic_linear;
    r.lr.lr_init = R::number(lr, "/lr", "lr_init");
    r.lr.lr_final = R::number(lr, "/lr", "lr_final");
    r.lr.cycle_length_epochs = R::number(lr, "/lr", "cycle_length_epochs");
  } else if (schedule == "linear_decay") {
    R::object(lr, "/lr", {"schedule", "lr_init"});
    r.lr.kind = LRKind::linear_decay;
    r.lr.lr_init = R::number(lr, "/lr", "lr_init");
    r.lr.lr_final = 0.0;
    r.lr.cycle_length_epochs = static_cast<double>(r.total_epochs);
  } else {
    R::object(lr, "/lr", {"schedule"});
    throw RecipeError("/lr/schedule", "expected \"cyclic_linear\" or \"linear_decay\"");
  }

  if (doc.contains("sparsity") && !doc.at("sparsity").is_null()) {
    const auto& s = R::object(doc.at("sparsity"), "/sparsity",
                              {"initial_sparsity", "final_sparsity", "head_freeze_epochs", "tail_freeze_epochs",
                               "prune_frequency_per_epoch", "distribution"});
    SparsitySpec spec;
    spec.initial_sparsity = R::number(s, "/sparsity", "initial_sparsity");
    spec.final_sparsity = R::number(s, "/sparsity", "final_sparsity");
    spec.head_freeze_epochs = R::count(s, "/sparsity", "head_freeze_epochs");
    spec.tail_freeze_epochs = R::count(s, "/sparsity", "tail_freeze_epochs");
    spec.prune_frequency_per_epoch = R::count(s, "/sparsity", "prune_frequency_per_epoch");
    try {
      spec.distribution = parse_distribution_policy(R::text(s, "/sparsity", "distribution"));
    } catch (const RecipeError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw RecipeError("/sparsity/distribution", e.what());
    }
    r.sparsity = spec;
  }

  const auto& kd = R::object(R::field(doc, "", "kd"), "/kd", {"hardness", "temperature", "kl_scaling"});
  r.kd.hardness = R::number(kd, "/kd", "hardness");
  r.kd.temperature = R::number(kd, "/kd", "temperature");
  r.kd.kl_scaling = R::flag(kd, "/kd", "kl_scaling");

  if (doc.contains("mask_source") && !doc.at("mask_source").is_null()) {
    r.mask_source = R::text(doc, "", "mask_source");
  }
  validate_recipe(r);
  return r;
}

/// Parses recipe JSON text; malformed JSON is reported as a RecipeError at "/".
inline Recipe parse_recipe_text(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw RecipeError("/", std::string("malformed JSON: ") + e.what());
  }
  return parse_recipe(doc);
}

/// Canonical JSON form; parse_recipe(serialize_recipe(r)) == r.
inline nlohmann::json serialize_recipe(const Recipe& r) {
  nlohmann::json doc;
  doc["name"] = r.name;
  doc["stage"] = std::string(to_string(r.stage));
  doc["total_epochs"] = r.total_epochs;
  if (r.lr.kind == LRKind::cyclic_linear) {
    doc["lr"] = {{"schedule", "cyclic_linear"},
                 {"lr_init", r.lr.lr_init},
                 {"lr_final", r.lr.lr_final},
                 {"cycle_length_epochs", r.lr.cycle_length_epochs}};
  } else {
    doc["lr"] = {{"schedule", "linear_decay"}, {"lr_init", r.lr.lr_init}};
  }
  if (r.sparsity) {
    const auto& s = *r.sparsity;
    doc["sparsity"] = {{"initial_sparsity", s.initial_sparsity},
                       {"final_sparsity", s.final_sparsity},
                       {"head_freeze_epochs", s.head_freeze_epochs},
                       {"tail_freeze_epochs", s.tail_freeze_epochs},
                       {"prune_frequency_per_epoch", s.prune_frequency_per_epoch},
                       {"distribution", std::string(to_string(s.distribution))}};
  } else {
    doc["sparsity"] = nullptr;
  }
  doc["kd"] = {{"hardness", r.kd.hardness}, {"temperature", r.kd.temperature}, {"kl_scaling", r.kd.kl_scaling}};
  doc["weight_decay"] = r.weight_decay;
  doc["batch_size"] = r.batch_size;
  doc["seeds"] = r.seeds;
  doc["mask_source"] = r.mask_source ? nlohmann::json(*r.mask_source) : nlohmann::json(nullptr);
  return doc;
}

/// 64-bit FNV-1a of the canonical serialization, as 16 hex digits.
inline std::string recipe_hash(const Recipe& r) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : serialize_recipe(r).dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Returns a copy of `doc` with the dotted `field_path` (e.g. "kd.temperature")
/// replaced. The field must already exist.
inline nlohmann::json with_field(nlohmann::json doc, std::string_view field_path, const nlohmann::json& value) {
  nlohmann::json* node = &doc;
  std::string pointer;
  std::size_t start = 0;
  while (true) {
    const auto dot = field_path.find('.', start);
    const auto key = std::string(field_path.substr(start, dot == std::string_view::npos ? dot : dot - start));
    pointer += "/" + key;
    if (!node->is_object() || !node->contains(key)) throw RecipeError(pointer, "field does not exist in the recipe");
    node = &(*node)[key];
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  *node = value;
  return doc;
}

struct PruneEvent {
  std::size_t step = 0;
  double target = 0.0;
};

enum class EvalKind { post_prune, epoch_end };

struct EvalPoint {
  std::size_t step = 0;  // evaluated after this step's update
  EvalKind kind = EvalKind::epoch_end;
};

/// A recipe expanded into exact per-step events.
struct Timeline {
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
  std::size_t num_lr_cycles = 0;
  std::vector<double> lr;                  // one entry per step
  std::vector<PruneEvent> prune_events;    // strictly increasing steps
  std::vector<double> target_sparsity;     // one entry per step
  std::size_t pruning_window_start = 0;    // masks may change only in [start, end)
  std::size_t pruning_window_end = 0;
  std::vector<EvalPoint> eval_points;      // strictly increasing steps
  bool masks_fixed = false;                // upstream-finetune: masks come from mask_source
};

/// Expands `recipe` for a run with `steps_per_epoch` optimizer steps per epoch.
/// Event placement uses integer arithmetic only.
inline Timeline compile_timeline(const Recipe& recipe, std::size_t steps_per_epoch) {
  validate_recipe(recipe);
  if (steps_per_epoch < 1) throw std::invalid_argument("compile_timeline: steps_per_epoch must be positive");
  Timeline t;
  t.steps_per_epoch = steps_per_epoch;
  t.total_steps = recipe.total_epochs * steps_per_epoch;
  t.lr.resize(t.total_steps);
  t.target_sparsity.assign(t.total_steps, 0.0);

  if (recipe.lr.kind == LRKind::cyclic_linear) {
    const auto params = recipe.lr_params(steps_per_epoch);
    params.validate();
    t.num_lr_cycles = params.num_cycles();
    for (std::size_t s = 0; s < t.total_steps; ++s) t.lr[s] = lr_at(params, s);
  } else {
    t.num_lr_cycles = 1;
    for (std::size_t s = 0; s < t.total_steps; ++s) t.lr[s] = linear_decay_lr(recipe.lr.lr_init, t.total_steps, s);
  }

  if (recipe.sparsity) {
    if (steps_per_epoch < recipe.sparsity->prune_frequency_per_epoch) {
      throw std::invalid_argument("compile_timeline: steps_per_epoch " + std::to_string(steps_per_epoch) +
                                  " is below the prune frequency " +
                                  std::to_string(recipe.sparsity->prune_frequency_per_epoch));
    }
    const auto params = recipe.sparsity_params(steps_per_epoch);
    const auto steps = prune_event_steps(params);
    for (std::size_t k = 0; k < steps.size(); ++k) t.prune_events.push_back({steps[k], cubic_event_sparsity(params, k)});
    for (std::size_t s = 0; s < t.total_steps; ++s) t.target_sparsity[s] = sparsity_at(params, s);
    t.pruning_window_start = params.window_start();
    t.pruning_window_end = params.window_end();
  } else {
    t.masks_fixed = recipe.stage == Stage::upstream_finetune;
  }

  // epoch ends, plus the first prune event of every epoch
  std::vector<EvalPoint> points;
  std::size_t next_event = 0;
  for (std::size_t e = 0; e < recipe.total_epochs; ++e) {
    const std::size_t epoch_end = (e + 1) * steps_per_epoch - 1;
    while (next_event < t.prune_events.size() && t.prune_events[next_event].step < e * steps_per_epoch) ++next_event;
    if (next_event < t.prune_events.size() && t.prune_events[next_event].step < epoch_end) {
      points.push_back({t.prune_events[next_event].step, EvalKind::post_prune});
    }
    points.push_back({epoch_end, EvalKind::epoch_end});
  }
  t.eval_points = std::move(points);
  return t;
}

/// Reference hyperparameters of the four bundled recipes, as
/// {recipe name -> {dotted field path -> value}}. A null value means the
/// field must be absent.
inline const nlohmann::json& reference_recipe_constants() {
  static const nlohmann::json table = nlohmann::json::parse(R"({
    "downstream-10ep": {
      "stage": "downstream", "total_epochs": 10,
      "lr.schedule": "cyclic_linear", "lr.lr_init": 1e-4, "lr.lr_final": 1e-6, "lr.cycle_length_epochs": 2,
      "sparsity.initial_sparsity": 0.7, "sparsity.head_freeze_epochs": 2, "sparsity.tail_freeze_epochs": 2,
      "sparsity.prune_frequency_per_epoch": 10, "sparsity.distribution": "uniform",
      "kd.hardness": 1.0, "kd.temperature": 5.5, "weight_decay": 0.0, "batch_size": 32
    },
    "downstream-30ep": {
      "stage": "downstream", "total_epochs": 30,
      "lr.schedule": "cyclic_linear", "lr.lr_init": 1e-4, "lr.lr_final": 1e-6, "lr.cycle_length_epochs": 2,
      "sparsity.initial_sparsity": 0.7, "sparsity.head_freeze_epochs": 2, "sparsity.tail_freeze_epochs": 2,
      "sparsity.prune_frequency_per_epoch": 10, "sparsity.distribution": "uniform",
      "kd.hardness": 1.0, "kd.temperature": 5.5, "weight_decay": 0.0, "batch_size": 32
    },
    "upstream-3ep": {
      "stage": "upstream", "total_epochs": 3,
      "lr.schedule": "cyclic_linear", "lr.lr_init": 5e-4, "lr.lr_final": 5e-6, "lr.cycle_length_epochs": 0.5,
      "sparsity.initial_sparsity": 0.7, "sparsity.head_freeze_epochs": 0, "sparsity.tail_freeze_epochs": 1,
      "sparsity.prune_frequency_per_epoch": 100, "sparsity.distribution": "uniform",
      "kd.hardness": 1.0, "kd.temperature": 5.5, "weight_decay": 0.01, "batch_size": 256
    },
    "upstream-finetune-8ep": {
      "stage": "upstream-finetune", "total_epochs": 8,
      "lr.schedule": "linear_decay", "lr.lr_init": 1.5e-5, "sparsity": null,
      "kd.hardness": 1.0, "kd.temperature": 5.5, "weight_decay": 0.0, "batch_size": 32
    }
  })");
  return table;
}

struct AuditLine {
  std::string field;
  nlohmann::json expected;
  nlohmann::json found;

  std::string describe() const { return field + ": expected " + expected.dump() + ", found " + found.dump(); }
};

/// Compares a bundled recipe against its reference constants. An empty result
/// means every audited field matches.
inline std::vector<AuditLine> audit_recipe(const Recipe& recipe) {
  const auto& table = reference_recipe_constants();
  if (!table.contains(recipe.name)) {
    throw std::invalid_argument("no reference constants for recipe '" + recipe.name + "'");
  }
  const auto doc = serialize_recipe(recipe);
  std::vector<AuditLine> diff;
  for (const auto& [path, expected] : table.at(recipe.name).items()) {
    const nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (node && !node->is_null()) {
      const auto dot = path.find('.', start);
      const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      node = node->is_object() && node->contains(key) ? &node->at(key) : nullptr;
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    const nlohmann::json found = node ? *node : nlohmann::json(nullptr);
    const bool same = (expected.is_number() && found.is_number())
                          ? expected.get<double>() == found.get<double>()
                          : expected == found;
    if (!same) diff.push_back({path, expected, found});
  }
  return diff;
}

}  // namespace gmpstar
