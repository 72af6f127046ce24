#pragma once

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gmpstar/recipe.hpp"
#include "gmpstar/trainer.hpp"

namespace gmpstar {

struct SampleStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
  std::size_t n = 0;
};

inline SampleStats sample_stats(const std::vector<double>& xs) {
  SampleStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct SweepSpec {
  nlohmann::json base_recipe;
  std::string field;  // dotted path, e.g. "kd.temperature"
  std::vector<nlohmann::json> values;
  std::vector<std::uint64_t> seeds;  // empty: the seeds listed in each recipe
};

struct SweepRow {
  nlohmann::json value;
  SampleStats accuracy;  // final validation accuracy over completed runs
  std::size_t failed = 0;
  std::vector<double> accuracies;
};

/// Directory-safe label for a sweep value.
inline std::string sweep_label(const std::string& field, const nlohmann::json& value) {
  std::string text = value.is_string() ? value.get<std::string>() : value.dump();
  for (auto& c : text) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_')) c = '_';
  }
  return field + "=" + text;
}

/// Runs every (value, seed) pair. Aborted runs are counted in `failed` and
/// leave an ERROR.json in their directory; they do not stop the sweep. With
/// `out_dir`, each run writes metrics.csv and summary.json under
/// <out_dir>/<field>=<value>/seed-<seed>/.
inline std::vector<SweepRow> sweep(const SweepSpec& spec, const TaskData& data, const RunOptions& base_options,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  if (spec.values.empty()) throw std::invalid_argument("sweep: no values given");
  std::vector<Recipe> recipes;
  for (const auto& v : spec.values) recipes.push_back(parse_recipe(with_field(spec.base_recipe, spec.field, v)));

  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < recipes.size(); ++i) {
    SweepRow row;
    row.value = spec.values[i];
    const auto& seeds = spec.seeds.empty() ? recipes[i].seeds : spec.seeds;
    for (auto seed : seeds) {
      std::optional<std::filesystem::path> dir;
      if (out_dir) {
        dir = *out_dir / sweep_label(spec.field, spec.values[i]) / ("seed-" + std::to_string(seed));
        std::filesystem::create_directories(*dir);
      }
      RunOptions options = base_options;
      options.seed = seed;
      try {
        const auto result = run(recipes[i], data, options);
        row.accuracies.push_back(result.metrics.summary.final_accuracy);
        if (dir) {
          write_metrics_csv(result.metrics, *dir / "metrics.csv");
          std::ofstream(*dir / "summary.json") << summary_to_json(result.metrics.summary).dump(2) << '\n';
        }
      } catch (const TrainingAborted& e) {
        ++row.failed;
        if (dir) {
          std::ofstream(*dir / "ERROR.json")
              << nlohmann::json{{"error", "training_aborted"}, {"step", e.step()}, {"message", e.what()}}.dump(2)
              << '\n';
        }
      }
    }
    row.accuracy = sample_stats(row.accuracies);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_sweep_table(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "value,mean,std,n,failed\n";
  for (const auto& r : rows) {
    const std::string value = r.value.is_string() ? r.value.get<std::string>() : r.value.dump();
    out << value << ',' << format_metric(r.accuracy.mean) << ',' << format_metric(r.accuracy.std) << ','
        << r.accuracy.n << ',' << r.failed << '\n';
  }
}

/// Per-step learning rate and target sparsity of a recipe.
inline void write_schedule_csv(const Timeline& timeline, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,lr,target_sparsity\n";
  for (std::size_t s = 0; s < timeline.total_steps; ++s) {
    out << s << ',' << format_metric(timeline.lr[s]) << ',' << format_metric(timeline.target_sparsity[s]) << '\n';
  }
}

}  // namespace gmpstar
