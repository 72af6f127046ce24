// Command-line entry point: train-teacher, run, sweep, emit-schedule,
// teacher-stats, validate-recipe.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gmpstar/gmpstar.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSentinel = ".incomplete";

/// A failure with a machine-readable kind and extra fields.
struct CliError : std::runtime_error {
  CliError(std::string kind, const std::string& message, json fields = json::object())
      : std::runtime_error(message), kind(std::move(kind)), fields(std::move(fields)) {}
  std::string kind;
  json fields;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError("io_error", "cannot read " + path.string(), {{"path", path.string()}});
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// A SPEC is a JSON file, an inline JSON object, or key=value pairs separated
/// by commas ("sequence_length=16,train_size=512").
json parse_spec(const std::string& spec, const char* flag) {
  if (spec.empty()) return json::object();
  try {
    if (spec.front() == '{') return json::parse(spec);
    if (fs::exists(spec)) return json::parse(read_text(spec));
    json out = json::object();
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw CliError("usage_error", std::string(flag) + ": expected key=value, got '" + item + "'");
      const auto value = item.substr(eq + 1);
      out[item.substr(0, eq)] = json::accept(value) ? json::parse(value) : json(value);
    }
    return out;
  } catch (const json::exception& e) {
    throw CliError("usage_error", std::string(flag) + ": " + e.what());
  }
}

json parse_value_list(const std::string& text) {
  json out = json::array();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(json::accept(item) ? json::parse(item) : json(item));
  return out;
}

gmpstar::Recipe load_recipe(const std::string& path) {
  try {
    return gmpstar::parse_recipe_text(read_text(path));
  } catch (const gmpstar::RecipeError& e) {
    throw CliError("invalid_recipe", e.what(), {{"recipe", path}, {"field", e.path()}});
  }
}

gmpstar::SyntheticTask load_task(const std::string& spec) {
  try {
    return parse_spec(spec, "--task").get<gmpstar::SyntheticTask>();
  } catch (const std::invalid_argument& e) {
    throw CliError("invalid_task", e.what());
  } catch (const json::exception& e) {
    throw CliError("invalid_task", e.what());
  }
}

/// Defaults follow the task (vocabulary, classes, sequence length); --model overrides.
gmpstar::TinyEncoderConfig load_model(const std::string& spec, const gmpstar::SyntheticTask& task) {
  gmpstar::TinyEncoderConfig cfg;
  cfg.vocab_size = task.vocab_size;
  cfg.num_classes = task.num_classes;
  cfg.max_sequence_length = task.sequence_length;
  json doc = cfg;
  const json overrides = parse_spec(spec, "--model");
  for (const auto& [key, value] : overrides.items()) {
    if (!doc.contains(key)) throw CliError("invalid_model", "--model: unknown field '" + key + "'");
    doc[key] = value;
  }
  try {
    cfg = doc.get<gmpstar::TinyEncoderConfig>();
    cfg.validate();
  } catch (const std::exception& e) {
    throw CliError("invalid_model", e.what());
  }
  return cfg;
}

gmpstar::Checkpoint load_checkpoint_arg(const std::string& dir, const char* flag) {
  try {
    return gmpstar::load_checkpoint(dir);
  } catch (const std::exception& e) {
    throw CliError("invalid_checkpoint", std::string(flag) + ": " + e.what(), {{"path", dir}});
  }
}

void write_json(const fs::path& path, const json& doc) { std::ofstream(path) << doc.dump(2) << '\n'; }

/// Output directory guarded by a sentinel that is removed only on success.
class OutputDir {
 public:
  explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    std::ofstream(dir_ / kSentinel) << "incomplete\n";
    fs::remove(dir_ / "ERROR.json");
  }
  const fs::path& path() const { return dir_; }
  void complete() { fs::remove(dir_ / kSentinel); }

 private:
  fs::path dir_;
};

void log_record(const gmpstar::MetricRecord& r) {
  std::fprintf(stderr, "step %zu epoch %.2f lr %.3g sparsity %.4f loss %.4f val_acc %.4f\n", r.step, r.epoch, r.lr,
               r.achieved_sparsity, r.train_loss, r.val_accuracy);
}

void write_run(const gmpstar::RunResult& result, const fs::path& dir) {
  gmpstar::write_metrics_csv(result.metrics, dir / "metrics.csv");
  write_json(dir / "summary.json", gmpstar::summary_to_json(result.metrics.summary));
  gmpstar::save_checkpoint(result.checkpoint, dir / "checkpoint");
}

struct Args {
  std::string recipe, out, task, model, teacher, init, field, values, temperatures = "1.0,2.0,5.5";
  std::vector<std::uint64_t> seeds;
  std::size_t steps_per_epoch = 0, samples = 100;
};

std::uint64_t single_seed(const Args& a, const gmpstar::Recipe& recipe) {
  if (a.seeds.size() > 1) throw CliError("usage_error", "this command takes one --seed");
  return a.seeds.empty() ? recipe.seeds.front() : a.seeds.front();
}

int cmd_train_teacher(const Args& a) {
  const auto recipe = load_recipe(a.recipe);
  const auto task = load_task(a.task);
  const auto model = load_model(a.model, task);
  const auto data = gmpstar::generate_task(task);
  const auto seed = single_seed(a, recipe);
  if (recipe.sparsity || recipe.kd.hardness != 0.0) {
    throw CliError("invalid_recipe", "teacher recipes must be dense with hardness 0", {{"recipe", a.recipe}});
  }
  OutputDir out(a.out);
  gmpstar::RunOptions options;
  options.model = model;
  options.seed = seed;
  options.on_record = log_record;
  const auto result = gmpstar::run(recipe, data, options);
  write_run(result, out.path());
  out.complete();
  std::printf("%s\n", gmpstar::summary_to_json(result.metrics.summary).dump().c_str());
  return 0;
}

gmpstar::RunOptions run_options(const Args& a, const gmpstar::SyntheticTask& task,
                                std::optional<gmpstar::TeacherHandle>& teacher) {
  gmpstar::RunOptions options;
  options.model = load_model(a.model, task);
  if (!a.teacher.empty()) {
    auto ckpt = load_checkpoint_arg(a.teacher, "--teacher");
    teacher.emplace(gmpstar::TinyEncoder(ckpt.config, std::move(ckpt.params)));
    options.teacher = &*teacher;
  }
  if (!a.init.empty()) options.init = load_checkpoint_arg(a.init, "--init");
  return options;
}

int cmd_run(const Args& a) {
  const auto recipe = load_recipe(a.recipe);
  const auto task = load_task(a.task);
  const auto data = gmpstar::generate_task(task);
  std::optional<gmpstar::TeacherHandle> teacher;
  auto options = run_options(a, task, teacher);
  options.seed = single_seed(a, recipe);
  options.on_record = log_record;
  OutputDir out(a.out);
  const auto result = gmpstar::run(recipe, data, options);
  write_run(result, out.path());
  out.complete();
  std::printf("%s\n", gmpstar::summary_to_json(result.metrics.summary).dump().c_str());
  return 0;
}

int cmd_sweep(const Args& a) {
  gmpstar::SweepSpec spec;
  try {
    spec.base_recipe = json::parse(read_text(a.recipe));
  } catch (const json::exception& e) {
    throw CliError("invalid_recipe", e.what(), {{"recipe", a.recipe}});
  }
  spec.field = a.field;
  for (const auto& v : parse_value_list(a.values)) spec.values.push_back(v);
  spec.seeds = a.seeds;
  const auto task = load_task(a.task);
  const auto data = gmpstar::generate_task(task);
  std::optional<gmpstar::TeacherHandle> teacher;
  const auto options = run_options(a, task, teacher);
  OutputDir out(a.out);
  std::vector<gmpstar::SweepRow> rows;
  try {
    rows = gmpstar::sweep(spec, data, options, out.path());
  } catch (const gmpstar::RecipeError& e) {
    throw CliError("invalid_recipe", e.what(), {{"recipe", a.recipe}, {"field", e.path()}});
  }
  gmpstar::write_sweep_table(rows, out.path() / "table.csv");
  out.complete();
  std::cout << read_text(out.path() / "table.csv");
  return 0;
}

int cmd_emit_schedule(const Args& a) {
  const auto recipe = load_recipe(a.recipe);
  std::size_t spe = a.steps_per_epoch;
  if (spe == 0) {
    const auto task = load_task(a.task);
    spe = task.train_size / recipe.batch_size;
  }
  gmpstar::Timeline timeline;
  try {
    timeline = gmpstar::compile_timeline(recipe, spe);
  } catch (const std::invalid_argument& e) {
    throw CliError("compile_error", e.what(), {{"recipe", a.recipe}, {"steps_per_epoch", spe}});
  }
  OutputDir out(a.out);
  gmpstar::write_schedule_csv(timeline, out.path() / "schedule.csv");
  out.complete();
  return 0;
}

int cmd_teacher_stats(const Args& a) {
  if (a.teacher.empty()) throw CliError("usage_error", "teacher-stats needs --teacher");
  const auto task = load_task(a.task);
  const auto data = gmpstar::generate_task(task);
  const auto ckpt = load_checkpoint_arg(a.teacher, "--teacher");
  const gmpstar::TeacherHandle teacher(gmpstar::TinyEncoder(ckpt.config, ckpt.params));
  std::vector<double> temps;
  for (const auto& v : parse_value_list(a.temperatures)) {
    if (!v.is_number()) throw CliError("usage_error", "--temperatures: expected numbers");
    temps.push_back(v.get<double>());
  }
  const auto rows = gmpstar::teacher_distribution_stats(teacher, data.validation,
                                                        std::min(a.samples, data.validation.size()), temps);
  OutputDir out(a.out);
  std::ofstream csv(out.path() / "teacher_stats.csv");
  csv << "sample_id,temperature,max_prob,entropy\n";
  for (const auto& r : rows) {
    csv << r.sample_id << ',' << gmpstar::format_metric(r.temperature) << ',' << gmpstar::format_metric(r.max_prob)
        << ',' << gmpstar::format_metric(r.entropy) << '\n';
  }
  csv.close();
  out.complete();
  return 0;
}

int cmd_validate_recipe(const Args& a) {
  const auto recipe = load_recipe(a.recipe);
  std::vector<gmpstar::AuditLine> diff;
  try {
    diff = gmpstar::audit_recipe(recipe);
  } catch (const std::invalid_argument& e) {
    throw CliError("unknown_recipe", e.what(), {{"recipe", a.recipe}});
  }
  if (!diff.empty()) {
    json lines = json::array();
    for (const auto& d : diff) {
      std::printf("%s\n", d.describe().c_str());
      lines.push_back({{"field", d.field}, {"expected", d.expected}, {"found", d.found}});
    }
    throw CliError("audit_mismatch", std::to_string(diff.size()) + " field(s) differ from the reference constants",
                   {{"recipe", a.recipe}, {"diff", lines}});
  }
  return 0;
}

void report_error(const std::string& kind, const std::string& message, const json& fields, const std::string& out) {
  json record = fields;
  record["error"] = kind;
  record["message"] = message;
  std::fprintf(stderr, "%s\n", record.dump().c_str());
  if (!out.empty() && fs::is_directory(out)) write_json(fs::path(out) / "ERROR.json", record);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradual magnitude pruning with distillation on a tiny encoder"};
  app.require_subcommand(1, 1);
  Args a;

  const auto add_recipe = [&](CLI::App* c) { c->add_option("--recipe", a.recipe, "Recipe JSON file")->required(); };
  const auto add_out = [&](CLI::App* c) { c->add_option("--out", a.out, "Output directory")->required(); };
  const auto add_task = [&](CLI::App* c) {
    c->add_option("--task", a.task, "Task: JSON file, inline JSON or key=value list");
  };
  const auto add_seed = [&](CLI::App* c) { c->add_option("--seed", a.seeds, "Seed (default: first recipe seed)"); };
  const auto add_model = [&](CLI::App* c) {
    c->add_option("--model", a.model, "Encoder config overrides: JSON file, inline JSON or key=value list");
  };

  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train a dense teacher");
  add_recipe(teacher_cmd), add_seed(teacher_cmd), add_out(teacher_cmd), add_task(teacher_cmd), add_model(teacher_cmd);

  auto* run_cmd = app.add_subcommand("run", "Train one recipe with one seed");
  add_recipe(run_cmd), add_seed(run_cmd), add_out(run_cmd), add_task(run_cmd), add_model(run_cmd);
  run_cmd->add_option("--teacher", a.teacher, "Teacher checkpoint directory");
  run_cmd->add_option("--init", a.init, "Starting checkpoint directory");

  auto* sweep_cmd = app.add_subcommand("sweep", "Run a recipe over values of one field and seeds");
  add_recipe(sweep_cmd), add_seed(sweep_cmd), add_out(sweep_cmd), add_task(sweep_cmd), add_model(sweep_cmd);
  sweep_cmd->add_option("--field", a.field, "Dotted field path, e.g. kd.temperature")->required();
  sweep_cmd->add_option("--values", a.values, "Comma-separated values")->required();
  sweep_cmd->add_option("--teacher", a.teacher, "Teacher checkpoint directory");
  sweep_cmd->add_option("--init", a.init, "Starting checkpoint directory");

  auto* sched_cmd = app.add_subcommand("emit-schedule", "Write the per-step lr and target sparsity");
  add_recipe(sched_cmd), add_out(sched_cmd), add_task(sched_cmd);
  sched_cmd->add_option("--steps-per-epoch", a.steps_per_epoch, "Steps per epoch (default: from the task)");

  auto* stats_cmd = app.add_subcommand("teacher-stats", "Softened teacher output statistics");
  add_out(stats_cmd), add_task(stats_cmd);
  stats_cmd->add_option("--teacher", a.teacher, "Teacher checkpoint directory")->required();
  stats_cmd->add_option("--samples", a.samples, "Validation examples to use");
  stats_cmd->add_option("--temperatures", a.temperatures, "Comma-separated temperatures");

  auto* validate_cmd = app.add_subcommand("validate-recipe", "Audit a bundled recipe against reference constants");
  add_recipe(validate_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage_error", e.what(), json::object(), "");
    return 2;
  }

  try {
    if (*teacher_cmd) return cmd_train_teacher(a);
    if (*run_cmd) return cmd_run(a);
    if (*sweep_cmd) return cmd_sweep(a);
    if (*sched_cmd) return cmd_emit_schedule(a);
    if (*stats_cmd) return cmd_teacher_stats(a);
    if (*validate_cmd) return cmd_validate_recipe(a);
  } catch (const CliError& e) {
    report_error(e.kind, e.what(), e.fields, a.out);
  } catch (const gmpstar::TrainingAborted& e) {
    report_error("training_aborted", e.what(), {{"step", e.step()}}, a.out);
  } catch (const std::exception& e) {
    report_error("runtime_error", e.what(), json::object(), a.out);
  }
  return 1;
}
