#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "gmpstar/gmpstar.hpp"

using namespace gmpstar;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kRecipeDir = GMPSTAR_RECIPE_DIR;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json load_doc(const fs::path& path) { return json::parse(slurp(path)); }

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("gmpstar-harness-" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticTask tiny_task() {
  SyntheticTask t;
  t.num_classes = 2;
  t.sequence_length = 8;
  t.vocab_size = 16;
  t.seed = 3;
  t.train_size = 128;
  t.validation_size = 64;
  return t;
}

TinyEncoderConfig tiny_model() {
  TinyEncoderConfig c;
  c.vocab_size = 16;
  c.max_sequence_length = 8;
  c.hidden_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.num_classes = 2;
  return c;
}

// 6 epochs of 8 steps; pruning during epochs 1..4, four events per epoch.
Recipe tiny_recipe(double final_sparsity, double hardness) {
  Recipe r;
  r.name = "tiny";
  r.total_epochs = 6;
  r.lr = {LRKind::cyclic_linear, 3e-3, 3e-5, 2.0};
  r.sparsity = SparsitySpec{0.5, final_sparsity, 1, 1, 4, DistributionPolicy::uniform};
  r.kd = {hardness, 2.0, true};
  r.batch_size = 16;
  r.seeds = {1};
  return r;
}

void expect_same_tree(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names_a, names_b;
  for (const auto& e : fs::recursive_directory_iterator(a)) names_a.push_back(fs::relative(e.path(), a).string());
  for (const auto& e : fs::recursive_directory_iterator(b)) names_b.push_back(fs::relative(e.path(), b).string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  ASSERT_EQ(names_a, names_b);
  for (const auto& n : names_a) {
    if (fs::is_regular_file(a / n)) {
      EXPECT_EQ(slurp(a / n), slurp(b / n)) << n;
    }
  }
}

class Harness : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new TaskData(generate_task(tiny_task()));
    Recipe dense = tiny_recipe(0.9, 0.0);
    dense.name = "tiny-teacher";
    dense.sparsity.reset();
    dense.lr = {LRKind::linear_decay, 3e-3, 0.0, 6.0};
    teacher_ckpt_ = new Checkpoint(train_teacher(dense, *data_, tiny_model(), 11).checkpoint);
    teacher_ = new TeacherHandle(TinyEncoder(teacher_ckpt_->config, teacher_ckpt_->params.clone()));
  }

  static void TearDownTestSuite() {
    delete teacher_;
    delete teacher_ckpt_;
    delete data_;
  }

  RunOptions options(std::uint64_t seed) const {
    RunOptions o;
    o.model = tiny_model();
    o.teacher = teacher_;
    o.seed = seed;
    return o;
  }

  static TaskData* data_;
  static Checkpoint* teacher_ckpt_;
  static TeacherHandle* teacher_;
};

TaskData* Harness::data_ = nullptr;
Checkpoint* Harness::teacher_ckpt_ = nullptr;
TeacherHandle* Harness::teacher_ = nullptr;

}  // namespace

TEST(SampleStats, MatchesDirectFormula) {
  const std::vector<double> xs = {0.5, 0.75, 1.0, 0.25};
  const auto s = sample_stats(xs);
  EXPECT_EQ(s.n, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 0.625);
  EXPECT_NEAR(s.std, std::sqrt((0.015625 + 0.015625 + 0.140625 + 0.140625) / 3.0), 1e-15);
  EXPECT_EQ(sample_stats({0.3}).std, 0.0);
  EXPECT_EQ(sample_stats({}).n, 0u);
}

TEST(EmitSchedule, DownstreamTenEpochs) {
  const Recipe r = parse_recipe(load_doc(kRecipeDir / "downstream-10ep.json"));
  const fs::path dir = scratch_dir("schedule");
  write_schedule_csv(compile_timeline(r, 100), dir / "schedule.csv");
  std::ifstream in(dir / "schedule.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,lr,target_sparsity");
  std::size_t rows = 0, peaks = 0;
  double first_nonzero = 0.0, last = -1.0;
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    const double lr = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    const double s = std::stod(line.substr(c2 + 1));
    peaks += lr == 1e-4;
    if (first_nonzero == 0.0 && s != 0.0) first_nonzero = s;
    last = s;
    ++rows;
  }
  EXPECT_EQ(rows, 1000u);
  EXPECT_EQ(peaks, 5u);
  EXPECT_EQ(first_nonzero, 0.7);
  EXPECT_EQ(last, 0.9);
}

TEST(DenseCeiling, DeskTeacherReachesNinetyFivePercent) {
  const Recipe recipe = parse_recipe(load_doc(kRecipeDir / "desk" / "teacher.json"));
  const auto task = load_doc(kRecipeDir / "desk" / "teacher-task.json").get<SyntheticTask>();
  const TaskData data = generate_task(task);
  TinyEncoderConfig model;
  model.vocab_size = task.vocab_size;
  model.num_classes = task.num_classes;
  model.max_sequence_length = task.sequence_length;
  const auto result = train_teacher(recipe, data, model, recipe.seeds.front());
  EXPECT_GE(result.metrics.summary.final_accuracy, 0.95);
  for (const auto& r : result.metrics.records) EXPECT_EQ(r.achieved_sparsity, 0.0);
  EXPECT_FALSE(result.checkpoint.masks);

  const fs::path dir = scratch_dir("teacher");
  save_checkpoint(result.checkpoint, dir);
  const Checkpoint reloaded = load_checkpoint(dir);
  TinyEncoder m(reloaded.config, reloaded.params.clone());
  EXPECT_EQ(evaluate_accuracy(m, data.validation), result.metrics.summary.final_accuracy);
}

TEST_F(Harness, TeacherRecipeMustBeDense) {
  EXPECT_THROW(train_teacher(tiny_recipe(0.9, 0.0), *data_, tiny_model(), 1), std::invalid_argument);
  Recipe kd = tiny_recipe(0.9, 1.0);
  kd.sparsity.reset();
  EXPECT_THROW(train_teacher(kd, *data_, tiny_model(), 1), std::invalid_argument);
}

TEST_F(Harness, DistillingWithoutTeacherRejected) {
  RunOptions o = options(1);
  o.teacher = nullptr;
  EXPECT_THROW(run(tiny_recipe(0.9, 1.0), *data_, o), std::invalid_argument);
}

TEST_F(Harness, RecordsAreOrderedAndTrackTargets) {
  const Recipe r = tiny_recipe(0.9, 1.0);
  const auto result = run(r, *data_, options(2));
  const auto& records = result.metrics.records;
  ASSERT_EQ(records.size(), result.timeline.eval_points.size());
  const double bound = 1.0 / PrunableSet::encoder_weights(result.checkpoint.params).min_tensor_size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (i > 0) {
      ASSERT_GT(rec.step, records[i - 1].step);
      ASSERT_GE(rec.achieved_sparsity, records[i - 1].achieved_sparsity);
    }
    for (double v : {rec.epoch, rec.lr, rec.target_sparsity, rec.achieved_sparsity, rec.train_loss, rec.ce_loss,
                     rec.kl_loss, rec.val_accuracy}) {
      ASSERT_TRUE(std::isfinite(v));
    }
    EXPECT_LE(std::abs(rec.achieved_sparsity - rec.target_sparsity), bound) << "step " << rec.step;
    EXPECT_EQ(rec.lr, result.timeline.lr[rec.step]);
  }
  EXPECT_EQ(records.back().step, result.timeline.total_steps - 1);
}

TEST_F(Harness, FinalSparsityAndMaskedZeros) {
  const auto result = run(tiny_recipe(0.97, 1.0), *data_, options(3));
  const auto& ckpt = result.checkpoint;
  ASSERT_TRUE(ckpt.masks);
  const auto prunable = PrunableSet::encoder_weights(ckpt.params);
  const auto report = sparsity_report(*ckpt.masks, prunable);
  EXPECT_LE(std::abs(report.aggregate - 0.97), 1.0 / prunable.min_tensor_size());
  EXPECT_EQ(result.metrics.summary.final_sparsity, report.aggregate);
  std::size_t expected_pruned = 0;
  for (std::size_t i = 0; i < prunable.names().size(); ++i) {
    expected_pruned += static_cast<std::size_t>(std::floor(0.97 * prunable.size_of(i) + 0.5));
  }
  EXPECT_EQ(report.pruned, expected_pruned);
  for (const auto& m : *ckpt.masks) {
    const auto values = ckpt.params.at(m.name).values();
    for (std::size_t j = 0; j < m.keep.size(); ++j) {
      if (!m.keep[j]) {
        ASSERT_EQ(values[j], 0.0);
        ASSERT_FALSE(std::signbit(values[j]));
      }
    }
  }
  EXPECT_EQ(ckpt.metadata.extra.at("kl_scaling"), true);
  EXPECT_EQ(ckpt.metadata.extra.at("seed"), 3);
}

TEST_F(Harness, ZeroHardnessRecordsNoKL) {
  const auto result = run(tiny_recipe(0.9, 0.0), *data_, options(4));
  for (const auto& rec : result.metrics.records) {
    EXPECT_EQ(rec.kl_loss, 0.0);
    EXPECT_EQ(rec.train_loss, rec.ce_loss);
  }
}

TEST_F(Harness, FixedMasksHoldThroughTraining) {
  const auto pruned = run(tiny_recipe(0.9, 1.0), *data_, options(5));
  Recipe finetune = tiny_recipe(0.9, 1.0);
  finetune.name = "tiny-finetune";
  finetune.stage = Stage::upstream_finetune;
  finetune.sparsity.reset();
  finetune.mask_source = "tiny";
  finetune.total_epochs = 13;  // 104 steps
  finetune.lr = {LRKind::linear_decay, 1e-3, 0.0, 13.0};
  RunOptions o = options(5);
  o.init = pruned.checkpoint;
  const auto result = run(finetune, *data_, o);
  EXPECT_TRUE(result.timeline.masks_fixed);
  ASSERT_TRUE(result.checkpoint.masks);
  EXPECT_EQ(*result.checkpoint.masks, *pruned.checkpoint.masks);
  for (const auto& m : *result.checkpoint.masks) {
    const auto before = pruned.checkpoint.params.at(m.name).values();
    const auto after = result.checkpoint.params.at(m.name).values();
    bool moved = false;
    for (std::size_t j = 0; j < m.keep.size(); ++j) {
      if (!m.keep[j]) {
        ASSERT_EQ(after[j], 0.0);
        ASSERT_FALSE(std::signbit(after[j]));
      } else {
        moved = moved || after[j] != before[j];
      }
    }
    EXPECT_TRUE(moved) << m.name;
  }
  for (const auto& rec : result.metrics.records) EXPECT_EQ(rec.achieved_sparsity, pruned.metrics.summary.final_sparsity);

  RunOptions no_masks = options(5);
  EXPECT_THROW(run(finetune, *data_, no_masks), std::invalid_argument);
}

TEST_F(Harness, SameSeedIsByteIdentical) {
  const Recipe r = tiny_recipe(0.9, 1.0);
  const fs::path root = scratch_dir("determinism");
  for (const char* name : {"a", "b"}) {
    const auto result = run(r, *data_, options(6));
    fs::create_directories(root / name);
    write_metrics_csv(result.metrics, root / name / "metrics.csv");
    save_checkpoint(result.checkpoint, root / name / "checkpoint");
  }
  expect_same_tree(root / "a", root / "b");
  const auto other = run(r, *data_, options(7));
  write_metrics_csv(other.metrics, root / "c.csv");
  EXPECT_NE(slurp(root / "a" / "metrics.csv"), slurp(root / "c.csv"));
}

TEST_F(Harness, MetricsCsvRoundTripsExactly) {
  const auto result = run(tiny_recipe(0.9, 1.0), *data_, options(8));
  const fs::path dir = scratch_dir("csv");
  write_metrics_csv(result.metrics, dir / "metrics.csv");
  std::ifstream in(dir / "metrics.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, std::string(kMetricsHeader));
  std::size_t i = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
    ASSERT_EQ(cells.size(), 9u);
    const auto& rec = result.metrics.records.at(i++);
    EXPECT_EQ(cells[0], static_cast<double>(rec.step));
    EXPECT_EQ(cells[4], rec.achieved_sparsity);
    EXPECT_EQ(cells[5], rec.train_loss);
    EXPECT_EQ(cells[8], rec.val_accuracy);
  }
  EXPECT_EQ(i, result.metrics.records.size());
}

TEST_F(Harness, SweepWritesTableAndIsolatesAborts) {
  SweepSpec spec;
  spec.base_recipe = serialize_recipe(tiny_recipe(0.9, 1.0));
  spec.field = "lr.lr_init";
  spec.values = {3e-3, 1e300};
  spec.seeds = {1, 2};
  const fs::path dir = scratch_dir("sweep");
  const auto rows = sweep(spec, *data_, options(0), dir);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].accuracy.n, 2u);
  EXPECT_EQ(rows[0].failed, 0u);
  EXPECT_EQ(rows[1].failed, 2u);
  EXPECT_EQ(rows[1].accuracy.n, 0u);
  EXPECT_EQ(rows[0].accuracy.mean, sample_stats(rows[0].accuracies).mean);
  for (std::uint64_t seed : {1, 2}) {
    const auto run_dir = dir / sweep_label(spec.field, spec.values[0]) / ("seed-" + std::to_string(seed));
    EXPECT_TRUE(fs::exists(run_dir / "metrics.csv"));
    EXPECT_EQ(load_doc(run_dir / "summary.json").at("seed"), seed);
    const auto bad_dir = dir / sweep_label(spec.field, spec.values[1]) / ("seed-" + std::to_string(seed));
    EXPECT_EQ(load_doc(bad_dir / "ERROR.json").at("error"), "training_aborted");
  }
  write_sweep_table(rows, dir / "table.csv");
  const auto again = sweep(spec, *data_, options(0));
  write_sweep_table(again, dir / "table2.csv");
  EXPECT_EQ(slurp(dir / "table.csv"), slurp(dir / "table2.csv"));
  std::ifstream in(dir / "table.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "value,mean,std,n,failed");
}

TEST_F(Harness, SweepRejectsUnknownField) {
  SweepSpec spec;
  spec.base_recipe = serialize_recipe(tiny_recipe(0.9, 1.0));
  spec.field = "kd.alpha";
  spec.values = {1.0};
  EXPECT_THROW(sweep(spec, *data_, options(0)), std::invalid_argument);
  spec.field = "kd.temperature";
  spec.values = {};
  EXPECT_THROW(sweep(spec, *data_, options(0)), std::invalid_argument);
}
