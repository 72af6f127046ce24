#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "gmpstar/recipe.hpp"

using namespace gmpstar;
using nlohmann::json;

namespace {

const std::filesystem::path kRecipeDir = GMPSTAR_RECIPE_DIR;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json load_doc(const std::string& name) { return json::parse(slurp(kRecipeDir / (name + ".json"))); }

Recipe load(const std::string& name) { return parse_recipe(load_doc(name)); }

const std::vector<std::string> kBundled = {"downstream-10ep", "downstream-30ep", "upstream-3ep",
                                           "upstream-finetune-8ep"};

std::string error_path(const json& doc) {
  try {
    parse_recipe(doc);
  } catch (const RecipeError& e) {
    return e.path();
  }
  return "<accepted>";
}

}  // namespace

TEST(ParseRecipe, BundledDownstream) {
  const Recipe r = load("downstream-10ep");
  EXPECT_EQ(r.stage, Stage::downstream);
  EXPECT_EQ(r.lr.kind, LRKind::cyclic_linear);
  EXPECT_EQ(r.lr.lr_init, 1e-4);
  EXPECT_EQ(r.lr.lr_final, 1e-6);
  EXPECT_EQ(r.lr.cycle_length_epochs, 2.0);
  ASSERT_TRUE(r.sparsity);
  EXPECT_EQ(r.sparsity->initial_sparsity, 0.70);
  EXPECT_EQ(r.sparsity->prune_frequency_per_epoch, 10u);
  EXPECT_EQ(r.kd.hardness, 1.0);
  EXPECT_EQ(r.kd.temperature, 5.5);
  EXPECT_EQ(r.weight_decay, 0.0);
}

TEST(ParseRecipe, BundledUpstream) {
  const Recipe r = load("upstream-3ep");
  EXPECT_EQ(r.stage, Stage::upstream);
  EXPECT_EQ(r.lr.lr_init, 5e-4);
  EXPECT_EQ(r.lr.cycle_length_epochs, 0.5);
  ASSERT_TRUE(r.sparsity);
  EXPECT_EQ(r.sparsity->prune_frequency_per_epoch, 100u);
  EXPECT_EQ(r.total_epochs, 3u);
  EXPECT_EQ(r.weight_decay, 0.01);
  EXPECT_EQ(r.batch_size, 256u);
}

TEST(ParseRecipe, BundledFinetune) {
  const Recipe r = load("upstream-finetune-8ep");
  EXPECT_EQ(r.stage, Stage::upstream_finetune);
  EXPECT_EQ(r.lr.kind, LRKind::linear_decay);
  EXPECT_EQ(r.lr.lr_init, 1.5e-5);
  EXPECT_EQ(r.total_epochs, 8u);
  EXPECT_FALSE(r.sparsity);
  ASSERT_TRUE(r.mask_source);
  const auto t = compile_timeline(r, 50);
  EXPECT_TRUE(t.masks_fixed);
  EXPECT_TRUE(t.prune_events.empty());
  EXPECT_EQ(t.lr.front(), 1.5e-5);
}

TEST(ParseRecipe, RangeViolationsRejected) {
  auto doc = load_doc("downstream-10ep");
  EXPECT_EQ(error_path(with_field(doc, "kd.hardness", 1.5)), "/kd/hardness");
  EXPECT_EQ(error_path(with_field(doc, "kd.temperature", 0.0)), "/kd/temperature");
  EXPECT_NE(error_path(with_field(doc, "sparsity.final_sparsity", 0.5)), "<accepted>");
  EXPECT_NE(error_path(with_field(doc, "lr.cycle_length_epochs", 3)), "<accepted>");
  EXPECT_NE(error_path(with_field(doc, "batch_size", 0)), "<accepted>");
  EXPECT_NE(error_path(with_field(doc, "stage", "sideways")), "<accepted>");
}

TEST(ParseRecipe, UnknownKeysRejectedWithPath) {
  auto doc = load_doc("downstream-10ep");
  doc["extra"] = 1;
  EXPECT_EQ(error_path(doc), "/extra");
  doc = load_doc("downstream-10ep");
  doc["kd"]["alpha"] = 0.5;
  EXPECT_EQ(error_path(doc), "/kd/alpha");
  doc = load_doc("downstream-10ep");
  doc["sparsity"]["regrow"] = true;
  EXPECT_EQ(error_path(doc), "/sparsity/regrow");
}

TEST(ParseRecipe, MissingAndMistypedFields) {
  auto doc = load_doc("downstream-10ep");
  doc.erase("total_epochs");
  EXPECT_EQ(error_path(doc), "/total_epochs");
  doc = load_doc("downstream-10ep");
  doc["seeds"] = "one";
  EXPECT_EQ(error_path(doc), "/seeds");
  EXPECT_THROW(parse_recipe_text("{not json"), RecipeError);
}

TEST(ParseRecipe, StageConstraints) {
  auto doc = load_doc("upstream-finetune-8ep");
  doc["mask_source"] = nullptr;
  EXPECT_NE(error_path(doc), "<accepted>");
  doc = load_doc("downstream-10ep");
  doc["mask_source"] = "upstream-3ep";
  EXPECT_NE(error_path(doc), "<accepted>");
}

TEST(ParseRecipe, RoundTripIsFixedPoint) {
  for (const auto& name : kBundled) {
    const Recipe once = load(name);
    const json doc = serialize_recipe(once);
    const Recipe twice = parse_recipe(doc);
    EXPECT_EQ(once, twice) << name;
    EXPECT_EQ(serialize_recipe(twice), doc) << name;
    EXPECT_EQ(parse_recipe_text(doc.dump()), once) << name;
  }
}

TEST(RecipeHash, StableAndSensitive) {
  const Recipe a = load("downstream-10ep");
  const std::string h = recipe_hash(a);
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h, recipe_hash(parse_recipe(serialize_recipe(a))));
  const Recipe b = parse_recipe(with_field(load_doc("downstream-10ep"), "kd.temperature", 2.0));
  EXPECT_NE(h, recipe_hash(b));
}

TEST(WithField, ReplacesExistingOnly) {
  const json doc = load_doc("downstream-10ep");
  EXPECT_EQ(with_field(doc, "sparsity.final_sparsity", 0.97)["sparsity"]["final_sparsity"], 0.97);
  EXPECT_EQ(with_field(doc, "batch_size", 16)["batch_size"], 16);
  EXPECT_THROW(with_field(doc, "kd.nope", 1), std::invalid_argument);
  EXPECT_THROW(with_field(doc, "", 1), std::invalid_argument);
}

TEST(CompileTimeline, DownstreamTenEpochs) {
  const auto t = compile_timeline(load("downstream-10ep"), 100);
  EXPECT_EQ(t.total_steps, 1000u);
  EXPECT_EQ(t.num_lr_cycles, 5u);
  EXPECT_EQ(t.prune_events.size(), 60u);
  EXPECT_EQ(t.prune_events.front().step, 200u);
  EXPECT_EQ(t.prune_events.front().target, 0.70);
  EXPECT_EQ(t.prune_events.back().target, 0.90);
  EXPECT_EQ(t.target_sparsity.back(), 0.90);
  EXPECT_EQ(t.pruning_window_start, 200u);
  EXPECT_EQ(t.pruning_window_end, 800u);
}

TEST(CompileTimeline, DownstreamThirtyEpochs) {
  const auto t = compile_timeline(load("downstream-30ep"), 40);
  EXPECT_EQ(t.num_lr_cycles, 15u);
  EXPECT_EQ(t.prune_events.size(), 260u);
}

TEST(CompileTimeline, UpstreamHasNoEventsInFinalEpoch) {
  const auto t = compile_timeline(load("upstream-3ep"), 400);
  EXPECT_EQ(t.num_lr_cycles, 6u);
  ASSERT_EQ(t.prune_events.size(), 200u);
  EXPECT_EQ(t.prune_events.front().step, 0u);
  for (const auto& e : t.prune_events) EXPECT_LT(e.step, 800u);
  EXPECT_EQ(t.target_sparsity.back(), 0.90);
}

TEST(CompileTimeline, BoundaryFactsForBundledRecipes) {
  for (const auto& name : kBundled) {
    const Recipe r = load(name);
    for (std::size_t spe : {100u, 137u}) {
      const auto t = compile_timeline(r, spe);
      ASSERT_EQ(t.lr.size(), t.total_steps);
      ASSERT_EQ(t.target_sparsity.size(), t.total_steps);
      if (!r.sparsity) continue;
      const std::size_t head = r.sparsity->head_freeze_epochs * spe;
      const std::size_t tail = (r.total_epochs - r.sparsity->tail_freeze_epochs) * spe;
      for (std::size_t k = 0; k < t.prune_events.size(); ++k) {
        ASSERT_GE(t.prune_events[k].step, head);
        ASSERT_LT(t.prune_events[k].step, tail);
        if (k > 0) {
          ASSERT_GT(t.prune_events[k].step, t.prune_events[k - 1].step);
        }
      }
      EXPECT_EQ(t.prune_events.back().target, r.sparsity->final_sparsity) << name;
      EXPECT_EQ(t.target_sparsity.back(), r.sparsity->final_sparsity) << name;
    }
  }
}

TEST(CompileTimeline, ReplaysIdentically) {
  const Recipe r = load("upstream-3ep");
  const auto a = compile_timeline(r, 321), b = compile_timeline(r, 321);
  EXPECT_EQ(a.lr, b.lr);
  EXPECT_EQ(a.target_sparsity, b.target_sparsity);
  ASSERT_EQ(a.prune_events.size(), b.prune_events.size());
  for (std::size_t k = 0; k < a.prune_events.size(); ++k) EXPECT_EQ(a.prune_events[k].step, b.prune_events[k].step);
}

TEST(CompileTimeline, EvalPoints) {
  const auto t = compile_timeline(load("downstream-10ep"), 100);
  std::vector<std::size_t> post, ends;
  for (std::size_t i = 0; i < t.eval_points.size(); ++i) {
    if (i > 0) {
      ASSERT_GT(t.eval_points[i].step, t.eval_points[i - 1].step);
    }
    (t.eval_points[i].kind == EvalKind::post_prune ? post : ends).push_back(t.eval_points[i].step);
  }
  EXPECT_EQ(ends.size(), 10u);
  EXPECT_EQ(ends.back(), 999u);
  EXPECT_EQ(post, (std::vector<std::size_t>{200, 300, 400, 500, 600, 700}));
}

TEST(CompileTimeline, StepsPerEpochBelowFrequencyRejected) {
  EXPECT_THROW(compile_timeline(load("upstream-3ep"), 50), std::invalid_argument);
  EXPECT_THROW(compile_timeline(load("downstream-10ep"), 0), std::invalid_argument);
}

TEST(AuditRecipe, BundledRecipesMatch) {
  for (const auto& name : kBundled) {
    const auto diff = audit_recipe(load(name));
    EXPECT_TRUE(diff.empty()) << name << ": " << (diff.empty() ? "" : diff.front().describe());
  }
}

TEST(AuditRecipe, EditedTemperatureGivesOneLine) {
  const Recipe r = parse_recipe(with_field(load_doc("downstream-10ep"), "kd.temperature", 2.0));
  const auto diff = audit_recipe(r);
  ASSERT_EQ(diff.size(), 1u);
  EXPECT_EQ(diff[0].field, "kd.temperature");
  EXPECT_EQ(diff[0].expected, 5.5);
  EXPECT_EQ(diff[0].found, 2.0);
}

TEST(AuditRecipe, SparsityOnFinetuneIsReported) {
  auto doc = load_doc("upstream-finetune-8ep");
  doc["stage"] = "upstream";
  doc["mask_source"] = nullptr;
  doc["sparsity"] = load_doc("upstream-3ep")["sparsity"];
  doc["total_epochs"] = 3;
  doc["lr"] = load_doc("upstream-3ep")["lr"];
  const auto diff = audit_recipe(parse_recipe(doc));
  EXPECT_FALSE(diff.empty());
}

TEST(AuditRecipe, UnknownNameRejected) {
  Recipe r = load("downstream-10ep");
  r.name = "my-recipe";
  EXPECT_THROW(audit_recipe(r), std::invalid_argument);
}
