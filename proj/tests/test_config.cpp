#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"
#include "w2s/config.hpp"

using namespace w2s;
using nlohmann::json;

namespace {

std::string field_of(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

}  // namespace

TEST(Config, DefaultsWhenSectionsAbsent) {
  const auto c = parse_config(json::object());
  EXPECT_EQ(c.seed, 0u);
  EXPECT_FALSE(c.items);
  EXPECT_TRUE(c.zoo.empty());
  EXPECT_DOUBLE_EQ(c.train.beta, 0.1);
  EXPECT_EQ(c.train.iterations, 2);
  EXPECT_DOUBLE_EQ(c.train.alpha, 0.0);
  EXPECT_EQ(c.train.expo_anchor, ExpoAnchor::stage_start);
  EXPECT_EQ(c.rubric.scale_min, 1);
  EXPECT_EQ(c.rubric.scale_max, 5);
  EXPECT_EQ(c.rubric.dimensions.size(), 6u);
  EXPECT_EQ(c.build.tie_break, TieBreak::lowest_index);
  EXPECT_EQ(c.build.pairing, PairingMode::scored);
}

TEST(Config, ShippedSampleParses) {
  const auto c = load_config(std::filesystem::path(W2S_SOURCE_DIR) / "configs" / "synthetic.json");
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.train.seed, 1u);
  ASSERT_EQ(c.zoo.size(), 4u);
  EXPECT_DOUBLE_EQ(c.zoo[3].quality, 0.3);
  ASSERT_TRUE(c.items);
  EXPECT_EQ(c.items->count, 2300u);
  const SyntheticTask task(c.task);
  const auto pc = c.policy(task);
  EXPECT_EQ(pc.max_len, 4);
  EXPECT_EQ(pc.vocab_size, task.vocab().size());
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(field_of({{"bogus", 1}}), "bogus");
  EXPECT_EQ(field_of({{"train", {{"lr", 1}}}}), "train.lr");
  EXPECT_EQ(field_of({{"train", {{"beta", "high"}}}}), "train.beta");
  EXPECT_EQ(field_of({{"train", {{"beta", 0}}}}), "train.beta");
  EXPECT_EQ(field_of({{"train", {{"iterations", 1.5}}}}), "train.iterations");
  EXPECT_EQ(field_of({{"train", {{"alpha", -1}}}}), "train.alpha");
  EXPECT_EQ(field_of({{"train", {{"alpha_search", {0.1, "x"}}}}}), "train.alpha_search[1]");
  EXPECT_EQ(field_of({{"train", {{"expo_anchor", "weak"}}}}), "train.expo_anchor");
  EXPECT_EQ(field_of({{"items", {{"count", 3}}}}), "items.source");
  EXPECT_EQ(field_of({{"items", {{"source", "synthetic"}}}}), "items.count");
  EXPECT_EQ(field_of({{"zoo", {{{"kind", "synthetic"}, {"quality", 1}}}}}), "zoo[0].id");
  EXPECT_EQ(field_of({{"zoo", {{{"id", "a"}}}}}), "zoo[0].quality");
  EXPECT_EQ(field_of({{"zoo", {{{"id", "a"}, {"kind", "external"}}}}}), "zoo[0].endpoint");
  EXPECT_EQ(field_of({{"zoo", {{{"id", "a"}, {"kind", "external"}, {"endpoint", {{"model", "m"}}}}}}}),
            "zoo[0].endpoint.url");
  EXPECT_EQ(field_of({{"scorer", json::object()}}), "scorer.kind");
  EXPECT_EQ(field_of({{"scorer", {{"kind", "synthetic"}, {"context_mode", "smell"}}}}), "scorer.context_mode");
  EXPECT_EQ(field_of({{"rubric", {{"scale_min", 5}, {"scale_max", 1}}}}), "rubric.scale");
  EXPECT_EQ(field_of({{"rubric", {{"dimensions", json::array()}}}}), "rubric.dimensions");
  EXPECT_EQ(field_of({{"pairing", {{"tie_break", "coin"}}}}), "pairing.tie_break");
  EXPECT_EQ(field_of({{"policy", {{"hidden_dim", 0}}}}), "policy.hidden_dim");
  EXPECT_EQ(field_of({{"task", {{"n_words", 99}}}}), "task.n_words");
  EXPECT_EQ(field_of({{"seed", -3}}), "seed");
}

TEST(Config, FullySpecifiedSections) {
  test::TempDir dir("cfg");
  {
    std::ofstream(dir.path / "judge.txt") << "Q: {{question}} A: {{response}}";
  }
  const json j = {
      {"seed", 9},
      {"items", {{"source", "file"}, {"path", "items.jsonl"}}},
      {"zoo",
       {{{"id", "local"}, {"quality", 0.5}},
        {{"id", "remote"}, {"kind", "external"}, {"endpoint", {{"url", "http://127.0.0.1:1"}, {"model", "m"}}}}}},
      {"scorer", {{"kind", "synthetic"}, {"context_mode", "attachment"}, {"prompt_template", "judge.txt"}}},
      {"rubric", {{"dimensions", {"accuracy"}}, {"aggregation", "mean_of_dimensions"}}},
      {"pairing", {{"tie_break", "random"}, {"mode", "random"}, {"flush_every", 3}}},
      {"policy", {{"hidden_dim", 12}, {"seed", 4}}},
      {"train",
       {{"optimizer", "adamw"},
        {"expo_anchor", "initial"},
        {"alpha_search", {0.1, 0.2}},
        {"validation_fraction", 0.2}}}};
  const auto c = parse_config(j, dir.path);
  EXPECT_EQ(c.items->path, dir.path / "items.jsonl");
  EXPECT_EQ(c.zoo[1].kind, GeneratorKind::external);
  EXPECT_EQ(c.zoo[1].endpoint->model, "m");
  EXPECT_EQ(c.scorer->options.context_mode, ContextMode::attachment);
  EXPECT_EQ(c.scorer->options.judge_template, "Q: {{question}} A: {{response}}");
  EXPECT_EQ(c.rubric.aggregation, Aggregation::mean_of_dimensions_rounded);
  EXPECT_EQ(c.build.pairing, PairingMode::random);
  EXPECT_EQ(c.build.flush_every, 3u);
  EXPECT_EQ(c.policy_seed, 4u);
  EXPECT_EQ(c.train.optimizer, Optimizer::adamw);
  EXPECT_EQ(c.train.expo_anchor, ExpoAnchor::initial);
  EXPECT_EQ(c.alpha_grid, (std::vector<double>{0.1, 0.2}));
  EXPECT_DOUBLE_EQ(c.validation_fraction, 0.2);
  EXPECT_EQ(c.train.seed, 9u);
}

TEST(Config, MissingTemplateFileAndBadJson) {
  test::TempDir dir("cfg2");
  try {
    parse_config({{"scorer", {{"kind", "synthetic"}, {"prompt_template", "nope.txt"}}}}, dir.path);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "scorer.prompt_template");
  }
  {
    std::ofstream(dir.path / "bad.json") << "{ \"seed\": ";
  }
  EXPECT_THROW(load_config(dir.path / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir.path / "absent.json"), ConfigError);
}

TEST(Config, PackagedPromptsMatchBuiltInDefaults) {
  const auto dir = std::filesystem::path(W2S_SOURCE_DIR) / "configs";
  const auto c = parse_config(
      {{"scorer", {{"kind", "synthetic"}, {"prompt_template", "prompts/judge.txt"}, {"legacy_template", "prompts/legacy.txt"}}}},
      dir);
  EXPECT_EQ(c.scorer->options.judge_template, kDefaultJudgeTemplate);
  EXPECT_EQ(c.scorer->options.legacy_template, kDefaultLegacyTemplate);
}
