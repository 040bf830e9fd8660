#pragma once

// Declarative run configuration (one JSON file per run). Every validation
// failure is a ConfigError naming the offending field by its dotted path.
// The format is documented in docs/config.md.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "w2s/chat_client.hpp"
#include "w2s/datamodel.hpp"
#include "w2s/pipeline.hpp"
#include "w2s/policy.hpp"
#include "w2s/scoring.hpp"
#include "w2s/synthetic_task.hpp"
#include "w2s/zoo.hpp"

namespace w2s {

struct ItemSource {
  enum class Kind { synthetic, file } kind = Kind::synthetic;
  std::size_t count = 0;
  std::filesystem::path path;
};

struct ScorerConfig {
  enum class Kind { synthetic, external } kind = Kind::synthetic;
  std::string id = "judge";
  std::optional<EndpointConfig> endpoint;
  JudgeOptions options;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticTaskConfig task;
  std::optional<ItemSource> items;
  std::vector<GeneratorSpec> zoo;
  std::optional<ScorerConfig> scorer;
  ScoreRubric rubric;
  BuildOptions build;
  int hidden_dim = 32;
  std::optional<std::uint64_t> policy_seed;  // defaults to `seed`
  TrainConfig train;
  std::vector<double> alpha_grid;  // empty: no search
  double validation_fraction = 0.1;

  /// Policy shape implied by the task plus the configured hidden size.
  PolicyConfig policy(const SyntheticTask& t) const {
    PolicyConfig c{t.vocab().size(), t.config().target_len, t.feature_dim(), hidden_dim, policy_seed.value_or(seed)};
    c.validate();
    return c;
  }
};

namespace config_detail {

using nlohmann::json;

inline std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

inline void only_keys(const json& j, const std::string& where, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError(where.empty() ? "<root>" : where, "must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(join(where, k), "unknown field");
}

inline const json& need(const json& j, const std::string& where, const char* key) {
  if (!j.contains(key)) throw ConfigError(join(where, key), "missing required field");
  return j.at(key);
}

template <typename T>
T as(const json& v, const std::string& field) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field, "must be a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field, "must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field, "must be an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
          throw ConfigError(field, "must be nonnegative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field, "must be a number");
    }
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(field, e.what());
  }
}

template <typename T>
void opt(const json& j, const std::string& where, const char* key, T& out) {
  if (j.contains(key)) out = as<T>(j.at(key), join(where, key));
}

inline EndpointConfig endpoint_from(const json& j, const std::string& where) {
  only_keys(j, where, {"url", "path", "model", "api_key_env", "timeout_s", "max_retries", "backoff_ms", "max_in_flight"});
  EndpointConfig e;
  e.url = as<std::string>(need(j, where, "url"), join(where, "url"));
  opt(j, where, "path", e.path);
  opt(j, where, "model", e.model);
  opt(j, where, "api_key_env", e.api_key_env);
  opt(j, where, "timeout_s", e.timeout_s);
  opt(j, where, "max_retries", e.max_retries);
  opt(j, where, "backoff_ms", e.backoff_ms);
  opt(j, where, "max_in_flight", e.max_in_flight);
  e.validate(where);
  return e;
}

inline std::string read_text(const std::filesystem::path& p, const std::string& field) {
  std::ifstream in(p);
  if (!in) throw ConfigError(field, "cannot read '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace config_detail

/// Parses and validates a run configuration. Relative file paths inside the
/// config resolve against `base_dir`.
inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using namespace config_detail;
  only_keys(j, "", {"seed", "task", "items", "zoo", "scorer", "rubric", "pairing", "policy", "train"});
  RunConfig c;
  opt(j, "", "seed", c.seed);
  auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base_dir / p; };

  if (j.contains("task")) {
    const auto& t = j.at("task");
    only_keys(t, "task", {"n_words", "target_len", "feature_noise"});
    opt(t, "task", "n_words", c.task.n_words);
    opt(t, "task", "target_len", c.task.target_len);
    opt(t, "task", "feature_noise", c.task.feature_noise);
  }
  c.task.validate();

  if (j.contains("items")) {
    const auto& it = j.at("items");
    only_keys(it, "items", {"source", "count", "path"});
    ItemSource src;
    const auto kind = as<std::string>(need(it, "items", "source"), "items.source");
    if (kind == "synthetic") {
      src.kind = ItemSource::Kind::synthetic;
      src.count = as<std::size_t>(need(it, "items", "count"), "items.count");
      if (src.count == 0) throw ConfigError("items.count", "must be positive");
    } else if (kind == "file") {
      src.kind = ItemSource::Kind::file;
      src.path = resolve(as<std::string>(need(it, "items", "path"), "items.path"));
    } else {
      throw ConfigError("items.source", "must be 'synthetic' or 'file'");
    }
    c.items = src;
  }

  if (j.contains("zoo")) {
    const auto& z = j.at("zoo");
    if (!z.is_array()) throw ConfigError("zoo", "must be an array of generators");
    for (std::size_t i = 0; i < z.size(); ++i) {
      const auto where = "zoo[" + std::to_string(i) + "]";
      const auto& m = z[i];
      only_keys(m, where, {"id", "kind", "quality", "temperature", "endpoint"});
      GeneratorSpec g;
      g.id = as<std::string>(need(m, where, "id"), where + ".id");
      const auto kind = m.contains("kind") ? as<std::string>(m.at("kind"), where + ".kind") : "synthetic";
      if (kind == "synthetic") {
        g.kind = GeneratorKind::synthetic;
        g.quality = as<double>(need(m, where, "quality"), where + ".quality");
      } else if (kind == "external") {
        g.kind = GeneratorKind::external;
        g.endpoint = endpoint_from(need(m, where, "endpoint"), where + ".endpoint");
      } else {
        throw ConfigError(where + ".kind", "must be 'synthetic' or 'external'");
      }
      opt(m, where, "temperature", g.temperature);
      g.validate();
      c.zoo.push_back(std::move(g));
    }
  }

  if (j.contains("scorer")) {
    const auto& s = j.at("scorer");
    only_keys(s, "scorer", {"kind", "id", "endpoint", "context_mode", "prompt_template", "legacy_template", "max_reasks",
                            "temperature"});
    ScorerConfig sc;
    const auto kind = as<std::string>(need(s, "scorer", "kind"), "scorer.kind");
    if (kind == "synthetic") {
      sc.kind = ScorerConfig::Kind::synthetic;
    } else if (kind == "external") {
      sc.kind = ScorerConfig::Kind::external;
      sc.endpoint = endpoint_from(need(s, "scorer", "endpoint"), "scorer.endpoint");
    } else {
      throw ConfigError("scorer.kind", "must be 'synthetic' or 'external'");
    }
    opt(s, "scorer", "id", sc.id);
    if (s.contains("context_mode")) {
      const auto m = as<std::string>(s.at("context_mode"), "scorer.context_mode");
      if (m == "caption") sc.options.context_mode = ContextMode::caption;
      else if (m == "attachment") sc.options.context_mode = ContextMode::attachment;
      else throw ConfigError("scorer.context_mode", "must be 'caption' or 'attachment'");
    }
    if (s.contains("prompt_template"))
      sc.options.judge_template =
          read_text(resolve(as<std::string>(s.at("prompt_template"), "scorer.prompt_template")), "scorer.prompt_template");
    if (s.contains("legacy_template"))
      sc.options.legacy_template =
          read_text(resolve(as<std::string>(s.at("legacy_template"), "scorer.legacy_template")), "scorer.legacy_template");
    opt(s, "scorer", "max_reasks", sc.options.max_reasks);
    opt(s, "scorer", "temperature", sc.options.temperature);
    if (sc.options.max_reasks < 0) throw ConfigError("scorer.max_reasks", "must be >= 0");
    c.scorer = std::move(sc);
  }

  if (j.contains("rubric")) {
    const auto& r = j.at("rubric");
    only_keys(r, "rubric", {"dimensions", "scale_min", "scale_max", "aggregation"});
    if (r.contains("dimensions")) {
      c.rubric.dimensions.clear();
      const auto& d = r.at("dimensions");
      if (!d.is_array()) throw ConfigError("rubric.dimensions", "must be an array of strings");
      for (std::size_t i = 0; i < d.size(); ++i)
        c.rubric.dimensions.push_back(as<std::string>(d[i], "rubric.dimensions[" + std::to_string(i) + "]"));
    }
    opt(r, "rubric", "scale_min", c.rubric.scale_min);
    opt(r, "rubric", "scale_max", c.rubric.scale_max);
    if (r.contains("aggregation")) {
      const auto a = as<std::string>(r.at("aggregation"), "rubric.aggregation");
      if (a == "overall") c.rubric.aggregation = Aggregation::overall_single;
      else if (a == "mean_of_dimensions") c.rubric.aggregation = Aggregation::mean_of_dimensions_rounded;
      else throw ConfigError("rubric.aggregation", "must be 'overall' or 'mean_of_dimensions'");
    }
  }
  c.rubric.validate();

  if (j.contains("pairing")) {
    const auto& p = j.at("pairing");
    only_keys(p, "pairing", {"tie_break", "mode", "max_in_flight", "flush_every"});
    if (p.contains("tie_break")) {
      const auto t = as<std::string>(p.at("tie_break"), "pairing.tie_break");
      if (t == "lowest_index") c.build.tie_break = TieBreak::lowest_index;
      else if (t == "random") c.build.tie_break = TieBreak::random;
      else throw ConfigError("pairing.tie_break", "must be 'lowest_index' or 'random'");
    }
    if (p.contains("mode")) {
      const auto m = as<std::string>(p.at("mode"), "pairing.mode");
      if (m == "scored") c.build.pairing = PairingMode::scored;
      else if (m == "random") c.build.pairing = PairingMode::random;
      else throw ConfigError("pairing.mode", "must be 'scored' or 'random'");
    }
    opt(p, "pairing", "max_in_flight", c.build.max_in_flight);
    opt(p, "pairing", "flush_every", c.build.flush_every);
    if (c.build.max_in_flight < 1) throw ConfigError("pairing.max_in_flight", "must be >= 1");
    if (c.build.flush_every < 1) throw ConfigError("pairing.flush_every", "must be >= 1");
  }

  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    only_keys(p, "policy", {"hidden_dim", "seed"});
    opt(p, "policy", "hidden_dim", c.hidden_dim);
    if (p.contains("seed")) c.policy_seed = as<std::uint64_t>(p.at("seed"), "policy.seed");
    if (c.hidden_dim < 1) throw ConfigError("policy.hidden_dim", "must be >= 1");
  }

  c.train.seed = c.seed;
  if (j.contains("train")) {
    const auto& t = j.at("train");
    only_keys(t, "train", {"beta", "learning_rate", "iterations", "alpha", "alpha_search", "expo_anchor",
                           "epochs_per_stage", "batch_size", "optimizer", "validation_fraction"});
    opt(t, "train", "beta", c.train.beta);
    opt(t, "train", "learning_rate", c.train.learning_rate);
    opt(t, "train", "iterations", c.train.iterations);
    opt(t, "train", "alpha", c.train.alpha);
    opt(t, "train", "epochs_per_stage", c.train.epochs_per_stage);
    opt(t, "train", "batch_size", c.train.batch_size);
    opt(t, "train", "validation_fraction", c.validation_fraction);
    if (t.contains("alpha_search")) {
      const auto& a = t.at("alpha_search");
      if (!a.is_array()) throw ConfigError("train.alpha_search", "must be an array of numbers");
      for (std::size_t i = 0; i < a.size(); ++i)
        c.alpha_grid.push_back(as<double>(a[i], "train.alpha_search[" + std::to_string(i) + "]"));
    }
    if (t.contains("expo_anchor")) {
      const auto a = as<std::string>(t.at("expo_anchor"), "train.expo_anchor");
      if (a == "stage_start") c.train.expo_anchor = ExpoAnchor::stage_start;
      else if (a == "initial") c.train.expo_anchor = ExpoAnchor::initial;
      else throw ConfigError("train.expo_anchor", "must be 'stage_start' or 'initial'");
    }
    if (t.contains("optimizer")) {
      const auto o = as<std::string>(t.at("optimizer"), "train.optimizer");
      if (o == "sgd") c.train.optimizer = Optimizer::sgd;
      else if (o == "adamw") c.train.optimizer = Optimizer::adamw;
      else throw ConfigError("train.optimizer", "must be 'sgd' or 'adamw'");
    }
  }
  c.train.validate();
  for (double a : c.alpha_grid)
    if (!(a >= 0)) throw ConfigError("train.alpha_search", "alphas must be nonnegative");
  if (!(c.validation_fraction > 0 && c.validation_fraction < 1))
    throw ConfigError("train.validation_fraction", "must be in (0, 1)");
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j, path.parent_path());
}

}  // namespace w2s
