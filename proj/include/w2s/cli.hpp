#pragma once

// Command-line front end: build-dataset, train, evaluate, compare and
// make-items. `run_cli` never calls exit(); it returns the process status.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "w2s/config.hpp"
#include "w2s/evaluation.hpp"
#include "w2s/io.hpp"
#include "w2s/pipeline.hpp"
#include "w2s/training.hpp"

namespace w2s {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

namespace cli_detail {

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Applies a --seed override to every seed the config derives from it.
inline void override_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = seed;
  c.build.seed = seed;
}

struct LoadedConfig {
  RunConfig config;
  std::string text;  // copied verbatim next to every output
};

inline LoadedConfig load(const fs::path& path, std::optional<std::uint64_t> seed) {
  LoadedConfig lc{load_config(path), read_file(path)};
  if (seed) override_seed(lc.config, *seed);
  lc.config.build.seed = lc.config.seed;
  return lc;
}

inline std::unique_ptr<Scorer> make_scorer(const RunConfig& c, const SyntheticTask& task, AuditLog* log) {
  if (!c.scorer || c.scorer->kind == ScorerConfig::Kind::synthetic) return std::make_unique<SyntheticScorer>(task);
  return std::make_unique<ExternalJudge>(c.scorer->id, *c.scorer->endpoint, c.scorer->options, log);
}

inline std::unique_ptr<ReferenceJudge> make_reference_judge(const RunConfig& c, AuditLog* log) {
  if (!c.scorer || c.scorer->kind == ScorerConfig::Kind::synthetic) return std::make_unique<SyntheticMatchingJudge>();
  return std::make_unique<ExternalJudge>(c.scorer->id, *c.scorer->endpoint, c.scorer->options, log);
}

inline std::vector<Item> load_items(const RunConfig& c, const SyntheticTask& task) {
  if (!c.items) throw ConfigError("items", "missing required field");
  if (c.items->kind == ItemSource::Kind::synthetic) return task.make_items(c.items->count, c.seed);
  std::vector<Item> out;
  for (auto& it : read_eval_items(c.items->path)) out.push_back({std::move(it.context), std::move(it.question)});
  if (out.empty()) throw ConfigError("items.path", "item file is empty");
  return out;
}

/// "0.1,0.2,0.5" or "0.1..0.5" (step 0.1).
inline std::vector<double> parse_alpha_grid(const std::string& spec) {
  std::vector<double> out;
  try {
    if (const auto dots = spec.find(".."); dots != std::string::npos) {
      const double lo = std::stod(spec.substr(0, dots)), hi = std::stod(spec.substr(dots + 2));
      if (hi < lo) throw ConfigError("--alpha-search", "empty range");
      for (int k = 0; lo + 0.1 * k <= hi + 1e-9; ++k) out.push_back(std::round((lo + 0.1 * k) * 1e9) / 1e9);
    } else {
      std::stringstream ss(spec);
      for (std::string tok; std::getline(ss, tok, ',');) out.push_back(std::stod(tok));
    }
  } catch (const std::logic_error&) {
    throw ConfigError("--alpha-search", "expected 'a,b,c' or 'lo..hi', got '" + spec + "'");
  }
  if (out.empty()) throw ConfigError("--alpha-search", "no alphas given");
  for (double a : out)
    if (!(a >= 0)) throw ConfigError("--alpha-search", "alphas must be nonnegative");
  return out;
}

// ---------------------------------------------------------------------------
// build-dataset

struct BuildArgs {
  fs::path config, out;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  std::optional<std::size_t> limit;
};

inline fs::path sibling(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

inline std::uint64_t journal_fingerprint(const std::string& config_text, std::uint64_t seed, std::size_t n_items) {
  return derive_seed(fnv1a(config_text) ^ seed, n_items);
}

/// Reads a journal written by an earlier run. A torn final line (no newline)
/// is discarded; anything else malformed is an error.
inline std::vector<ItemRecord> read_journal(const fs::path& path, std::uint64_t fingerprint) {
  const auto text = read_file(path);
  std::vector<ItemRecord> out;
  std::size_t pos = 0, lineno = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    try {
      const auto j = nlohmann::json::parse(line);
      if (lineno == 1) {
        if (j.value("fingerprint", std::string{}) != hex(fingerprint))
          throw ConfigError("--resume", "journal " + path.string() + " was written with a different config, seed or item count");
        continue;
      }
      out.push_back(item_record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(lineno, e.what());
    } catch (const ValidationError& e) {
      throw FormatError(lineno, e.what());
    }
  }
  return out;
}

inline int build_dataset(const BuildArgs& a, std::ostream& out) {
  auto [cfg, text] = load(a.config, a.seed);
  if (cfg.zoo.empty()) throw ConfigError("zoo", "missing required field");
  if (!cfg.scorer) throw ConfigError("scorer", "missing required field");
  const SyntheticTask task(cfg.task);
  const auto items = load_items(cfg, task);

  const auto journal_path = sibling(a.out, ".journal.jsonl");
  const auto fingerprint = journal_fingerprint(text, cfg.seed, items.size());
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  write_file(sibling(a.out, ".config.json"), text);

  std::vector<ItemRecord> done;
  if (a.resume && fs::exists(journal_path)) done = read_journal(journal_path, fingerprint);
  if (done.size() > items.size()) throw Error("journal holds more items than the item source");
  for (std::size_t i = 0; i < done.size(); ++i)
    if (done[i].item_id != item_key(items[i]))
      throw Error("journal item " + std::to_string(i) + " is '" + done[i].item_id + "', expected '" +
                  item_key(items[i]) + "'");

  // Rewrite journal and pair file from what survived, then append.
  std::ofstream journal(journal_path, std::ios::binary | std::ios::trunc);
  std::ofstream pairs(a.out, std::ios::binary | std::ios::trunc);
  if (!journal || !pairs) throw Error("cannot open outputs next to " + a.out.string());
  journal << nlohmann::json{{"journal", 1}, {"fingerprint", hex(fingerprint)}}.dump() << '\n';
  auto append = [&](std::span<const ItemRecord> recs) {
    for (const auto& r : recs) {
      journal << to_json(r).dump() << '\n';
      if (r.pair) write_pair(pairs, *r.pair);
    }
    journal.flush();
    pairs.flush();
    if (!journal || !pairs) throw Error("write failed while flushing " + a.out.string());
  };
  append(done);

  const bool any_external = std::any_of(cfg.zoo.begin(), cfg.zoo.end(), [](auto& g) { return g.kind == GeneratorKind::external; }) ||
                            cfg.scorer->kind == ScorerConfig::Kind::external;
  AuditLog sink;
  std::unique_ptr<AuditLog> file_log;
  if (any_external) file_log = std::make_unique<AuditLog>(sibling(a.out, ".requests.jsonl"));
  AuditLog* log = file_log ? file_log.get() : &sink;

  const Zoo zoo(cfg.zoo, &task, log);
  const auto scorer = make_scorer(cfg, task, log);
  const DatasetBuilder builder(zoo, *scorer, cfg.rubric, cfg.build);

  std::size_t stop = items.size();
  if (a.limit) stop = std::min(stop, *a.limit);
  BuildResult result;
  result.records = std::move(done);
  if (result.records.size() < stop) {
    const auto rest = std::span<const Item>(items).subspan(result.records.size(), stop - result.records.size());
    auto more = builder.build(rest, append);
    for (auto& r : more.records) result.records.push_back(std::move(r));
  }
  DatasetBuilder::finalize(result);
  journal.close();
  pairs.close();

  const bool complete = result.records.size() == items.size();
  auto stats = to_json(result.stats);
  stats["n_items"] = items.size();
  stats["n_processed"] = result.records.size();
  stats["complete"] = complete;
  write_file(sibling(a.out, ".stats.json"), stats.dump(2) + "\n");
  const auto summary = format_stats(result.stats);
  write_file(sibling(a.out, ".summary.txt"), summary);
  out << summary;
  out << "processed " << result.records.size() << " of " << items.size() << " items"
      << (complete ? "" : " (incomplete; rerun with --resume)") << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path dataset, config, out;
  std::optional<double> alpha;
  std::optional<int> iterations;
  std::optional<std::string> alpha_search;
  std::optional<std::uint64_t> seed;
};

inline nlohmann::json stage_json(const StageReport& r) {
  return {{"stage", r.stage},
          {"n_pairs", r.n_pairs},
          {"initial_loss", r.initial_loss},
          {"epoch_losses", r.epoch_losses},
          {"margin_before", r.margin_before},
          {"margin_after", r.margin_after},
          {"reference_hash", hex(r.reference_hash)},
          {"pre_hash", hex(r.pre.hash())},
          {"dpo_hash", hex(r.post_dpo.hash())},
          {"expo_hash", hex(r.post_expo.hash())}};
}

inline int train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  auto [cfg, text] = load(a.config, a.seed);
  if (a.alpha) cfg.train.alpha = *a.alpha;
  if (a.iterations) cfg.train.iterations = *a.iterations;
  if (a.alpha_search) cfg.alpha_grid = parse_alpha_grid(*a.alpha_search);
  try {
    cfg.train.validate();
  } catch (const ConfigError& e) {
    // report the flag the operator actually used
    if (e.field() == "train.alpha" && a.alpha) throw ConfigError("--alpha", "must be nonnegative");
    if (e.field() == "train.iterations" && a.iterations) throw ConfigError("--iterations", "must be >= 1");
    throw;
  }

  const SyntheticTask task(cfg.task);
  const auto pc = cfg.policy(task);
  const auto pairs = read_pairs(a.dataset);
  if (pairs.empty()) throw Error("dataset " + a.dataset.string() + " has no pairs");
  const auto encoded = encode_pairs(pairs, task.vocab());
  const auto initial = init_policy(pc);

  fs::create_directories(a.out);
  write_file(a.out / "config.json", text);

  nlohmann::json report = {{"dataset", a.dataset.string()},
                           {"n_pairs", pairs.size()},
                           {"beta", cfg.train.beta},
                           {"iterations", cfg.train.iterations},
                           {"seed", cfg.seed},
                           {"expo_anchor", cfg.train.expo_anchor == ExpoAnchor::initial ? "initial" : "stage_start"},
                           {"initial_hash", hex(initial.params.hash())}};

  IterResult run{initial, {}, std::nullopt, std::nullopt};
  if (cfg.alpha_grid.empty()) {
    run = iter_w2s_rlaif(encoded, cfg.train, initial);
    report["alpha"] = cfg.train.alpha;
    report["alpha_search"] = nullptr;
  } else {
    std::vector<std::size_t> idx(encoded.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto [tr, va] = split_holdout(std::span<const std::size_t>(idx), cfg.validation_fraction, derive_seed(cfg.seed, "holdout"));
    if (tr.empty() || va.empty()) throw Error("dataset too small to hold out a validation split");
    std::vector<EncodedPair> train_set;
    for (auto i : tr) train_set.push_back(encoded[i]);
    std::vector<EvalItem> val;
    for (auto i : va) val.push_back({pairs[i].context, pairs[i].question, "", std::nullopt});
    AuditLog sink;
    const auto scorer = make_scorer(cfg, task, &sink);
    auto validate = [&](const PolicySnapshot& p) {
      return evaluate_responses(decode_responses(p, task.vocab(), val), *scorer, cfg.rubric).mean_score;
    };
    try {
      auto sr = search_alpha(train_set, cfg.train, initial, cfg.alpha_grid, validate);
      run = std::move(*sr.best);
      nlohmann::json grid = nlohmann::json::array();
      for (auto [al, s] : sr.scores) grid.push_back({{"alpha", al}, {"validation_score", s}});
      report["alpha"] = sr.best_alpha;
      report["alpha_search"] = {{"selected_alpha", sr.best_alpha},
                                {"validation_score", sr.best_score},
                                {"n_train", train_set.size()},
                                {"n_validation", val.size()},
                                {"grid", grid}};
      out << "alpha search: selected alpha " << sr.best_alpha << " (validation score " << format_score(sr.best_score)
          << ")\n";
    } catch (const TrainingDiverged& e) {
      run.failure = e.what();
      run.failed_stage = e.stage();
    }
  }

  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : run.stages) {
    const auto dir = a.out / ("stage_" + std::to_string(s.stage));
    fs::create_directories(dir);
    write_checkpoint(dir / "pre.ckpt", s.pre);
    write_checkpoint(dir / "dpo.ckpt", s.post_dpo);
    write_checkpoint(dir / "expo.ckpt", s.post_expo);
    write_file(dir / "report.json", stage_json(s).dump(2) + "\n");
    stages.push_back(stage_json(s));
    out << "stage " << s.stage << ": " << s.n_pairs << " pairs, loss " << format_score(s.initial_loss) << " -> "
        << format_score(s.epoch_losses.empty() ? s.initial_loss : s.epoch_losses.back()) << ", margin "
        << signed_fixed(s.margin_before) << " -> " << signed_fixed(s.margin_after) << "\n";
  }
  report["stages"] = stages;

  if (run.failure) {
    report["failure"] = {{"stage", *run.failed_stage}, {"message", *run.failure}};
    write_file(a.out / "train_report.json", report.dump(2) + "\n");
    err << "training diverged in stage " << *run.failed_stage << ": " << *run.failure << "\n";
    return kExitRuntime;
  }
  write_checkpoint(a.out / "final.ckpt", run.final_policy.params);
  report["final_hash"] = hex(run.final_policy.params.hash());
  report["failure"] = nullptr;
  write_file(a.out / "train_report.json", report.dump(2) + "\n");
  out << "final policy " << hex(run.final_policy.params.hash()) << " written to " << (a.out / "final.ckpt").string()
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate / compare / make-items

struct EvaluateArgs {
  std::optional<fs::path> policy;
  fs::path items, config, out;
  std::string scheme = "vision";
};

inline int evaluate(const EvaluateArgs& a, std::ostream& out) {
  auto [cfg, text] = load(a.config, std::nullopt);
  const SyntheticTask task(cfg.task);
  auto items = read_eval_items(a.items);
  if (items.empty()) throw Error("item file " + a.items.string() + " is empty");

  // Shape checks happen before any judge is contacted.
  std::optional<PolicySnapshot> policy;
  if (a.policy) {
    auto params = read_checkpoint(*a.policy);
    try {
      policy.emplace(cfg.policy(task), std::move(params));
    } catch (const ValidationError& e) {
      throw ConfigError("--policy", std::string("checkpoint does not match the configured policy: ") + e.what());
    }
  }
  if (a.scheme == "legacy")
    for (const auto& it : items)
      if (!it.groundtruth) throw ConfigError("--items", "legacy scheme needs a groundtruth for every item");

  if (policy) items = decode_responses(*policy, task.vocab(), items);

  const auto log_path = sibling(a.out, ".requests.jsonl");
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  fs::remove(log_path);
  AuditLog log(log_path);
  const auto dataset_id = a.items.stem().string();
  EvalReport report;
  if (a.scheme == "legacy") {
    const auto judge = make_reference_judge(cfg, &log);
    report = legacy_evaluate(items, *judge, cfg.rubric, dataset_id, &log);
  } else {
    const auto scorer = make_scorer(cfg, task, &log);
    report = evaluate_responses(items, *scorer, cfg.rubric, dataset_id, &log);
    const bool all_gt = std::all_of(items.begin(), items.end(), [](auto& it) { return it.groundtruth.has_value(); });
    if (all_gt) report.gt_comparison = compare_gt_vs_response(items, *scorer, cfg.rubric);
  }
  write_file(a.out, to_json(report).dump(2) + "\n");
  write_file(sibling(a.out, ".config.json"), text);
  out << format_table(std::vector<EvalReport>{report});
  return kExitOk;
}

inline EvalReport read_report(const fs::path& p) {
  try {
    return eval_report_from_json(nlohmann::json::parse(read_file(p)));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed report " + p.string() + ": " + e.what());
  }
}

struct MakeItemsArgs {
  fs::path out;
  std::optional<fs::path> config;
  std::size_t count = 100;
  std::optional<std::uint64_t> seed;
  std::optional<double> gt_corruption;
};

/// Synthetic evaluation suite. Groundtruths are the true captions, or
/// captions with an exact fraction of their words replaced.
inline int make_items(const MakeItemsArgs& a, std::ostream& out) {
  RunConfig cfg;
  if (a.config) cfg = load(*a.config, a.seed).config;
  if (a.seed) cfg.seed = *a.seed;
  if (a.gt_corruption && !(*a.gt_corruption >= 0 && *a.gt_corruption <= 1))
    throw ConfigError("--gt-corruption", "must be in [0, 1]");
  const SyntheticTask task(cfg.task);
  std::vector<EvalItem> items;
  for (const auto& it : task.make_items(a.count, cfg.seed)) {
    auto gt = task.target_tokens(it.context);
    if (a.gt_corruption) {
      Rng rng(derive_seed(cfg.seed, "gt/" + item_key(it)));
      gt = task.corrupt_exact(gt, *a.gt_corruption, rng);
    }
    items.push_back({it.context, it.question, "", task.vocab().decode(gt)});
  }
  write_eval_items(a.out, items);
  out << "wrote " << items.size() << " items to " << a.out.string() << "\n";
  return kExitOk;
}

inline void print_error(std::ostream& err, const char* kind, const std::string& message,
                        const std::optional<std::string>& field = std::nullopt) {
  nlohmann::json j = {{"kind", kind}, {"message", message}};
  if (field) j["field"] = *field;
  err << nlohmann::json{{"error", j}}.dump() << "\n";
}

}  // namespace cli_detail

/// Entry point. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Preference-data construction, iterative DPO training and evaluation", "w2s"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  BuildArgs build;
  auto* b = app.add_subcommand("build-dataset", "Sample the zoo, score candidates and write preference pairs");
  b->add_option("--config", build.config, "Run configuration (JSON)")->required();
  b->add_option("--out", build.out, "Pair file to write (JSONL)")->required();
  b->add_option("--seed", build.seed, "Override the config seed");
  b->add_flag("--resume", build.resume, "Continue from the journal next to --out");
  b->add_option("--limit", build.limit, "Stop after this many items (resume later)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Iterative DPO with parameter extrapolation");
  t->add_option("--dataset", tr.dataset, "Pair file")->required();
  t->add_option("--config", tr.config, "Run configuration (JSON)")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--alpha", tr.alpha, "Extrapolation strength");
  t->add_option("--iterations", tr.iterations, "Number of stages T");
  t->add_option("--alpha-search", tr.alpha_search, "Alphas to try, 'a,b,c' or 'lo..hi'");
  t->add_option("--seed", tr.seed, "Override the config seed");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a policy (or given responses) on an item file");
  e->add_option("--policy", ev.policy, "Policy checkpoint; without it items must carry responses");
  e->add_option("--items", ev.items, "Item file (JSONL)")->required();
  e->add_option("--scheme", ev.scheme, "vision or legacy")->check(CLI::IsMember({"vision", "legacy"}));
  e->add_option("--out", ev.out, "Report file (JSON)")->required();
  e->add_option("--config", ev.config, "Run configuration (JSON)")->required();

  std::vector<fs::path> reports;
  auto* c = app.add_subcommand("compare", "Print Score/Ratio deltas of the second report against the first");
  c->add_option("--report", reports, "Report file; give exactly two")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  MakeItemsArgs mk;
  auto* m = app.add_subcommand("make-items", "Write a synthetic evaluation suite");
  m->add_option("--out", mk.out, "Item file to write")->required();
  m->add_option("--count", mk.count, "Number of items");
  m->add_option("--seed", mk.seed, "Seed");
  m->add_option("--config", mk.config, "Run configuration for task shape");
  m->add_option("--gt-corruption", mk.gt_corruption, "Fraction of groundtruth words to replace");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    print_error(err, "usage", ex.what());
    return kExitConfig;
  }

  try {
    if (b->parsed()) return build_dataset(build, out);
    if (t->parsed()) return train(tr, out, err);
    if (e->parsed()) return evaluate(ev, out);
    if (m->parsed()) return make_items(mk, out);
    if (c->parsed()) {
      if (reports.size() != 2) throw ConfigError("--report", "give exactly two reports");
      out << format_delta(read_report(reports[0]), read_report(reports[1]));
      return kExitOk;
    }
  } catch (const ConfigError& ex) {
    print_error(err, "config", ex.what(), ex.field());
    return kExitConfig;
  } catch (const TrainingDiverged& ex) {
    print_error(err, "diverged", ex.what());
    return kExitRuntime;
  } catch (const std::exception& ex) {
    print_error(err, "runtime", ex.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace w2s
