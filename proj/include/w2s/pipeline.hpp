#pragma once

// Preference-pair construction: sample the zoo, score every response, keep
// the highest- and lowest-scoring ones, drop items where all scores tie.

#include <array>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "w2s/datamodel.hpp"
#include "w2s/io.hpp"
#include "w2s/parallel.hpp"
#include "w2s/scoring.hpp"
#include "w2s/vocab.hpp"
#include "w2s/zoo.hpp"

namespace w2s {

enum class TieBreak { lowest_index, random };

/// How chosen/rejected are picked. `random` ignores scores entirely and is
/// only meant for ablations.
enum class PairingMode { scored, random };

struct Dropped {};

struct PairSelection {
  std::size_t chosen = 0;
  std::size_t rejected = 0;
  friend bool operator==(const PairSelection&, const PairSelection&) = default;
};

/// argmax/argmin over scores; std::nullopt when every score is equal.
inline std::optional<PairSelection> select_pair(std::span<const int> scores, TieBreak tie_break,
                                                std::uint64_t seed = 0) {
  if (scores.size() < 2) throw ValidationError("pair selection needs at least two scored candidates");
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  if (*lo_it == *hi_it) return std::nullopt;
  std::vector<std::size_t> top, bottom;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] == *hi_it) top.push_back(i);
    if (scores[i] == *lo_it) bottom.push_back(i);
  }
  if (tie_break == TieBreak::lowest_index) return PairSelection{top.front(), bottom.front()};
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_top(0, top.size() - 1);
  const auto c = top[pick_top(rng)];
  std::uniform_int_distribution<std::size_t> pick_bottom(0, bottom.size() - 1);
  return PairSelection{c, bottom[pick_bottom(rng)]};
}

/// Builds the pair from scored candidates (unscored ones are ignored).
inline std::variant<PreferencePair, Dropped> make_pair(const Item& item, std::span<const Candidate> candidates,
                                                       TieBreak tie_break, std::uint64_t seed = 0) {
  std::vector<Candidate> scored;
  std::vector<int> scores;
  for (const auto& c : candidates)
    if (c.score) {
      scored.push_back(c);
      scores.push_back(*c.score);
    }
  const auto sel = select_pair(scores, tie_break, seed);
  if (!sel) return Dropped{};
  PreferencePair p{item.context.id + "/" + item.question.id, item.context, item.question, scored[sel->chosen],
                   scored[sel->rejected], scored};
  return p;
}

/// Ablation pairing: two distinct candidates drawn at random, orientation at
/// random, scores discarded.
inline PreferencePair make_random_pair(const Item& item, std::span<const Candidate> candidates, std::uint64_t seed) {
  if (candidates.size() < 2) throw ValidationError("random pairing needs at least two candidates");
  Rng rng(seed);
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Candidate> all(candidates.begin(), candidates.end());
  for (auto& c : all) c.score.reset();
  return PreferencePair{item.context.id + "/" + item.question.id, item.context, item.question, all[idx[0]],
                        all[idx[1]], all};
}

// ---------------------------------------------------------------------------
// Statistics

using ScoreHistogram = std::array<long, kScoreMax>;  // index = score - 1

struct LengthSummary {
  double mean = 0;
  double p50 = 0;
  double p90 = 0;
  long max = 0;

  friend bool operator==(const LengthSummary&, const LengthSummary&) = default;
};

struct DatasetStats {
  std::map<std::string, ScoreHistogram> per_source_score_hist;
  std::map<std::string, double> per_source_mean;
  std::array<ScoreHistogram, kScoreMax> joint_pair_hist{};  // [chosen - 1][rejected - 1]
  ScoreHistogram marginal_chosen{};
  ScoreHistogram marginal_rejected{};
  LengthSummary chosen_chars, chosen_words, rejected_chars, rejected_words;
  long n_kept = 0;
  long n_dropped_ties = 0;
  long n_failed = 0;

  long joint_total() const {
    long t = 0;
    for (const auto& row : joint_pair_hist)
      for (auto v : row) t += v;
    return t;
  }
};

namespace detail {

inline LengthSummary summarize_lengths(std::vector<long> v) {
  LengthSummary s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.mean = static_cast<double>(std::accumulate(v.begin(), v.end(), 0L)) / static_cast<double>(v.size());
  // nearest-rank percentiles
  auto rank = [&](double q) {
    auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    return static_cast<double>(v[std::clamp<std::size_t>(k, 1, v.size()) - 1]);
  };
  s.p50 = rank(0.5);
  s.p90 = rank(0.9);
  s.max = v.back();
  return s;
}

}  // namespace detail

/// Histograms, means and lengths. Pairs produced by random pairing carry no
/// scores and only contribute to the length summaries.
inline DatasetStats compute_stats(std::span<const PreferencePair> pairs, std::span<const Candidate> all_scored) {
  DatasetStats s;
  std::map<std::string, long> sums;
  for (const auto& c : all_scored) {
    if (!c.score) continue;
    validate(c);
    s.per_source_score_hist[c.source][static_cast<std::size_t>(*c.score - 1)]++;
    sums[c.source] += *c.score;
  }
  for (const auto& [src, hist] : s.per_source_score_hist) {
    const long n = std::accumulate(hist.begin(), hist.end(), 0L);
    s.per_source_mean[src] = static_cast<double>(sums[src]) / static_cast<double>(n);
  }
  std::vector<long> cc, cw, rc, rw;
  for (const auto& p : pairs) {
    if (p.chosen.score && p.rejected.score) {
      const auto ci = static_cast<std::size_t>(*p.chosen.score - 1), ri = static_cast<std::size_t>(*p.rejected.score - 1);
      s.joint_pair_hist[ci][ri]++;
    }
    cc.push_back(static_cast<long>(p.chosen.text.size()));
    cw.push_back(static_cast<long>(split_words(p.chosen.text).size()));
    rc.push_back(static_cast<long>(p.rejected.text.size()));
    rw.push_back(static_cast<long>(split_words(p.rejected.text).size()));
  }
  for (std::size_t i = 0; i < kScoreMax; ++i)
    for (std::size_t j = 0; j < kScoreMax; ++j) {
      s.marginal_chosen[i] += s.joint_pair_hist[i][j];
      s.marginal_rejected[j] += s.joint_pair_hist[i][j];
    }
  s.chosen_chars = detail::summarize_lengths(cc);
  s.chosen_words = detail::summarize_lengths(cw);
  s.rejected_chars = detail::summarize_lengths(rc);
  s.rejected_words = detail::summarize_lengths(rw);
  s.n_kept = static_cast<long>(pairs.size());
  return s;
}

inline nlohmann::json to_json(const LengthSummary& l) {
  return {{"mean", l.mean}, {"p50", l.p50}, {"p90", l.p90}, {"max", l.max}};
}

inline nlohmann::json to_json(const DatasetStats& s) {
  nlohmann::json j;
  for (const auto& [src, hist] : s.per_source_score_hist) {
    j["per_source"][src] = {{"hist", hist}, {"mean", s.per_source_mean.at(src)}};
  }
  if (!j.contains("per_source")) j["per_source"] = nlohmann::json::object();
  j["joint_pair_hist"] = s.joint_pair_hist;
  j["marginal_chosen"] = s.marginal_chosen;
  j["marginal_rejected"] = s.marginal_rejected;
  j["lengths"] = {{"chosen", {{"chars", to_json(s.chosen_chars)}, {"words", to_json(s.chosen_words)}}},
                  {"rejected", {{"chars", to_json(s.rejected_chars)}, {"words", to_json(s.rejected_words)}}}};
  j["n_kept"] = s.n_kept;
  j["n_dropped_ties"] = s.n_dropped_ties;
  j["n_failed"] = s.n_failed;
  return j;
}

inline std::string format_stats(const DatasetStats& s) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  o << "pairs kept " << s.n_kept << ", dropped (ties) " << s.n_dropped_ties << ", failed " << s.n_failed << "\n";
  o << "per-source scores (1..5) and mean:\n";
  for (const auto& [src, hist] : s.per_source_score_hist) {
    o << "  " << std::left << std::setw(16) << src << std::right;
    for (auto v : hist) o << std::setw(7) << v;
    o << "   mean " << s.per_source_mean.at(src) << "\n";
  }
  o << "joint (row = chosen score, column = rejected score):\n";
  for (int c = kScoreMax; c >= kScoreMin; --c) {
    o << "  " << c << ":";
    for (int r = kScoreMin; r <= kScoreMax; ++r) o << std::setw(7) << s.joint_pair_hist[c - 1][r - 1];
    o << "\n";
  }
  o << "mean length chosen " << s.chosen_words.mean << " words / " << s.chosen_chars.mean << " chars, rejected "
    << s.rejected_words.mean << " words / " << s.rejected_chars.mean << " chars\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Construction

enum class ItemStatus { kept, dropped, failed };

/// Everything learned about one item; enough to rebuild stats on resume.
struct ItemRecord {
  std::string item_id;
  ItemStatus status = ItemStatus::failed;
  std::vector<Candidate> candidates;  // zoo order; unscored where generation/scoring failed
  std::vector<std::string> errors;
  std::optional<PreferencePair> pair;
};

inline std::string item_key(const Item& item) { return item.context.id + "/" + item.question.id; }

struct BuildOptions {
  TieBreak tie_break = TieBreak::lowest_index;
  PairingMode pairing = PairingMode::scored;
  std::uint64_t seed = 0;
  std::size_t max_in_flight = 1;
  std::size_t flush_every = 100;
};

struct BuildResult {
  std::vector<PreferencePair> pairs;
  DatasetStats stats;
  std::vector<ItemRecord> records;
};

class DatasetBuilder {
 public:
  DatasetBuilder(const Zoo& zoo, const Scorer& scorer, ScoreRubric rubric, BuildOptions options)
      : zoo_(zoo), scorer_(scorer), rubric_(std::move(rubric)), options_(options) {
    if (zoo_.size() < 2) throw ConfigError("zoo", "needs at least two generators to form pairs");
    rubric_.validate();
  }

  const BuildOptions& options() const { return options_; }

  /// Pure function of (item, options.seed) in synthetic mode.
  ItemRecord process(const Item& item) const {
    ItemRecord rec;
    rec.item_id = item_key(item);
    const auto seed = derive_seed(options_.seed, rec.item_id);
    const auto batch = zoo_.generate_all(item.context, item.question, seed, std::max<std::size_t>(1, options_.max_in_flight));
    for (const auto& r : batch.results) {
      rec.candidates.push_back(r.candidate.value_or(Candidate{"", r.source, std::nullopt}));
      if (!r.ok()) rec.errors.push_back(r.source + ": " + r.error);
    }
    if (batch.failed()) return rec;

    // Score only what was generated, then splice back into zoo order.
    std::vector<std::size_t> slot;
    std::vector<Candidate> generated;
    for (std::size_t i = 0; i < batch.results.size(); ++i)
      if (batch.results[i].ok()) {
        slot.push_back(i);
        generated.push_back(*batch.results[i].candidate);
      }
    const auto scored = score_batch(scorer_, item.context, item.question, generated, rubric_);
    for (std::size_t k = 0; k < slot.size(); ++k) {
      rec.candidates[slot[k]] = scored.candidates[k];
      if (scored.errors[k]) rec.errors.push_back(scored.candidates[k].source + ": " + *scored.errors[k]);
    }
    if (scored.failed()) return rec;

    if (options_.pairing == PairingMode::random) {
      std::vector<Candidate> ok;
      for (const auto& c : rec.candidates)
        if (c.score) ok.push_back(c);
      rec.pair = make_random_pair(item, ok, derive_seed(seed, "pairing"));
      rec.status = ItemStatus::kept;
      return rec;
    }
    auto outcome = make_pair(item, rec.candidates, options_.tie_break, derive_seed(seed, "tie-break"));
    if (std::holds_alternative<Dropped>(outcome)) {
      rec.status = ItemStatus::dropped;
    } else {
      rec.pair = std::get<PreferencePair>(std::move(outcome));
      rec.status = ItemStatus::kept;
    }
    return rec;
  }

  /// Processes items in chunks of `flush_every`; `on_chunk` sees each chunk's
  /// records in input order once the whole chunk is done.
  BuildResult build(std::span<const Item> items,
                    const std::function<void(std::span<const ItemRecord>)>& on_chunk = {}) const {
    BuildResult out;
    out.records.reserve(items.size());
    const auto chunk = std::max<std::size_t>(1, options_.flush_every);
    for (std::size_t start = 0; start < items.size(); start += chunk) {
      const auto n = std::min(chunk, items.size() - start);
      std::vector<ItemRecord> recs(n);
      parallel_for(n, options_.max_in_flight, [&](std::size_t i) { recs[i] = process(items[start + i]); });
      if (on_chunk) on_chunk(recs);
      for (auto& r : recs) out.records.push_back(std::move(r));
    }
    finalize(out);
    return out;
  }

  /// Rebuilds pairs and stats from item records.
  static void finalize(BuildResult& out) {
    out.pairs.clear();
    std::vector<Candidate> scored;
    long dropped = 0, failed = 0;
    for (const auto& r : out.records) {
      for (const auto& c : r.candidates)
        if (c.score) scored.push_back(c);
      switch (r.status) {
        case ItemStatus::kept: out.pairs.push_back(*r.pair); break;
        case ItemStatus::dropped: ++dropped; break;
        case ItemStatus::failed: ++failed; break;
      }
    }
    out.stats = compute_stats(out.pairs, scored);
    out.stats.n_dropped_ties = dropped;
    out.stats.n_failed = failed;
  }

 private:
  const Zoo& zoo_;
  const Scorer& scorer_;
  ScoreRubric rubric_;
  BuildOptions options_;
};

// Item records serialise to the build journal, one per line.

inline const char* to_string(ItemStatus s) {
  switch (s) {
    case ItemStatus::kept: return "kept";
    case ItemStatus::dropped: return "dropped";
    case ItemStatus::failed: return "failed";
  }
  return "failed";
}

inline nlohmann::json to_json(const ItemRecord& r) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : r.candidates) cands.push_back(to_json(c));
  nlohmann::json j = {{"item", r.item_id}, {"status", to_string(r.status)}, {"candidates", cands}, {"errors", r.errors}};
  j["pair"] = r.pair ? to_json(*r.pair) : nlohmann::json(nullptr);
  return j;
}

inline ItemRecord item_record_from_json(const nlohmann::json& j) {
  ItemRecord r;
  r.item_id = detail::require(j, "item").get<std::string>();
  const auto status = detail::require(j, "status").get<std::string>();
  if (status == "kept") r.status = ItemStatus::kept;
  else if (status == "dropped") r.status = ItemStatus::dropped;
  else if (status == "failed") r.status = ItemStatus::failed;
  else throw ValidationError("unknown item status '" + status + "'");
  for (const auto& c : detail::require(j, "candidates")) r.candidates.push_back(candidate_from_json(c));
  r.errors = j.value("errors", std::vector<std::string>{});
  if (j.contains("pair") && !j.at("pair").is_null()) r.pair = pair_from_json(j.at("pair"));
  if ((r.status == ItemStatus::kept) != r.pair.has_value())
    throw ValidationError("item '" + r.item_id + "': pair present iff status is kept");
  return r;
}

}  // namespace w2s
