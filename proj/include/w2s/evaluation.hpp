#pragma once

// Score / Ratio evaluation: the vision-grounded scheme (the scorer sees the
// context) and the legacy groundtruth-matching scheme.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "w2s/chat_client.hpp"
#include "w2s/io.hpp"
#include "w2s/policy.hpp"
#include "w2s/scoring.hpp"
#include "w2s/synthetic_task.hpp"

namespace w2s {

struct EvalItem {
  VisualContext context;
  Question question;
  std::string response;
  std::optional<std::string> groundtruth;
};

// Item files: one JSON object per line with "video", "question" and
// optional "groundtruth" / "response" strings.

inline Json to_json(const EvalItem& it) {
  Json j = {{"video", to_json(it.context)}, {"question", to_json(it.question)}};
  if (it.groundtruth) j["groundtruth"] = *it.groundtruth;
  if (!it.response.empty()) j["response"] = it.response;
  return j;
}

inline EvalItem eval_item_from_json(const Json& j) {
  EvalItem it{context_from_json(detail::require(j, "video")), question_from_json(detail::require(j, "question")), "",
              std::nullopt};
  if (j.contains("groundtruth") && !j.at("groundtruth").is_null()) it.groundtruth = j.at("groundtruth").get<std::string>();
  if (j.contains("response") && !j.at("response").is_null()) it.response = j.at("response").get<std::string>();
  return it;
}

inline std::vector<EvalItem> read_eval_items(std::istream& in) { return read_json_lines(in, eval_item_from_json); }

inline std::vector<EvalItem> read_eval_items(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open item file " + path.string());
  return read_eval_items(in);
}

inline void write_eval_items(const std::filesystem::path& path, std::span<const EvalItem> items) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write item file " + path.string());
  for (const auto& it : items) out << to_json(it).dump() << '\n';
}

/// Score = mean, Ratio = fraction of scores >= 3.
inline EvalReport summarize_scores(std::span<const int> scores, std::string dataset_id = {},
                                   std::string scheme = "vision") {
  if (scores.empty()) throw ValidationError("no scores to summarise");
  EvalReport r;
  r.dataset_id = std::move(dataset_id);
  r.scheme = std::move(scheme);
  r.n = static_cast<int>(scores.size());
  long sum = 0, ge3 = 0;
  for (int s : scores) {
    sum += s;
    ge3 += s >= 3 ? 1 : 0;
  }
  r.mean_score = static_cast<double>(sum) / r.n;
  r.ratio_ge3 = static_cast<double>(ge3) / r.n;
  return r;
}

namespace detail {

inline void log_judge_call(AuditLog* log, const char* scheme, const EvalItem& item, bool with_context) {
  if (!log) return;
  log->record({{"role", "judge"},
               {"scheme", scheme},
               {"question", item.question.id},
               {"context", with_context ? nlohmann::json(item.context.id) : nlohmann::json(nullptr)}});
}

}  // namespace detail

/// Vision-grounded evaluation. An empty response receives the bottom of the
/// scale without consulting the scorer; items the scorer fails on are
/// excluded from n.
inline EvalReport evaluate_responses(std::span<const EvalItem> items, const Scorer& scorer, const ScoreRubric& rubric,
                                     std::string dataset_id = {}, AuditLog* log = nullptr) {
  if (items.empty()) throw ValidationError("evaluate_responses: no items");
  std::vector<int> scores;
  std::map<std::string, std::pair<double, int>> dims;
  for (const auto& item : items) {
    if (split_words(item.response).empty()) {
      scores.push_back(rubric.scale_min);
      continue;
    }
    detail::log_judge_call(log, "vision", item, true);
    try {
      const auto r = scorer.score(item.context, item.question, Candidate{item.response, "policy", std::nullopt}, rubric);
      scores.push_back(r.score);
      for (const auto& [d, v] : r.per_dimension) {
        dims[d].first += v;
        dims[d].second += 1;
      }
    } catch (const Error&) {
    }
  }
  auto report = summarize_scores(scores, std::move(dataset_id), "vision");
  for (const auto& [d, acc] : dims) report.per_dimension[d] = acc.first / acc.second;
  return report;
}

/// Buckets each item by whether the groundtruth or the response scores
/// higher under the same scorer.
inline GtComparison compare_gt_vs_response(std::span<const EvalItem> items, const Scorer& scorer,
                                           const ScoreRubric& rubric) {
  if (items.empty()) throw ValidationError("compare_gt_vs_response: no items");
  GtComparison out;
  for (const auto& item : items) {
    if (!item.groundtruth) throw ValidationError("item '" + item.question.id + "' has no groundtruth");
    try {
      const int gt = scorer.score(item.context, item.question, Candidate{*item.groundtruth, "groundtruth", {}}, rubric).score;
      const int mr = scorer.score(item.context, item.question, Candidate{item.response, "response", {}}, rubric).score;
      if (gt > mr) ++out.gt_better;
      else if (gt == mr) ++out.tie;
      else ++out.mr_better;
    } catch (const Error&) {
      ++out.excluded;
    }
  }
  return out;
}

/// Legacy scheme: the judge only sees (question, groundtruth, response).
inline EvalReport legacy_evaluate(std::span<const EvalItem> items, const ReferenceJudge& judge,
                                  const ScoreRubric& rubric, std::string dataset_id = {}, AuditLog* log = nullptr) {
  if (items.empty()) throw ValidationError("legacy_evaluate: no items");
  std::vector<int> scores;
  for (const auto& item : items) {
    if (!item.groundtruth) throw ValidationError("item '" + item.question.id + "' has no groundtruth");
    if (split_words(item.response).empty()) {
      scores.push_back(rubric.scale_min);
      continue;
    }
    detail::log_judge_call(log, "legacy", item, false);
    try {
      scores.push_back(judge.judge(item.question, *item.groundtruth, item.response, rubric).score);
    } catch (const Error&) {
    }
  }
  return summarize_scores(scores, std::move(dataset_id), "legacy");
}

// ---------------------------------------------------------------------------
// Policy decoding

inline std::vector<EvalItem> decode_responses(const PolicySnapshot& policy, const Vocabulary& vocab,
                                              std::span<const EvalItem> items) {
  std::vector<EvalItem> out(items.begin(), items.end());
  for (auto& item : out) {
    const auto q = vocab.encode(item.question.text);
    item.response = vocab.decode(greedy_decode(policy, PolicyPrompt{item.context.features, q}));
  }
  return out;
}

/// Mean synthetic score of the policy's greedy decodes.
inline double greedy_score(const PolicySnapshot& policy, const SyntheticTask& task, std::span<const Item> items) {
  std::vector<EvalItem> eval;
  eval.reserve(items.size());
  for (const auto& it : items) eval.push_back({it.context, it.question, "", std::nullopt});
  SyntheticScorer scorer(task);
  return evaluate_responses(decode_responses(policy, task.vocab(), eval), scorer, ScoreRubric{}).mean_score;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_score(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", s);
  return buf;
}

inline std::string format_ratio(double r) { return format_score(100.0 * r); }

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"dataset_id", r.dataset_id},
                      {"scheme", r.scheme},
                      {"n", r.n},
                      {"score", r.mean_score},
                      {"ratio", r.ratio_ge3},
                      {"display", {{"score", format_score(r.mean_score)}, {"ratio", format_ratio(r.ratio_ge3)}}},
                      {"per_dimension", r.per_dimension}};
  if (r.gt_comparison) {
    const auto& g = *r.gt_comparison;
    j["gt_comparison"] = {{"gt_better", g.gt_better}, {"tie", g.tie}, {"mr_better", g.mr_better}, {"excluded", g.excluded}};
  } else {
    j["gt_comparison"] = nullptr;
  }
  return j;
}

inline EvalReport eval_report_from_json(const Json& j) {
  EvalReport r;
  r.dataset_id = j.value("dataset_id", std::string{});
  r.scheme = j.value("scheme", std::string("vision"));
  r.n = detail::require(j, "n").get<int>();
  r.mean_score = detail::require(j, "score").get<double>();
  r.ratio_ge3 = detail::require(j, "ratio").get<double>();
  if (j.contains("per_dimension")) r.per_dimension = j.at("per_dimension").get<std::map<std::string, double>>();
  if (j.contains("gt_comparison") && !j.at("gt_comparison").is_null()) {
    const auto& g = j.at("gt_comparison");
    r.gt_comparison = GtComparison{g.at("gt_better").get<int>(), g.at("tie").get<int>(), g.at("mr_better").get<int>(),
                                   g.value("excluded", 0)};
  }
  if (r.ratio_ge3 < 0 || r.ratio_ge3 > 1) throw ValidationError("ratio outside [0, 1]");
  return r;
}

/// Score / Ratio table, one row per report.
inline std::string format_table(std::span<const EvalReport> reports) {
  std::ostringstream o;
  o << std::left << std::setw(24) << "dataset" << std::setw(8) << "scheme" << std::right << std::setw(8) << "Score"
    << std::setw(9) << "Ratio" << std::setw(7) << "n" << "\n";
  for (const auto& r : reports)
    o << std::left << std::setw(24) << r.dataset_id << std::setw(8) << r.scheme << std::right << std::setw(8)
      << format_score(r.mean_score) << std::setw(9) << format_ratio(r.ratio_ge3) << std::setw(7) << r.n << "\n";
  return o.str();
}

struct ReportDelta {
  double score = 0;
  double ratio = 0;  // fraction, not percent
};

inline ReportDelta compare_reports(const EvalReport& base, const EvalReport& other) {
  return {other.mean_score - base.mean_score, other.ratio_ge3 - base.ratio_ge3};
}

inline std::string signed_fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f", v);
  // "-0.00" reads as a regression
  return std::string(buf) == "-0.00" ? "+0.00" : buf;
}

inline std::string format_delta(const EvalReport& base, const EvalReport& other) {
  const auto d = compare_reports(base, other);
  std::ostringstream o;
  o << format_table(std::vector<EvalReport>{base, other});
  o << std::left << std::setw(32) << "Delta_Base" << std::right << std::setw(8) << signed_fixed(d.score)
    << std::setw(9) << signed_fixed(100.0 * d.ratio) << "\n";
  return o.str();
}

}  // namespace w2s
