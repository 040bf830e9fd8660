#pragma once

// The response scorer R(v, x, y) and the legacy groundtruth-matching judge.

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "w2s/chat_client.hpp"
#include "w2s/datamodel.hpp"
#include "w2s/synthetic_task.hpp"

namespace w2s {

enum class Aggregation { overall_single, mean_of_dimensions_rounded };

struct ScoreRubric {
  std::vector<std::string> dimensions = {"relevance",   "consistency",       "accuracy",
                                         "specificity", "comprehensiveness", "novel insight"};
  int scale_min = kScoreMin;
  int scale_max = kScoreMax;
  Aggregation aggregation = Aggregation::overall_single;

  void validate() const {
    if (dimensions.empty()) throw ConfigError("rubric.dimensions", "must be nonempty");
    if (scale_min >= scale_max) throw ConfigError("rubric.scale", "scale_min must be below scale_max");
  }
};

struct ScoreResult {
  int score = 0;
  std::map<std::string, int> per_dimension;
};

class ScoringError : public Error {
 public:
  using Error::Error;
};

/// Vision-grounded scorer: sees the context, the question and the response.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual ScoreResult score(const VisualContext& context, const Question& question, const Candidate& candidate,
                            const ScoreRubric& rubric) const = 0;
};

/// Legacy judge: compares a response against a groundtruth answer and never
/// sees the visual context.
class ReferenceJudge {
 public:
  virtual ~ReferenceJudge() = default;
  virtual ScoreResult judge(const Question& question, const std::string& groundtruth, const std::string& response,
                            const ScoreRubric& rubric) const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic scoring

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (const auto& x : a) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const auto up = row[j];
      row[j] = x == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}

/// LCS length normalised by the longer sequence, in [0, 1].
inline double lcs_overlap(const std::vector<std::string>& response, const std::vector<std::string>& target) {
  const auto denom = std::max(response.size(), target.size());
  return denom == 0 ? 1.0 : static_cast<double>(lcs_length(response, target)) / static_cast<double>(denom);
}

inline int overlap_to_score(double overlap, const ScoreRubric& rubric) {
  const double span = rubric.scale_max - rubric.scale_min;
  return rubric.scale_min + static_cast<int>(std::lround(span * std::clamp(overlap, 0.0, 1.0)));
}

namespace detail {

inline ScoreResult overlap_result(const std::string& response, const std::string& reference, const ScoreRubric& rubric) {
  if (split_words(response).empty()) throw ValidationError("cannot score an empty response");
  ScoreResult r;
  r.score = overlap_to_score(lcs_overlap(split_words(response), split_words(reference)), rubric);
  if (rubric.aggregation == Aggregation::mean_of_dimensions_rounded)
    for (const auto& d : rubric.dimensions) r.per_dimension[d] = r.score;
  return r;
}

}  // namespace detail

/// Scores token-level LCS overlap with the context's true caption.
class SyntheticScorer final : public Scorer {
 public:
  explicit SyntheticScorer(const SyntheticTask& task) : task_(task) {}

  ScoreResult score(const VisualContext& context, const Question&, const Candidate& candidate,
                    const ScoreRubric& rubric) const override {
    return detail::overlap_result(candidate.text, task_.target_text(context), rubric);
  }

 private:
  const SyntheticTask& task_;
};

/// Scores overlap with the groundtruth text.
class SyntheticMatchingJudge final : public ReferenceJudge {
 public:
  ScoreResult judge(const Question&, const std::string& groundtruth, const std::string& response,
                    const ScoreRubric& rubric) const override {
    return detail::overlap_result(response, groundtruth, rubric);
  }
};

// ---------------------------------------------------------------------------
// Prompts

inline constexpr const char* kDefaultJudgeTemplate =
    "You are grading an answer to a question about a video.\n"
    "{{context}}\n"
    "Question: {{question}}\n"
    "Answer: {{response}}\n"
    "Judge the answer against the video on these dimensions: {{dimensions}}.\n"
    "Use an integer scale from {{min}} (worst) to {{max}} (best).\n"
    "{{format}}\n";

inline constexpr const char* kDefaultLegacyTemplate =
    "You are grading how closely a predicted answer matches the correct answer.\n"
    "Question: {{question}}\n"
    "Correct answer: {{groundtruth}}\n"
    "Predicted answer: {{response}}\n"
    "Use an integer scale from {{min}} (no match) to {{max}} (perfect match).\n"
    "{{format}}\n";

/// How the judge learns about the video.
enum class ContextMode { caption, attachment };

inline std::string fill_template(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [key, value] : vars) {
    const auto placeholder = "{{" + key + "}}";
    for (auto pos = text.find(placeholder); pos != std::string::npos;
         pos = text.find(placeholder, pos + value.size()))
      text.replace(pos, placeholder.size(), value);
  }
  return text;
}

inline std::string load_template(const std::optional<std::filesystem::path>& path, const char* fallback) {
  if (!path) return fallback;
  std::ifstream in(*path);
  if (!in) throw ConfigError("scorer.prompt_template", "cannot read " + path->string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string format_instruction(const ScoreRubric& rubric) {
  const auto lo = std::to_string(rubric.scale_min), hi = std::to_string(rubric.scale_max);
  if (rubric.aggregation == Aggregation::mean_of_dimensions_rounded)
    return "Reply with one line per dimension in the form '<dimension>: <integer>', each integer between " + lo +
           " and " + hi + ".";
  return "Reply with a single integer between " + lo + " and " + hi + " and nothing else.";
}

inline std::string join_dimensions(const ScoreRubric& rubric) {
  std::string out;
  for (std::size_t i = 0; i < rubric.dimensions.size(); ++i) out += (i ? ", " : "") + rubric.dimensions[i];
  return out;
}

/// `context_text` is the caption (caption mode) or an attachment reference.
inline std::string build_judge_prompt(const std::string& context_text, const Question& question,
                                      const Candidate& candidate, const ScoreRubric& rubric,
                                      const std::string& tmpl = kDefaultJudgeTemplate) {
  rubric.validate();
  return fill_template(tmpl, {{"context", context_text},
                              {"question", question.text},
                              {"response", candidate.text},
                              {"dimensions", join_dimensions(rubric)},
                              {"min", std::to_string(rubric.scale_min)},
                              {"max", std::to_string(rubric.scale_max)},
                              {"format", format_instruction(rubric)}});
}

inline std::string describe_context(const VisualContext& context, ContextMode mode,
                                    const std::function<std::string(const VisualContext&)>& captioner) {
  if (mode == ContextMode::caption)
    return "Video description: " + (captioner ? captioner(context) : context.id);
  return "Video: see attached (" + context.uri.value_or(context.id) + ")";
}

inline std::string build_legacy_prompt(const Question& question, const std::string& groundtruth,
                                       const std::string& response, const ScoreRubric& rubric,
                                       const std::string& tmpl = kDefaultLegacyTemplate) {
  rubric.validate();
  return fill_template(tmpl, {{"question", question.text},
                              {"groundtruth", groundtruth},
                              {"response", response},
                              {"min", std::to_string(rubric.scale_min)},
                              {"max", std::to_string(rubric.scale_max)},
                              {"format", format_instruction(rubric)}});
}

// ---------------------------------------------------------------------------
// Reply parsing

/// First integer in `text` that stands alone (not part of a decimal or a
/// longer token) and lies within [lo, hi].
inline std::optional<int> parse_standalone_int(std::string_view text, int lo, int hi) {
  auto is_digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; };
  for (std::size_t i = 0; i < text.size();) {
    if (!is_digit(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_digit(text[j])) ++j;
    const bool left_ok = i == 0 || (!is_word(text[i - 1]) && text[i - 1] != '.' && text[i - 1] != '-');
    const bool right_ok = j == text.size() || (!is_word(text[j]) && !(text[j] == '.' && j + 1 < text.size() &&
                                                                         is_digit(text[j + 1])));
    if (left_ok && right_ok && j - i <= 9) {
      const int v = std::stoi(std::string(text.substr(i, j - i)));
      if (v >= lo && v <= hi) return v;
    }
    i = j;
  }
  return std::nullopt;
}

/// Parses a reply according to the rubric's aggregation mode.
inline std::optional<ScoreResult> parse_judge_reply(std::string_view reply, const ScoreRubric& rubric) {
  if (rubric.aggregation == Aggregation::overall_single) {
    auto v = parse_standalone_int(reply, rubric.scale_min, rubric.scale_max);
    if (!v) return std::nullopt;
    return ScoreResult{*v, {}};
  }
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  const auto text = lower(std::string(reply));
  ScoreResult r;
  double sum = 0;
  for (const auto& dim : rubric.dimensions) {
    const auto pos = text.find(lower(dim));
    if (pos == std::string::npos) return std::nullopt;
    auto eol = text.find('\n', pos);
    auto v = parse_standalone_int(std::string_view(text).substr(pos + dim.size(), eol == std::string::npos
                                                                                      ? std::string::npos
                                                                                      : eol - pos - dim.size()),
                                  rubric.scale_min, rubric.scale_max);
    if (!v) return std::nullopt;
    r.per_dimension[dim] = *v;
    sum += *v;
  }
  r.score = static_cast<int>(std::lround(sum / static_cast<double>(rubric.dimensions.size())));
  return r;
}

// ---------------------------------------------------------------------------
// External judge

struct JudgeOptions {
  ContextMode context_mode = ContextMode::caption;
  int max_reasks = 2;
  double temperature = 0.0;
  std::string judge_template = kDefaultJudgeTemplate;
  std::string legacy_template = kDefaultLegacyTemplate;
};

class ExternalJudge final : public Scorer, public ReferenceJudge {
 public:
  ExternalJudge(std::string id, EndpointConfig endpoint, JudgeOptions options = {}, AuditLog* log = nullptr,
                std::function<std::string(const VisualContext&)> captioner = {})
      : client_(std::make_unique<ChatClient>(std::move(id), std::move(endpoint), log)),
        options_(std::move(options)),
        captioner_(std::move(captioner)) {}

  ScoreResult score(const VisualContext& context, const Question& question, const Candidate& candidate,
                    const ScoreRubric& rubric) const override {
    if (candidate.text.empty()) throw ValidationError("cannot score an empty response");
    const auto prompt = build_judge_prompt(describe_context(context, options_.context_mode, captioner_), question,
                                           candidate, rubric, options_.judge_template);
    std::optional<std::string> attachment;
    if (options_.context_mode == ContextMode::attachment) attachment = context.uri.value_or(context.id);
    return ask(prompt, rubric, attachment, {{"role", "judge"}, {"scheme", "vision"}, {"context", context.id}});
  }

  ScoreResult judge(const Question& question, const std::string& groundtruth, const std::string& response,
                    const ScoreRubric& rubric) const override {
    if (response.empty()) throw ValidationError("cannot score an empty response");
    return ask(build_legacy_prompt(question, groundtruth, response, rubric, options_.legacy_template), rubric,
               std::nullopt, {{"role", "judge"}, {"scheme", "legacy"}, {"context", nullptr}});
  }

 private:
  ScoreResult ask(const std::string& prompt, const ScoreRubric& rubric, const std::optional<std::string>& attachment,
                  const nlohmann::json& log_fields) const {
    std::string current = prompt;
    for (int attempt = 0; attempt <= options_.max_reasks; ++attempt) {
      const auto reply = client_->complete(current, options_.temperature, attachment, log_fields);
      if (auto parsed = parse_judge_reply(reply.content, rubric)) return *parsed;
      current = prompt + "\nYour previous reply could not be parsed. " + format_instruction(rubric);
    }
    throw ScoringError("judge reply unparseable after " + std::to_string(options_.max_reasks) + " re-asks");
  }

  std::unique_ptr<ChatClient> client_;
  JudgeOptions options_;
  std::function<std::string(const VisualContext&)> captioner_;
};

// ---------------------------------------------------------------------------
// Batches

struct ScoredBatch {
  std::vector<Candidate> candidates;  // score unset where scoring failed
  std::vector<std::optional<std::string>> errors;

  std::size_t n_scored() const {
    return static_cast<std::size_t>(
        std::count_if(candidates.begin(), candidates.end(), [](auto& c) { return c.score.has_value(); }));
  }
  bool failed() const { return n_scored() < 2; }
};

inline ScoredBatch score_batch(const Scorer& scorer, const VisualContext& context, const Question& question,
                               std::vector<Candidate> candidates, const ScoreRubric& rubric) {
  if (candidates.empty()) throw ValidationError("score_batch needs at least one candidate");
  ScoredBatch out;
  out.errors.resize(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto& c = candidates[i];
    try {
      const auto r = scorer.score(context, question, c, rubric);
      if (r.score < rubric.scale_min || r.score > rubric.scale_max) throw ScoringError("score out of range");
      c.score = r.score;
    } catch (const Error& e) {
      c.score.reset();
      out.errors[i] = e.what();
    }
  }
  out.candidates = std::move(candidates);
  return out;
}

}  // namespace w2s
