#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "w2s/common.hpp"

namespace w2s {

inline constexpr int kScoreMin = 1;
inline constexpr int kScoreMax = 5;

inline bool valid_score(int s) { return s >= kScoreMin && s <= kScoreMax; }

/// Stand-in for a video: an id plus a feature vector (synthetic mode) or an
/// external URI (real-video mode).
struct VisualContext {
  std::string id;
  std::vector<double> features;
  std::optional<std::string> uri;

  friend bool operator==(const VisualContext&, const VisualContext&) = default;
};

struct Question {
  std::string id;
  std::string text;

  friend bool operator==(const Question&, const Question&) = default;
};

/// One zoo response. `score` is unset until the scorer has seen it.
struct Candidate {
  std::string text;
  std::string source;
  std::optional<int> score;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct PreferencePair {
  std::string id;
  VisualContext context;
  Question question;
  Candidate chosen;
  Candidate rejected;
  std::vector<Candidate> all_candidates;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

inline void validate(const Candidate& c) {
  if (c.score && !valid_score(*c.score))
    throw ValidationError("candidate from '" + c.source + "' has score " + std::to_string(*c.score) +
                          " outside {1..5}");
}

inline void validate(const PreferencePair& p) {
  if (p.context.id.empty()) throw ValidationError("pair '" + p.id + "': empty video id");
  if (p.question.text.empty()) throw ValidationError("pair '" + p.id + "': empty question text");
  validate(p.chosen);
  validate(p.rejected);
  for (const auto& c : p.all_candidates) validate(c);
  // Unscored pairs only come from random-pairing ablations.
  if (p.chosen.score.has_value() != p.rejected.score.has_value())
    throw ValidationError("pair '" + p.id + "': chosen and rejected must both be scored or both unscored");
  if (p.chosen.score && *p.chosen.score < *p.rejected.score)
    throw ValidationError("pair '" + p.id + "': chosen score below rejected score");
  auto contains = [&](const Candidate& c) {
    return std::find(p.all_candidates.begin(), p.all_candidates.end(), c) != p.all_candidates.end();
  };
  if (!contains(p.chosen) || !contains(p.rejected))
    throw ValidationError("pair '" + p.id + "': chosen/rejected missing from candidate list");
}

// ---------------------------------------------------------------------------
// Parameters

struct TensorShape {
  std::string name;
  std::vector<std::size_t> dims;

  std::size_t numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

using Manifest = std::vector<TensorShape>;

inline std::size_t manifest_size(const Manifest& m) {
  std::size_t n = 0;
  for (const auto& t : m) n += t.numel();
  return n;
}

/// Flat parameter buffer with an ordered tensor manifest.
///
/// The float instantiation is the persisted policy state (checkpoints are
/// float32). The double instantiation exists for gradient checking, where
/// finite differences need more headroom than float offers.
template <std::floating_point T>
class BasicParameterVector {
 public:
  using value_type = T;

  BasicParameterVector() = default;

  BasicParameterVector(Manifest manifest, std::vector<T> values)
      : manifest_(std::move(manifest)), values_(std::move(values)) {
    if (manifest_size(manifest_) != values_.size())
      throw ValidationError("parameter manifest describes " + std::to_string(manifest_size(manifest_)) +
                            " values but " + std::to_string(values_.size()) + " were given");
  }

  static BasicParameterVector zeros(Manifest manifest) {
    const auto n = manifest_size(manifest);
    return BasicParameterVector(std::move(manifest), std::vector<T>(n, T{0}));
  }

  const Manifest& manifest() const { return manifest_; }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::size_t offset_of(std::string_view name) const {
    std::size_t off = 0;
    for (const auto& t : manifest_) {
      if (t.name == name) return off;
      off += t.numel();
    }
    throw ValidationError("no tensor named '" + std::string(name) + "'");
  }

  std::span<T> tensor(std::string_view name) { return locate(*this, name); }
  std::span<const T> tensor(std::string_view name) const { return locate(*this, name); }

  bool same_layout(const BasicParameterVector& other) const { return manifest_ == other.manifest_; }

  template <std::floating_point U>
  BasicParameterVector<U> cast() const {
    return BasicParameterVector<U>(manifest_, std::vector<U>(values_.begin(), values_.end()));
  }

  /// FNV-1a over manifest and raw value bytes; equal iff bit-identical in practice.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a(std::string_view{});
    for (const auto& t : manifest_) {
      h = fnv1a(t.name, h);
      for (auto d : t.dims)
        h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(&d), sizeof d), h);
    }
    return fnv1a(std::span(reinterpret_cast<const unsigned char*>(values_.data()), values_.size() * sizeof(T)),
                 h);
  }

  friend bool operator==(const BasicParameterVector&, const BasicParameterVector&) = default;

 private:
  template <typename Self>
  static auto locate(Self& self, std::string_view name) {
    const auto off = self.offset_of(name);
    for (const auto& t : self.manifest_)
      if (t.name == name) return std::span(self.values_).subspan(off, t.numel());
    throw ValidationError("no tensor named '" + std::string(name) + "'");
  }

  Manifest manifest_;
  std::vector<T> values_;
};

using ParameterVector = BasicParameterVector<float>;

// ---------------------------------------------------------------------------
// Configuration and reports

enum class ExpoAnchor { stage_start, initial };
enum class Optimizer { sgd, adamw };

struct TrainConfig {
  double beta = 0.1;
  double learning_rate = 20.0;
  int iterations = 2;
  double alpha = 0.0;
  ExpoAnchor expo_anchor = ExpoAnchor::stage_start;
  std::uint64_t seed = 0;
  int epochs_per_stage = 40;
  int batch_size = 2048;
  Optimizer optimizer = Optimizer::sgd;

  void validate() const {
    if (!(beta > 0)) throw ConfigError("train.beta", "must be positive");
    if (!(learning_rate >= 0)) throw ConfigError("train.learning_rate", "must be nonnegative");
    if (iterations < 1) throw ConfigError("train.iterations", "must be >= 1");
    if (!(alpha >= 0)) throw ConfigError("train.alpha", "must be nonnegative");
    if (epochs_per_stage < 1) throw ConfigError("train.epochs_per_stage", "must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  }
};

struct GtComparison {
  int gt_better = 0;
  int tie = 0;
  int mr_better = 0;
  int excluded = 0;

  int total() const { return gt_better + tie + mr_better; }
  friend bool operator==(const GtComparison&, const GtComparison&) = default;
};

struct EvalReport {
  std::string dataset_id;
  std::string scheme = "vision";
  double mean_score = 0.0;
  double ratio_ge3 = 0.0;
  std::map<std::string, double> per_dimension;
  std::optional<GtComparison> gt_comparison;
  int n = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

}  // namespace w2s
