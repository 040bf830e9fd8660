#pragma once

// Desk-scale surrogate for video QA. Each context's feature vector is
// `target_len` one-hot slices (plus noise) over the content words; the
// argmax of slice k is the k-th word of the true caption.

#include <array>
#include <cstdio>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "w2s/datamodel.hpp"
#include "w2s/vocab.hpp"

namespace w2s {

struct SyntheticTaskConfig {
  int n_words = 10;
  int target_len = 4;
  double feature_noise = 0.1;

  void validate() const {
    if (n_words < 2 || n_words > 24) throw ConfigError("task.n_words", "must be in [2, 24]");
    if (target_len < 1) throw ConfigError("task.target_len", "must be >= 1");
    if (!(feature_noise >= 0 && feature_noise < 0.5)) throw ConfigError("task.feature_noise", "must be in [0, 0.5)");
  }
};

struct Item {
  VisualContext context;
  Question question;
};

class SyntheticTask {
 public:
  static constexpr std::array<const char*, 24> kContentWords = {
      "dog",   "cat",  "car",   "tree",  "river", "ball",  "child", "bird",
      "red",   "blue", "green", "runs",  "jumps", "sits",  "flies", "swims",
      "park",  "road", "beach", "house", "man",   "woman", "boat",  "horse"};
  static constexpr std::array<const char*, 10> kQuestionWords = {
      "what", "is", "in", "the", "video", "describe", "happening", "shown", "scene", "this"};
  static constexpr std::array<const char*, 4> kQuestions = {
      "what is shown in the video", "describe the video", "what is happening in the video",
      "describe this scene"};

  explicit SyntheticTask(SyntheticTaskConfig config = {}) : config_(config), vocab_(make_words(config)) {
    config_.validate();
  }

  const SyntheticTaskConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  int feature_dim() const { return config_.n_words * config_.target_len; }
  int first_content_id() const { return 2; }
  int content_id(int k) const { return first_content_id() + k; }

  std::vector<int> target_tokens(const VisualContext& ctx) const {
    if (static_cast<int>(ctx.features.size()) != feature_dim())
      throw ValidationError("context '" + ctx.id + "' has " + std::to_string(ctx.features.size()) +
                            " features, task expects " + std::to_string(feature_dim()));
    std::vector<int> out;
    for (int k = 0; k < config_.target_len; ++k) {
      const auto* slice = ctx.features.data() + k * config_.n_words;
      int best = 0;
      for (int w = 1; w < config_.n_words; ++w)
        if (slice[w] > slice[best]) best = w;
      out.push_back(content_id(best));
    }
    return out;
  }

  std::string target_text(const VisualContext& ctx) const { return vocab_.decode(target_tokens(ctx)); }

  VisualContext make_context(std::string id, Rng& rng) const {
    std::uniform_int_distribution<int> word(0, config_.n_words - 1);
    std::uniform_real_distribution<double> noise(-config_.feature_noise, config_.feature_noise);
    VisualContext ctx{std::move(id), std::vector<double>(static_cast<std::size_t>(feature_dim())), std::nullopt};
    for (int k = 0; k < config_.target_len; ++k) {
      const int w = word(rng);
      for (int j = 0; j < config_.n_words; ++j)
        ctx.features[static_cast<std::size_t>(k * config_.n_words + j)] = (j == w ? 1.0 : 0.0) + noise(rng);
    }
    return ctx;
  }

  /// Deterministic item stream; item i depends only on (seed, i).
  Item make_item(std::uint64_t seed, std::size_t index) const {
    Rng rng(derive_seed(seed, index));
    char id[32];
    std::snprintf(id, sizeof id, "item-%06zu", index);
    Item item{make_context(std::string("vid-") + (id + 5), rng), {}};
    std::uniform_int_distribution<std::size_t> q(0, kQuestions.size() - 1);
    item.question = Question{std::string("q-") + (id + 5), kQuestions[q(rng)]};
    return item;
  }

  std::vector<Item> make_items(std::size_t n, std::uint64_t seed) const {
    std::vector<Item> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_item(seed, i));
    return out;
  }

  /// Per-token corruption: each token is replaced with probability `p` by a
  /// content word drawn uniformly (which may coincide with the original).
  std::vector<int> corrupt(std::vector<int> tokens, double p, Rng& rng) const {
    std::bernoulli_distribution flip(std::clamp(p, 0.0, 1.0));
    std::uniform_int_distribution<int> word(0, config_.n_words - 1);
    for (auto& t : tokens)
      if (flip(rng)) t = content_id(word(rng));
    return tokens;
  }

  /// Replaces exactly ceil(fraction * len) positions, each with a different
  /// content word. Used to build unreliable groundtruths.
  std::vector<int> corrupt_exact(std::vector<int> tokens, double fraction, Rng& rng) const {
    const auto n = tokens.size();
    const auto k = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12)));
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::uniform_int_distribution<int> shift(1, config_.n_words - 1);
    for (std::size_t i = 0; i < k; ++i) {
      auto& t = tokens[pos[i]];
      const int w = t - first_content_id();
      t = content_id((w + shift(rng)) % config_.n_words);
    }
    return tokens;
  }

 private:
  static std::vector<std::string> make_words(const SyntheticTaskConfig& c) {
    c.validate();
    std::vector<std::string> words(kContentWords.begin(), kContentWords.begin() + c.n_words);
    words.insert(words.end(), kQuestionWords.begin(), kQuestionWords.end());
    return words;
  }

  SyntheticTaskConfig config_;
  Vocabulary vocab_;
};

}  // namespace w2s
