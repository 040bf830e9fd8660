#pragma once

// The response-generator zoo. Synthetic members corrupt the true caption at a
// per-token rate of (1 - quality); external members are chat-completion
// endpoints.

#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "w2s/chat_client.hpp"
#include "w2s/datamodel.hpp"
#include "w2s/parallel.hpp"
#include "w2s/synthetic_task.hpp"

namespace w2s {

enum class GeneratorKind { synthetic, external };

struct GeneratorSpec {
  std::string id;
  GeneratorKind kind = GeneratorKind::synthetic;
  double quality = 1.0;
  double temperature = 1.0;
  std::optional<EndpointConfig> endpoint;

  void validate() const {
    const auto where = "zoo." + (id.empty() ? std::string("<unnamed>") : id);
    if (id.empty()) throw ConfigError("zoo.id", "generator id must be nonempty");
    if (!(temperature > 0)) throw ConfigError(where + ".temperature", "must be positive");
    if (kind == GeneratorKind::synthetic && !(quality >= 0 && quality <= 1))
      throw ConfigError(where + ".quality", "must be in [0, 1]");
    if (kind == GeneratorKind::external) {
      if (!endpoint) throw ConfigError(where + ".endpoint", "required for external members");
      endpoint->validate(where + ".endpoint");
    }
  }
};

/// Synthetic generation. Replayable: one Bernoulli(1 - quality) draw per
/// target token from Rng(seed), followed by a uniform content-word draw when
/// it fires.
inline Candidate generate_synthetic(const GeneratorSpec& spec, const SyntheticTask& task, const VisualContext& context,
                                    std::uint64_t seed) {
  Rng rng(seed);
  const auto tokens = task.corrupt(task.target_tokens(context), 1.0 - spec.quality, rng);
  return Candidate{task.vocab().decode(tokens), spec.id, std::nullopt};
}

inline std::string generation_prompt(const VisualContext& context, const Question& question) {
  return "Video: " + context.uri.value_or(context.id) + "\nQuestion: " + question.text + "\nAnswer concisely.";
}

struct GenerationResult {
  std::string source;
  std::optional<Candidate> candidate;
  std::string error;

  bool ok() const { return candidate.has_value(); }
};

struct ZooBatch {
  std::vector<GenerationResult> results;

  std::size_t n_ok() const {
    return static_cast<std::size_t>(std::count_if(results.begin(), results.end(), [](auto& r) { return r.ok(); }));
  }
  /// A pair needs at least two responses.
  bool failed() const { return n_ok() < 2; }

  std::vector<Candidate> candidates() const {
    std::vector<Candidate> out;
    for (const auto& r : results)
      if (r.candidate) out.push_back(*r.candidate);
    return out;
  }
};

class Zoo {
 public:
  Zoo(std::vector<GeneratorSpec> specs, const SyntheticTask* task, AuditLog* log = nullptr)
      : specs_(std::move(specs)), task_(task) {
    if (specs_.empty()) throw ConfigError("zoo", "must contain at least one generator");
    std::unordered_set<std::string> seen;
    for (const auto& s : specs_) {
      s.validate();
      if (!seen.insert(s.id).second) throw ConfigError("zoo." + s.id, "duplicate generator id");
      if (s.kind == GeneratorKind::synthetic && !task_)
        throw ConfigError("zoo." + s.id, "synthetic members need a synthetic task");
      clients_.push_back(s.kind == GeneratorKind::external ? std::make_unique<ChatClient>(s.id, *s.endpoint, log)
                                                           : nullptr);
    }
  }

  const std::vector<GeneratorSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }

  /// Seed handed to member `index` for an item seeded with `seed`.
  std::uint64_t member_seed(std::uint64_t seed, std::size_t index) const {
    return derive_seed(seed, specs_.at(index).id);
  }

  Candidate generate(std::size_t index, const VisualContext& context, const Question& question,
                     std::uint64_t seed) const {
    const auto& spec = specs_.at(index);
    if (spec.kind == GeneratorKind::synthetic) return generate_synthetic(spec, *task_, context, seed);
    auto reply = clients_[index]->complete(generation_prompt(context, question), spec.temperature, std::nullopt,
                                           {{"role", "generator"}, {"context", context.id}});
    return Candidate{reply.content, spec.id, std::nullopt};
  }

  /// One result per member in zoo order; failures are recorded, not thrown.
  ZooBatch generate_all(const VisualContext& context, const Question& question, std::uint64_t seed,
                        std::size_t max_in_flight = 4) const {
    ZooBatch batch;
    batch.results.resize(specs_.size());
    const bool any_external = std::any_of(specs_.begin(), specs_.end(),
                                          [](auto& s) { return s.kind == GeneratorKind::external; });
    parallel_for(specs_.size(), any_external ? max_in_flight : 1, [&](std::size_t i) {
      auto& r = batch.results[i];
      r.source = specs_[i].id;
      try {
        r.candidate = generate(i, context, question, member_seed(seed, i));
      } catch (const Error& e) {
        r.error = e.what();
      }
    });
    return batch;
  }

 private:
  std::vector<GeneratorSpec> specs_;
  const SyntheticTask* task_;
  std::vector<std::unique_ptr<ChatClient>> clients_;
};

}  // namespace w2s
