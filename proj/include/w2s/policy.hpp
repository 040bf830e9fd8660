#pragma once

// Small conditional autoregressive policy pi(y | v, x) with exact log-probs
// and analytic gradients.
//
//   cond  = (W_ctx f + sum_j Q[x_j]) / (1 + |x|)
//   h_t   = tanh(cond + H[y_{t-1}] + P[t] + b)        H[V] is the start token
//   p_t   = softmax(W_out h_t + c)
//
// Parameters may be float (the persisted state) or double (gradient checks);
// arithmetic is always carried out in double.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "w2s/datamodel.hpp"

namespace w2s {

struct PolicyConfig {
  int vocab_size = 2;
  int max_len = 1;
  int context_dim = 1;
  int hidden_dim = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("policy.vocab_size", "must be >= 2");
    if (max_len < 1) throw ConfigError("policy.max_len", "must be >= 1");
    if (context_dim < 1) throw ConfigError("policy.context_dim", "must be >= 1");
    if (hidden_dim < 1) throw ConfigError("policy.hidden_dim", "must be >= 1");
  }

  Manifest manifest() const {
    const auto V = static_cast<std::size_t>(vocab_size), H = static_cast<std::size_t>(hidden_dim);
    return {{"ctx_proj", {H, static_cast<std::size_t>(context_dim)}},
            {"question_embed", {V, H}},
            {"history_embed", {V + 1, H}},
            {"position_embed", {static_cast<std::size_t>(max_len), H}},
            {"hidden_bias", {H}},
            {"out_proj", {V, H}},
            {"out_bias", {V}}};
  }

  std::size_t parameter_count() const { return manifest_size(manifest()); }

  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

template <std::floating_point T>
struct BasicPolicySnapshot {
  PolicyConfig config;
  BasicParameterVector<T> params;

  BasicPolicySnapshot(PolicyConfig c, BasicParameterVector<T> p) : config(c), params(std::move(p)) {
    config.validate();
    if (params.manifest() != config.manifest())
      throw ValidationError("parameters do not match the policy configuration (expected " +
                            std::to_string(config.parameter_count()) + " values, got " +
                            std::to_string(params.size()) + ")");
  }

  template <std::floating_point U>
  BasicPolicySnapshot<U> cast() const {
    return BasicPolicySnapshot<U>(config, params.template cast<U>());
  }
};

using PolicySnapshot = BasicPolicySnapshot<float>;

/// Seeded N(0, scale^2) initialisation.
template <std::floating_point T = float>
BasicPolicySnapshot<T> init_policy(const PolicyConfig& config, double scale = 0.1) {
  config.validate();
  auto params = BasicParameterVector<T>::zeros(config.manifest());
  Rng rng(config.seed);
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : params.values()) v = static_cast<T>(dist(rng));
  return BasicPolicySnapshot<T>(config, std::move(params));
}

/// Tokenised (v, x) conditioning for the policy.
struct PolicyPrompt {
  std::span<const double> features;
  std::span<const int> question;
};

namespace detail {

struct PolicyLayout {
  std::size_t ctx_proj, question_embed, history_embed, position_embed, hidden_bias, out_proj, out_bias;

  explicit PolicyLayout(const PolicyConfig& c) {
    const auto V = static_cast<std::size_t>(c.vocab_size), H = static_cast<std::size_t>(c.hidden_dim);
    ctx_proj = 0;
    question_embed = ctx_proj + H * static_cast<std::size_t>(c.context_dim);
    history_embed = question_embed + V * H;
    position_embed = history_embed + (V + 1) * H;
    hidden_bias = position_embed + static_cast<std::size_t>(c.max_len) * H;
    out_proj = hidden_bias + H;
    out_bias = out_proj + V * H;
  }
};

inline void check_inputs(const PolicyConfig& c, const PolicyPrompt& prompt, std::span<const int> tokens) {
  if (static_cast<int>(prompt.features.size()) != c.context_dim)
    throw ValidationError("context has " + std::to_string(prompt.features.size()) + " features, policy expects " +
                          std::to_string(c.context_dim));
  auto in_vocab = [&](int t) { return t >= 0 && t < c.vocab_size; };
  for (int t : prompt.question)
    if (!in_vocab(t)) throw ValidationError("question token " + std::to_string(t) + " outside vocabulary");
  for (int t : tokens)
    if (!in_vocab(t)) throw ValidationError("response token " + std::to_string(t) + " outside vocabulary");
  if (static_cast<int>(tokens.size()) > c.max_len)
    throw ValidationError("response of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                          std::to_string(c.max_len));
}

/// Forward state shared by log_prob, its gradient, and sampling.
template <std::floating_point T>
class PolicyForward {
 public:
  PolicyForward(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt)
      : c_(snap.config), L_(snap.config), p_(snap.params.values()),
        H_(static_cast<std::size_t>(c_.hidden_dim)), V_(static_cast<std::size_t>(c_.vocab_size)),
        cond_(H_, 0.0), hidden_(H_), logits_(V_) {
    const auto D = static_cast<std::size_t>(c_.context_dim);
    for (std::size_t i = 0; i < H_; ++i) {
      double acc = 0.0;
      const T* row = p_.data() + L_.ctx_proj + i * D;
      for (std::size_t j = 0; j < D; ++j) acc += static_cast<double>(row[j]) * prompt.features[j];
      cond_[i] = acc;
    }
    for (int q : prompt.question) {
      const T* e = p_.data() + L_.question_embed + static_cast<std::size_t>(q) * H_;
      for (std::size_t i = 0; i < H_; ++i) cond_[i] += e[i];
    }
    cond_scale_ = 1.0 / (1.0 + static_cast<double>(prompt.question.size()));
    for (auto& v : cond_) v *= cond_scale_;
  }

  /// Computes hidden state and log-softmax for position t given the previous
  /// token (`prev < 0` means start).
  std::span<const double> step(std::size_t t, int prev) {
    const std::size_t hist = prev < 0 ? V_ : static_cast<std::size_t>(prev);
    const T* he = p_.data() + L_.history_embed + hist * H_;
    const T* pe = p_.data() + L_.position_embed + t * H_;
    const T* b = p_.data() + L_.hidden_bias;
    for (std::size_t i = 0; i < H_; ++i)
      hidden_[i] = std::tanh(cond_[i] + static_cast<double>(he[i]) + pe[i] + b[i]);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < V_; ++k) {
      const T* w = p_.data() + L_.out_proj + k * H_;
      double acc = p_[L_.out_bias + k];
      for (std::size_t i = 0; i < H_; ++i) acc += static_cast<double>(w[i]) * hidden_[i];
      logits_[k] = acc;
      mx = std::max(mx, acc);
    }
    double z = 0.0;
    for (double l : logits_) z += std::exp(l - mx);
    const double lse = mx + std::log(z);
    for (auto& l : logits_) l -= lse;
    return logits_;
  }

  std::span<const double> hidden() const { return hidden_; }
  double cond_scale() const { return cond_scale_; }
  const PolicyLayout& layout() const { return L_; }

 private:
  const PolicyConfig& c_;
  PolicyLayout L_;
  std::span<const T> p_;
  std::size_t H_, V_;
  std::vector<double> cond_;
  double cond_scale_ = 1.0;
  std::vector<double> hidden_;
  std::vector<double> logits_;
};

}  // namespace detail

/// log pi(tokens | prompt), summed over the given tokens only. No implicit
/// end-of-sequence is appended, so the empty response has log-prob 0.
template <std::floating_point T>
double log_prob(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt, std::span<const int> tokens) {
  detail::check_inputs(snap.config, prompt, tokens);
  if (tokens.empty()) return 0.0;
  detail::PolicyForward<T> fwd(snap, prompt);
  double total = 0.0;
  int prev = -1;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    total += fwd.step(t, prev)[static_cast<std::size_t>(tokens[t])];
    prev = tokens[t];
  }
  return total;
}

/// Next-token log-probabilities after `prefix`.
template <std::floating_point T>
std::vector<double> next_token_log_probs(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt,
                                         std::span<const int> prefix) {
  detail::check_inputs(snap.config, prompt, prefix);
  if (static_cast<int>(prefix.size()) >= snap.config.max_len)
    throw ValidationError("prefix already at max_len");
  detail::PolicyForward<T> fwd(snap, prompt);
  int prev = -1;
  for (std::size_t t = 0; t < prefix.size(); ++t) {
    fwd.step(t, prev);
    prev = prefix[t];
  }
  auto lp = fwd.step(prefix.size(), prev);
  return {lp.begin(), lp.end()};
}

namespace detail {

/// Per-step activations of one response, kept for the backward pass.
struct Tape {
  std::vector<double> hidden;    // n x H
  std::vector<double> log_probs; // n x V
  double total = 0.0;
};

template <std::floating_point T>
Tape record(PolicyForward<T>& fwd, const PolicyConfig& c, std::span<const int> tokens) {
  const auto H = static_cast<std::size_t>(c.hidden_dim), V = static_cast<std::size_t>(c.vocab_size);
  Tape tape;
  tape.hidden.resize(tokens.size() * H);
  tape.log_probs.resize(tokens.size() * V);
  int prev = -1;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto lp = fwd.step(t, prev);
    std::copy(lp.begin(), lp.end(), tape.log_probs.begin() + static_cast<std::ptrdiff_t>(t * V));
    std::copy(fwd.hidden().begin(), fwd.hidden().end(), tape.hidden.begin() + static_cast<std::ptrdiff_t>(t * H));
    tape.total += lp[static_cast<std::size_t>(tokens[t])];
    prev = tokens[t];
  }
  return tape;
}

/// Backpropagates `scale * d log pi / d theta` through the output head and
/// the per-step embeddings; the conditioning gradient is added to `dcond`.
template <std::floating_point T, std::floating_point G>
void backprop(const BasicPolicySnapshot<T>& snap, const PolicyLayout& L, const Tape& tape, std::span<const int> tokens,
              double scale, BasicParameterVector<G>& grad, std::vector<double>& dcond) {
  const auto H = static_cast<std::size_t>(snap.config.hidden_dim), V = static_cast<std::size_t>(snap.config.vocab_size);
  const auto p = snap.params.values();
  auto g = grad.values();
  std::vector<double> dh(H);
  int prev = -1;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const double* h = tape.hidden.data() + t * H;
    const double* lp = tape.log_probs.data() + t * V;
    const auto y = static_cast<std::size_t>(tokens[t]);
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t k = 0; k < V; ++k) {
      const double dl = scale * ((k == y ? 1.0 : 0.0) - std::exp(lp[k]));
      g[L.out_bias + k] += static_cast<G>(dl);
      const T* w = p.data() + L.out_proj + k * H;
      G* gw = g.data() + L.out_proj + k * H;
      for (std::size_t i = 0; i < H; ++i) {
        gw[i] += static_cast<G>(dl * h[i]);
        dh[i] += dl * static_cast<double>(w[i]);
      }
    }
    const std::size_t hist = prev < 0 ? V : static_cast<std::size_t>(prev);
    for (std::size_t i = 0; i < H; ++i) {
      const double dz = dh[i] * (1.0 - h[i] * h[i]);
      g[L.hidden_bias + i] += static_cast<G>(dz);
      g[L.position_embed + t * H + i] += static_cast<G>(dz);
      g[L.history_embed + hist * H + i] += static_cast<G>(dz);
      dcond[i] += dz;
    }
    prev = tokens[t];
  }
}

/// Pushes the accumulated conditioning gradient into ctx_proj and the
/// question embeddings.
template <std::floating_point G>
void backprop_cond(const PolicyConfig& c, const PolicyLayout& L, const PolicyPrompt& prompt, double cond_scale,
                   std::span<const double> dcond, BasicParameterVector<G>& grad) {
  const auto H = static_cast<std::size_t>(c.hidden_dim), D = static_cast<std::size_t>(c.context_dim);
  auto g = grad.values();
  for (std::size_t i = 0; i < H; ++i) {
    const double dc = dcond[i] * cond_scale;
    if (dc == 0.0) continue;
    G* row = g.data() + L.ctx_proj + i * D;
    for (std::size_t j = 0; j < D; ++j) row[j] += static_cast<G>(dc * prompt.features[j]);
    for (int q : prompt.question) g[L.question_embed + static_cast<std::size_t>(q) * H + i] += static_cast<G>(dc);
  }
}

}  // namespace detail

/// Adds `scale * d log pi(tokens | prompt) / d theta` into `grad` and returns
/// the log-prob.
template <std::floating_point T, std::floating_point G>
double accumulate_log_prob_grad(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt,
                                std::span<const int> tokens, double scale, BasicParameterVector<G>& grad) {
  detail::check_inputs(snap.config, prompt, tokens);
  if (grad.manifest() != snap.params.manifest()) throw ValidationError("gradient buffer layout mismatch");
  if (tokens.empty()) return 0.0;
  detail::PolicyForward<T> fwd(snap, prompt);
  const auto tape = detail::record(fwd, snap.config, tokens);
  std::vector<double> dcond(static_cast<std::size_t>(snap.config.hidden_dim), 0.0);
  detail::backprop(snap, fwd.layout(), tape, tokens, scale, grad, dcond);
  detail::backprop_cond(snap.config, fwd.layout(), prompt, fwd.cond_scale(), dcond, grad);
  return tape.total;
}

template <std::floating_point T>
BasicParameterVector<T> log_prob_grad(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt,
                                      std::span<const int> tokens) {
  auto grad = BasicParameterVector<T>::zeros(snap.params.manifest());
  accumulate_log_prob_grad(snap, prompt, tokens, 1.0, grad);
  return grad;
}

/// Autoregressive sampling from softmax(logits / temperature). Stops at the
/// end token (not included in the result) or at max_len. With `greedy` the
/// argmax is taken and the seed is unused.
template <std::floating_point T>
std::vector<int> sample(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt, double temperature,
                        std::uint64_t seed, bool greedy = false) {
  if (!greedy && !(temperature > 0)) throw ValidationError("temperature must be positive");
  detail::check_inputs(snap.config, prompt, {});
  detail::PolicyForward<T> fwd(snap, prompt);
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<int> out;
  std::vector<double> probs(static_cast<std::size_t>(snap.config.vocab_size));
  int prev = -1;
  for (std::size_t t = 0; t < static_cast<std::size_t>(snap.config.max_len); ++t) {
    const auto lp = fwd.step(t, prev);
    int tok = 0;
    if (greedy) {
      tok = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    } else {
      const double mx = *std::max_element(lp.begin(), lp.end());
      double z = 0.0;
      for (std::size_t k = 0; k < lp.size(); ++k) z += probs[k] = std::exp((lp[k] - mx) / temperature);
      double u = unif(rng) * z;
      tok = static_cast<int>(lp.size()) - 1;
      for (std::size_t k = 0; k < lp.size(); ++k) {
        u -= probs[k];
        if (u < 0) {
          tok = static_cast<int>(k);
          break;
        }
      }
    }
    if (tok == 0) break;  // end of sequence
    out.push_back(tok);
    prev = tok;
  }
  return out;
}

template <std::floating_point T>
std::vector<int> greedy_decode(const BasicPolicySnapshot<T>& snap, const PolicyPrompt& prompt) {
  return sample(snap, prompt, 1.0, 0, true);
}

}  // namespace w2s
