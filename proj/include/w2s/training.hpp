#pragma once

// DPO, iterative DPO with reference swapping, and parameter extrapolation.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "w2s/datamodel.hpp"
#include "w2s/policy.hpp"
#include "w2s/vocab.hpp"

namespace w2s {

/// A preference pair tokenised for the policy.
struct EncodedPair {
  std::vector<double> features;
  std::vector<int> question;
  std::vector<int> chosen;
  std::vector<int> rejected;

  PolicyPrompt prompt() const { return {features, question}; }
};

inline EncodedPair encode_pair(const PreferencePair& p, const Vocabulary& vocab) {
  return {p.context.features, vocab.encode(p.question.text), vocab.encode(p.chosen.text), vocab.encode(p.rejected.text)};
}

inline std::vector<EncodedPair> encode_pairs(std::span<const PreferencePair> pairs, const Vocabulary& vocab) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(encode_pair(p, vocab));
  return out;
}

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int stage, const std::string& what)
      : Error("stage " + std::to_string(stage) + ": " + what), stage_(stage) {}
  int stage() const noexcept { return stage_; }

 private:
  int stage_;
};

// ---------------------------------------------------------------------------
// Loss

/// Implicit-reward margin beta * [(lw - lw_ref) - (ll - ll_ref)].
inline double dpo_margin(double lp_w_pol, double lp_l_pol, double lp_w_ref, double lp_l_ref, double beta) {
  return beta * ((lp_w_pol - lp_w_ref) - (lp_l_pol - lp_l_ref));
}

/// -log sigmoid(m) = log(1 + e^{-m}), evaluated without overflow.
inline double softplus_neg(double m) { return m >= 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double dpo_loss(double lp_w_pol, double lp_l_pol, double lp_w_ref, double lp_l_ref, double beta) {
  if (!(beta > 0)) throw ValidationError("beta must be positive");
  if (!std::isfinite(lp_w_pol) || !std::isfinite(lp_l_pol) || !std::isfinite(lp_w_ref) || !std::isfinite(lp_l_ref))
    throw ValidationError("dpo_loss: non-finite log-probability");
  return softplus_neg(dpo_margin(lp_w_pol, lp_l_pol, lp_w_ref, lp_l_ref, beta));
}

template <std::floating_point T, std::floating_point R>
double dpo_pair_loss(const EncodedPair& pair, const BasicPolicySnapshot<T>& policy,
                     const BasicPolicySnapshot<R>& reference, double beta) {
  const auto prompt = pair.prompt();
  return dpo_loss(log_prob(policy, prompt, pair.chosen), log_prob(policy, prompt, pair.rejected),
                  log_prob(reference, prompt, pair.chosen), log_prob(reference, prompt, pair.rejected), beta);
}

/// Adds `scale * dL/dtheta` for one pair into `grad`; returns the pair loss.
/// dL/dtheta = -sigmoid(-m) * beta * (grad log pi(y_w) - grad log pi(y_l)).
template <std::floating_point T, std::floating_point G>
double accumulate_dpo_grad(const EncodedPair& pair, const BasicPolicySnapshot<T>& policy, double lp_w_ref,
                           double lp_l_ref, double beta, double scale, BasicParameterVector<G>& grad) {
  const auto prompt = pair.prompt();
  detail::check_inputs(policy.config, prompt, pair.chosen);
  detail::check_inputs(policy.config, prompt, pair.rejected);
  if (grad.manifest() != policy.params.manifest()) throw ValidationError("gradient buffer layout mismatch");
  detail::PolicyForward<T> fwd(policy, prompt);
  const auto tw = detail::record(fwd, policy.config, pair.chosen);
  const auto tl = detail::record(fwd, policy.config, pair.rejected);
  const double loss = dpo_loss(tw.total, tl.total, lp_w_ref, lp_l_ref, beta);
  const double coef = -sigmoid(-dpo_margin(tw.total, tl.total, lp_w_ref, lp_l_ref, beta)) * beta * scale;
  std::vector<double> dcond(static_cast<std::size_t>(policy.config.hidden_dim), 0.0);
  detail::backprop(policy, fwd.layout(), tw, pair.chosen, coef, grad, dcond);
  detail::backprop(policy, fwd.layout(), tl, pair.rejected, -coef, grad, dcond);
  detail::backprop_cond(policy.config, fwd.layout(), prompt, fwd.cond_scale(), dcond, grad);
  return loss;
}

/// Gradient of the pair's DPO loss w.r.t. the policy parameters. The
/// reference contributes log-probs only.
template <std::floating_point T, std::floating_point R>
BasicParameterVector<T> dpo_grad(const EncodedPair& pair, const BasicPolicySnapshot<T>& policy,
                                 const BasicPolicySnapshot<R>& reference, double beta) {
  if (!(beta > 0)) throw ValidationError("beta must be positive");
  const auto prompt = pair.prompt();
  auto grad = BasicParameterVector<T>::zeros(policy.params.manifest());
  accumulate_dpo_grad(pair, policy, log_prob(reference, prompt, pair.chosen),
                      log_prob(reference, prompt, pair.rejected), beta, 1.0, grad);
  return grad;
}

// ---------------------------------------------------------------------------
// Extrapolation and splitting

/// theta* = strong + alpha * (strong - weak), elementwise.
template <std::floating_point T>
BasicParameterVector<T> extrapolate(const BasicParameterVector<T>& strong, const BasicParameterVector<T>& weak,
                                    double alpha) {
  if (!strong.same_layout(weak)) throw ValidationError("extrapolate: parameter manifests differ");
  if (!(alpha >= 0)) throw ValidationError("extrapolate: alpha must be nonnegative");
  auto out = strong;
  auto v = out.values();
  const auto w = weak.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = v[i];
    v[i] = static_cast<T>(s + alpha * (s - static_cast<double>(w[i])));
  }
  return out;
}

/// Seeded shuffle, then T contiguous parts whose sizes differ by at most one
/// (earlier parts take the extra elements).
template <typename E>
std::vector<std::vector<E>> split_even(std::span<const E> items, int parts, std::uint64_t seed) {
  if (parts < 1) throw ValidationError("split_even: T must be >= 1");
  if (items.empty()) throw ValidationError("split_even: nothing to split");
  const auto T = static_cast<std::size_t>(parts);
  if (T > items.size()) throw ValidationError("split_even: T exceeds the number of items");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<E>> out(T);
  const auto base = items.size() / T, extra = items.size() % T;
  std::size_t pos = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto n = base + (t < extra ? 1 : 0);
    out[t].reserve(n);
    for (std::size_t k = 0; k < n; ++k) out[t].push_back(items[order[pos++]]);
  }
  return out;
}

/// Holds out `fraction` of the items (at least one) for validation.
template <typename E>
std::pair<std::vector<E>, std::vector<E>> split_holdout(std::span<const E> items, double fraction,
                                                        std::uint64_t seed) {
  if (items.size() < 2) throw ValidationError("split_holdout: need at least two items");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(items.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, items.size() - 1);
  std::pair<std::vector<E>, std::vector<E>> out;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_val ? out.second : out.first).push_back(items[order[k]]);
  return out;
}

// ---------------------------------------------------------------------------
// Stages

struct StageReport {
  int stage = 0;
  std::size_t n_pairs = 0;
  double initial_loss = 0;
  std::vector<double> epoch_losses;
  double margin_before = 0;
  double margin_after = 0;
  std::uint64_t reference_hash = 0;
  ParameterVector pre;       // theta_{t-1}
  ParameterVector post_dpo;  // theta'_t
  ParameterVector post_expo; // theta_t
};

struct StageResult {
  ParameterVector params;
  StageReport report;
};

namespace detail {

struct RefLogProbs {
  double chosen, rejected;
};

inline std::vector<RefLogProbs> reference_log_probs(std::span<const EncodedPair> data, const PolicySnapshot& ref) {
  std::vector<RefLogProbs> out;
  out.reserve(data.size());
  for (const auto& p : data)
    out.push_back({log_prob(ref, p.prompt(), p.chosen), log_prob(ref, p.prompt(), p.rejected)});
  return out;
}

inline std::pair<double, double> mean_loss_and_margin(std::span<const EncodedPair> data, const PolicySnapshot& policy,
                                                      std::span<const RefLogProbs> ref, double beta) {
  double loss = 0, margin = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto prompt = data[i].prompt();
    const double lw = log_prob(policy, prompt, data[i].chosen), ll = log_prob(policy, prompt, data[i].rejected);
    margin += dpo_margin(lw, ll, ref[i].chosen, ref[i].rejected, beta);
    loss += dpo_loss(lw, ll, ref[i].chosen, ref[i].rejected, beta);
  }
  const auto n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
  return {loss / n, margin / n};
}

}  // namespace detail

/// Mean implicit-reward margin E[r(y_w) - r(y_l)] of `policy` against `reference`.
inline double mean_margin(std::span<const EncodedPair> data, const PolicySnapshot& policy,
                          const PolicySnapshot& reference, double beta) {
  const auto ref = detail::reference_log_probs(data, reference);
  return detail::mean_loss_and_margin(data, policy, ref, beta).second;
}

/// Minibatch DPO against a frozen reference. `stage` only labels reports and
/// seeds the per-epoch shuffles.
inline StageResult train_stage(const PolicySnapshot& policy, const PolicySnapshot& reference,
                               std::span<const EncodedPair> data, const TrainConfig& config, int stage = 1) {
  config.validate();
  if (policy.config != reference.config) throw ValidationError("policy and reference configurations differ");
  if (data.empty()) throw ValidationError("train_stage: empty sub-dataset");

  StageReport report;
  report.stage = stage;
  report.n_pairs = data.size();
  report.pre = policy.params;
  report.reference_hash = reference.params.hash();

  const auto ref = detail::reference_log_probs(data, reference);
  PolicySnapshot current = policy;
  std::tie(report.initial_loss, report.margin_before) =
      detail::mean_loss_and_margin(data, current, ref, config.beta);

  const auto n_params = current.params.size();
  auto grad = BasicParameterVector<double>::zeros(current.params.manifest());
  std::vector<double> m1, m2;
  if (config.optimizer == Optimizer::adamw) {
    m1.assign(n_params, 0.0);
    m2.assign(n_params, 0.0);
  }
  long step = 0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs_per_stage; ++epoch) {
    Rng rng(derive_seed(config.seed, "stage-" + std::to_string(stage) + "-epoch-" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const auto end = std::min(order.size(), start + batch);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grad.values().begin(), grad.values().end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto i = order[k];
        epoch_loss += accumulate_dpo_grad(data[i], current, ref[i].chosen, ref[i].rejected, config.beta, scale, grad);
      }
      auto theta = current.params.values();
      const auto g = grad.values();
      if (config.optimizer == Optimizer::sgd) {
        for (std::size_t j = 0; j < n_params; ++j)
          theta[j] = static_cast<float>(theta[j] - config.learning_rate * g[j]);
      } else {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++step;
        const double c1 = 1 - std::pow(b1, static_cast<double>(step)), c2 = 1 - std::pow(b2, static_cast<double>(step));
        for (std::size_t j = 0; j < n_params; ++j) {
          m1[j] = b1 * m1[j] + (1 - b1) * g[j];
          m2[j] = b2 * m2[j] + (1 - b2) * g[j] * g[j];
          theta[j] = static_cast<float>(theta[j] - config.learning_rate * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + eps));
        }
      }
    }
    epoch_loss /= static_cast<double>(data.size());
    report.epoch_losses.push_back(epoch_loss);
    if (!std::isfinite(epoch_loss) || epoch_loss > 10.0 * report.initial_loss)
      throw TrainingDiverged(stage, "mean loss " + std::to_string(epoch_loss) + " in epoch " +
                                        std::to_string(epoch + 1) + " exceeds 10x the initial " +
                                        std::to_string(report.initial_loss));
  }
  report.margin_after = detail::mean_loss_and_margin(data, current, ref, config.beta).second;
  report.post_dpo = current.params;
  report.post_expo = current.params;
  return {std::move(current.params), std::move(report)};
}

struct IterResult {
  PolicySnapshot final_policy;
  std::vector<StageReport> stages;
  std::optional<std::string> failure;
  std::optional<int> failed_stage;
};

/// Iterative DPO over T even parts with extrapolation after every stage and
/// the reference replaced by the extrapolated policy.
inline IterResult iter_w2s_rlaif(std::span<const EncodedPair> pairs, const TrainConfig& config,
                                 const PolicySnapshot& initial) {
  config.validate();
  const auto parts = split_even(pairs, config.iterations, derive_seed(config.seed, "split"));
  IterResult result{initial, {}, std::nullopt, std::nullopt};
  PolicySnapshot reference = initial;
  for (int t = 1; t <= config.iterations; ++t) {
    try {
      auto stage = train_stage(result.final_policy, reference, parts[static_cast<std::size_t>(t - 1)], config, t);
      const auto& anchor = config.expo_anchor == ExpoAnchor::stage_start ? stage.report.pre : initial.params;
      stage.report.post_expo = extrapolate(stage.params, anchor, config.alpha);
      result.final_policy = PolicySnapshot(initial.config, stage.report.post_expo);
      reference = result.final_policy;
      result.stages.push_back(std::move(stage.report));
    } catch (const TrainingDiverged& e) {
      result.failure = e.what();
      result.failed_stage = e.stage();
      break;
    }
  }
  return result;
}

struct AlphaSearchResult {
  double best_alpha = 0;
  double best_score = 0;
  std::vector<std::pair<double, double>> scores;  // (alpha, validation score)
  std::optional<IterResult> best;
};

/// Runs iter_w2s_rlaif once per alpha and keeps the run with the highest
/// validation score (the smallest alpha wins ties).
inline AlphaSearchResult search_alpha(std::span<const EncodedPair> train, const TrainConfig& config,
                                      const PolicySnapshot& initial, std::span<const double> alphas,
                                      const std::function<double(const PolicySnapshot&)>& validate) {
  if (alphas.empty()) throw ValidationError("search_alpha: no candidate alphas");
  AlphaSearchResult acc;
  for (double a : alphas) {
    auto cfg = config;
    cfg.alpha = a;
    auto run = iter_w2s_rlaif(train, cfg, initial);
    if (run.failure) throw TrainingDiverged(*run.failed_stage, *run.failure);
    const double score = validate(run.final_policy);
    acc.scores.emplace_back(a, score);
    if (acc.scores.size() == 1 || score > acc.best_score) {
      acc.best_alpha = a;
      acc.best_score = score;
      acc.best = std::move(run);
    }
  }
  return acc;
}

}  // namespace w2s
