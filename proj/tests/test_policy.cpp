#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "w2s/io.hpp"
#include "w2s/policy.hpp"

using namespace w2s;

namespace {

// Second forward pass written directly against named tensors.
double oracle_log_prob(const BasicPolicySnapshot<double>& s, std::span<const double> f, std::span<const int> q,
                       std::span<const int> y) {
  const auto& c = s.config;
  const auto H = static_cast<std::size_t>(c.hidden_dim), V = static_cast<std::size_t>(c.vocab_size),
             D = static_cast<std::size_t>(c.context_dim);
  const auto W = s.params.tensor("ctx_proj"), Q = s.params.tensor("question_embed"),
             Hist = s.params.tensor("history_embed"), P = s.params.tensor("position_embed"),
             b = s.params.tensor("hidden_bias"), O = s.params.tensor("out_proj"), ob = s.params.tensor("out_bias");
  std::vector<double> cond(H);
  for (std::size_t i = 0; i < H; ++i) {
    double a = 0;
    for (std::size_t j = 0; j < D; ++j) a += W[i * D + j] * f[j];
    for (int t : q) a += Q[static_cast<std::size_t>(t) * H + i];
    cond[i] = a / (1.0 + static_cast<double>(q.size()));
  }
  double total = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const std::size_t prev = t == 0 ? V : static_cast<std::size_t>(y[t - 1]);
    std::vector<double> h(H), logits(V);
    for (std::size_t i = 0; i < H; ++i) h[i] = std::tanh(cond[i] + Hist[prev * H + i] + P[t * H + i] + b[i]);
    for (std::size_t k = 0; k < V; ++k) {
      logits[k] = ob[k];
      for (std::size_t i = 0; i < H; ++i) logits[k] += O[k * H + i] * h[i];
    }
    double z = 0;
    for (double l : logits) z += std::exp(l);
    total += logits[static_cast<std::size_t>(y[t])] - std::log(z);
  }
  return total;
}

BasicPolicySnapshot<double> uniform_output_policy(const PolicyConfig& c) {
  Rng rng(c.seed);
  auto s = test::random_policy(rng, c);
  for (auto& v : s.params.tensor("out_proj")) v = 0;
  for (auto& v : s.params.tensor("out_bias")) v = 0;
  return s;
}

}  // namespace

TEST(PolicyConfig, ValidationAndParameterCount) {
  EXPECT_THROW((PolicyConfig{1, 4, 3, 2, 0}.validate()), ConfigError);
  EXPECT_THROW((PolicyConfig{4, 0, 3, 2, 0}.validate()), ConfigError);
  EXPECT_THROW((PolicyConfig{4, 4, 0, 2, 0}.validate()), ConfigError);
  EXPECT_THROW((PolicyConfig{4, 4, 3, 0, 0}.validate()), ConfigError);
  const PolicyConfig c{5, 3, 4, 2, 0};
  // H*D + V*H + (V+1)*H + L*H + H + V*H + V
  EXPECT_EQ(c.parameter_count(), 2u * 4 + 5 * 2 + 6 * 2 + 3 * 2 + 2 + 5 * 2 + 5);
}

TEST(PolicySnapshot, RejectsMismatchedParameters) {
  const PolicyConfig c{5, 3, 4, 2, 0};
  auto other = init_policy(PolicyConfig{5, 3, 4, 3, 0}).params;
  EXPECT_THROW(PolicySnapshot(c, other), ValidationError);
}

TEST(PolicyInit, SeededAndScaled) {
  const PolicyConfig c{22, 4, 40, 32, 9};
  EXPECT_EQ(init_policy(c).params, init_policy(c).params);
  auto c2 = c;
  c2.seed = 10;
  EXPECT_NE(init_policy(c).params, init_policy(c2).params);
  double sq = 0;
  const auto p = init_policy(c).params;
  for (float v : p.values()) sq += static_cast<double>(v) * v;
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(p.size())), 0.1, 0.005);
}

TEST(LogProb, UniformOutputGivesLengthTimesLogHalf) {
  const PolicyConfig c{2, 5, 3, 4, 1};
  const auto s = uniform_output_policy(c);
  const std::vector<double> f = {0.3, -1, 2};
  const std::vector<int> q = {1};
  for (std::size_t L = 0; L <= 5; ++L) {
    std::vector<int> y(L, 1);
    if (L > 2) y[1] = 0;
    EXPECT_NEAR(log_prob(s, {f, q}, y), static_cast<double>(L) * std::log(0.5), 1e-12);
  }
}

TEST(LogProb, EmptyResponseIsZeroWithZeroGradient) {
  const PolicyConfig c{4, 3, 2, 3, 1};
  const auto s = init_policy<double>(c);
  const std::vector<double> f = {1, 2};
  EXPECT_EQ(log_prob(s, {f, {}}, {}), 0.0);
  const auto g = log_prob_grad(s, {f, {}}, {});
  EXPECT_EQ(g.size(), c.parameter_count());
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(LogProb, MatchesIndependentForwardPass) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = test::random_policy_config(rng);
    const auto s = test::random_policy(rng, c, 0.8);
    const auto f = test::random_features(rng, c);
    const auto q = test::random_tokens(rng, c, rng() % 4);
    const auto y = test::random_tokens(rng, c, std::min<std::size_t>(3, static_cast<std::size_t>(c.max_len)));
    const double got = log_prob(s, {f, q}, y);
    ASSERT_NEAR(got, oracle_log_prob(s, f, q, y), 1e-10);
    ASSERT_LE(got, 0.0);
  }
}

TEST(LogProb, RejectsBadInputs) {
  const PolicyConfig c{4, 2, 2, 3, 1};
  const auto s = init_policy(c);
  const std::vector<double> f = {1, 2}, short_f = {1};
  EXPECT_THROW(log_prob(s, {f, {}}, std::vector<int>{4}), ValidationError);
  EXPECT_THROW(log_prob(s, {f, {}}, std::vector<int>{-1}), ValidationError);
  EXPECT_THROW(log_prob(s, {f, {}}, std::vector<int>{1, 1, 1}), ValidationError);
  EXPECT_THROW(log_prob(s, {short_f, {}}, std::vector<int>{1}), ValidationError);
  EXPECT_THROW(log_prob(s, {f, std::vector<int>{9}}, std::vector<int>{1}), ValidationError);
}

TEST(LogProb, NextTokenDistributionsNormalise) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = test::random_policy_config(rng);
    const auto s = test::random_policy(rng, c, 2.0);
    const auto f = test::random_features(rng, c);
    const auto q = test::random_tokens(rng, c, 2);
    const auto prefix = test::random_tokens(rng, c, rng() % static_cast<std::size_t>(c.max_len));
    const auto lp = next_token_log_probs(s, {f, q}, prefix);
    double z = 0;
    for (double v : lp) z += std::exp(v);
    ASSERT_NEAR(z, 1.0, 1e-9);
  }
}

TEST(LogProb, ChainRuleAgreesWithNextTokenDistributions) {
  Rng rng(13);
  const PolicyConfig c{6, 4, 3, 5, 0};
  const auto s = test::random_policy(rng, c);
  const auto f = test::random_features(rng, c);
  const std::vector<int> y = {3, 1, 5, 2};
  double acc = 0;
  for (std::size_t t = 0; t < y.size(); ++t)
    acc += next_token_log_probs(s, {f, {}}, std::span<const int>(y).first(t))[static_cast<std::size_t>(y[t])];
  EXPECT_NEAR(acc, log_prob(s, {f, {}}, y), 1e-12);
}

TEST(LogProbGrad, MatchesFiniteDifferences) {
  Rng rng(14);
  for (int trial = 0; trial < 25; ++trial) {
    const auto c = test::random_policy_config(rng);
    auto s = test::random_policy(rng, c);
    const auto f = test::random_features(rng, c);
    const auto q = test::random_tokens(rng, c, rng() % 3);
    const auto y = test::random_tokens(rng, c, 1 + rng() % static_cast<std::size_t>(c.max_len));
    const auto g = log_prob_grad(s, {f, q}, y);
    ASSERT_EQ(g.size(), c.parameter_count());
    const auto r = test::finite_difference_check(s.params, g.values(), [&](const BasicParameterVector<double>& p) {
      return log_prob(BasicPolicySnapshot<double>(c, p), {f, q}, y);
    });
    ASSERT_TRUE(r.ok) << "trial " << trial << " rel " << r.max_rel << " abs " << r.max_abs_small;
  }
}

TEST(LogProbGrad, FloatParametersAccumulateInDouble) {
  const PolicyConfig c{5, 3, 2, 4, 3};
  const auto sf = init_policy<float>(c);
  const auto sd = sf.cast<double>();
  const std::vector<double> f = {0.5, -0.5};
  const std::vector<int> y = {1, 4, 2};
  EXPECT_DOUBLE_EQ(log_prob(sf, {f, {}}, y), log_prob(sd, {f, {}}, y));
  const auto gf = log_prob_grad(sf, {f, {}}, y);
  const auto gd = log_prob_grad(sd, {f, {}}, y);
  for (std::size_t i = 0; i < gf.size(); ++i) EXPECT_NEAR(gf[i], gd[i], 1e-6);
}

TEST(Sampling, DeterministicGivenSeed) {
  const PolicyConfig c{8, 6, 3, 4, 2};
  Rng rng(1);
  const auto s = test::random_policy(rng, c, 1.0);
  const auto f = test::random_features(rng, c);
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_EQ(sample(s, {f, {}}, 1.0, seed), sample(s, {f, {}}, 1.0, seed));
  EXPECT_THROW(sample(s, {f, {}}, 0.0, 1), ValidationError);
}

TEST(Sampling, GreedyIsArgmaxAndIgnoresSeed) {
  const PolicyConfig c{8, 6, 3, 4, 2};
  Rng rng(2);
  const auto s = test::random_policy(rng, c, 1.5);
  const auto f = test::random_features(rng, c);
  const auto g = greedy_decode(s, {f, {}});
  EXPECT_EQ(g, sample(s, {f, {}}, 1.0, 12345, true));
  std::vector<int> prefix;
  for (int tok : g) {
    const auto lp = next_token_log_probs(s, {f, {}}, prefix);
    EXPECT_EQ(static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin()), tok);
    prefix.push_back(tok);
  }
  // Very low temperature approaches greedy.
  EXPECT_EQ(sample(s, {f, {}}, 1e-6, 99), g);
}

TEST(Sampling, StopsAtEndTokenOrMaxLen) {
  const PolicyConfig c{3, 5, 1, 2, 0};
  auto s = uniform_output_policy(c);
  for (auto& v : s.params.tensor("out_bias")) v = -50;
  s.params.tensor("out_bias")[0] = 50;  // end token dominates
  const std::vector<double> f = {0};
  EXPECT_TRUE(sample(s, {f, {}}, 1.0, 1).empty());
  s.params.tensor("out_bias")[0] = -50;
  s.params.tensor("out_bias")[2] = 50;
  EXPECT_EQ(sample(s, {f, {}}, 1.0, 1), std::vector<int>(5, 2));
}

TEST(Sampling, UniformFirstTokenFrequenciesWithinThreeSigma) {
  const PolicyConfig c{5, 1, 2, 3, 4};
  const auto s = uniform_output_policy(c);
  const std::vector<double> f = {1, -1};
  const int n = 10000;
  std::vector<int> counts(5, 0);
  for (int i = 0; i < n; ++i) {
    const auto y = sample(s, {f, {}}, 1.0, derive_seed(77, static_cast<std::uint64_t>(i)));
    counts[y.empty() ? 0 : static_cast<std::size_t>(y[0])]++;
  }
  const double p = 0.2, sigma = std::sqrt(n * p * (1 - p));
  for (int k = 0; k < 5; ++k) EXPECT_LT(std::abs(counts[static_cast<std::size_t>(k)] - n * p), 3 * sigma) << k;
}

TEST(Serialization, LogProbsInvariantUnderCheckpointRoundTrip) {
  const PolicyConfig c{22, 4, 40, 16, 5};
  const auto s = init_policy(c);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(buf, s.params);
  const PolicySnapshot back(c, read_checkpoint(buf));
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto f = test::random_features(rng, c);
    const auto y = test::random_tokens(rng, c, 4);
    const auto q = test::random_tokens(rng, c, 3);
    ASSERT_EQ(log_prob(s, {f, q}, y), log_prob(back, {f, q}, y));
  }
}
