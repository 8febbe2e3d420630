#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mixtrain/errors.hpp"
#include "mixtrain/schedule.hpp"

using namespace mixtrain;

namespace {

TrainConfig epochs(std::size_t e_ssl, std::size_t e_sl, double rho, Method m = Method::mixtraining) {
  TrainConfig cfg;
  cfg.e_ssl = e_ssl;
  cfg.e_sl = e_sl;
  cfg.rho = rho;
  cfg.method = m;
  return cfg;
}

// Standalone scalar AdamW recurrence in long double: decay, moments, bias
// correction, step.
struct ScalarAdamW {
  long double m = 0, v = 0, p;
  int t = 0;
  explicit ScalarAdamW(long double p0) : p(p0) {}
  void step(long double g, long double lr, long double b1, long double b2, long double eps, long double wd) {
    ++t;
    p = p - lr * wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const long double mh = m / (1 - std::pow(b1, static_cast<long double>(t)));
    const long double vh = v / (1 - std::pow(b2, static_cast<long double>(t)));
    p = p - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST(Plan, Examples) {
  auto s = plan(epochs(100, 100, 0.5));
  EXPECT_EQ(s.e_mix, 50u);
  EXPECT_EQ(s.pure_ssl_epochs, 50u);
  EXPECT_EQ(s.pure_sl_epochs, 50u);
  EXPECT_EQ(s.total_epochs, 150u);

  s = plan(epochs(100, 60, 0.75));
  EXPECT_EQ(s.e_mix, 45u);
  EXPECT_EQ(s.pure_ssl_epochs, 55u);
  EXPECT_EQ(s.pure_sl_epochs, 15u);

  s = plan(epochs(50, 50, 1.0));
  EXPECT_EQ(s.pure_ssl_epochs, 0u);
  EXPECT_EQ(s.e_mix, 50u);
  EXPECT_EQ(s.pure_sl_epochs, 0u);
  ASSERT_EQ(s.spans().size(), 1u);
  EXPECT_EQ(s.spans()[0].phase, Phase::mix);

  s = plan(epochs(20, 20, 0.5));
  EXPECT_EQ(s.pure_ssl_epochs, 10u);
  EXPECT_EQ(s.e_mix, 10u);
  EXPECT_EQ(s.pure_sl_epochs, 10u);
}

TEST(Plan, BaselinesHaveNoMixPhase) {
  auto s = plan(epochs(30, 40, 0.5, Method::ssl_sl));
  EXPECT_EQ(s.e_mix, 0u);
  EXPECT_EQ(s.total_epochs, 70u);
  s = plan(epochs(30, 40, 0.5, Method::sl));
  EXPECT_EQ(s.pure_ssl_epochs, 0u);
  EXPECT_EQ(s.e_mix, 0u);
  EXPECT_EQ(s.pure_sl_epochs, 40u);
  EXPECT_EQ(s.total_epochs, 40u);
}

TEST(Plan, FullGridInvariants) {
  for (std::size_t a = 0; a <= 200; ++a)
    for (std::size_t b = 0; b <= 200; ++b)
      for (double rho : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        auto s = plan(epochs(a, b, rho));
        const auto expected = static_cast<std::size_t>(std::floor(rho * static_cast<double>(std::min(a, b))));
        ASSERT_EQ(s.e_mix, expected);
        ASSERT_EQ(s.pure_ssl_epochs + s.e_mix, a);
        ASSERT_EQ(s.pure_sl_epochs + s.e_mix, b);
        ASSERT_EQ(s.total_epochs, a + b - s.e_mix);
        ASSERT_LE(s.total_epochs, a + b);
        ASSERT_EQ(s.total_epochs == a + b, s.e_mix == 0);
        std::size_t span_total = 0;
        for (auto sp : s.spans()) span_total += sp.length;
        ASSERT_EQ(span_total, s.total_epochs);
      }
}

TEST(LearningRate, Examples) {
  EXPECT_DOUBLE_EQ(warmup_cosine(1.0, 20, 0, 100), 1.0 / 20.0);
  EXPECT_DOUBLE_EQ(warmup_cosine(1.0, 20, 19, 100), 1.0);
  EXPECT_DOUBLE_EQ(warmup_cosine(1.0, 0, 9, 10), (1.0 + std::cos(std::numbers::pi * 9.0 / 10.0)) / 2.0);
  EXPECT_DOUBLE_EQ(warmup_cosine(2.0, 0, 0, 10), 2.0);
}

TEST(LearningRate, ContinuousAtWarmupJunction) {
  for (std::size_t w = 1; w < 30; ++w)
    for (std::size_t len = w + 1; len < 60; len += 7)
      EXPECT_DOUBLE_EQ(warmup_cosine(3.0, w, w - 1, len), warmup_cosine(3.0, w, w, len));
}

TEST(LearningRate, PhasePolicy) {
  auto cfg = epochs(20, 20, 0.5);
  EXPECT_EQ(cfg.effective_warmup_ssl(), 4u);
  EXPECT_EQ(cfg.effective_warmup_sl(), 1u);
  EXPECT_EQ(phase_warmup(Phase::ssl, 10, cfg), 4u);
  EXPECT_EQ(phase_warmup(Phase::mix, 10, cfg), 2u);  // 4 * 10/20
  EXPECT_EQ(phase_warmup(Phase::sl, 10, cfg), 1u);
  EXPECT_DOUBLE_EQ(lr_at(Phase::mix, 1, 10, cfg), cfg.base_lr_ssl);
  EXPECT_DOUBLE_EQ(lr_at(Phase::sl, 0, 10, cfg), cfg.base_lr_sl);
  cfg.warmup_ssl = 50;
  EXPECT_EQ(phase_warmup(Phase::ssl, 10, cfg), 10u);  // clipped to the phase
  EXPECT_THROW(lr_at(Phase::ssl, 10, 10, cfg), ValidationError);
  // paper-scale warmups
  auto big = epochs(100, 100, 0.5);
  EXPECT_EQ(big.effective_warmup_ssl(), 20u);
  EXPECT_EQ(big.effective_warmup_sl(), 5u);
}

TEST(TrainConfig, RangeErrors) {
  auto cfg = epochs(2, 2, 1.3);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.rho = 0.5;
  cfg.alpha = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.alpha = 0.5;
  cfg.p = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.p = 1.0;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(parse_method("ssl_sl"), Method::ssl_sl);
  EXPECT_THROW(parse_method("mae"), ConfigError);
}

TEST(AdamWUpdate, ZeroGradientZeroDecayLeavesParams) {
  std::vector<double> p{1.0, -2.0, 3.0}, g(3, 0.0), m(3, 0.0), v(3, 0.0);
  const auto before = p;
  adamw_update<double>(p, g, m, v, 1, 0.1, AdamWHyper{0.9, 0.95, 1e-8, 0.0}, true);
  EXPECT_EQ(p, before);
}

TEST(AdamWUpdate, DecayOnly) {
  std::vector<double> p{2.0, -4.0}, g(2, 0.0), m(2, 0.0), v(2, 0.0);
  adamw_update<double>(p, g, m, v, 1, 1.0, AdamWHyper{0.9, 0.95, 1e-8, 0.1}, true);
  EXPECT_DOUBLE_EQ(p[0], 2.0 * 0.9);
  EXPECT_DOUBLE_EQ(p[1], -4.0 * 0.9);
  std::vector<double> q{2.0};
  std::vector<double> gq(1, 0.0), mq(1, 0.0), vq(1, 0.0);
  adamw_update<double>(q, gq, mq, vq, 1, 1.0, AdamWHyper{0.9, 0.95, 1e-8, 0.1}, false);
  EXPECT_DOUBLE_EQ(q[0], 2.0);  // bias/norm parameters skip decay
}

TEST(AdamWUpdate, MatchesScalarReference) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const AdamWHyper h{0.9, 0.95, 1e-8, 0.05};
  std::vector<double> p{0.3, -1.2, 0.0, 5.0}, m(4, 0.0), v(4, 0.0);
  std::vector<ScalarAdamW> ref;
  for (double x : p) ref.emplace_back(x);
  for (int t = 1; t <= 25; ++t) {
    std::vector<double> g(4);
    for (auto& x : g) x = n(rng) * (t % 3 + 1);
    const double lr = 1e-2 * t / 25.0;
    adamw_update<double>(p, g, m, v, static_cast<std::uint64_t>(t), lr, h, true);
    for (std::size_t i = 0; i < 4; ++i) ref[i].step(g[i], lr, 0.9, 0.95, 1e-8, 0.05);
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[i], static_cast<double>(ref[i].p), 1e-13);
}

TEST(AdamWUpdate, FirstStepIsSignLike) {
  std::vector<double> p{0.0, 0.0, 0.0}, g{3.0, -0.5, 1e-3}, m(3, 0.0), v(3, 0.0);
  adamw_update<double>(p, g, m, v, 1, 0.01, AdamWHyper{0.9, 0.95, 1e-8, 0.0}, true);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], -0.01 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
}

TEST(AdamWOptimizer, SkipsParamsWithoutGradAndAbortsOnNan) {
  RngStream init(1);
  ModelConfig cfg;
  cfg.backbone.embed_dim = 8;
  cfg.backbone.depth = 1;
  cfg.decoder.dim = 4;
  cfg.decoder.depth = 1;
  MixModel<double> model(cfg, init);
  auto params = model.parameters();
  AdamW<double> opt(params, AdamWHyper{});
  std::vector<std::vector<double>> before;
  for (const auto& p : params) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  auto target = params[0].tensor;
  target.mutable_grad();
  std::fill(target.mutable_grad().begin(), target.mutable_grad().end(), 1.0);
  opt.step(params, 0.1);
  EXPECT_EQ(opt.steps()[0], 1u);
  for (std::size_t i = 1; i < params.size(); ++i) {
    EXPECT_EQ(opt.steps()[i], 0u);
    EXPECT_TRUE(std::equal(before[i].begin(), before[i].end(), params[i].tensor.data().begin()));
  }
  EXPECT_FALSE(std::equal(before[0].begin(), before[0].end(), params[0].tensor.data().begin()));

  target.mutable_grad()[0] = std::nan("");
  try {
    opt.step(params, 0.1);
    FAIL();
  } catch (const TrainingAbort& e) {
    EXPECT_NE(std::string(e.what()).find(params[0].name), std::string::npos);
  }
  opt.reset();
  EXPECT_EQ(opt.steps()[0], 0u);
}

TEST(AdamWOptimizer, DecayFlagsFollowParameterKinds) {
  RngStream init(1);
  MixModel<float> model(ModelConfig{}, init);
  for (const auto& p : model.parameters()) {
    const bool exempt = p.name.find("bias") != std::string::npos || p.name.find("norm") != std::string::npos ||
                        p.name.find("pos_embed") != std::string::npos || p.name.find("mask_token") != std::string::npos;
    EXPECT_EQ(p.decay, !exempt) << p.name;
  }
}
