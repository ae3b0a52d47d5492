#include <gtest/gtest.h>

#include <cmath>

#include "dmsc/gradcheck.hpp"
#include "dmsc/model.hpp"
#include "test_util.hpp"

using namespace dmsc;
using namespace dmsc::test;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.n_vars = 2;
  cfg.lookback = 16;
  cfg.horizon = 4;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_global = 1;
  cfg.n_local = 2;
  cfg.top_k = 1;
  cfg.bounds = {4, 16, 2};
  return cfg;
}

}  // namespace

TEST(Model, EveryVariantProducesForecastShape) {
  for (const auto& [name, variant] : kVariants) {
    ModelConfig cfg = micro_config();
    cfg.variant = variant;
    Rng rng(1);
    Model model(cfg, rng);
    const auto out = model.forward(random_tensor({3, 2, 16}, rng));
    EXPECT_EQ(out.prediction.shape(), (Shape{3, 2, 4})) << name;
    EXPECT_TRUE(std::isfinite(out.balance.item())) << name;
  }
}

TEST(Model, VariantNamesRoundTrip) {
  for (const auto& [name, variant] : kVariants) EXPECT_EQ(variant_name(parse_variant(name)), name);
  try {
    parse_variant("bogus");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("intra_only"), std::string::npos);
  }
}

TEST(Model, AggregatedHeadsEmitNoRouting) {
  ModelConfig cfg = micro_config();
  cfg.variant = Variant::agg_heads;
  Rng rng(2);
  Model model(cfg, rng);
  const auto out = model.forward(random_tensor({2, 2, 16}, rng));
  EXPECT_TRUE(out.routes.empty());
  EXPECT_FALSE(out.scale_weights.defined());
  EXPECT_EQ(out.balance.item(), 0.0);
  EXPECT_TRUE(model.history().empty());
  for (const auto& p : model.parameters()) EXPECT_EQ(p.name.find("moe."), std::string::npos);
}

TEST(Model, ExpertBankAblationsDropBanks) {
  ModelConfig cfg = micro_config();
  cfg.variant = Variant::no_global;
  Rng rng(3);
  Model a(cfg, rng);
  for (const auto& p : a.parameters()) EXPECT_EQ(p.name.find(".global."), std::string::npos);
  cfg.variant = Variant::no_local;
  Model b(cfg, rng);
  for (const auto& p : b.parameters()) EXPECT_EQ(p.name.find(".local."), std::string::npos);
  EXPECT_NO_THROW(b.forward(random_tensor({2, 2, 16}, rng)));
}

TEST(Model, InstanceNormMakesForecastAffineEquivariant) {
  Rng rng(4);
  Model model(micro_config(), rng);
  Tensor x = random_tensor({2, 2, 16}, rng);
  Tensor shifted = x.clone();
  for (auto& v : shifted.data()) v = 3.0 * v + 7.0;
  const auto a = model.forward(x);
  const auto b = model.forward(shifted, &a.decisions);
  // Exact up to the variance epsilon, which is not rescaled with the input.
  for (std::size_t i = 0; i < a.prediction.size(); ++i) EXPECT_NEAR(b.prediction[i], 3.0 * a.prediction[i] + 7.0, 1e-4);
}

TEST(Model, ControllerReadsWindowBeforeInstanceNorm) {
  Rng rng(14);
  Model model(micro_config(), rng);
  Tensor x = random_tensor({3, 2, 16}, rng);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += (i / 16) % 2 ? 2.0 : -1.5;
  const auto out = model.forward(x);
  EXPECT_EQ(out.decisions.schedule.alpha, model.cascade().controller().compute_alpha(x));
  // After instance normalization every time average is zero; the raw window's are not.
  Tensor centered = x.clone();
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0.0;
    for (std::size_t t = 0; t < 16; ++t) m += x[r * 16 + t] / 16.0;
    for (std::size_t t = 0; t < 16; ++t) centered[r * 16 + t] -= m;
  }
  EXPECT_NE(model.cascade().controller().compute_alpha(centered), out.decisions.schedule.alpha);
}

TEST(Model, FrozenDecisionsReproduceForward) {
  Rng rng(5);
  Model model(micro_config(), rng);
  Tensor x = random_tensor({3, 2, 16}, rng);
  const auto a = model.forward(x);
  const auto b = model.forward(x, &a.decisions);
  EXPECT_EQ(values(a.prediction), values(b.prediction));
  EXPECT_TRUE(a.decisions.schedule.same_layout(b.decisions.schedule));
}

TEST(Model, HistoryUpdatesOnlyWhenAsked) {
  Rng rng(6);
  Model model(micro_config(), rng);
  Tensor x = random_tensor({2, 2, 16}, rng);
  const auto before = model.history();
  const auto out = model.forward(x);
  EXPECT_EQ(model.history(), before);
  model.update_history(out);
  EXPECT_NE(model.history(), before);
}

TEST(Model, RejectsWrongInput) {
  Rng rng(7);
  Model model(micro_config(), rng);
  EXPECT_THROW(model.forward(Tensor({1, 3, 16})), ShapeError);
}

TEST(Model, MicroGradientHoldingDecisionsFixed) {
  Rng rng(8);
  Model model(micro_config(), rng);
  Tensor x = random_tensor({2, 2, 16}, rng);
  Tensor y = random_tensor({2, 2, 4}, rng);
  const Decisions fixed = model.forward(x).decisions;
  std::vector<Tensor> inputs{x};
  std::vector<std::string> names{"x"};
  for (const auto& p : model.parameters()) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  auto loss = [&] {
    const auto out = model.forward(x, &fixed);
    return total_loss(out.prediction, y, out.balance);
  };
  auto res = check_gradients(loss, inputs, names);
  EXPECT_TRUE(res.ok(kGradTol)) << res.max_rel_err << " at " << res.worst;
  EXPECT_GT(res.checked, 1000u);
}

TEST(Loss, PerfectForecastWithOneHotRoutingIsZero) {
  Tensor y({2, 3}, {1, 2, 3, 4, 5, 6});
  RouteResult r;
  r.omega = Tensor({2, 3}, {1, 0, 0, 0, 0, 1});
  Rng rng(9);
  AsrMoe moe(MoeConfig{}, rng);
  EXPECT_EQ(total_loss(y, y, moe.balance_loss({r})).item(), 0.0);
}

TEST(Loss, ZeroBalanceIsPlainMse) {
  Rng rng(10);
  Tensor p = random_tensor({3, 2, 5}, rng), y = random_tensor({3, 2, 5}, rng);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  EXPECT_NEAR(total_loss(p, y, Tensor::scalar(0.0)).item(), s / 30.0, 1e-12);
  EXPECT_THROW(total_loss(p, Tensor({3, 2, 4}), Tensor::scalar(0.0)), ShapeError);
}
