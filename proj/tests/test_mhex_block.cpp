#include <gtest/gtest.h>

#include <cmath>

#include "mhex/mhex.hpp"
#include "support/gradcheck.hpp"

using namespace mhex;
using mhex::testing::random_tensor;

namespace {

Tensor eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from({n, n}, v);
}

MhexParams random_params(CounterRng& rng, std::size_t c, std::size_t n) {
  return {random_tensor(rng, {c, c}, false), random_tensor(rng, {n, c}, false), Tensor::zeros({c, 1})};
}

}  // namespace

TEST(AttentionGate, ZeroW1GivesHalfGate) {
  CounterRng rng(1, 0);
  const Tensor x = random_tensor(rng, {3, 2, 2}, false);
  const MhexParams p{Tensor::zeros({3, 3}), Tensor::zeros({2, 3}), Tensor::zeros({3, 1})};
  const GateOutput g = attention_gate(x, random_tensor(rng, {3, 2, 2}, false), p);
  for (double v : g.g.data()) EXPECT_EQ(v, 0.5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(g.x_att[i], x[i] / 2);
}

TEST(AttentionGate, ZeroInputsGiveZeroAttention) {
  CounterRng rng(2, 0);
  const GateOutput g = attention_gate(Tensor::zeros({4, 3, 3}), Tensor::zeros({4, 3, 3}), random_params(rng, 4, 2));
  for (double v : g.x_att.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttentionGate, ChannelBroadcastIsExact) {
  CounterRng rng(3, 0);
  const Tensor x = random_tensor(rng, {5, 3, 4}, false);
  const GateOutput g = attention_gate(x, random_tensor(rng, {5, 3, 4}, false), random_params(rng, 5, 3));
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t p = 0; p < 12; ++p) EXPECT_EQ(g.x_att[k * 12 + p], g.g[k] * x[k * 12 + p]);
}

TEST(AttentionGate, GateStaysInsideOpenUnitInterval) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    CounterRng rng(s, 1);
    const GateOutput g = attention_gate(random_tensor(rng, {6, 2, 2}, false, -5, 5),
                                        random_tensor(rng, {6, 2, 2}, false), random_params(rng, 6, 3));
    for (double v : g.g.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(AttentionGate, ShapeMismatchIsDimensionError) {
  CounterRng rng(4, 0);
  EXPECT_THROW(attention_gate(Tensor::zeros({3, 2, 2}), Tensor::zeros({3, 2, 3}), random_params(rng, 3, 2)),
               DimensionError);
  EXPECT_THROW(attention_gate(Tensor::zeros({4, 2, 2}), Tensor::zeros({4, 2, 2}), random_params(rng, 3, 2)),
               DimensionError);
}

TEST(DsLogits, NonPositiveInputGivesZeroLogits) {
  CounterRng rng(5, 0);
  const Tensor l = ds_logits(Tensor::full({3, 2, 2}, -1.0), Tensor::full({3, 2, 2}, 0.5), random_params(rng, 3, 4));
  for (double v : l.data()) EXPECT_EQ(v, 0.0);
}

TEST(DsLogits, IdentityWeightsGivePooledRelu) {
  CounterRng rng(6, 0);
  const Tensor x = random_tensor(rng, {3, 2, 3}, false), xg = random_tensor(rng, {3, 2, 3}, false);
  const Tensor l = ds_logits(x, xg, {eye(3), eye(3), Tensor::zeros({3, 1})});
  const Tensor ref = global_avg_pool(relu(add(x, xg)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(l[i], ref[i], 1e-15);
}

TEST(DsLogits, EqualSpatialMeanOfLayerCam) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    CounterRng rng(s, 7);
    const std::size_t c = rng.range(1, 6), n = rng.range(2, 5), h = rng.range(1, 4), w = rng.range(1, 4);
    const MhexParams p = random_params(rng, c, n);
    const DsOutput d = ds_head(random_tensor(rng, {c, h, w}, false), random_tensor(rng, {c, h, w}, false), p);
    const Matrix weq = Matrix::from_tensor(equivalent_matrix(p));
    for (std::size_t cls = 0; cls < n; ++cls) {
      const Grid g = cam_layer(weq.row(cls), d.relu_features);
      double m = 0.0;
      for (double v : g.v) m += v;
      EXPECT_NEAR(d.logits[cls], m / static_cast<double>(h * w), 1e-8);
    }
  }
}

TEST(DsHead, ReluFeaturesAreNonNegative) {
  CounterRng rng(8, 0);
  const DsOutput d = ds_head(random_tensor(rng, {4, 3, 3}, false), random_tensor(rng, {4, 3, 3}, false),
                             random_params(rng, 4, 2));
  for (double v : d.relu_features.data()) EXPECT_GE(v, 0.0);
}

TEST(EquivalentMatrix, IdentityFactors) {
  CounterRng rng(9, 0);
  const Tensor w1 = random_tensor(rng, {3, 3}, false), w2 = random_tensor(rng, {3, 3}, false);
  EXPECT_EQ(equivalent_matrix({w1, eye(3), Tensor::zeros({3, 1})}).values(), w1.values());
  EXPECT_EQ(equivalent_matrix({eye(3), w2, Tensor::zeros({3, 1})}).values(), w2.values());
}

TEST(EquivalentMatrix, MatchesLoopProduct) {
  CounterRng rng(10, 0);
  const MhexParams p = random_params(rng, 5, 3);
  const Tensor we = equivalent_matrix(p);
  ASSERT_EQ(we.shape(), (Shape{3, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += p.w2[i * 5 + k] * p.w1[k * 5 + j];
      EXPECT_NEAR(we[i * 5 + j], s, 1e-10);
    }
}

TEST(EquivalentMatrix, NonSquareW1IsDimensionError) {
  EXPECT_THROW(equivalent_matrix({Tensor::zeros({3, 2}), Tensor::zeros({2, 3}), Tensor::zeros({3, 1})}),
               DimensionError);
}

TEST(MhexLoss, SingleHeadModesCoincide) {
  const std::vector<Tensor> h = {Tensor::from({3}, {0.2, -0.4, 1.1})};
  EXPECT_EQ(mhex_loss(h, 1, LossMode::pretrain).item(), mhex_loss(h, 1, LossMode::finetune).item());
}

TEST(MhexLoss, IdenticalHeadsFinetuneScalesLinearly) {
  const Tensor a = Tensor::from({3}, {0.2, -0.4, 1.1});
  const double one = mhex_loss(std::vector<Tensor>{a}, 2, LossMode::finetune).item();
  EXPECT_NEAR(mhex_loss(std::vector<Tensor>{a, a, a, a}, 2, LossMode::finetune).item(), 4 * one, 1e-14);
}

TEST(MhexLoss, TwoHeadsMatchHandComputation) {
  const std::vector<double> a = {0.5, -1.0, 2.0}, b = {1.5, 0.25, -0.75};
  const std::vector<Tensor> h = {Tensor::from({3}, a), Tensor::from({3}, b)};
  auto ce = [](std::vector<double> l, int t) {
    double z = 0.0;
    for (double v : l) z += std::exp(v);
    return -(l[static_cast<std::size_t>(t)] - std::log(z));
  };
  std::vector<double> s(3);
  for (int i = 0; i < 3; ++i) s[i] = a[i] + b[i];
  EXPECT_NEAR(mhex_loss(h, 0, LossMode::pretrain).item(), ce(s, 0), 1e-10);
  EXPECT_NEAR(mhex_loss(h, 0, LossMode::finetune).item(), ce(a, 0) + ce(b, 0), 1e-10);
}

TEST(MhexLoss, EmptyHeadListIsContractError) {
  EXPECT_THROW(mhex_loss(std::vector<Tensor>{}, 0, LossMode::finetune), ContractError);
}

TEST(LossMode, ParsesAndRejects) {
  EXPECT_EQ(parse_loss_mode("pretrain"), LossMode::pretrain);
  EXPECT_EQ(to_string(LossMode::finetune), "finetune");
  EXPECT_THROW(parse_loss_mode("joint"), ConfigError);
}
