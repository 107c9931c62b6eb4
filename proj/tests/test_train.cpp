#include <gtest/gtest.h>

#include <limits>

#include "mhex/mhex.hpp"

using namespace mhex;

namespace {

ResNetConfig tiny_resnet() {
  ResNetConfig c;
  c.stage_channels = {4, 8};
  c.blocks_per_stage = 1;
  c.image_size = 16;
  c.n_class = 3;
  return c;
}

std::vector<Example> tiny_images(std::size_t n, std::uint64_t seed) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image img;
    img.channels = 1;
    img.height = img.width = 16;
    CounterRng rng(seed, i);
    const int label = static_cast<int>(i % 3);
    img.pixels.resize(256);
    for (std::size_t p = 0; p < 256; ++p) {
      const std::size_t y = p / 16;
      // class decides which horizontal band is bright
      const bool band = y / 6 == static_cast<std::size_t>(label);
      img.pixels[p] = (band ? 1.0 : 0.0) + 0.1 * rng.uniform();
    }
    out.push_back({img, label});
  }
  return out;
}

TransformerConfig tiny_transformer() {
  TransformerConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.saliency_layers = 2;
  return c;
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  auto m = build_resnet(tiny_resnet());
  auto before = m->clone();
  TrainOptions o;
  o.epochs = 1;
  o.lr = 0.0;
  train(*m, tiny_images(20, 1), o);
  for (std::size_t i = 0; i < m->params().size(); ++i)
    EXPECT_EQ(m->params()[i].tensor.values(), before->params()[i].tensor.values());
}

TEST(Train, LossDecreasesAfterFirstEpoch) {
  auto m = build_resnet(tiny_resnet());
  TrainOptions o;
  o.epochs = 4;
  o.lr = 3e-3;
  o.batch_size = 8;
  const TrainLog log = train(*m, tiny_images(60, 2), o);
  ASSERT_EQ(log.epochs.size(), 5u);
  for (std::size_t e = 2; e < log.epochs.size(); ++e) EXPECT_LE(log.epochs[e].loss, log.epochs[e - 1].loss * 1.05);
  EXPECT_LT(log.epochs.back().loss, log.epochs.front().loss);
}

TEST(Train, SameSeedIsDeterministic) {
  TrainOptions o;
  o.epochs = 2;
  o.batch_size = 8;
  const auto data = tiny_images(30, 3);
  auto a = build_resnet(tiny_resnet()), b = build_resnet(tiny_resnet());
  const TrainLog la = train(*a, data, o), lb = train(*b, data, o);
  EXPECT_TRUE(la == lb);
  EXPECT_EQ(serialize_checkpoint(*a), serialize_checkpoint(*b));
}

TEST(Train, WorkersMatchSingleThreadClosely) {
  TrainOptions o;
  o.epochs = 1;
  o.batch_size = 8;
  const auto data = tiny_images(24, 4);
  auto a = build_resnet(tiny_resnet()), b = build_resnet(tiny_resnet());
  train(*a, data, o);
  o.workers = 3;
  train(*b, data, o);
  for (std::size_t i = 0; i < a->params().size(); ++i)
    for (std::size_t j = 0; j < a->params()[i].tensor.numel(); ++j)
      EXPECT_NEAR(a->params()[i].tensor[j], b->params()[i].tensor[j], 1e-9);
}

TEST(Train, NonFiniteLossIsTrainingDiverged) {
  auto data = tiny_images(8, 5);
  data[3].input = [&] {
    Image img = std::get<Image>(data[3].input);
    img.pixels[0] = std::numeric_limits<double>::quiet_NaN();
    return img;
  }();
  auto m = build_resnet(tiny_resnet());
  TrainOptions o;
  o.epochs = 1;
  EXPECT_THROW(train(*m, data, o), TrainingDiverged);
}

TEST(Train, InvalidOptionsAreRejected) {
  auto m = build_resnet(tiny_resnet());
  TrainOptions o;
  o.batch_size = 0;
  EXPECT_THROW(train(*m, tiny_images(4, 1), o), ConfigError);
  EXPECT_THROW(train(*m, std::vector<Example>{}, TrainOptions{}), ContractError);
}

TEST(Train, EveryHeadLearnsTheBandTask) {
  auto m = build_resnet(tiny_resnet());
  TrainOptions o;
  o.epochs = 6;
  o.lr = 3e-3;
  o.batch_size = 8;
  train(*m, tiny_images(90, 6), o);
  const EvalResult r = evaluate(*m, tiny_images(60, 60), LossMode::finetune);
  ASSERT_EQ(r.head_accuracy.size(), m->site_count() + 1);
  for (double a : r.head_accuracy) EXPECT_GT(a, 1.0 / 3.0 + 0.1);
}

TEST(Train, TransformerLearnsKeywordTask) {
  auto m = build_transformer(tiny_transformer());
  TrainOptions o;
  o.epochs = 5;
  o.lr = 3e-3;
  o.batch_size = 16;
  train(*m, to_examples(gen_tokens(300, 64, 1)), o);
  const EvalResult r = evaluate(*m, to_examples(gen_tokens(100, 64, 2)), LossMode::finetune);
  EXPECT_GT(r.head_accuracy.back(), 0.5);
}

TEST(Train, EpochCallbackSeesEveryEpoch) {
  auto m = build_resnet(tiny_resnet());
  TrainOptions o;
  o.epochs = 2;
  std::vector<int> seen;
  o.on_epoch = [&](int e, const Model&) { seen.push_back(e); };
  train(*m, tiny_images(8, 7), o);
  EXPECT_EQ(seen, (std::vector<int>{1, 2}));
}

TEST(Evaluate, PretrainAndFinetuneAccuraciesAgree) {
  auto m = build_resnet(tiny_resnet());
  const auto data = tiny_images(12, 8);
  EXPECT_EQ(evaluate(*m, data, LossMode::pretrain).head_accuracy,
            evaluate(*m, data, LossMode::finetune).head_accuracy);
}
