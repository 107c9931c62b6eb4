#include <gtest/gtest.h>

#include <cmath>

#include "mhex/mhex.hpp"

using namespace mhex;

namespace {

ResNetConfig small_resnet() {
  ResNetConfig c;
  c.stage_channels = {8, 8, 16, 16};
  return c;
}

std::vector<double> add(std::vector<double> a, std::span<const double> b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace

TEST(Cosine, BasicValues) {
  const std::vector<double> a = {1, 0}, b = {0, 1}, c = {-2, 0}, z = {0, 0};
  EXPECT_NEAR(cosine(a, a), 1.0, 1e-8);
  EXPECT_EQ(cosine(a, b), 0.0);
  EXPECT_NEAR(cosine(a, c), -1.0, 1e-8);
  EXPECT_EQ(cosine(a, z), 0.0);
  EXPECT_THROW(cosine(a, std::vector<double>{1.0}), DimensionError);
}

TEST(SiteGradients, LastSiteHasNoSuccessor) {
  auto m = build_resnet(small_resnet());
  const ForwardRecord rec = m->forward_collect(gen_shape(1, 0).image);
  EXPECT_THROW(site_gradients(*m, rec, 0, m->site_count() - 1), ContractError);
  EXPECT_NO_THROW(site_gradients(*m, rec, 0, m->site_count() - 2));
}

TEST(SiteGradients, StoredGradientsUntouched) {
  auto m = build_resnet(small_resnet());
  m->zero_grad();
  const ForwardRecord rec = m->forward_collect(gen_shape(2, 1).image);
  site_gradients(*m, rec, 1, 0);
  for (const auto& p : m->params())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0);
}

TEST(SiteGradients, AttentionPathMatchesBackward) {
  auto m = build_resnet(small_resnet());
  const ForwardRecord rec = m->forward_collect(gen_shape(3, 2).image);
  const SiteGradients g = site_gradients(*m, rec, 2, 1);
  m->zero_grad();
  backward(softmax_cross_entropy(rec.sites[2].ds_logits(), 2));
  const Tensor& w1 = m->site_params(1).w1;
  for (std::size_t i = 0; i < w1.numel(); ++i) EXPECT_NEAR(g.attention[i], w1.grad()[i], 1e-12);
}

TEST(SiteGradients, CellMasksPartitionTheGradient) {
  auto m = build_resnet(small_resnet());
  const ForwardRecord rec = m->forward_collect(gen_shape(4, 3).image);
  const SiteGradients full = site_gradients(*m, rec, 3, 0);
  const std::size_t h = rec.sites[0].grid_h(), w = rec.sites[0].grid_w();
  std::vector<double> att(full.attention.numel(), 0.0), sup(full.supervision.numel(), 0.0);
  for (std::size_t part = 0; part < 2; ++part) {
    std::vector<char> keep(h * w);
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (i % 3 == 0) == (part == 0);
    const SiteGradients g = site_gradients(*m, rec, 3, 0, &keep);
    att = add(att, g.attention.data());
    sup = add(sup, g.supervision.data());
  }
  for (std::size_t i = 0; i < att.size(); ++i) {
    EXPECT_NEAR(att[i], full.attention[i], 1e-10);
    EXPECT_NEAR(sup[i], full.supervision[i], 1e-10);
  }
  std::vector<char> bad(3);
  EXPECT_THROW(site_gradients(*m, rec, 3, 0, &bad), DimensionError);
}

TEST(CollaborationCosine, InRangeAndInputOverloadAgrees) {
  auto m = build_resnet(small_resnet());
  const auto s = gen_shape(5, 0);
  const ForwardRecord rec = m->forward_collect(s.image);
  for (std::size_t site = 0; site + 1 < m->site_count(); ++site) {
    const double c = collaboration_cosine(*m, rec, s.label, site);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    EXPECT_EQ(c, collaboration_cosine(*m, s.image, s.label, site));
  }
}

TEST(CollaborationCosine, TransformerSitesWork) {
  auto m = build_transformer({});
  const auto s = gen_tokens(1, 64, 2)[0];
  const double c = collaboration_cosine(*m, s.tokens, s.label, 0);
  EXPECT_TRUE(std::isfinite(c));
}

TEST(BlockwiseQuality, GridOneEqualsGlobalCosine) {
  auto m = build_resnet(small_resnet());
  for (std::size_t i = 0; i < 3; ++i) {
    const auto s = gen_shape(6, i);
    const Grid g = blockwise_quality(*m, s.image, s.label, 1, 0);
    ASSERT_EQ(g.v.size(), 1u);
    EXPECT_NEAR(g.v[0], collaboration_cosine(*m, s.image, s.label, 0), 1e-9);
  }
}

TEST(BlockwiseQuality, ShapeRangeAndErrors) {
  auto m = build_resnet(small_resnet());
  const auto s = gen_shape(7, 1);
  const Grid g = blockwise_quality(*m, s.image, s.label, 7, 0);
  EXPECT_EQ(g.h, 7u);
  EXPECT_EQ(g.w, 7u);
  for (double v : g.v) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(blockwise_quality(*m, s.image, s.label, 0, 0), ConfigError);
  EXPECT_THROW(blockwise_quality(*m, s.image, s.label, 17, 0), ConfigError);
  EXPECT_THROW(blockwise_quality(*m, s.image, s.label, 2, m->site_count() - 1), ContractError);
  auto t = build_transformer({});
  EXPECT_THROW(blockwise_quality(*t, gen_tokens(1, 64, 1)[0].tokens, 0, 1, 0), UnsupportedError);
}

TEST(Triangle, SiteSelection) {
  EXPECT_EQ(triangle_sites(4), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(triangle_sites(8), (std::vector<std::size_t>{4, 5, 6}));
  EXPECT_EQ(triangle_sites(2), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(triangle_sites(1).empty());
}

TEST(Triangle, ReportLayout) {
  auto m = build_resnet(small_resnet());
  const auto data = to_examples(gen_shapes(6, 3));
  const TriangleReport rep = correlation_triangle(*m, data);
  ASSERT_EQ(rep.entries.size(), 7u);
  EXPECT_EQ(rep.records.size(), 6u * 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(rep.entries[k].pair, "cosine~sad");
    EXPECT_EQ(rep.entries[3 + k].pair, "cosine~p_orig");
  }
  EXPECT_EQ(rep.entries[6].pair, "sad~p_orig");
  EXPECT_FALSE(rep.entries[6].site.has_value());
  for (const auto& e : rep.entries)
    if (e.result) {
      EXPECT_EQ(e.result->n, 6u);
      EXPECT_GE(e.result->p, 0.0);
      EXPECT_LE(e.result->p, 1.0);
    }
  const std::string csv = rep.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "pair,site,r,t,p,n");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 8u);
}

TEST(Triangle, UndefinedCorrelationIsReportedNotThrown) {
  const std::vector<double> x = {1, 2, 3}, flat = {0.5, 0.5, 0.5};
  const TriangleEntry e = detail::correlate("sad~p_orig", std::nullopt, x, flat);
  EXPECT_FALSE(e.result.has_value());
  EXPECT_FALSE(e.error.empty());
  TriangleReport rep;
  rep.entries.push_back(e);
  EXPECT_EQ(rep.csv(), "pair,site,r,t,p,n\nsad~p_orig,all,undefined,undefined,undefined,0\n");
}

TEST(Triangle, RejectsUnsuitableInputs) {
  auto m = build_resnet(small_resnet());
  EXPECT_THROW(correlation_triangle(*m, to_examples(gen_shapes(2, 1))), ContractError);
  auto t = build_transformer({});
  EXPECT_THROW(correlation_triangle(*t, to_examples(gen_tokens(4, 64, 1))), UnsupportedError);
}

TEST(Entropy, HistogramOfUniformIsLogWidth) {
  CounterRng rng(3, 0);
  std::vector<double> xs(200000);
  for (auto& v : xs) v = rng.uniform(0.0, 2.0);
  EXPECT_NEAR(histogram_entropy(xs, 0.0, 2.0, 50), std::log(2.0), 2e-3);
  EXPECT_EQ(histogram_entropy(std::vector<double>{}, 0.0, 1.0, 10), 0.0);
}

TEST(Entropy, ReluDropNearHalfLogTwo) {
  const EntropyEstimate e = relu_entropy_drop(200000, 200, 1);
  EXPECT_NEAR(e.delta, 0.5 * std::log(2.0), 0.02);
  EXPECT_NEAR(e.h_discrete, 0.5 * std::log(2.0), 0.01);
  EXPECT_NEAR(e.h_gaussian, 0.5 * std::log(2 * M_PI * M_E), 0.01);
  const EntropyEstimate again = relu_entropy_drop(200000, 200, 1);
  EXPECT_EQ(e.delta, again.delta);
  EXPECT_THROW(relu_entropy_drop(1, 200, 1), ConfigError);
  EXPECT_THROW(relu_entropy_drop(100, 0, 1), ConfigError);
}
