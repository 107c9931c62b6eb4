#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mhex/mhex.hpp"

using namespace mhex;

namespace {

Image ramp_image(std::size_t channels, std::size_t h, std::size_t w) {
  Image img;
  img.channels = channels;
  img.height = h;
  img.width = w;
  img.pixels.resize(channels * h * w);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<double>(i % 7) / 7.0;
  return img;
}

// softmax over two classes driven by the mean of the top-left quadrant
Classifier quadrant_classifier() {
  return [](const Input& in) {
    const Image& img = std::get<Image>(in);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t y = 0; y < img.height / 2; ++y)
      for (std::size_t x = 0; x < img.width / 2; ++x, ++n) s += img.at(0, y, x);
    const double z = 8.0 * s / static_cast<double>(n);
    const double p = 1.0 / (1.0 + std::exp(-z));
    return std::vector<double>{p, 1.0 - p};
  };
}

Classifier keyword_classifier(int keyword) {
  return [keyword](const Input& in) {
    const TokenSeq& s = std::get<TokenSeq>(in);
    bool hit = false;
    for (int t : s.ids) hit |= t == keyword;
    return hit ? std::vector<double>{0.9, 0.1} : std::vector<double>{0.5, 0.5};
  };
}

}  // namespace

TEST(AvgDrop, HandValues) {
  const std::vector<DropRecord> same = {make_drop_record("a", 0.7, 0.7, 0.1), make_drop_record("b", 0.2, 0.2, 0.1)};
  EXPECT_EQ(avg_drop(same), 0.0);
  EXPECT_DOUBLE_EQ(relative_drop(0.8, 0.4), 0.5);
  EXPECT_EQ(relative_drop(0.3, 0.9), 0.0);
  const std::vector<DropRecord> mixed = {make_drop_record("a", 0.8, 0.4, 0.1), make_drop_record("b", 0.3, 0.9, 0.1)};
  EXPECT_DOUBLE_EQ(avg_drop(mixed), 0.25);
}

TEST(AvgDrop, ZeroConfidenceRecordsAreExcluded) {
  const std::vector<DropRecord> r = {make_drop_record("a", 0.8, 0.4, 0.1), make_drop_record("b", 0.0, 0.0, 0.1)};
  std::size_t excluded = 0;
  EXPECT_DOUBLE_EQ(avg_drop(r, &excluded), 0.5);
  EXPECT_EQ(excluded, 1u);
  EXPECT_THROW(avg_drop(std::vector<DropRecord>{}), ContractError);
}

TEST(AreaWeight, PeakAtQuarter) {
  EXPECT_EQ(area_weight(0.25), 1.0);
  EXPECT_EQ(area_weight(0.0), 0.0);
  const double h = 1e-6;
  EXPECT_LT(std::abs((area_weight(0.25 + h) - area_weight(0.25 - h)) / (2 * h)), 1e-4);
  EXPECT_THROW(area_weight(-0.01), DomainError);
  EXPECT_THROW(area_weight(1.01), DomainError);
}

TEST(AreaWeight, UniqueGridMaximumAndRange) {
  std::size_t best = 0;
  double best_v = -1.0;
  for (std::size_t i = 0; i <= 10000; ++i) {
    const double v = area_weight(static_cast<double>(i) * 1e-4);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  EXPECT_EQ(best, 2500u);
}

TEST(Ead, QuarterAreaEqualsAvgDropAndHandFixture) {
  const std::vector<DropRecord> q = {make_drop_record("a", 0.8, 0.2, 0.25), make_drop_record("b", 0.5, 0.4, 0.25)};
  EXPECT_DOUBLE_EQ(ead(q), avg_drop(q));
  const std::vector<DropRecord> two = {make_drop_record("a", 1.0, 0.5, 0.5), make_drop_record("b", 1.0, 0.0, 0.1)};
  const double f5 = 2.5 / (1.0 + 256.0 / 32.0), f1 = 0.5 / (1.0 + 256.0 * 1e-5);
  EXPECT_NEAR(ead(two), (0.5 * f5 + 1.0 * f1) / 2.0, 1e-15);
  const std::vector<DropRecord> none = {make_drop_record("a", 0.5, 0.5, 0.3)};
  EXPECT_EQ(ead(none), 0.0);
}

TEST(SaliencyArea, Fixtures) {
  EXPECT_EQ(saliency_area(Grid(4, 4, 0.0)), 0.0);
  EXPECT_EQ(saliency_area(Grid(4, 4, 1.0)), 1.0);
  Grid half(2, 2);
  half.v = {0.5, 0.9, 0.1, 0.49};
  EXPECT_EQ(saliency_area(half), 0.5);
}

TEST(SoftMask, Endpoints) {
  const Image img = ramp_image(2, 3, 4);
  const auto mu = channel_means(img);
  EXPECT_EQ(soft_mask(img, Grid(3, 4, 0.0)).pixels, img.pixels);
  const Image one = soft_mask(img, Grid(3, 4, 1.0));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < 12; ++p) EXPECT_NEAR(one.pixels[c * 12 + p], mu[c], 1e-15);
  const Image half = soft_mask(img, Grid(3, 4, 0.5));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < 12; ++p)
      EXPECT_NEAR(half.pixels[c * 12 + p], 0.5 * (img.pixels[c * 12 + p] + mu[c]), 1e-15);
  EXPECT_THROW(soft_mask(img, Grid(4, 3, 0.0)), DimensionError);
}

TEST(HardMask, ThresholdAndCheckerboard) {
  const Image img = ramp_image(1, 4, 4);
  Grid cam(4, 4, 0.3);
  EXPECT_EQ(hard_mask(img, cam, 0.9).pixels, img.pixels);
  const Image all = hard_mask(img, cam, 0.0, std::vector<double>{0.25});
  for (double v : all.pixels) EXPECT_EQ(v, 0.25);
  Grid checker(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) checker(y, x) = (x + y) % 2 ? 1.0 : 0.0;
  const Image m = hard_mask(img, checker, 0.5, std::vector<double>{-1.0});
  for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(m.pixels[p], checker.v[p] == 1.0 ? -1.0 : img.pixels[p]);
  EXPECT_THROW(hard_mask(img, checker, 0.5, std::vector<double>{1.0, 2.0}), DimensionError);
}

TEST(Auc, ClosedFormsAndRefinementOracle) {
  EXPECT_DOUBLE_EQ(auc({{0.0, 0.5, 1.0}, {1.0, 1.0, 1.0}}), 1.0);
  EXPECT_DOUBLE_EQ(auc({{0.0, 1.0}, {0.0, 1.0}}), 0.5);
  for (std::uint64_t s = 0; s < 20; ++s) {
    CounterRng rng(s, 11);
    Curve c;
    const std::size_t n = 21;
    for (std::size_t i = 0; i < n; ++i) {
      c.fractions.push_back(static_cast<double>(i) / (n - 1));
      c.confidences.push_back(rng.uniform());
    }
    // midpoint Riemann sum of the piecewise-linear interpolant
    const std::size_t fine = 200000;
    double r = 0.0;
    for (std::size_t k = 0; k < fine; ++k) {
      const double x = (static_cast<double>(k) + 0.5) / fine;
      const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(x * (n - 1)), n - 2);
      const double t = x * (n - 1) - static_cast<double>(i);
      r += (c.confidences[i] * (1 - t) + c.confidences[i + 1] * t) / fine;
    }
    EXPECT_NEAR(auc(c), r, 1e-6);
  }
  EXPECT_THROW(auc({{0.0, 0.5}, {1.0, 1.0}}), ContractError);
  EXPECT_THROW(auc({{0.0, 1.0}, {1.0}}), DimensionError);
}

TEST(Curves, EndpointsMatchOriginalConfidence) {
  const Image img = ramp_image(1, 8, 8);
  Grid cam(8, 8);
  for (std::size_t i = 0; i < 64; ++i) cam.v[i] = static_cast<double>((i * 37) % 64) / 63.0;
  const auto f = quadrant_classifier();
  const double p = f(img)[0];
  const Curve del = deletion_curve(f, img, cam, 0, 8), ins = insertion_curve(f, img, cam, 0, 8);
  EXPECT_EQ(del.fractions.size(), 9u);
  EXPECT_EQ(del.confidences.front(), p);
  EXPECT_EQ(ins.confidences.back(), p);
  EXPECT_EQ(del.confidences.front(), ins.confidences.back());
  EXPECT_THROW(deletion_curve(f, img, cam, 0, 1), ConfigError);
}

TEST(Curves, ConstantModelGivesFlatCurves) {
  const Classifier flat = [](const Input&) { return std::vector<double>{0.3, 0.7}; };
  const Image img = ramp_image(1, 4, 4);
  const Curve c = deletion_curve(flat, img, Grid(4, 4, 0.5), 1, 4);
  for (double v : c.confidences) EXPECT_EQ(v, 0.7);
  EXPECT_DOUBLE_EQ(auc(c), 0.7);
}

TEST(Curves, SalientRegionFirstDeletesFaster) {
  Image img;
  img.channels = 1;
  img.height = img.width = 8;
  img.pixels.assign(64, 0.0);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) img.pixels[y * 8 + x] = 1.0;
  Grid good(8, 8, 0.0), bad(8, 8, 1.0);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      good(y, x) = 1.0;
      bad(y, x) = 0.0;
    }
  const auto f = quadrant_classifier();
  EXPECT_LT(auc(deletion_curve(f, img, good, 0)), auc(deletion_curve(f, img, bad, 0)));
  EXPECT_GT(auc(insertion_curve(f, img, good, 0)), auc(insertion_curve(f, img, bad, 0)));
}

TEST(TokenPerturbDrop, RoundingAndZeroFraction) {
  const TokenSeq seq{{5, 6, 7, 8, 9, 10, 11}};
  const std::vector<double> sal = {0.1, 0.9, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto f = keyword_classifier(6);
  const DropRecord r = token_perturb_drop(f, seq, sal, 0, 0.10);
  EXPECT_NEAR(r.area, 1.0 / 7.0, 1e-15);
  EXPECT_NEAR(r.drop, (0.9 - 0.5) / 0.9, 1e-12);
  EXPECT_EQ(token_perturb_drop(f, seq, sal, 0, 0.0).drop, 0.0);
  // exact multiple: 10 tokens at 10% is one token, not two
  const TokenSeq ten{{2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
  EXPECT_NEAR(token_perturb_drop(f, ten, std::vector<double>(10, 0.0), 0, 0.1).area, 0.1, 1e-15);
}

TEST(TokenPerturbDrop, MaskingEverythingReachesChance) {
  const TokenSeq seq{{6, 3, 4, kPadToken}};
  const DropRecord r = token_perturb_drop(keyword_classifier(6), seq, std::vector<double>{1, 2, 3}, 0, 1.0);
  EXPECT_NEAR(r.p_mask, 0.5, 1e-15);
  EXPECT_EQ(r.area, 1.0);
}

TEST(TokenPerturbDrop, Errors) {
  const auto f = keyword_classifier(6);
  EXPECT_THROW(token_perturb_drop(f, TokenSeq{{kPadToken, kPadToken}}, std::vector<double>{}, 0), ContractError);
  EXPECT_THROW(token_perturb_drop(f, TokenSeq{{4, 5}}, std::vector<double>{1.0}, 0), DimensionError);
  EXPECT_THROW(token_perturb_drop(f, TokenSeq{{4, 5}}, std::vector<double>{1.0, 2.0}, 0, 0.1, -1), ConfigError);
  EXPECT_THROW(token_perturb_drop(f, TokenSeq{{4, 5}}, std::vector<double>{1.0, 2.0}, 3), IndexError);
}

TEST(ModelClassifier, ProbabilitiesSumToOne) {
  auto m = build_resnet({});
  const auto p = model_classifier(*m)(gen_shape(1, 0).image);
  double s = 0.0;
  for (double v : p) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Csv, DropRecordsAndCurves) {
  const std::vector<DropRecord> r = {make_drop_record("7", 0.5, 0.25, 0.25)};
  EXPECT_EQ(drop_records_csv(r), "id,p_orig,p_mask,drop,area,f_area\n7,0.5,0.25,0.5,0.25,1\n");
  EXPECT_EQ(curve_csv({{0.0, 1.0}, {0.5, 0.25}}), "fraction,confidence\n0,0.5\n1,0.25\n");
}

TEST(Pearson, PerfectAndZeroCorrelation) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> y = {2, 4, 6, 8, 10};
  const Correlation c = pearson(x, y);
  EXPECT_EQ(c.r, 1.0);
  EXPECT_EQ(c.p, 0.0);
  EXPECT_TRUE(std::isinf(c.t));
  const std::vector<double> a = {1, 2, 3, 4, 5}, b = {1, -1, 0, -1, 1};
  const Correlation z = pearson(a, b);
  EXPECT_EQ(z.r, 0.0);
  EXPECT_EQ(z.t, 0.0);
  EXPECT_EQ(z.p, 1.0);
}

TEST(Pearson, DegenerateInputsAreUndefined) {
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{3, 4}), UndefinedCorrelation);
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{3, 4, 5}), UndefinedCorrelation);
  EXPECT_THROW(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 4}), DimensionError);
}

TEST(StudentT, ReferenceValues) {
  // r = 0.444 at n = 20
  const double r = 0.444, df = 18.0;
  const double t = r * std::sqrt(df / (1 - r * r));
  EXPECT_NEAR(t, 2.10, 0.01);
  EXPECT_NEAR(student_t_two_sided(t, df), 0.05, 0.005);
  EXPECT_NEAR(student_t_two_sided(2.262157, 9.0), 0.05, 1e-5);
  EXPECT_NEAR(student_t_two_sided(1.0, 1.0), 0.5, 1e-12);
  EXPECT_EQ(student_t_two_sided(0.0, 5.0), 1.0);
}

TEST(IncompleteBeta, ClosedForms) {
  EXPECT_NEAR(incomplete_beta(1.0, 1.0, 0.3), 0.3, 1e-14);
  EXPECT_NEAR(incomplete_beta(2.0, 1.0, 0.5), 0.25, 1e-14);
  EXPECT_NEAR(incomplete_beta(0.5, 0.5, 0.5), 0.5, 1e-12);
  EXPECT_THROW(incomplete_beta(1.0, 1.0, 1.5), DomainError);
}

TEST(SignTest, BinomialTail) {
  EXPECT_NEAR(sign_test_p(10, 10), std::pow(0.5, 10), 1e-15);
  EXPECT_NEAR(sign_test_p(0, 4), 1.0, 1e-15);
  EXPECT_NEAR(sign_test_p(3, 4), 5.0 / 16.0, 1e-15);
}
