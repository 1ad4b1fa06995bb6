#include <set>

#include <gtest/gtest.h>

#include "cps3d/preprocess.hpp"
#include "helpers.hpp"

using namespace cps3d;
using testing_util::code_of;

TEST(Resample, IdentityWhenSpacingMatches) {
  const Image img = testing_util::random_image({5, 6, 7}, 3, {1.5, 1.0, 0.7});
  const Image out = resample(img, img.spacing, Interp::linear);
  EXPECT_EQ(out.dims, img.dims);
  for (std::size_t i = 0; i < img.values.size(); ++i) EXPECT_FLOAT_EQ(out.values[i], img.values[i]);
}

TEST(Resample, DoublesResolution) {
  const Image img = testing_util::random_image({4, 4, 4}, 5, {2.0, 2.0, 2.0});
  const Image out = resample(img, {1.0, 1.0, 1.0}, Interp::linear);
  EXPECT_EQ(out.dims, (Dims{8, 8, 8}));
  EXPECT_EQ(out.spacing, (Spacing{1.0, 1.0, 1.0}));
}

TEST(Resample, LinearStaysWithinInputRange) {
  const Image img = testing_util::random_image({5, 4, 6}, 8, {1.3, 0.9, 2.1});
  const Image out = resample(img, {0.7, 1.1, 0.6}, Interp::linear);
  const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
  for (float v : out.values) {
    EXPECT_GE(v, *lo - 1e-5f);
    EXPECT_LE(v, *hi + 1e-5f);
  }
}

TEST(Resample, LabelsKeepTheirValueSet) {
  LabelMap lab({6, 6, 6}, {2.0, 1.0, 0.5});
  const std::uint8_t vals[] = {0, 2, 5};
  for (std::size_t i = 0; i < lab.values.size(); ++i) lab.values[i] = vals[(i / 7) % 3];
  const LabelMap out = resample(lab, {0.9, 1.3, 1.1}, Interp::nearest);
  for (auto v : out.values) EXPECT_TRUE(v == 0 || v == 2 || v == 5) << int(v);
}

TEST(Resample, LinearOnLabelsIsRejected) {
  LabelMap lab({2, 2, 2}, {1.0, 1.0, 1.0});
  EXPECT_EQ(code_of([&] { resample(lab, {0.5, 0.5, 0.5}, Interp::linear); }), ErrorCode::InterpolationOnLabels);
}

TEST(Resample, ConstantImageStaysConstant) {
  Image img({3, 5, 4}, {1.7, 0.6, 1.2}, 42.0f);
  const Image out = resample(img, {1.0, 1.0, 1.0}, Interp::linear);
  for (float v : out.values) EXPECT_FLOAT_EQ(v, 42.0f);
}

TEST(Normalize, ReferenceValue) {
  Fingerprint fp;
  fp.mean = 100;
  fp.std = 50;
  fp.p_low = 0;
  fp.p_high = 200;
  Image img({1, 1, 3}, {1, 1, 1});
  img.values = {150.0f, -40.0f, 900.0f};
  const Image out = normalize(img, fp);
  EXPECT_DOUBLE_EQ(out.values[0], 1.0);
  EXPECT_DOUBLE_EQ(out.values[1], -2.0);
  EXPECT_DOUBLE_EQ(out.values[2], 2.0);
}

TEST(Normalize, DatasetMeanMapsToZero) {
  Fingerprint fp{3.5, 2.0, -10, 10, {1, 1, 1}, 1, 1};
  Image img({1, 1, 1}, {1, 1, 1}, 3.5f);
  EXPECT_NEAR(normalize(img, fp).values[0], 0.0, 1e-7);
}

TEST(Normalize, ZeroStdFallsBackToUnitDivisor) {
  Fingerprint fp{5.0, 0.0, 5.0, 5.0, {1, 1, 1}, 1, 1};
  Image img({1, 1, 2}, {1, 1, 1});
  img.values = {5.0f, 7.0f};
  bool degenerate = false;
  const Image out = normalize(img, fp, &degenerate);
  EXPECT_TRUE(degenerate);
  for (float v : out.values) EXPECT_TRUE(std::isfinite(v));
  EXPECT_FLOAT_EQ(out.values[0], 0.0f);
}

TEST(SamplePatch, WholeVolumeWhenDimsEqualPatch) {
  const Image img = testing_util::random_image({4, 5, 6}, 1);
  const LabelMap lab = testing_util::random_labels({4, 5, 6}, 3, 2);
  Rng rng(9);
  const Patch p = sample_patch(img, &lab, img.dims, rng, 0.5);
  EXPECT_EQ(p.image.values, img.values);
  EXPECT_EQ(p.labels->values, lab.values);
  EXPECT_EQ(p.corner, (std::array<std::ptrdiff_t, 3>{0, 0, 0}));
}

TEST(SamplePatch, ForcedOversamplingContainsForeground) {
  Image img({16, 16, 16}, {1, 1, 1}, 0.0f);
  LabelMap lab({16, 16, 16}, {1, 1, 1}, std::uint8_t{0});
  lab(13, 2, 11) = 1;
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Patch p = sample_patch(img, &lab, {4, 4, 4}, rng, 1.0);
    EXPECT_TRUE(std::count(p.labels->values.begin(), p.labels->values.end(), 1) == 1);
  }
}

TEST(SamplePatch, DeterministicInSeed) {
  const Image img = testing_util::random_image({10, 12, 9}, 5);
  const LabelMap lab = testing_util::random_labels({10, 12, 9}, 2, 6);
  Rng a(77), b(77);
  for (int i = 0; i < 5; ++i) {
    const Patch pa = sample_patch(img, &lab, {4, 4, 4}, a, 0.33);
    const Patch pb = sample_patch(img, &lab, {4, 4, 4}, b, 0.33);
    EXPECT_EQ(pa.image, pb.image);
    EXPECT_EQ(pa.corner, pb.corner);
  }
}

TEST(SamplePatch, PadsSmallCasesSymmetrically) {
  Image img({2, 2, 2}, {1, 1, 1}, 1.0f);
  Rng rng(1);
  const Patch p = sample_patch(img, nullptr, {4, 6, 2}, rng, 0.0);
  EXPECT_FALSE(p.labels.has_value());
  EXPECT_EQ(p.image.dims, (Dims{4, 6, 2}));
  EXPECT_EQ(p.corner, (std::array<std::ptrdiff_t, 3>{-1, -2, 0}));
  EXPECT_EQ(std::count(p.image.values.begin(), p.image.values.end(), 1.0f), 8);
  EXPECT_FLOAT_EQ(p.image(1, 2, 0), 1.0f);
  EXPECT_FLOAT_EQ(p.image(0, 0, 0), 0.0f);
}

TEST(SamplePatch, PatchMatchesSourceAtCorner) {
  const Image img = testing_util::random_image({9, 8, 7}, 12);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const Patch p = sample_patch(img, nullptr, {3, 4, 5}, rng, 0.0);
    for (std::size_t z = 0; z < 3; ++z)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 5; ++x)
          ASSERT_EQ(p.image(z, y, x), img(z + p.corner[0], y + p.corner[1], x + p.corner[2]));
  }
}

TEST(Augment, ZeroProbabilitiesLeavePatchUnchanged) {
  Patch p;
  p.image = testing_util::random_image({4, 4, 4}, 2);
  p.labels = testing_util::random_labels({4, 4, 4}, 3, 3);
  AugmentConfig cfg;
  cfg.mirror_prob = cfg.scale_prob = cfg.noise_prob = 0.0;
  Rng rng(5);
  const Patch q = augment(p, rng, cfg);
  EXPECT_EQ(q.image, p.image);
  EXPECT_EQ(q.labels, p.labels);
}

TEST(Augment, MirrorIsAnInvolutionAndKeepsAlignment) {
  Image img = testing_util::random_image({3, 4, 5}, 6);
  const Image orig = img;
  for (std::size_t a = 0; a < 3; ++a) {
    mirror_axis(img, a);
    EXPECT_NE(img, orig);
    mirror_axis(img, a);
    EXPECT_EQ(img, orig);
  }
  Patch p;
  p.image = Image({1, 1, 4}, {1, 1, 1});
  p.image.values = {0, 1, 2, 3};
  p.labels = LabelMap({1, 1, 4}, {1, 1, 1});
  p.labels->values = {0, 1, 2, 3};
  AugmentConfig cfg;
  cfg.mirror_prob = 1.0;
  cfg.scale_prob = cfg.noise_prob = 0.0;
  Rng rng(0);
  const Patch q = augment(p, rng, cfg);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(q.image.values[i], static_cast<float>(q.labels->values[i]));
  EXPECT_EQ(q.labels->values, (std::vector<std::uint8_t>{3, 2, 1, 0}));
}

TEST(Augment, LabelSetIsPreserved) {
  Patch p;
  p.image = testing_util::random_image({6, 6, 6}, 7);
  p.labels = testing_util::random_labels({6, 6, 6}, 4, 8);
  const std::multiset<int> before(p.labels->values.begin(), p.labels->values.end());
  AugmentConfig cfg;
  cfg.mirror_prob = cfg.scale_prob = cfg.noise_prob = 1.0;
  Rng rng(9);
  const Patch q = augment(p, rng, cfg);
  const std::multiset<int> after(q.labels->values.begin(), q.labels->values.end());
  EXPECT_EQ(before, after);
  EXPECT_NE(q.image, p.image);
}
