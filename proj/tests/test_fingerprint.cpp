#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "cps3d/fingerprint.hpp"
#include "helpers.hpp"

using namespace cps3d;

TEST(Fingerprint, ConstantVolume) {
  const std::vector<Image> imgs{Image({4, 4, 4}, {1, 1, 1}, 7.0f)};
  const Fingerprint fp = compute_fingerprint(imgs);
  EXPECT_EQ(fp.mean, 7.0);
  EXPECT_EQ(fp.std, 0.0);
  EXPECT_EQ(fp.p_low, 7.0);
  EXPECT_EQ(fp.p_high, 7.0);
  EXPECT_EQ(fp.num_voxels, 64u);
}

TEST(Fingerprint, NearestRankOnOneToThousand) {
  Image img({10, 10, 10}, {1, 1, 1});
  std::iota(img.values.begin(), img.values.end(), 1.0f);
  std::shuffle(img.values.begin(), img.values.end(), std::mt19937_64(5));
  const Fingerprint fp = compute_fingerprint(std::vector<Image>{img});
  // Sort-based oracle: value at 1-based rank ceil(q * N).
  std::vector<float> sorted = img.values;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(fp.p_low, sorted[static_cast<std::size_t>(std::ceil(0.005 * 1000)) - 1]);
  EXPECT_EQ(fp.p_high, sorted[static_cast<std::size_t>(std::ceil(0.995 * 1000)) - 1]);
  EXPECT_EQ(fp.p_low, 5.0);
  EXPECT_EQ(fp.p_high, 995.0);
}

TEST(Fingerprint, PooledPopulationStatistics) {
  const std::vector<Image> imgs{Image({1, 2, 2}, {1, 1, 1}, 0.0f), Image({1, 2, 2}, {1, 1, 1}, 4.0f)};
  const Fingerprint fp = compute_fingerprint(imgs);
  EXPECT_DOUBLE_EQ(fp.mean, 2.0);
  EXPECT_DOUBLE_EQ(fp.std, 2.0);
  EXPECT_EQ(fp.num_cases, 2u);
}

TEST(Fingerprint, MedianSpacingPerAxis) {
  const std::vector<Image> imgs{Image({1, 1, 1}, {1.0, 3.0, 0.5}, 0.0f), Image({1, 1, 1}, {2.0, 1.0, 0.7}, 1.0f),
                                Image({1, 1, 1}, {5.0, 2.0, 0.6}, 2.0f)};
  const Fingerprint fp = compute_fingerprint(imgs);
  EXPECT_EQ(fp.median_spacing, (Spacing{2.0, 2.0, 0.6}));
}

TEST(Fingerprint, PermutationInvariantAndIncremental) {
  std::vector<Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(testing_util::random_image({3, 4, 5}, 100 + i, {1.0 + i, 1, 1}));
  const Fingerprint a = compute_fingerprint(imgs);
  std::vector<Image> shuffled(imgs.rbegin(), imgs.rend());
  std::shuffle(shuffled[0].values.begin(), shuffled[0].values.end(), std::mt19937_64(1));
  EXPECT_EQ(compute_fingerprint(shuffled), a);
  Image concat({1, 1, 60 * 4}, {1, 1, 1});
  concat.values.clear();
  for (const auto& im : imgs) concat.values.insert(concat.values.end(), im.values.begin(), im.values.end());
  const Fingerprint c = compute_fingerprint(std::vector<Image>{concat});
  EXPECT_EQ(c.mean, a.mean);
  EXPECT_EQ(c.std, a.std);
  EXPECT_EQ(c.p_low, a.p_low);
  EXPECT_EQ(c.p_high, a.p_high);
}

TEST(Fingerprint, UnlabeledCasesChangeItOnlyWhenTheirValuesDiffer) {
  const Image labeled = testing_util::random_image({4, 4, 4}, 1);
  const Fingerprint base = compute_fingerprint(std::vector<Image>{labeled});
  const Fingerprint same = compute_fingerprint(std::vector<Image>{labeled, labeled});
  EXPECT_EQ(same.mean, base.mean);
  EXPECT_EQ(same.p_low, base.p_low);
  const Fingerprint diff = compute_fingerprint(std::vector<Image>{labeled, Image({4, 4, 4}, {1, 1, 1}, 50.0f)});
  EXPECT_NE(diff.mean, base.mean);
}

TEST(Fingerprint, InvariantsHold) {
  std::vector<Image> imgs{testing_util::random_image({5, 5, 5}, 9)};
  const Fingerprint fp = compute_fingerprint(imgs);
  std::vector<float> s = imgs[0].values;
  std::sort(s.begin(), s.end());
  const float median = s[s.size() / 2];
  EXPECT_LE(fp.p_low, median);
  EXPECT_GE(fp.p_high, median);
  EXPECT_GT(fp.std, 0.0);
}

TEST(Fingerprint, EmptyDataset) {
  try {
    compute_fingerprint(std::vector<Image>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyDataset);
  }
}

TEST(Fingerprint, FileRoundTripIsExact) {
  testing_util::TempDir dir;
  const Fingerprint fp = compute_fingerprint(std::vector<Image>{testing_util::random_image({3, 3, 3}, 4, {0.9, 1.1, 1.3})});
  write_fingerprint(fp, dir / "fp.txt");
  EXPECT_EQ(read_fingerprint(dir / "fp.txt"), fp);
}

TEST(Fingerprint, SubsamplingIsDeterministic) {
  FingerprintOptions opts;
  opts.max_samples_per_case = 10;
  opts.sample_seed = 3;
  const std::vector<Image> imgs{testing_util::random_image({6, 6, 6}, 2)};
  const Fingerprint a = compute_fingerprint(imgs, opts), b = compute_fingerprint(imgs, opts);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.num_voxels, 10u);
}
