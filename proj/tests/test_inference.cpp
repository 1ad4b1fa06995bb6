#include <gtest/gtest.h>

#include "cps3d/inference.hpp"
#include "helpers.hpp"

using namespace cps3d;
using testing_util::code_of;

namespace {

TilePredictor constant_predictor(std::vector<float> q, std::size_t* calls = nullptr) {
  return [q, calls](const Tensor<float>& x) {
    if (calls) ++*calls;
    ConfidenceMap<float> p(static_cast<int>(q.size()), x.dims);
    for (int c = 0; c < p.channels; ++c) std::fill(p.channel(c), p.channel(c) + p.voxels(), q[static_cast<std::size_t>(c)]);
    return p;
  };
}

Fingerprint unit_fingerprint() { return Fingerprint{0.0, 1.0, -100.0, 100.0, {1, 1, 1}, 1, 1}; }

Plan cube_plan(Dims patch, int classes) {
  Plan p;
  p.patch_size = patch;
  p.num_classes = classes;
  return p;
}

}  // namespace

TEST(Tiling, ReferenceExample) {
  EXPECT_EQ(axis_tile_positions(100, 64, 0.7), (std::vector<std::size_t>{0, 36}));
  EXPECT_EQ(axis_tile_positions(64, 64, 0.7), (std::vector<std::size_t>{0}));
  EXPECT_EQ(axis_tile_positions(5, 64, 0.7), (std::vector<std::size_t>{0}));
  EXPECT_EQ(code_of([] { axis_tile_positions(10, 4, 0.0); }), ErrorCode::ConfigError);
}

TEST(Tiling, TilesCoverTheAxisWithBoundedStep) {
  for (std::size_t P : {3u, 8u, 17u})
    for (std::size_t L = P; L < 5 * P; ++L)
      for (double f : {0.5, 0.7, 1.0}) {
        const auto pos = axis_tile_positions(L, P, f);
        const auto step = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(f * P)));
        EXPECT_EQ(pos.front(), 0u);
        EXPECT_EQ(pos.back() + P, L);
        for (std::size_t i = 1; i < pos.size(); ++i) {
          EXPECT_GT(pos[i], pos[i - 1]);
          EXPECT_LE(pos[i] - pos[i - 1], step) << "L=" << L << " P=" << P;
        }
      }
}

TEST(Tiling, LayoutIsProductOfAxes) {
  const TileLayout t = tile_positions({100, 64, 10}, {64, 32, 16});
  EXPECT_EQ(t.tile_count(), 2u * 3u * 1u);
  EXPECT_EQ(t.positions().size(), t.tile_count());
  EXPECT_EQ(t.positions()[1], (std::array<std::size_t, 3>{0, 16, 0}));
}

TEST(Gaussian, PeakOneAndFloored) {
  const auto w = gaussian_importance({16, 16, 16});
  EXPECT_EQ(*std::max_element(w.begin(), w.end()), 1.0);
  EXPECT_EQ(*std::min_element(w.begin(), w.end()), 1e-3);
  EXPECT_EQ(w[0], w.back());
}

TEST(SlidingWindow, ConstantPredictorGivesConstant) {
  const std::vector<float> q{0.2f, 0.5f, 0.3f};
  for (Dims vol : {Dims{5, 9, 13}, Dims{3, 3, 3}, Dims{20, 7, 1}}) {
    const Image img(vol, {1, 1, 1}, 1.0f);
    const auto out = sliding_window_predict(constant_predictor(q), img, {4, 4, 4}, 3);
    EXPECT_EQ(out.dims, vol);
    for (int c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < out.voxels(); ++v) ASSERT_NEAR(out.at(c, v), q[static_cast<std::size_t>(c)], 1e-6);
  }
}

TEST(SlidingWindow, SingleTileEqualsDirectForward) {
  Architecture a;
  a.patch = {8, 8, 8};
  a.num_classes = 3;
  a.strides = {{1, 1, 1}, {2, 2, 2}};
  a.channels = {4, 8};
  const Network<float> net(a);
  const auto params = net.init_params(2);
  const Image img = testing_util::random_image({8, 8, 8}, 3);
  std::size_t calls = 0;
  const auto out = sliding_window_predict(network_predictor(net, params), img, a.patch, 3, 0.7, &calls);
  const auto direct = net.forward(params, tensor_from_grid<float>(img)).front();
  EXPECT_EQ(calls, 1u);
  for (std::size_t i = 0; i < out.data.size(); ++i) ASSERT_NEAR(out.data[i], direct.data[i], 1e-6);
}

TEST(SlidingWindow, TwoTilesBlendWithGaussianWeights) {
  // Tiles at x = 0 and x = 4 along a 12-voxel row; each tile predicts a
  // constant read from its first input voxel.
  Image img({1, 1, 12}, {1, 1, 1});
  for (std::size_t x = 0; x < 12; ++x) img.values[x] = static_cast<float>(x) / 20.0f;
  TilePredictor tile_constant = [](const Tensor<float>& in) {
    const float q = 0.3f + in.data[0];
    ConfidenceMap<float> p(2, in.dims);
    for (std::size_t v = 0; v < p.voxels(); ++v) p.at(0, v) = 1.0f - q, p.at(1, v) = q;
    return p;
  };
  std::size_t calls = 0;
  const auto out = sliding_window_predict(tile_constant, img, {1, 1, 8}, 2, 0.7, &calls);
  EXPECT_EQ(calls, 2u);
  auto w = [](double i) { return std::max(std::exp(-(i - 3.5) * (i - 3.5) / 2.0) / std::exp(-0.125), 1e-3); };
  for (std::size_t x = 0; x < 12; ++x) {
    double num = 0, den = 0;
    for (std::size_t c : {0u, 4u})
      if (x >= c && x < c + 8) {
        const double q = 0.3 + static_cast<double>(static_cast<float>(c) / 20.0f);
        num += w(static_cast<double>(x - c)) * q;
        den += w(static_cast<double>(x - c));
      }
    EXPECT_NEAR(out.at(1, x), num / den, 1e-6) << "x=" << x;
  }
}

TEST(Tta, PassCountsFor3dAnd2dPatches) {
  const std::vector<float> q{0.6f, 0.4f};
  std::size_t calls = 0, passes = 0;
  const Image vol({4, 4, 4}, {1, 1, 1}, 0.0f);
  tta_predict(constant_predictor(q, &calls), vol, {4, 4, 4}, 2, InferenceMode::normal, 0.7, nullptr, &passes);
  EXPECT_EQ(calls, 8u);
  EXPECT_EQ(passes, 8u);
  calls = passes = 0;
  tta_predict(constant_predictor(q, &calls), vol, {4, 4, 4}, 2, InferenceMode::fast, 0.7, nullptr, &passes);
  EXPECT_EQ(calls, 1u);
  EXPECT_EQ(passes, 1u);
  calls = passes = 0;
  const Image slice({1, 6, 6}, {1, 1, 1}, 0.0f);
  tta_predict(constant_predictor(q, &calls), slice, {1, 6, 6}, 2, InferenceMode::normal, 0.7, nullptr, &passes);
  EXPECT_EQ(passes, 4u);
}

TEST(Tta, MirroredPredictionsAreRealigned) {
  // A predictor that echoes its input keeps the input under any mirror, so
  // the average must equal the input exactly.
  TilePredictor echo = [](const Tensor<float>& in) {
    ConfidenceMap<float> p(2, in.dims);
    for (std::size_t v = 0; v < p.voxels(); ++v) p.at(1, v) = in.data[v], p.at(0, v) = 1.0f - in.data[v];
    return p;
  };
  Image img({4, 4, 4}, {1, 1, 1});
  for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<float>(i % 7) / 7.0f;
  const auto out = tta_predict(echo, img, {4, 4, 4}, 2, InferenceMode::normal);
  for (std::size_t v = 0; v < img.values.size(); ++v) ASSERT_NEAR(out.at(1, v), img.values[v], 1e-6);
}

TEST(MirrorTensor, IsAnInvolution) {
  Tensor<float> t(2, {2, 3, 4});
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(i);
  const auto orig = t;
  for (unsigned m = 1; m < 8; ++m) {
    mirror_tensor(t, m);
    EXPECT_NE(t, orig);
    mirror_tensor(t, m);
    EXPECT_EQ(t, orig);
  }
}

TEST(PredictCase, ReturnsLabelsOnRawGrid) {
  const Image raw = testing_util::random_image({10, 9, 7}, 4, {1.3, 0.9, 1.1});
  std::size_t calls_fast = 0, calls_normal = 0;
  InferenceOptions o;
  o.mode = InferenceMode::fast;
  InferenceStats st;
  const auto seg = predict_case(constant_predictor({0.1f, 0.2f, 0.7f}, &calls_fast), raw, cube_plan({8, 8, 8}, 3),
                                unit_fingerprint(), o, &st);
  EXPECT_EQ(seg.dims, raw.dims);
  EXPECT_EQ(seg.spacing, raw.spacing);
  EXPECT_EQ(st.resampled_dims, (Dims{13, 8, 8}));
  for (auto v : seg.values) EXPECT_EQ(v, 2);
  o.mode = InferenceMode::normal;
  predict_case(constant_predictor({0.1f, 0.2f, 0.7f}, &calls_normal), raw, cube_plan({8, 8, 8}, 3), unit_fingerprint(), o);
  EXPECT_EQ(calls_normal, 8 * calls_fast);
}

TEST(PredictCase, ForcedSpacingUsesSliceRule) {
  const Image raw({300, 2, 2}, {1.0, 1.0, 1.0}, 0.0f);
  InferenceOptions o;
  o.mode = InferenceMode::fast;
  o.force_spacing = SpacingRule{};
  InferenceStats st;
  const auto seg = predict_case(constant_predictor({0.9f, 0.1f}), raw, cube_plan({8, 1, 1}, 2), unit_fingerprint(), o, &st);
  EXPECT_EQ(st.spacing, (Spacing{0.5, 0.75, 0.75}));
  EXPECT_EQ(st.resampled_dims.z, 600u);
  EXPECT_EQ(seg.dims, raw.dims);
}

TEST(Postprocess, KeepsLargestComponentPerClass) {
  LabelMap m({1, 1, 9}, {1, 1, 1});
  m.values = {1, 1, 1, 0, 1, 0, 2, 0, 2};
  const LabelMap out = keep_largest_components(m);
  EXPECT_EQ(out.values, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 2, 0, 0}));
  LabelMap diag({1, 2, 2}, {1, 1, 1});
  diag.values = {1, 0, 0, 1};  // diagonal neighbours are not 6-connected
  const LabelMap kept = keep_largest_components(diag);
  EXPECT_EQ(std::count(kept.values.begin(), kept.values.end(), 1), 1);
}

TEST(Mode, ParsesNames) {
  EXPECT_EQ(parse_inference_mode("fast"), InferenceMode::fast);
  EXPECT_EQ(parse_inference_mode("normal"), InferenceMode::normal);
  EXPECT_EQ(code_of([] { parse_inference_mode("quick"); }), ErrorCode::ConfigError);
}
