#include <gtest/gtest.h>

#include "cps3d/metrics.hpp"
#include "helpers.hpp"

using namespace cps3d;
using testing_util::code_of;

namespace {

// Boundary voxels listed as coordinates; a voxel is on the boundary when any
// face neighbour is outside the volume or carries another class.
std::vector<std::array<long, 3>> boundary(const LabelMap& m, int cls) {
  std::vector<std::array<long, 3>> out;
  const long D[3] = {static_cast<long>(m.dims.z), static_cast<long>(m.dims.y), static_cast<long>(m.dims.x)};
  for (long z = 0; z < D[0]; ++z)
    for (long y = 0; y < D[1]; ++y)
      for (long x = 0; x < D[2]; ++x) {
        if (m(z, y, x) != cls) continue;
        const std::array<long, 3> p{z, y, x};
        bool edge = false;
        for (int a = 0; a < 3 && !edge; ++a)
          for (long s : {-1L, 1L}) {
            auto q = p;
            q[a] += s;
            if (q[a] < 0 || q[a] >= D[a] || m(q[0], q[1], q[2]) != cls) edge = true;
          }
        if (edge) out.push_back(p);
      }
  return out;
}

double brute_nsd(const LabelMap& p, const LabelMap& g, int cls, double tol) {
  const auto a = boundary(p, cls), b = boundary(g, cls);
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  auto hits = [&](const auto& from, const auto& to) {
    std::size_t n = 0;
    for (const auto& u : from) {
      double best = 1e300;
      for (const auto& v : to) {
        double d = 0;
        for (int k = 0; k < 3; ++k) d += std::pow((u[k] - v[k]) * g.spacing[k], 2);
        best = std::min(best, std::sqrt(d));
      }
      n += best <= tol;
    }
    return n;
  };
  return double(hits(a, b) + hits(b, a)) / double(a.size() + b.size());
}

LabelMap single_voxel(Dims d, std::size_t z, std::size_t y, std::size_t x) {
  LabelMap m(d, {1, 1, 1});
  m(z, y, x) = 1;
  return m;
}

}  // namespace

TEST(Dsc, HandCountedValues) {
  LabelMap a({1, 1, 4}, {1, 1, 1}), b({1, 1, 4}, {1, 1, 1});
  a.values = {1, 1, 0, 0};
  b.values = {1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(dsc(a, b, 1), 0.5);
  EXPECT_DOUBLE_EQ(dsc(a, a, 1), 1.0);
  EXPECT_DOUBLE_EQ(dsc(a, b, 2), 1.0);  // absent from both
  LabelMap empty({1, 1, 4}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(dsc(a, empty, 1), 0.0);
}

TEST(Nsd, TranslatedVoxel) {
  const auto p = single_voxel({5, 5, 5}, 2, 2, 2);
  const auto g = single_voxel({5, 5, 5}, 2, 2, 3);
  EXPECT_EQ(nsd(p, g, 1, 1.0), 1.0);
  EXPECT_EQ(nsd(p, g, 1, 0.5), 0.0);
}

TEST(Nsd, SpacingIsMeasuredInMillimetres) {
  auto p = single_voxel({5, 5, 5}, 2, 2, 2);
  auto g = single_voxel({5, 5, 5}, 2, 2, 3);
  p.spacing = g.spacing = {1.0, 1.0, 2.0};
  EXPECT_EQ(nsd(p, g, 1, 1.0), 0.0);
  EXPECT_EQ(nsd(p, g, 1, 2.0), 1.0);
}

TEST(Nsd, HalfOfSurfaceWithinTolerance) {
  // Two voxels against one: the far voxel of the pair misses at tol 0.
  LabelMap p({1, 1, 4}, {1, 1, 1}), g({1, 1, 4}, {1, 1, 1});
  p.values = {0, 1, 1, 0};
  g.values = {0, 1, 0, 0};
  // pred surface {1,2}, gt surface {1}; hits: 1 of 2 plus 1 of 1.
  EXPECT_DOUBLE_EQ(nsd(p, g, 1, 0.0), 2.0 / 3.0);
}

TEST(Metrics, MatchBruteForceOracle) {
  std::mt19937_64 rng(5);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  for (int k = 0; k < 40; ++k) {
    const Dims d{1 + rng() % 6, 1 + rng() % 6, 1 + rng() % 6};
    const Spacing sp{uni(0.5, 2), uni(0.5, 2), uni(0.5, 2)};
    const auto a = testing_util::random_labels(d, 3, rng(), sp);
    const auto b = testing_util::random_labels(d, 3, rng(), sp);
    const double tol = uni(0, 3);
    for (int c : {1, 2}) EXPECT_NEAR(nsd(a, b, c, tol), brute_nsd(a, b, c, tol), 1e-12);
  }
}

TEST(Metrics, SymmetricInArguments) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = testing_util::random_labels({4, 5, 6}, 3, s, {1.2, 0.7, 1.0});
    const auto b = testing_util::random_labels({4, 5, 6}, 3, s + 100, {1.2, 0.7, 1.0});
    EXPECT_DOUBLE_EQ(dsc(a, b, 1), dsc(b, a, 1));
    EXPECT_DOUBLE_EQ(nsd(a, b, 2, 1.3), nsd(b, a, 2, 1.3));
  }
}

TEST(Nsd, MonotonicInTolerance) {
  const auto a = testing_util::random_labels({6, 6, 6}, 2, 1, {0.8, 1.1, 1.4});
  const auto b = testing_util::random_labels({6, 6, 6}, 2, 2, {0.8, 1.1, 1.4});
  double prev = 0.0;
  for (double tol = 0.0; tol <= 4.0; tol += 0.25) {
    const double v = nsd(a, b, 1, tol);
    EXPECT_GE(v, prev);
    EXPECT_LE(v, 1.0);
    prev = v;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(Metrics, ShapeMismatchAndBadTolerance) {
  LabelMap a({2, 2, 2}, {1, 1, 1}), b({2, 2, 3}, {1, 1, 1});
  EXPECT_EQ(code_of([&] { dsc(a, b, 1); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(code_of([&] { nsd(a, a, 1, -1.0); }), ErrorCode::ConfigError);
}

TEST(Evaluate, IdenticalDirectoriesScoreOne) {
  testing_util::TempDir dir;
  for (int i = 0; i < 3; ++i) write_volume(testing_util::random_labels({4, 4, 4}, 3, i), dir / ("c" + std::to_string(i) + ".mvol"));
  const Evaluation ev = evaluate(dir.path(), dir.path(), 3);
  ASSERT_EQ(ev.cases.size(), 3u);
  EXPECT_EQ(ev.overall_dsc, 1.0);
  EXPECT_EQ(ev.overall_nsd, 1.0);
  const std::string csv = evaluation_csv(ev);
  EXPECT_EQ(csv.rfind("case,class,dsc,nsd\n", 0), 0u);
  EXPECT_NE(csv.find("c1,2,1.000000,1.000000"), std::string::npos);
  EXPECT_NE(csv.find("mean,all,1.000000,1.000000"), std::string::npos);
}

TEST(Evaluate, AbsentClassScoresOne) {
  testing_util::TempDir dir;
  LabelMap m({3, 3, 3}, {1, 1, 1});
  m(1, 1, 1) = 1;
  write_volume(m, dir / "a.mvol");
  const auto ev = evaluate(dir.path(), dir.path(), 4);
  EXPECT_EQ(ev.cases[0].per_class_dsc.at(3), 1.0);
  EXPECT_EQ(ev.cases[0].per_class_nsd.at(2), 1.0);
}

TEST(Evaluate, MissingPredictionIsReported) {
  testing_util::TempDir gt, pred;
  write_volume(testing_util::random_labels({2, 2, 2}, 2, 1), gt / "x.mvol");
  EXPECT_EQ(code_of([&] { evaluate(pred.path(), gt.path(), 2); }), ErrorCode::MissingCase);
  testing_util::TempDir empty;
  EXPECT_EQ(code_of([&] { evaluate(pred.path(), empty.path(), 2); }), ErrorCode::MissingCase);
}
