#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

using namespace painterly;
using namespace testing_support;

namespace {

Tensor<double> features(int n, int h, int w, std::uint32_t seed) { return random_image(h, w, seed, n); }

std::map<std::string, Mask> masks_for(const std::string& layer, const Mask& m) { return {{layer, m}}; }

// Plain triple loop G_ij = sum_k F_ik F_jk.
std::vector<double> ref_gram(const std::vector<double>& f, int n, int d) {
  std::vector<double> g(n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < d; ++k) g[i * n + j] += f[i * d + k] * f[j * d + k];
  return g;
}

// Smallest eigenvalue bound via Cholesky with a small shift: succeeds iff
// G + shift*I is positive definite.
bool psd(std::vector<double> g, int n, double shift) {
  for (int i = 0; i < n; ++i) g[i * n + i] += shift;
  for (int j = 0; j < n; ++j) {
    double s = g[j * n + j];
    for (int k = 0; k < j; ++k) s -= g[j * n + k] * g[j * n + k];
    if (s <= 0) return false;
    g[j * n + j] = std::sqrt(s);
    for (int i = j + 1; i < n; ++i) {
      double t = g[i * n + j];
      for (int k = 0; k < j; ++k) t -= g[i * n + k] * g[j * n + k];
      g[i * n + j] = t / g[j * n + j];
    }
  }
  return true;
}

// Central differences of a layer loss with respect to every activation.
template <typename F>
void check_activation_gradient(Tensor<double> f, const Tensor<double>& analytic, F loss, double tol) {
  const double h = 1e-6;
  double scale = 0.0;
  for (double v : analytic.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double keep = f.data()[i];
    f.data()[i] = keep + h;
    const double up = loss(f);
    f.data()[i] = keep - h;
    const double down = loss(f);
    f.data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    ASSERT_LT(rel_err(analytic.data()[i], fd, 1e-6 * scale), tol) << "coordinate " << i;
  }
}

}  // namespace

TEST(Gram, Examples) {
  const std::vector<double> zero(6, 0.0);
  for (double v : gram<double>(zero, 2, 3)) EXPECT_EQ(v, 0.0);
  const std::vector<double> f{1, 0, 2, 0, 1, 1};
  EXPECT_EQ(gram<double>(f, 2, 3), (std::vector<double>{5, 2, 2, 2}));
}

TEST(Gram, SymmetricPsdMatchesTripleLoop) {
  std::mt19937 gen(3);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + trial % 5, d = 1 + trial % 7;
    std::vector<double> f(n * d);
    for (double& v : f) v = nd(gen);
    const auto g = gram<double>(f, n, d);
    const auto r = ref_gram(f, n, d);
    for (int i = 0; i < n; ++i) {
      EXPECT_GE(g[i * n + i], 0.0);
      for (int j = 0; j < n; ++j) {
        EXPECT_EQ(g[i * n + j], g[j * n + i]);
        EXPECT_NEAR(g[i * n + j], r[i * n + j], 1e-12);
      }
    }
    EXPECT_TRUE(psd(g, n, 1e-9));
  }
}

TEST(ContentLoss, HandValue) {
  Tensor<double> o(2, 1, 3), t(2, 1, 3);
  o.fill(1.0);
  const auto mask = make_mask(1, 3, true);
  const auto r = content_loss_and_grad<double>({{"conv1_1", o}}, {{"conv1_1", t}}, {{"conv1_1", 1.0}},
                                               masks_for("conv1_1", mask));
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  for (double g : r.grads.at("conv1_1").data()) EXPECT_DOUBLE_EQ(g, 1.0 / 6.0);
  const auto r2 = content_loss_and_grad<double>({{"conv1_1", o}}, {{"conv1_1", t}}, {{"conv1_1", 2.0}},
                                                masks_for("conv1_1", mask));
  EXPECT_DOUBLE_EQ(r2.value, 1.0);
  EXPECT_DOUBLE_EQ(r2.grads.at("conv1_1").data()[0], 2.0 / 6.0);
}

TEST(ContentLoss, ZeroAtTargetAndMaskedOutside) {
  const auto f = features(3, 6, 6, 1);
  const auto mask = rect_mask(6, 6, 1, 1, 4, 5);
  const auto same = content_loss_and_grad<double>({{"conv1_1", f}}, {{"conv1_1", f}}, {{"conv1_1", 1.0}},
                                                  masks_for("conv1_1", mask));
  EXPECT_EQ(same.value, 0.0);
  for (double g : same.grads.at("conv1_1").data()) EXPECT_EQ(g, 0.0);

  const auto other = features(3, 6, 6, 2);
  const auto r = content_loss_and_grad<double>({{"conv1_1", f}}, {{"conv1_1", other}}, {{"conv1_1", 1.0}},
                                               masks_for("conv1_1", mask));
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 6; ++x) {
        if (!mask(0, y, x)) EXPECT_EQ(r.grads.at("conv1_1")(c, y, x), 0.0);
      }
    }
  }
  EXPECT_THROW(content_loss_and_grad<double>({{"conv1_1", f}}, {{"conv1_1", f}}, {{"conv1_1", 1.0}},
                                             masks_for("conv1_1", make_mask(6, 6))),
               ConfigError);
}

TEST(ContentLoss, FiniteDifferences) {
  const auto t = features(4, 8, 8, 2);
  const auto mask = rect_mask(8, 8, 1, 2, 7, 8);
  const LayerWeights a{{"conv1_1", 0.7}};
  const auto loss = [&](const Tensor<double>& f) {
    return content_loss_and_grad<double>({{"conv1_1", f}}, {{"conv1_1", t}}, a, masks_for("conv1_1", mask)).value;
  };
  const auto f = features(4, 8, 8, 3);
  const auto r = content_loss_and_grad<double>({{"conv1_1", f}}, {{"conv1_1", t}}, a, masks_for("conv1_1", mask));
  check_activation_gradient(f, r.grads.at("conv1_1"), loss, 1e-4);
}

TEST(StyleLoss, ScalarGramCaseRaw) {
  Tensor<double> o(1, 1, 2);
  o(0, 0, 0) = 1;
  o(0, 0, 1) = 2;
  const std::map<std::string, GramTarget> t{{"conv1_1", {1, 1, {4.0}}}};
  const auto r = style_loss_gram<double>({{"conv1_1", o}}, t, {{"conv1_1", 1.0}},
                                         masks_for("conv1_1", make_mask(1, 2, true)), false);
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  // 2 (G - T) F
  EXPECT_DOUBLE_EQ(r.grads.at("conv1_1")(0, 0, 0), 2.0);
  EXPECT_DOUBLE_EQ(r.grads.at("conv1_1")(0, 0, 1), 4.0);
}

TEST(StyleLoss, ZeroAtOwnGram) {
  const auto f = features(3, 5, 5, 9);
  const auto mask = rect_mask(5, 5, 0, 1, 4, 5);
  for (bool normalize : {false, true}) {
    const auto data = gather_masked(f, mask);
    const auto count = mask_count(mask);
    auto g = gram<double>(data, 3, static_cast<int>(count));
    if (normalize) {
      for (double& v : g) v /= static_cast<double>(count);
    }
    const std::map<std::string, GramTarget> t{{"conv1_1", {3, count, g}}};
    const auto r = style_loss_gram<double>({{"conv1_1", f}}, t, {{"conv1_1", 1.0}}, masks_for("conv1_1", mask), normalize);
    EXPECT_NEAR(r.value, 0.0, 1e-20);
  }
}

TEST(StyleLoss, FiniteDifferences) {
  const auto mask = rect_mask(8, 8, 0, 0, 8, 6);
  for (bool normalize : {true, false}) {
    const std::vector<double> target_vectors = gather_masked(features(5, 8, 8, 11), make_mask(8, 8, true));
    GramTarget t{5, 64, gram<double>(target_vectors, 5, 64)};
    if (normalize) {
      for (double& v : t.gram) v /= 64.0;
    }
    const std::map<std::string, GramTarget> targets{{"conv2_1", t}};
    const LayerWeights b{{"conv2_1", 0.3}};
    const auto loss = [&](const Tensor<double>& f) {
      return style_loss_gram<double>({{"conv2_1", f}}, targets, b, masks_for("conv2_1", mask), normalize).value;
    };
    const auto f = features(5, 8, 8, 12);
    const auto r = style_loss_gram<double>({{"conv2_1", f}}, targets, b, masks_for("conv2_1", mask), normalize);
    check_activation_gradient(f, r.grads.at("conv2_1"), loss, 1e-4);
  }
}

TEST(StyleTargets, InjectiveMappingSameInBothModes) {
  const auto fs = features(3, 4, 4, 1);
  LayerMapping m{{2, 3}, {4, 4}, {5, 0, 15, kUnmapped, 7, 2}};
  const MappingField field{{{"conv1_1", m}}, ""};
  const auto a = build_style_targets<double>({{"conv1_1", fs}}, field, TargetMode::all);
  const auto u = build_style_targets<double>({{"conv1_1", fs}}, field, TargetMode::unique);
  EXPECT_EQ(a.gram.at("conv1_1").count, 5u);
  EXPECT_EQ(a.gram.at("conv1_1").gram, u.gram.at("conv1_1").gram);
  EXPECT_EQ(a.gram.at("conv1_1").count, u.gram.at("conv1_1").count);
}

TEST(StyleTargets, TotalCollapseGathersOneVector) {
  const auto fs = features(2, 4, 4, 1);
  LayerMapping m{{3, 3}, {4, 4}, std::vector<std::int32_t>(9, 3)};
  const MappingField field{{{"conv1_1", m}}, ""};
  const auto u = build_style_targets<double>({{"conv1_1", fs}}, field, TargetMode::unique, false);
  const auto& g = u.gram.at("conv1_1");
  EXPECT_EQ(g.count, 1u);
  const double a = fs(0, 0, 3), b = fs(1, 0, 3);
  EXPECT_DOUBLE_EQ(g.gram[0], a * a);
  EXPECT_DOUBLE_EQ(g.gram[1], a * b);
  EXPECT_DOUBLE_EQ(g.gram[3], b * b);
  const auto all = build_style_targets<double>({{"conv1_1", fs}}, field, TargetMode::all, false);
  EXPECT_EQ(all.gram.at("conv1_1").count, 9u);
  EXPECT_DOUBLE_EQ(all.gram.at("conv1_1").gram[0], 9 * a * a);
}

TEST(StyleTargets, UniqueCountMatchesSetOracle) {
  std::mt19937 gen(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto fs = features(3, 5, 5, static_cast<std::uint32_t>(trial));
    std::uniform_int_distribution<int> pick(0, 24);
    LayerMapping m{{4, 4}, {5, 5}, std::vector<std::int32_t>(16)};
    std::set<int> distinct;
    std::vector<int> order;
    for (auto& t : m.target) {
      t = trial % 5 == 0 && (&t - m.target.data()) % 3 == 0 ? kUnmapped : pick(gen) % (1 + trial % 25);
      if (t == kUnmapped) continue;
      if (distinct.insert(t).second) order.push_back(t);
    }
    const MappingField field{{{"conv1_1", m}}, ""};
    const auto u = build_style_targets<double>({{"conv1_1", fs}}, field, TargetMode::unique, false);
    const auto a = build_style_targets<double>({{"conv1_1", fs}}, field, TargetMode::all, false);
    const auto& gu = u.gram.at("conv1_1");
    EXPECT_EQ(gu.count, distinct.size());
    EXPECT_LE(gu.count, a.gram.at("conv1_1").count);
    EXPECT_EQ(gu.count == a.gram.at("conv1_1").count, distinct.size() == m.mapped_count());
    // Gram of the distinct vectors
    std::vector<double> v;
    for (int c = 0; c < 3; ++c)
      for (int q : order) v.push_back(fs.plane(c)[q]);
    const auto ref = ref_gram(v, 3, static_cast<int>(order.size()));
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(gu.gram[k], ref[k], 1e-12);
    EXPECT_TRUE(psd(gu.gram, 3, 1e-9));
    EXPECT_TRUE(psd(a.gram.at("conv1_1").gram, 3, 1e-9));
    // histogram targets keep the full multiset
    EXPECT_EQ(u.histogram.at("conv1_1").sorted[0].size(), m.mapped_count());
  }
}

TEST(Histmatch, Examples) {
  const std::vector<double> o{3, 1, 2};
  EXPECT_EQ(histmatch(o, std::vector<double>{10, 20, 30}), (std::vector<double>{30, 10, 20}));
  EXPECT_EQ(histmatch(o, std::vector<double>{30, 10, 20}), (std::vector<double>{30, 10, 20}));
  const std::vector<double> c(5, 7.0);
  for (double v : histmatch(o, c)) EXPECT_EQ(v, 7.0);
  EXPECT_THROW(histmatch(std::vector<double>{}, c), ConfigError);
}

TEST(Histmatch, SameMultisetIsIdentity) {
  std::mt19937 gen(1);
  std::uniform_int_distribution<int> u(0, 9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + trial % 17);
    for (double& x : v) x = u(gen);  // plenty of ties
    auto s = v;
    std::shuffle(s.begin(), s.end(), gen);
    EXPECT_EQ(histmatch(v, s), v);
  }
}

TEST(Histmatch, MonotoneAndRangePreserving) {
  std::mt19937 gen(2);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + trial % 23), s(1 + (trial * 7) % 31);
    for (double& x : v) x = nd(gen);
    for (double& x : s) x = 5 + nd(gen);
    const auto r = histmatch(v, s);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_GE(r[i], *lo);
      EXPECT_LE(r[i], *hi);
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (v[i] < v[j]) EXPECT_LE(r[i], r[j]);
      }
    }
  }
}

TEST(HistogramLoss, HandValue) {
  Tensor<double> f(1, 1, 2);
  f(0, 0, 1) = 1.0;
  for (double gamma : {1.0, 3.0}) {
    const std::map<std::string, HistogramTarget> t{{"conv1_1", {{{1.0, 1.0}}}}};
    const auto r = histogram_loss_and_grad<double>({{"conv1_1", f}}, t, {{"conv1_1", gamma}},
                                                   masks_for("conv1_1", make_mask(1, 2, true)));
    EXPECT_DOUBLE_EQ(r.value, gamma);
    EXPECT_DOUBLE_EQ(r.grads.at("conv1_1")(0, 0, 0), -2.0 * gamma);
    EXPECT_DOUBLE_EQ(r.grads.at("conv1_1")(0, 0, 1), 0.0);
  }
}

TEST(HistogramLoss, ZeroWhenHistogramsMatch) {
  const auto f = features(3, 4, 4, 5);
  const auto mask = rect_mask(4, 4, 0, 0, 3, 4);
  HistogramTarget t;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v;
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 4; ++x) v.push_back(f(c, y, x));
    std::sort(v.begin(), v.end());
    t.sorted.push_back(v);
  }
  const auto r = histogram_loss_and_grad<double>({{"conv1_1", f}}, {{"conv1_1", t}}, {{"conv1_1", 1.0}},
                                                 masks_for("conv1_1", mask));
  EXPECT_EQ(r.value, 0.0);
}

TEST(HistogramLoss, FiniteDifferences) {
  const auto mask = rect_mask(8, 8, 1, 0, 8, 8);
  HistogramTarget t;
  std::mt19937 gen(4);
  std::normal_distribution<double> nd(0.5, 0.3);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v(40);
    for (double& x : v) x = nd(gen);
    std::sort(v.begin(), v.end());
    t.sorted.push_back(v);
  }
  const std::map<std::string, HistogramTarget> targets{{"conv1_1", t}};
  const auto loss = [&](const Tensor<double>& f) {
    return histogram_loss_and_grad<double>({{"conv1_1", f}}, targets, {{"conv1_1", 0.5}}, masks_for("conv1_1", mask)).value;
  };
  const auto f = features(3, 8, 8, 6);
  const auto r = histogram_loss_and_grad<double>({{"conv1_1", f}}, targets, {{"conv1_1", 0.5}}, masks_for("conv1_1", mask));
  check_activation_gradient(f, r.grads.at("conv1_1"), loss, 1e-4);
}

TEST(TvLoss, Examples) {
  Image c(3, 5, 4);
  c.fill(0.3);
  EXPECT_EQ(tv_loss_and_grad(c, make_mask(5, 4, true)), 0.0);
  Image d(1, 2, 2);
  d(0, 0, 1) = 1;
  d(0, 1, 0) = 1;
  EXPECT_EQ(tv_loss_and_grad(d, make_mask(2, 2, true)), 4.0);
  // pairs leaving the region are skipped
  Mask m = make_mask(2, 2, true);
  m(0, 1, 1) = 0;
  EXPECT_EQ(tv_loss_and_grad(d, m), 2.0);
}

TEST(TvLoss, FiniteDifferences) {
  const auto img = random_image(6, 6, 7);
  const auto region = rect_mask(6, 6, 1, 0, 6, 5);
  Image grad;
  tv_loss_and_grad(img, region, &grad);
  for (std::size_t i = 0; i < img.size(); ++i) {
    Image up = img, down = img;
    up.data()[i] += 1e-5;
    down.data()[i] -= 1e-5;
    const double fd = (tv_loss_and_grad(up, region) - tv_loss_and_grad(down, region)) / 2e-5;
    EXPECT_LT(rel_err(grad.data()[i], fd, 1e-6), 1e-4) << i;
  }
}

// ---------------------------------------------------------------------------
// Composed totals on a two-block toy network.

namespace {

void check_total_gradient(int pass, std::uint32_t seed) {
  const Backbone<double> net(toy_bank(40 + seed, 4));
  const auto input = random_image(16, 16, 1 + seed);
  const auto style = random_image(16, 16, 2 + seed);
  const auto mask = rect_mask(16, 16, 3, 2, 13, 12);
  const PassProblem<double> problem(input, input, mask, style, toy_pass(pass), net, 2);
  const auto x = random_image(16, 16, 3 + seed);
  Image grad;
  const auto at = problem.evaluate(x, &grad);
  EXPECT_GT(at.content, 0.0);
  EXPECT_GT(at.style, 0.0);
  if (pass == 2) {
    EXPECT_GT(at.histogram, 0.0);
    EXPECT_GT(at.tv, 0.0);
  }
  double scale = 0.0;
  for (double v : grad.data()) scale = std::max(scale, std::abs(v));
  const double h = 1e-5;
  int worst = -1;
  double worst_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Image up = x, down = x;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double fd = (problem.evaluate(up).total - problem.evaluate(down).total) / (2 * h);
    const double err = rel_err(grad.data()[i], fd, 1e-6 * scale);
    if (err > worst_err) worst_err = err, worst = static_cast<int>(i);
  }
  EXPECT_LT(worst_err, 1e-3) << "pass " << pass << " coordinate " << worst;
}

}  // namespace

TEST(TotalLoss, PassOneGradientMatchesFiniteDifferences) { check_total_gradient(1, 0); }
TEST(TotalLoss, PassTwoGradientMatchesFiniteDifferences) { check_total_gradient(2, 0); }

TEST(TotalLoss, ZeroWhenOutputMatchesEverything) {
  const Backbone<double> net(toy_bank(4, 4));
  const auto img = random_image(16, 16, 9);
  auto cfg = toy_pass(2);
  cfg.tv_weight = 0.0;
  const PassProblem<double> problem(img, img, make_mask(16, 16, true), img, cfg, net, 0);
  Image grad;
  const auto r = problem.evaluate(img, &grad);
  EXPECT_EQ(r.total, 0.0);
  for (double g : grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(TotalLoss, WeightCollapseLeavesContent) {
  const Backbone<double> net(toy_bank(4, 4));
  auto cfg = toy_pass(2);
  cfg.style_weight = cfg.histogram_weight = cfg.tv_weight = 0.0;
  const auto mask = rect_mask(16, 16, 2, 2, 14, 14);
  const PassProblem<double> problem(random_image(16, 16, 1), random_image(16, 16, 1), mask, random_image(16, 16, 2), cfg,
                                    net, 2);
  const auto r = problem.evaluate(random_image(16, 16, 3));
  EXPECT_GT(r.content, 0.0);
  EXPECT_EQ(r.total, r.content);
}

TEST(TotalLoss, HomogeneousInEachWeight) {
  const Backbone<double> net(toy_bank(4, 4));
  const auto mask = rect_mask(16, 16, 2, 2, 14, 14);
  const auto in = random_image(16, 16, 1), st = random_image(16, 16, 2), x = random_image(16, 16, 3);
  const auto base_cfg = toy_pass(2);
  const auto base = PassProblem<double>(in, in, mask, st, base_cfg, net, 2).evaluate(x);
  for (int which = 0; which < 3; ++which) {
    auto cfg = base_cfg;
    double* w = which == 0 ? &cfg.style_weight : which == 1 ? &cfg.histogram_weight : &cfg.tv_weight;
    const double term = which == 0 ? base.style : which == 1 ? base.histogram : base.tv;
    *w *= 2.5;
    const auto r = PassProblem<double>(in, in, mask, st, cfg, net, 2).evaluate(x);
    EXPECT_NEAR(r.total - base.total, 1.5 * (*w / 2.5) * term, 1e-9 * base.total) << which;
  }
}

TEST(TotalLoss, EveryTermNonNegative) {
  const Backbone<double> net(toy_bank(5, 4));
  for (std::uint32_t seed = 0; seed < 5; ++seed) {
    const auto mask = rect_mask(16, 16, 1 + seed, 2, 15, 14 - seed);
    const auto in = random_image(16, 16, seed), st = random_image(16, 16, seed + 10);
    const auto r = PassProblem<double>(in, in, mask, st, toy_pass(2), net, 2).evaluate(random_image(16, 16, seed + 20));
    EXPECT_GE(r.content, 0.0);
    EXPECT_GE(r.style, 0.0);
    EXPECT_GE(r.histogram, 0.0);
    EXPECT_GE(r.tv, 0.0);
  }
}
