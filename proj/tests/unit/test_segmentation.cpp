#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "colabel/segmentation.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace colabel;
using namespace colabel::testing;
using ad::Tensor;

namespace {

// Half-foreground 8x8 target (left four columns), as one-hot [1,2,8,8].
Tensor<double> half_target() {
    Tensor<double> t({1, 2, 8, 8});
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) t[(c < 4 ? 1 : 0) * 64 + r * 8 + c] = 1.0;
    return t;
}

double eval_loss(const Tensor<double>& probs, const Tensor<double>& target,
                 ad::NodeId (*fn)(GraphD&, ad::NodeId, ad::NodeId, const SegLossConfig&), const SegLossConfig& cfg) {
    GraphD g(ad::GradMode::disabled);
    return g.value(fn(g, g.constant(probs), g.constant(target), cfg))[0];
}

double dice_of(const Tensor<double>& p, const Tensor<double>& t, const SegLossConfig& cfg = {}) {
    return eval_loss(p, t, &dice_loss<double>, cfg);
}

double seg_of(const Tensor<double>& p, const Tensor<double>& t, const SegLossConfig& cfg = {}) {
    return eval_loss(p, t, &seg_loss<double>, cfg);
}

double ce_of(const Tensor<double>& p, const Tensor<double>& t) {
    GraphD g(ad::GradMode::disabled);
    return g.value(ce_loss(g, g.constant(p), g.constant(t)))[0];
}

Tensor<double> random_probs(Rng& rng, int b, int h, int w) {
    Tensor<double> p({b, 2, h, w});
    std::uniform_real_distribution<double> u(0.01, 0.99);
    const int plane = h * w;
    for (int n = 0; n < b; ++n)
        for (int i = 0; i < plane; ++i) {
            const double a = u(rng);
            p[(n * 2) * plane + i] = 1 - a;
            p[(n * 2 + 1) * plane + i] = a;
        }
    return p;
}

Tensor<double> random_onehot(Rng& rng, int b, int h, int w) {
    Tensor<double> t({b, 2, h, w});
    const int plane = h * w;
    std::bernoulli_distribution fg(0.4);
    for (int n = 0; n < b; ++n)
        for (int i = 0; i < plane; ++i) t[(n * 2 + (fg(rng) ? 1 : 0)) * plane + i] = 1.0;
    return t;
}

} // namespace

TEST_SUITE("segmentation") {

TEST_CASE("config defaults and validation") {
    const UNetConfig u;
    CHECK(u.depth == 4);
    CHECK(u.base_channels == 16);
    CHECK(u.classes == 2);
    const SegLossConfig l;
    CHECK(l.gamma == 1.0);
    CHECK(l.dice_eps == 1e-5);
    CHECK_FALSE(l.squared_dice_denominator);

    UNetConfig bad;
    bad.depth = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    SegLossConfig badl;
    badl.gamma = -0.5;
    CHECK_THROWS_AS(badl.validate(), ConfigError);
    badl = {};
    badl.dice_eps = 0.0;
    CHECK_THROWS_AS(badl.validate(), ConfigError);
}

TEST_CASE("fresh network outputs valid probabilities") {
    UNetConfig cfg;
    cfg.depth = 3;
    cfg.base_channels = 4;
    SegmentationNet net(cfg, 5);
    Rng rng(1);
    const auto x = random_tensor({2, 1, 16, 16}, rng, -2, 2).cast<float>();
    const auto p = seg_forward(net, x);
    REQUIRE(p.shape() == ad::Shape{2, 2, 16, 16});
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 256; ++i) {
            const float a = p[(n * 2) * 256 + i], b = p[(n * 2 + 1) * 256 + i];
            CHECK(a > 0.0f);
            CHECK(a < 1.0f);
            CHECK(std::abs(a + b - 1.0f) < 1e-6f);
        }
}

TEST_CASE("duplicated inputs give identical outputs") {
    UNetConfig cfg;
    cfg.depth = 3;
    cfg.base_channels = 4;
    SegmentationNet net(cfg, 6);
    Rng rng(2);
    const auto one = random_tensor({1, 1, 16, 16}, rng).cast<float>();
    Tensor<float> two({2, 1, 16, 16});
    std::copy(one.data().begin(), one.data().end(), two.data().begin());
    std::copy(one.data().begin(), one.data().end(), two.data().begin() + 256);
    const auto p = seg_forward(net, two);
    CHECK(std::equal(p.data().begin(), p.data().begin() + 512, p.data().begin() + 512));
    const auto q = seg_forward(net, one);
    CHECK(std::equal(q.data().begin(), q.data().end(), p.data().begin()));
}

TEST_CASE("network input checks") {
    UNetConfig cfg;
    cfg.depth = 3;
    cfg.base_channels = 2;
    SegmentationNet net(cfg, 1);
    CHECK_THROWS_AS(seg_forward(net, Tensor<float>({1, 1, 10, 16})), DimensionError);
    CHECK_THROWS_AS(seg_forward(net, Tensor<float>({1, 2, 16, 16})), DimensionError);
}

TEST_CASE("parameters survive state export, and float and double nets agree") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 3;
    SegmentationNet a(cfg, 10), b(cfg, 11);
    b.body().load_state(a.body().state());
    Rng rng(3);
    const auto x = random_tensor({1, 1, 8, 8}, rng).cast<float>();
    const auto pa = seg_forward(a, x), pb = seg_forward(b, x);
    CHECK(std::equal(pa.data().begin(), pa.data().end(), pb.data().begin()));

    auto d = a.cast<double>();
    GraphD g(ad::GradMode::disabled);
    const auto& pd = g.value(d.forward(g, g.constant(x.cast<double>())));
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(std::abs(pd[i] - pa[i]) < 1e-5);

    UNetConfig other = cfg;
    other.base_channels = 4;
    SegmentationNet c(other, 1);
    CHECK_THROWS_AS(c.body().load_state(a.body().state()), FormatError);
}

TEST_CASE("dice loss") {
    const auto t = half_target();
    SUBCASE("perfect prediction") {
        CHECK(dice_of(t, t) < 1e-4);
        SegLossConfig sq;
        sq.squared_dice_denominator = true;
        CHECK(dice_of(t, t, sq) < 1e-4);
    }
    SUBCASE("uniform probabilities on a half-foreground target") {
        Tensor<double> p({1, 2, 8, 8}, 0.5);
        // Per class: sum(p t) = 16, sum(p) = 32, sum(t) = 32, sum(p^2) = 16.
        const double eps = 1e-5;
        const double linear = 1.0 - (2 * 16 + eps) / (32 + 32 + eps);
        const double squared = 1.0 - (2 * 16 + eps) / (16 + 32 + eps);
        CHECK(dice_of(p, t) == doctest::Approx(linear).epsilon(1e-12));
        CHECK(linear == doctest::Approx(0.5).epsilon(1e-6));
        SegLossConfig sq;
        sq.squared_dice_denominator = true;
        CHECK(dice_of(p, t, sq) == doctest::Approx(squared).epsilon(1e-12));
        CHECK(std::abs(squared - 1.0 / 3.0) < 1e-6);
    }
    SUBCASE("all background, predicted with certainty") {
        Tensor<double> bg({1, 2, 8, 8});
        for (int i = 0; i < 64; ++i) bg[i] = 1.0;
        CHECK(dice_of(bg, bg) < 1e-4);
    }
    SUBCASE("target must be one-hot") {
        Tensor<double> bad = t;
        bad[3] = 0.5;
        CHECK_THROWS_AS(dice_of(t, bad), UsageError);
        Tensor<double> both = t;
        both[64 + 60] = 1.0;
        CHECK_THROWS_AS(dice_of(t, both), UsageError);
    }
    SUBCASE("invariant to pixel order") {
        Rng rng(4);
        const auto p = random_probs(rng, 1, 8, 8), tt = random_onehot(rng, 1, 8, 8);
        std::vector<int> perm(64);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor<double> pp(p.shape()), tp(tt.shape());
        for (int k = 0; k < 2; ++k)
            for (int i = 0; i < 64; ++i) {
                pp[k * 64 + i] = p[k * 64 + perm[i]];
                tp[k * 64 + i] = tt[k * 64 + perm[i]];
            }
        CHECK(dice_of(pp, tp) == doctest::Approx(dice_of(p, tt)).epsilon(1e-12));
    }
}

TEST_CASE("cross-entropy loss") {
    const auto t = half_target();
    CHECK(ce_of(t, t) < 2e-7);
    CHECK(ce_of(Tensor<double>({1, 2, 8, 8}, 0.5), t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(5);
    const auto p = random_probs(rng, 2, 6, 5), tt = random_onehot(rng, 2, 6, 5);
    double total = 0.0;
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 30; ++i)
            for (int k = 0; k < 2; ++k) {
                const double pk = std::clamp(p[(n * 2 + k) * 30 + i], 1e-7, 1 - 1e-7);
                total -= tt[(n * 2 + k) * 30 + i] * std::log(pk);
            }
    CHECK(std::abs(ce_of(p, tt) - total / 60.0) < 1e-6);
}

TEST_CASE("combined segmentation loss") {
    const auto t = half_target();
    const Tensor<double> uniform({1, 2, 8, 8}, 0.5);
    SegLossConfig g0;
    g0.gamma = 0.0;
    CHECK(seg_of(uniform, t, g0) == dice_of(uniform, t));
    CHECK(seg_of(t, t) < 1e-4);
    SegLossConfig sq;
    sq.squared_dice_denominator = true;
    CHECK(std::abs(seg_of(uniform, t, sq) - (1.0 / 3.0 + std::log(2.0))) < 1e-4);
    CHECK(std::abs(seg_of(uniform, t) - (0.5 + std::log(2.0))) < 1e-4);

    Rng rng(6);
    for (int i = 0; i < 50; ++i) {
        const auto p = random_probs(rng, 2, 4, 4), tt = random_onehot(rng, 2, 4, 4);
        CHECK(seg_of(p, tt) >= 0.0);
    }
}

TEST_CASE("segmentation loss gradient through a small network") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    Rng rng(7);
    for (int i = 0; i < 5; ++i) {
        BasicSegmentationNet<double> net(cfg, 100 + i);
        const auto x = random_tensor({1, 1, 8, 8}, rng);
        const auto target = random_onehot(rng, 1, 8, 8);
        const auto res = check_gradients(net.body().parameter_tensors(), [&](GraphD& g) {
            return seg_loss(g, net.forward(g, g.constant(x)), g.constant(target));
        });
        INFO("rel error " << res.rel_error << ", checked " << res.checked << ", skipped " << res.skipped);
        CHECK(res.rel_error < 1e-4);
        CHECK(res.checked_fraction() > 0.5);
    }
}

TEST_CASE("batch assembly") {
    std::vector<Image2D> images{Image2D(4, 4, 1.0f), Image2D(4, 4, 2.0f)};
    const auto x = stack_images(images);
    CHECK(x.shape() == ad::Shape{2, 1, 4, 4});
    CHECK(x[16] == 2.0f);
    std::vector<Mask2D> masks{Mask2D(4, 4, 0), Mask2D(4, 4, 1)};
    const auto t = one_hot(masks);
    CHECK(t.shape() == ad::Shape{2, 2, 4, 4});
    CHECK(t[0] == 1.0f);
    CHECK(t[16] == 0.0f);
    CHECK(t[32] == 0.0f);
    CHECK(t[48] == 1.0f);
    images.emplace_back(5, 4);
    CHECK_THROWS_AS(stack_images(images), DimensionError);
}

}
