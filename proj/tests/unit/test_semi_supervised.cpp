#include <algorithm>
#include <cmath>

#include "doctest.h"

#include "colabel/semi_supervised.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace colabel;
using namespace colabel::testing;
using ad::Tensor;

namespace {

std::vector<float> flat_params(const SegmentationNet& net) {
    std::vector<float> out;
    for (const auto& t : net.body().state()) out.insert(out.end(), t.tensor.data().begin(), t.tensor.data().end());
    return out;
}

UNetConfig small_unet() {
    UNetConfig u;
    u.depth = 3;
    u.base_channels = 8;
    return u;
}

SemiTrainConfig small_semi(int warmup, int total) {
    SemiTrainConfig c;
    c.warmup_epochs = warmup;
    c.total_epochs = total;
    c.lr = {1e-3, 30, 0.5};
    c.seed = 1;
    return c;
}

double mean_offcentre_dice(SegmentationNet& net, const PhantomData& d) {
    double total = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < d.volumes.size(); ++i) {
        const auto masks = predict_slices(net, d.volumes[i]);
        for (int s = 0; s < d.volumes[i].depth(); ++s) {
            if (s == d.centrals[i].index) continue;
            total += dice2d(masks[s], d.truth[i].labels.slice(s));
            ++n;
        }
    }
    return total / n;
}

Tensor<float> two_class(std::initializer_list<float> fg) {
    Tensor<float> p({2, 1, static_cast<int>(fg.size())});
    int i = 0;
    for (float v : fg) {
        p[i] = 1.0f - v;
        p[fg.size() + i] = v;
        ++i;
    }
    return p;
}

} // namespace

TEST_SUITE("semi_supervised") {

TEST_CASE("pseudo label picks the most probable class") {
    CHECK(pseudo_label(two_class({0.7f}))(0, 0) == 1);
    CHECK(pseudo_label(two_class({0.3f}))(0, 0) == 0);
    CHECK(pseudo_label(two_class({0.5f}))(0, 0) == 0);

    Tensor<float> three({3, 1, 3}, std::vector<float>{0.2f, 0.5f, 0.1f, 0.5f, 0.2f, 0.1f, 0.3f, 0.3f, 0.8f});
    const Mask2D classes = class_map(three);
    CHECK(classes(0, 0) == 1);
    CHECK(classes(0, 1) == 0);
    CHECK(classes(0, 2) == 2);
    const Mask2D fg = pseudo_label(three);
    CHECK(fg(0, 0) == 1);
    CHECK(fg(0, 2) == 0);
}

TEST_CASE("pseudo labels match the argmax reference and are one-hot") {
    const auto rep = label_algebra_suite(100, 21);
    INFO(describe(rep));
    CHECK(rep.argmax_cases == 100);
    CHECK(rep.argmax_mismatches == 0);

    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        auto probs = random_tensor({2, 6, 7}, rng, 0, 1).cast<float>();
        for (int p = 0; p < 42; ++p) probs[42 + p] = 1.0f - probs[p];
        const Mask2D fg = pseudo_label(probs), cls = class_map(probs);
        for (std::size_t p = 0; p < fg.size(); ++p) {
            const int bg = cls.values()[p] == 0;
            CHECK(bg + fg.values()[p] == 1);
        }
        // Squaring and renormalising keeps every per-pixel ranking.
        Tensor<float> sq = probs;
        for (int p = 0; p < 42; ++p) {
            const float a = probs[p] * probs[p], b = probs[42 + p] * probs[42 + p];
            sq[p] = a / (a + b);
            sq[42 + p] = b / (a + b);
        }
        CHECK(pseudo_label(sq) == fg);
    }
}

TEST_CASE("batched pseudo labels") {
    Tensor<float> probs({2, 2, 1, 2}, std::vector<float>{0.9f, 0.2f, 0.1f, 0.8f, 0.4f, 0.5f, 0.6f, 0.5f});
    const auto masks = pseudo_labels(probs);
    REQUIRE(masks.size() == 2);
    CHECK(masks[0](0, 0) == 0);
    CHECK(masks[0](0, 1) == 1);
    CHECK(masks[1](0, 0) == 1);
    CHECK(masks[1](0, 1) == 0);
    CHECK_THROWS_AS(pseudo_labels(Tensor<float>({2, 2})), DimensionError);
}

TEST_CASE("semi config") {
    const SemiTrainConfig c;
    CHECK(c.warmup_epochs == 50);
    CHECK(c.total_epochs == 100);
    CHECK(c.batch_size == 4);
    CHECK(c.unlabeled_weight == 1.0);
    CHECK(c.labeled_per_batch() == 2);
    CHECK(c.unlabeled_per_batch() == 2);
    CHECK(c.unlabeled_weight_at(50) == 1.0);

    SemiTrainConfig ramp = c;
    ramp.unlabeled_ramp_epochs = 10;
    CHECK(ramp.unlabeled_weight_at(50) == doctest::Approx(0.1));
    CHECK(ramp.unlabeled_weight_at(59) == doctest::Approx(1.0));

    SemiTrainConfig one = c;
    one.batch_size = 1;
    CHECK(one.labeled_per_batch() == 1);
    CHECK(one.unlabeled_per_batch() == 0);

    SemiTrainConfig bad = c;
    bad.warmup_epochs = 101;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.unlabeled_weight = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("warm-up training") {
    const auto data = make_phantom_data(small_phantom(6, 3));
    const auto labeled = data.labeled();

    SUBCASE("zero epochs leave the network unchanged") {
        SegmentationNet net(small_unet(), 4);
        const auto before = flat_params(net);
        ad::AdamState<float> adam;
        CHECK(warmup_train(net, adam, labeled, small_semi(0, 10)).empty());
        CHECK(flat_params(net) == before);
    }
    SUBCASE("empty labeled set") {
        SegmentationNet net(small_unet(), 4);
        ad::AdamState<float> adam;
        CHECK_THROWS_AS(warmup_train(net, adam, {}, small_semi(5, 10)), UsageError);
    }
    SUBCASE("loss halves and central slices are learned") {
        SegmentationNet net(small_unet(), 4);
        ad::AdamState<float> adam;
        const auto trace = warmup_train(net, adam, labeled, small_semi(50, 50));
        REQUIRE(trace.size() == 50);
        CHECK(trace.back() < 0.5 * trace.front());
        double total = 0.0;
        for (std::size_t i = 0; i < data.volumes.size(); ++i) {
            const auto masks = predict_slices(net, data.volumes[i]);
            total += dice2d(masks[data.centrals[i].index], data.centrals[i].mask);
        }
        CHECK(total / data.volumes.size() > 0.8);
    }
    SUBCASE("a single labeled slice is overfitted") {
        SegmentationNet net(small_unet(), 5);
        ad::AdamState<float> adam;
        auto cfg = small_semi(60, 60);
        cfg.augment = false;
        const std::vector<LabeledSlice> one{labeled[0]};
        CHECK(warmup_train(net, adam, one, cfg).back() < 0.05);
    }
}

TEST_CASE("split training equals uninterrupted training") {
    const auto data = make_phantom_data(small_phantom(4, 3));
    const auto labeled = data.labeled();
    const auto unlabeled = data.unlabeled();
    const auto cfg = small_semi(3, 6);

    SegmentationNet a(small_unet(), 7), b(small_unet(), 7);
    ad::AdamState<float> adam_a, adam_b;
    warmup_train(a, adam_a, labeled, cfg);
    semi_train(a, adam_a, labeled, unlabeled, cfg);

    auto part = cfg;
    part.warmup_epochs = 2;
    part.total_epochs = 2;
    warmup_train(b, adam_b, labeled, part);
    warmup_train(b, adam_b, labeled, cfg, EpochHooks{2, {}});
    part = cfg;
    part.total_epochs = 5;
    semi_train(b, adam_b, labeled, unlabeled, part);
    semi_train(b, adam_b, labeled, unlabeled, cfg, EpochHooks{5, {}});
    CHECK(flat_params(b) == flat_params(a));
}

TEST_CASE("semi-supervised training") {
    const auto data = make_phantom_data(small_phantom(4, 3));
    const auto labeled = data.labeled();
    const auto unlabeled = data.unlabeled();

    SUBCASE("same seed, same parameters") {
        SegmentationNet a(small_unet(), 8), b(small_unet(), 8);
        ad::AdamState<float> adam_a, adam_b;
        semi_train(a, adam_a, labeled, unlabeled, small_semi(0, 3));
        semi_train(b, adam_b, labeled, unlabeled, small_semi(0, 3));
        CHECK(flat_params(a) == flat_params(b));
    }
    SUBCASE("zero unlabeled weight reduces to labeled-only training") {
        auto cfg = small_semi(0, 3);
        cfg.unlabeled_weight = 0.0;
        SegmentationNet a(small_unet(), 8), b(small_unet(), 8);
        ad::AdamState<float> adam_a, adam_b;
        semi_train(a, adam_a, labeled, unlabeled, cfg);
        semi_train(b, adam_b, labeled, {}, cfg);
        CHECK(flat_params(a) == flat_params(b));

        cfg.unlabeled_weight = 1.0;
        SegmentationNet c(small_unet(), 8);
        ad::AdamState<float> adam_c;
        semi_train(c, adam_c, labeled, unlabeled, cfg);
        CHECK(flat_params(c) != flat_params(a));
    }
    SUBCASE("targets are regenerated from the current parameters before every step") {
        auto cfg = small_semi(0, 1);
        cfg.augment = false;
        SegmentationNet net(small_unet(), 9);
        ad::AdamState<float> adam;
        std::vector<std::vector<Mask2D>> seen;
        semi_train(net, adam, labeled, unlabeled, cfg, {}, [&](int, int step, std::span<const Mask2D> targets) {
            seen.emplace_back(targets.begin(), targets.end());
            if (step == 0) {
                // Push the head towards foreground everywhere.
                auto params = net.body().parameter_tensors();
                auto& bias = *params.back();
                bias[0] = -50.0f;
                bias[1] = 50.0f;
            }
        });
        REQUIRE(seen.size() >= 2);
        for (const auto& m : seen[1]) CHECK(count_foreground(m.values()) == m.size());
        bool all_fg_before = true;
        for (const auto& m : seen[0]) all_fg_before = all_fg_before && count_foreground(m.values()) == m.size();
        CHECK_FALSE(all_fg_before);
    }
    SUBCASE("empty labeled set") {
        SegmentationNet net(small_unet(), 1);
        ad::AdamState<float> adam;
        CHECK_THROWS_AS(semi_train(net, adam, {}, unlabeled, small_semi(0, 1)), UsageError);
    }
}

TEST_CASE("pseudo labels improve off-centre slices beyond warm-up alone") {
    PhantomSpec spec = small_phantom(6, 3);
    spec.depth = 11;
    const auto data = make_phantom_data(spec);
    const auto cfg = small_semi(30, 60);
    SegmentationNet net(small_unet(), 1);
    ad::AdamState<float> adam;
    warmup_train(net, adam, data.labeled(), cfg);
    const double warm = mean_offcentre_dice(net, data);
    semi_train(net, adam, data.labeled(), data.unlabeled(), cfg);
    const double semi = mean_offcentre_dice(net, data);
    INFO("warm-up " << warm << ", semi " << semi);
    CHECK(semi > warm);
}

TEST_CASE("emitted semi labels") {
    PhantomSpec spec = small_phantom(2, 3);
    spec.depth = 9;
    const auto data = make_phantom_data(spec);
    SegmentationNet net(small_unet(), 2);
    const auto masks = emit_semi_labels(net, data.volumes);
    REQUIRE(masks.size() == 16);
    for (const auto& m : masks) {
        CHECK(m.slice != 4);
        CHECK(m.provenance == Provenance::semi);
        CHECK_NOTHROW(m.validate(4));
        const auto probs = seg_forward(net, stack_images(std::vector<Image2D>{
                                                 data.volumes[m.volume_id == data.volumes[0].id ? 0 : 1].voxels.slice(m.slice)}));
        CHECK(m.mask == pseudo_labels(probs)[0]);
    }
}

TEST_CASE("pseudo mask invariants") {
    PseudoMask m{"v", 2, Mask2D(4, 4, 0), Provenance::manual};
    CHECK_NOTHROW(m.validate(2));
    CHECK_THROWS_AS(m.validate(3), UsageError);
    m.provenance = Provenance::semi;
    m.mask(1, 1) = 2;
    CHECK_THROWS_AS(m.validate(3), UsageError);
    CHECK(parse_provenance("fused") == Provenance::fused);
    CHECK(to_string(Provenance::ssl) == "ssl");
    CHECK_THROWS_AS(parse_provenance("union"), FormatError);
}

}
