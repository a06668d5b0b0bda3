#include <string>

#include "doctest.h"

#include "colabel/fusion.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace colabel;
using namespace colabel::testing;

namespace {

PseudoMask semi_mask(const std::string& id, int slice, Mask2D m) { return {id, slice, std::move(m), Provenance::semi}; }
PseudoMask ssl_mask(const std::string& id, int slice, Mask2D m) { return {id, slice, std::move(m), Provenance::ssl}; }

std::vector<PseudoMask> volume_masks(const std::string& id, int depth, Provenance p, Rng& rng) {
    std::vector<PseudoMask> out;
    for (int n = 0; n < depth; ++n)
        if (n != central_index(depth)) out.push_back({id, n, random_mask2d(rng, 8, 8, 0.4), p});
    return out;
}

} // namespace

TEST_SUITE("fusion") {

TEST_CASE("checkerboard and left half") {
    Mask2D checker(8, 8), left(8, 8), expect(8, 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
            checker(r, c) = (r + c) % 2;
            left(r, c) = c < 4;
            expect(r, c) = c < 4 && (r + c) % 2;
        }
    const auto fused = fuse(semi_mask("a", 1, checker), ssl_mask("a", 1, left));
    CHECK(fused.mask == expect);
    CHECK(fused.provenance == Provenance::fused);
    CHECK(fused.volume_id == "a");
    CHECK(fused.slice == 1);
}

TEST_CASE("identical and disjoint inputs") {
    Rng rng(1);
    const auto m = random_mask2d(rng, 10, 10, 0.5);
    CHECK(fuse(semi_mask("a", 0, m), ssl_mask("a", 0, m)).mask == m);

    Mask2D top(6, 6), bottom(6, 6);
    for (int c = 0; c < 6; ++c) {
        top(0, c) = 1;
        bottom(5, c) = 1;
    }
    CHECK(count_foreground(fuse(semi_mask("a", 0, top), ssl_mask("a", 0, bottom)).mask.values()) == 0);
}

TEST_CASE("fusion algebra against the AND reference") {
    const auto rep = label_algebra_suite(100, 31);
    INFO(describe(rep));
    CHECK(rep.fuse_cases == 100);
    CHECK(rep.pass());
}

TEST_CASE("mismatched pairs") {
    CHECK_THROWS_AS(fuse(semi_mask("a", 0, Mask2D(4, 4)), ssl_mask("a", 1, Mask2D(4, 4))), PairingError);
    CHECK_THROWS_AS(fuse(semi_mask("a", 0, Mask2D(4, 4)), ssl_mask("b", 0, Mask2D(4, 4))), PairingError);
    CHECK_THROWS_AS(fuse(semi_mask("a", 0, Mask2D(4, 4)), ssl_mask("a", 0, Mask2D(4, 5))), PairingError);
}

TEST_CASE("dataset fusion") {
    Rng rng(2);
    const auto semis = volume_masks("case07", 9, Provenance::semi, rng);
    auto ssls = volume_masks("case07", 9, Provenance::ssl, rng);

    SUBCASE("one fused mask per key") {
        const auto fused = fuse_dataset(semis, ssls);
        REQUIRE(fused.size() == 8);
        for (std::size_t i = 0; i < fused.size(); ++i) {
            CHECK(fused[i].provenance == Provenance::fused);
            CHECK(fused[i].mask == and_oracle(semis[i].mask, ssls[i].mask));
            const auto n = count_foreground(fused[i].mask.values());
            CHECK(n <= std::min(count_foreground(semis[i].mask.values()), count_foreground(ssls[i].mask.values())));
        }
    }
    SUBCASE("order of the inputs does not matter") {
        auto reversed = ssls;
        std::reverse(reversed.begin(), reversed.end());
        const auto a = fuse_dataset(semis, ssls), b = fuse_dataset(semis, reversed);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].mask == b[i].mask);
    }
    SUBCASE("missing key is named") {
        ssls.erase(ssls.begin() + 2);
        try {
            fuse_dataset(semis, ssls);
            FAIL("expected a pairing error");
        } catch (const PairingError& e) {
            const std::string what = e.what();
            CHECK(what.find("case07") != std::string::npos);
            CHECK(what.find(std::to_string(semis[2].slice)) != std::string::npos);
        }
    }
    SUBCASE("duplicate key") {
        ssls.push_back(ssls.front());
        CHECK_THROWS_AS(fuse_dataset(semis, ssls), PairingError);
    }
}

TEST_CASE("empty fused masks") {
    Mask2D left(4, 4), right(4, 4);
    for (int r = 0; r < 4; ++r) {
        left(r, 0) = 1;
        right(r, 3) = 1;
    }
    const std::vector<PseudoMask> semis{semi_mask("v", 0, left), semi_mask("v", 2, Mask2D(4, 4))};
    const std::vector<PseudoMask> ssls{ssl_mask("v", 0, right), ssl_mask("v", 2, right)};
    // Kept as background supervision by default.
    CHECK(fuse_dataset(semis, ssls).size() == 2);
    // Only the disagreement (both nonempty) is dropped.
    const auto kept = fuse_dataset(semis, ssls, {true});
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].slice == 2);
}

TEST_CASE("precision") {
    Mask2D truth(4, 4), pred(4, 4);
    for (int c = 0; c < 4; ++c) truth(1, c) = 1;
    CHECK(precision(pred, truth) == 1.0);
    pred(1, 0) = pred(1, 1) = pred(2, 0) = pred(3, 3) = 1;
    CHECK(precision(pred, truth) == doctest::Approx(0.5));
    CHECK(precision(truth, truth) == 1.0);
    CHECK_THROWS_AS(precision(pred, Mask2D(4, 5)), DimensionError);

    // Intersecting with a mask inside the reference gives perfect precision.
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto t = random_mask2d(rng, 8, 8, 0.4), noisy = random_mask2d(rng, 8, 8, 0.5);
        const auto inside = and_oracle(t, random_mask2d(rng, 8, 8, 0.7));
        CHECK(precision(fuse(semi_mask("v", 0, noisy), ssl_mask("v", 0, inside)).mask, t) == 1.0);
    }
}

}
