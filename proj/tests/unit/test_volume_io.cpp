#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "doctest.h"

#include "colabel/metaimage.hpp"
#include "colabel/phantom.hpp"
#include "colabel/preprocess.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace colabel;
using namespace colabel::testing;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
}

void write_int16(const std::filesystem::path& p, const std::vector<std::int16_t>& values, bool big_endian) {
    std::ofstream f(p, std::ios::binary);
    for (auto v : values) {
        const auto u = static_cast<std::uint16_t>(v);
        const unsigned char lo = u & 0xFF, hi = u >> 8;
        if (big_endian) {
            f.put(static_cast<char>(hi));
            f.put(static_cast<char>(lo));
        } else {
            f.put(static_cast<char>(lo));
            f.put(static_cast<char>(hi));
        }
    }
}

Volume ramp_volume(int n, int h, int w) {
    Volume v;
    v.id = "ramp";
    v.voxels = Grid3D<float>(n, h, w);
    for (int k = 0; k < n; ++k)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) v.voxels(k, r, c) = static_cast<float>(c + 0.5 * r + 3 * k);
    return v;
}

double mean_of(std::span<const float> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double variance_of(std::span<const float> v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (float x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

} // namespace

TEST_SUITE("volume_io") {

TEST_CASE("MetaImage: 4x4x3 MET_SHORT payload of 7") {
    TempDir dir("mhd");
    write_text(dir / "a.mhd", "ObjectType = Image\nNDims = 3\nDimSize = 4 4 3\nElementType = MET_SHORT\n"
                              "ElementSpacing = 0.5 0.625 3.6\nElementDataFile = a.raw\n");
    write_int16(dir / "a.raw", std::vector<std::int16_t>(48, 7), false);
    const Volume v = read_metaimage(dir / "a.mhd");
    CHECK(v.depth() == 3);
    CHECK(v.height() == 4);
    CHECK(v.width() == 4);
    for (float x : v.voxels.values()) CHECK(x == 7.0f);
    CHECK(v.spacing.col == 0.5);
    CHECK(v.spacing.row == 0.625);
    CHECK(v.spacing.slice == 3.6);
}

TEST_CASE("MetaImage: byte order is honoured") {
    TempDir dir("mhd");
    std::vector<std::int16_t> values(48);
    std::iota(values.begin(), values.end(), -20);
    values[5] = 1234;
    write_text(dir / "b.mhd", "NDims = 3\nDimSize = 4 4 3\nElementType = MET_SHORT\nElementByteOrderMSB = True\n"
                              "ElementDataFile = b.raw\n");
    write_int16(dir / "b.raw", values, true);
    const Volume v = read_metaimage(dir / "b.mhd");
    for (std::size_t i = 0; i < values.size(); ++i) CHECK(v.voxels.values()[i] == static_cast<float>(values[i]));
}

TEST_CASE("MetaImage: malformed headers and payloads") {
    TempDir dir("mhd");
    write_int16(dir / "c.raw", std::vector<std::int16_t>(48, 1), false);
    SUBCASE("missing ElementDataFile") {
        write_text(dir / "c.mhd", "NDims = 3\nDimSize = 4 4 3\nElementType = MET_SHORT\n");
        CHECK_THROWS_AS(read_metaimage(dir / "c.mhd"), FormatError);
    }
    SUBCASE("two-dimensional image") {
        write_text(dir / "c.mhd", "NDims = 2\nDimSize = 4 12\nElementType = MET_SHORT\nElementDataFile = c.raw\n");
        CHECK_THROWS_AS(read_metaimage(dir / "c.mhd"), FormatError);
    }
    SUBCASE("unsupported element type") {
        write_text(dir / "c.mhd", "NDims = 3\nDimSize = 4 4 3\nElementType = MET_DOUBLE\nElementDataFile = c.raw\n");
        CHECK_THROWS_AS(read_metaimage(dir / "c.mhd"), FormatError);
    }
    SUBCASE("payload shorter than declared") {
        write_text(dir / "c.mhd", "NDims = 3\nDimSize = 4 4 4\nElementType = MET_SHORT\nElementDataFile = c.raw\n");
        CHECK_THROWS_AS(read_metaimage(dir / "c.mhd"), TruncationError);
    }
}

TEST_CASE("MetaImage: 320x320x20 short volume written and read back") {
    TempDir dir("mhd");
    Volume v;
    v.id = "big";
    v.voxels = Grid3D<float>(20, 320, 320);
    for (int k = 0; k < 20; ++k)
        for (int r = 0; r < 320; ++r)
            for (int c = 0; c < 320; ++c) v.voxels(k, r, c) = static_cast<float>((r * 7 + c * 3 + k * 11) % 2000 - 500);
    v.spacing = {0.625, 0.625, 3.6};
    write_metaimage(dir / "big.mhd", v, ElementType::Short);
    CHECK(std::filesystem::file_size(dir / "big.raw") == 320u * 320u * 20u * 2u);
    const Volume back = read_metaimage(dir / "big.mhd");
    CHECK(back.height() == 320);
    CHECK(back.width() == 320);
    CHECK(back.depth() == 20);
    CHECK(back.voxels == v.voxels);
    CHECK(back.spacing == v.spacing);
}

TEST_CASE("MetaImage: float payloads round-trip bit-exactly in both byte orders") {
    TempDir dir("mhd");
    Rng rng(4);
    Volume v;
    v.voxels = Grid3D<float>(3, 9, 8);
    std::normal_distribution<float> nd(0.0f, 100.0f);
    for (auto& x : v.voxels.values()) x = nd(rng);
    v.spacing = {0.7, 1.3, 2.9};
    for (bool msb : {false, true}) {
        write_metaimage(dir / "f.mhd", v, ElementType::Float, msb);
        const Volume back = read_metaimage(dir / "f.mhd");
        CHECK(std::memcmp(back.voxels.values().data(), v.voxels.values().data(), v.voxels.size() * sizeof(float)) == 0);
        CHECK(back.spacing == v.spacing);
    }
    write_metaimage(dir / "u.mhd", v, ElementType::UShort);
    const Volume u = read_metaimage(dir / "u.mhd");
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        const float expect = std::clamp(std::nearbyint(v.voxels.values()[i]), 0.0f, 65535.0f);
        CHECK(u.voxels.values()[i] == expect);
    }
}

TEST_CASE("MetaImage: segmentations are binarised") {
    TempDir dir("mhd");
    write_text(dir / "s.mhd", "NDims = 3\nDimSize = 4 4 3\nElementType = MET_SHORT\nElementDataFile = s.raw\n");
    std::vector<std::int16_t> values(48, 0);
    values[3] = 2;
    values[40] = 255;
    write_int16(dir / "s.raw", values, false);
    const LabelVolume lv = read_label_metaimage(dir / "s.mhd");
    CHECK(count_foreground(lv.labels.values()) == 2);
    CHECK(is_binary(lv.labels.values()));
    write_label_metaimage(dir / "t.mhd", lv);
    CHECK(read_label_metaimage(dir / "t.mhd").labels == lv.labels);
}

TEST_CASE("volume invariants") {
    Volume v = ramp_volume(3, 8, 8);
    CHECK_NOTHROW(v.check_invariants());
    CHECK_THROWS_AS(ramp_volume(2, 8, 8).check_invariants(), SpecError);
    CHECK_THROWS_AS(ramp_volume(3, 7, 8).check_invariants(), SpecError);
    v.spacing.slice = 0.0;
    CHECK_THROWS_AS(v.check_invariants(), SpecError);
    v = ramp_volume(3, 8, 8);
    v.voxels(1, 2, 3) = std::nanf("");
    CHECK_THROWS_AS(v.check_invariants(), SpecError);
}

TEST_CASE("central index is floor(N/2)") {
    CHECK(central_index(3) == 1);
    CHECK(central_index(8) == 4);
    CHECK(central_index(9) == 4);
    for (int n = 3; n < 40; ++n) {
        CHECK(central_index(n) >= 0);
        CHECK(central_index(n) < n);
    }
}

TEST_CASE("phantom generation") {
    PhantomSpec spec = small_phantom(6, 1);
    const auto a = generate_phantom(spec), b = generate_phantom(spec);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].volume.voxels == b[i].volume.voxels);
        CHECK(a[i].truth.labels == b[i].truth.labels);
        CHECK_NOTHROW(a[i].volume.check_invariants());
        const int c = central_index(a[i].volume.depth());
        CHECK(count_foreground(a[i].truth.labels.slice_values(c)) > 0);
        const auto ann = central_annotation(a[i].truth);
        CHECK(ann.index == c);
        CHECK(ann.mask == a[i].truth.labels.slice(c));
    }
    spec.seed = 2;
    CHECK(generate_phantom(spec)[0].volume.voxels != a[0].volume.voxels);
}

TEST_CASE("phantom defaults describe the desk-scale dataset") {
    const PhantomSpec spec;
    CHECK(spec.count == 20);
    CHECK(spec.height == 128);
    CHECK(spec.width == 128);
    CHECK(spec.depth == 9);
    CHECK(spec.deformation_amplitude == 2.0);
}

TEST_CASE("noiseless phantom: foreground sits exactly one above the slice background") {
    PhantomSpec spec = small_phantom(3, 5);
    spec.noise_sigma = 0.0;
    spec.contrast = {1.0, 1.0};
    for (const auto& pc : generate_phantom(spec)) {
        for (int n = 0; n < pc.volume.depth(); ++n) {
            float bg = std::nanf("");
            for (int r = 0; r < 32 && std::isnan(bg); ++r)
                for (int c = 0; c < 32; ++c)
                    if (!pc.truth.labels(n, r, c)) {
                        bg = pc.volume.voxels(n, r, c);
                        break;
                    }
            REQUIRE(!std::isnan(bg));
            for (int r = 0; r < 32; ++r)
                for (int c = 0; c < 32; ++c) CHECK(pc.volume.voxels(n, r, c) == (pc.truth.labels(n, r, c) ? bg + 1.0f : bg));
        }
    }
}

TEST_CASE("phantom cross-sections move by at most the deformation amplitude") {
    PhantomSpec spec = small_phantom(8, 9);
    spec.deformation_amplitude = 2.0;
    for (const auto& pc : generate_phantom(spec)) {
        auto centroid = [&](int n) {
            double sr = 0, sc = 0, cnt = 0;
            for (int r = 0; r < 32; ++r)
                for (int c = 0; c < 32; ++c)
                    if (pc.truth.labels(n, r, c)) sr += r, sc += c, cnt += 1;
            return std::array<double, 3>{sr / cnt, sc / cnt, cnt};
        };
        for (int n = 0; n + 1 < pc.volume.depth(); ++n) {
            const auto a = centroid(n), b = centroid(n + 1);
            REQUIRE(a[2] > 0);
            REQUIRE(b[2] > 0);
            // Rasterisation moves a centroid by well under a pixel on these sizes.
            CHECK(std::abs(a[0] - b[0]) <= spec.deformation_amplitude / 2 + 1.0);
            CHECK(std::abs(a[1] - b[1]) <= spec.deformation_amplitude / 2 + 1.0);
        }
    }
}

TEST_CASE("phantom spec validation") {
    PhantomSpec spec = small_phantom();
    spec.radius_row = {6.0, 17.0};
    CHECK_THROWS_AS(generate_phantom(spec), SpecError);
    spec = small_phantom();
    spec.contrast = {1.2, 0.8};
    CHECK_THROWS_AS(generate_phantom(spec), SpecError);
    spec = small_phantom();
    spec.depth = 2;
    CHECK_THROWS_AS(generate_phantom(spec), SpecError);
}

TEST_CASE("intensity normalisation") {
    SUBCASE("constant volume maps to zeros") {
        Volume v;
        v.voxels = Grid3D<float>(3, 8, 8, 4.5f);
        const Volume out = normalize_intensity(v);
        for (float x : out.voxels.values()) CHECK(x == 0.0f);
    }
    SUBCASE("zero mean, unit variance, idempotent") {
        Rng rng(7);
        for (const auto& pc : generate_phantom(small_phantom(3, 7))) {
            const Volume once = normalize_intensity(pc.volume);
            CHECK(std::abs(mean_of(once.voxels.values())) < 1e-6);
            CHECK(std::abs(variance_of(once.voxels.values()) - 1.0) < 1e-6);
            const Volume twice = normalize_intensity(once);
            for (std::size_t i = 0; i < once.voxels.size(); ++i)
                CHECK(std::abs(once.voxels.values()[i] - twice.voxels.values()[i]) < 1e-6);
        }
    }
}

TEST_CASE("in-plane resampling") {
    const Volume v = ramp_volume(3, 16, 12);
    SUBCASE("same size is the identity") {
        CHECK(resample_inplane(v, 16, 12).voxels == v.voxels);
    }
    SUBCASE("constant slices stay constant") {
        Image2D flat(10, 14, 2.25f);
        const Image2D out = resample_bilinear(flat, 23, 9);
        for (float x : out.values()) CHECK(x == doctest::Approx(2.25f));
    }
    SUBCASE("matches a per-pixel reference sampler") {
        const Image2D src = v.voxels.slice(1);
        for (auto [rows, cols] : {std::pair{8, 8}, std::pair{31, 17}, std::pair{16, 24}}) {
            const Image2D out = resample_bilinear(src, rows, cols);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    const double y = (r + 0.5) * src.rows() / rows - 0.5, x = (c + 0.5) * src.cols() / cols - 0.5;
                    CHECK(std::abs(out(r, c) - bilinear_sample(src, y, x)) < 1e-5);
                }
        }
    }
    SUBCASE("downsample then upsample a smooth ramp") {
        const Volume big = ramp_volume(3, 64, 64);
        const Volume back = resample_inplane(resample_inplane(big, 32, 32), 64, 64);
        float lo = big.voxels(1, 0, 0), hi = lo;
        for (int r = 0; r < 64; ++r)
            for (int c = 0; c < 64; ++c) lo = std::min(lo, big.voxels(1, r, c)), hi = std::max(hi, big.voxels(1, r, c));
        double worst = 0.0;
        for (int r = 0; r < 64; ++r)
            for (int c = 0; c < 64; ++c) worst = std::max(worst, static_cast<double>(std::abs(back.voxels(1, r, c) - big.voxels(1, r, c))));
        CHECK(worst < 0.05 * (hi - lo));
    }
    SUBCASE("spacing keeps the physical extent") {
        Volume s = v;
        s.spacing = {0.5, 0.75, 3.0};
        const Volume out = resample_inplane(s, 8, 24);
        CHECK(out.spacing.row * 8 == doctest::Approx(0.5 * 16));
        CHECK(out.spacing.col * 24 == doctest::Approx(0.75 * 12));
        CHECK(out.spacing.slice == 3.0);
    }
    SUBCASE("masks use nearest neighbour and stay binary") {
        LabelVolume lv;
        lv.labels = MaskGrid(3, 16, 16);
        for (int r = 4; r < 12; ++r)
            for (int c = 2; c < 10; ++c) lv.labels(1, r, c) = 1;
        const LabelVolume out = resample_inplane(lv, 8, 8);
        CHECK(is_binary(out.labels.values()));
        CHECK(count_foreground(out.labels.values()) == 4 * 4);
        CHECK_THROWS_AS(resample_inplane(lv, 4, 8), DimensionError);
    }
}

TEST_CASE("augmentation") {
    Rng rng(11);
    Mask2D mask = random_mask2d(rng, 9, 7, 0.4);
    Image2D image(9, 7);
    for (int r = 0; r < 9; ++r)
        for (int c = 0; c < 7; ++c) image(r, c) = static_cast<float>(r * 7 + c);

    SUBCASE("identity transform leaves inputs unchanged") {
        CHECK(apply_augment(image, {0, false}) == image);
        CHECK(apply_augment(mask, {0, false}) == mask);
    }
    SUBCASE("180 degrees twice is the identity") {
        CHECK(apply_augment(apply_augment(image, {2, false}), {2, false}) == image);
        CHECK(apply_augment(apply_augment(image, {1, false}), {0, false}) != image);
    }
    SUBCASE("every transform permutes pixels") {
        for (int q = 0; q < 4; ++q)
            for (bool flip : {false, true}) {
                const auto m = apply_augment(mask, {q, flip});
                CHECK(count_foreground(m.values()) == count_foreground(mask.values()));
                auto a = apply_augment(image, {q, flip});
                std::vector<float> sorted(a.values().begin(), a.values().end());
                std::sort(sorted.begin(), sorted.end());
                for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == static_cast<float>(i));
            }
    }
    SUBCASE("image and mask get the same transform") {
        Image2D indicator(9, 7);
        for (std::size_t i = 0; i < mask.size(); ++i) indicator.values()[i] = mask.values()[i];
        for (int i = 0; i < 50; ++i) {
            const auto [img, m] = augment(indicator, mask, rng);
            CHECK(is_binary(m.values()));
            for (std::size_t p = 0; p < m.size(); ++p) CHECK(img.values()[p] == static_cast<float>(m.values()[p]));
        }
        CHECK_THROWS_AS(augment(Image2D(9, 8), mask, rng), DimensionError);
    }
    SUBCASE("rotations and flips are drawn uniformly") {
        std::map<std::pair<int, bool>, int> counts;
        for (int i = 0; i < 8000; ++i) {
            const auto p = draw_augment(rng);
            counts[{p.quarter_turns, p.flip}]++;
        }
        CHECK(counts.size() == 8);
        for (const auto& [k, n] : counts) CHECK(std::abs(n - 1000) < 150);
    }
}

TEST_CASE("fold split") {
    auto ids = [](int n) {
        std::vector<std::string> v;
        for (int i = 0; i < n; ++i) v.push_back("case" + std::to_string(i));
        return v;
    };
    SUBCASE("50 volumes give five folds of 10") {
        const auto s = split_folds(ids(50), 5, 3);
        for (int f = 0; f < 5; ++f) CHECK(s.members(f).size() == 10);
    }
    SUBCASE("7 volumes give sizes 2,2,1,1,1") {
        const auto s = split_folds(ids(7), 5, 3);
        std::vector<std::size_t> sizes;
        for (int f = 0; f < 5; ++f) sizes.push_back(s.members(f).size());
        std::sort(sizes.rbegin(), sizes.rend());
        CHECK(sizes == std::vector<std::size_t>{2, 2, 1, 1, 1});
    }
    SUBCASE("deterministic partition") {
        const auto a = split_folds(ids(23), 5, 9), b = split_folds(ids(23), 5, 9);
        CHECK(a.assignment == b.assignment);
        std::size_t total = 0;
        for (int f = 0; f < 5; ++f) {
            const auto m = a.members(f), rest = a.complement(f);
            total += m.size();
            CHECK(m.size() + rest.size() == 23);
            for (const auto& id : m) CHECK(a.fold_of(id) == f);
        }
        CHECK(total == 23);
        CHECK(split_folds(ids(23), 5, 10).assignment != a.assignment);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(split_folds(ids(4), 5, 1), UsageError);
        CHECK_THROWS_AS(split_folds({"a", "a", "b"}, 2, 1), UsageError);
    }
}

}
