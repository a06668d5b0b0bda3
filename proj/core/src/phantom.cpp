#include "colabel/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "colabel/random.hpp"

namespace colabel {
namespace {

void check_range(const Range& r, const char* name) {
    if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
        throw SpecError(std::string("phantom: range ") + name + " is empty or non-finite");
    }
}

double draw(Rng& rng, const Range& r) {
    if (r.lo == r.hi) return r.lo;
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

} // namespace

void PhantomSpec::validate() const {
    if (count < 1) throw SpecError("phantom: count must be positive");
    if (depth < 3) throw SpecError("phantom: depth must be at least 3");
    if (height < 8 || width < 8) throw SpecError("phantom: in-plane size must be at least 8x8");
    check_range(center_row, "center_row");
    check_range(center_col, "center_col");
    check_range(radius_row, "radius_row");
    check_range(radius_col, "radius_col");
    check_range(contrast, "contrast");
    if (center_row.lo < 0.0 || center_row.hi > 1.0 || center_col.lo < 0.0 || center_col.hi > 1.0) {
        throw SpecError("phantom: centre ranges are fractions of the image extent");
    }
    if (radius_row.hi > height / 2.0 || radius_col.hi > width / 2.0) {
        throw SpecError("phantom: radii exceed half the image extent");
    }
    if (radius_row.lo < 1.0 || radius_col.lo < 1.0) throw SpecError("phantom: radii must be at least 1 pixel");
    if (!(noise_sigma >= 0.0) || !(deformation_amplitude >= 0.0)) {
        throw SpecError("phantom: noise and deformation amplitude must be non-negative");
    }
    if (!(shrink >= 0.0 && shrink < 1.0)) throw SpecError("phantom: shrink must lie in [0, 1)");
}

std::vector<PhantomCase> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::normal_distribution<double> noise(0.0, 1.0);

    const int c = central_index(spec.depth);
    const int half = std::max(c, spec.depth - 1 - c);

    std::vector<PhantomCase> cases;
    cases.reserve(spec.count);
    for (int m = 0; m < spec.count; ++m) {
        char id[32];
        std::snprintf(id, sizeof(id), "phantom_%03d", m);

        const double cr0 = draw(rng, spec.center_row) * (spec.height - 1);
        const double cc0 = draw(rng, spec.center_col) * (spec.width - 1);
        const double rr0 = draw(rng, spec.radius_row);
        const double rc0 = draw(rng, spec.radius_col);
        const double contrast = draw(rng, spec.contrast);

        // Cross-section parameters per slice, walked outwards from the centre.
        std::vector<double> cr(spec.depth), cc(spec.depth), rr(spec.depth), rc(spec.depth);
        cr[c] = cr0;
        cc[c] = cc0;
        rr[c] = rr0;
        rc[c] = rc0;
        const double amp = spec.deformation_amplitude;
        for (int dir : {+1, -1}) {
            for (int n = c + dir; n >= 0 && n < spec.depth; n += dir) {
                const int prev = n - dir;
                const double dist = std::abs(n - c) / static_cast<double>(half);
                const double profile = 1.0 - spec.shrink * dist * dist;
                const double shift_r = std::uniform_real_distribution<double>(-0.5, 0.5)(rng) * amp;
                const double shift_c = std::uniform_real_distribution<double>(-0.5, 0.5)(rng) * amp;
                cr[n] = cr[prev] + shift_r;
                cc[n] = cc[prev] + shift_c;
                rr[n] = std::max({1.0, rr0 * profile, rr[prev] - amp});
                rc[n] = std::max({1.0, rc0 * profile, rc[prev] - amp});
            }
        }

        PhantomCase pc;
        pc.volume.id = id;
        pc.volume.voxels = Grid3D<float>(spec.depth, spec.height, spec.width);
        pc.volume.spacing = {1.0, 1.0, 1.0};
        pc.truth.id = id;
        pc.truth.labels = MaskGrid(spec.depth, spec.height, spec.width);
        pc.truth.spacing = pc.volume.spacing;

        for (int n = 0; n < spec.depth; ++n) {
            const double background = spec.background_drift * std::abs(n - c);
            for (int r = 0; r < spec.height; ++r) {
                for (int col = 0; col < spec.width; ++col) {
                    const double dr = (r - cr[n]) / rr[n];
                    const double dc = (col - cc[n]) / rc[n];
                    const bool inside = dr * dr + dc * dc <= 1.0;
                    double value = background + (inside ? contrast : 0.0);
                    if (spec.noise_sigma > 0.0) value += spec.noise_sigma * noise(rng);
                    pc.volume.voxels(n, r, col) = static_cast<float>(value);
                    pc.truth.labels(n, r, col) = inside ? 1 : 0;
                }
            }
        }
        cases.push_back(std::move(pc));
    }
    return cases;
}

} // namespace colabel
