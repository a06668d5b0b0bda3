#pragma once

#include <cstdint>
#include <vector>

#include "colabel/volume.hpp"

namespace colabel {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

// Synthetic stand-in for a prostate MR collection: one ellipsoid-like blob per
// volume whose cross-section drifts and shrinks away from the central slice,
// on a background whose level also drifts with slice distance.
struct PhantomSpec {
    int count = 20;
    int height = 128;
    int width = 128;
    int depth = 9;
    Range center_row{0.4, 0.6}; // fraction of height
    Range center_col{0.4, 0.6}; // fraction of width
    Range radius_row{16.0, 26.0}; // pixels, central slice
    Range radius_col{16.0, 26.0};
    Range contrast{0.8, 1.2}; // foreground minus background
    double noise_sigma = 0.1;
    double deformation_amplitude = 2.0; // max per-slice shift and per-slice radius change, pixels
    double shrink = 0.45;               // relative radius loss at the outermost slice
    double background_drift = 0.05;     // background change per slice of distance from the centre
    std::uint64_t seed = 1;

    void validate() const; // throws SpecError
};

struct PhantomCase {
    Volume volume;
    LabelVolume truth;
};

std::vector<PhantomCase> generate_phantom(const PhantomSpec& spec);

} // namespace colabel
