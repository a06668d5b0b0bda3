#pragma once

#include <string>
#include <vector>

#include "colabel/random.hpp"
#include "colabel/volume.hpp"

namespace colabel {

// Per-volume z-scoring. Constant volumes map to all zeros.
Volume normalize_intensity(const Volume& v);

// Pixel-centre aligned bilinear resampling with edge clamping.
Image2D resample_bilinear(const Image2D& image, int rows, int cols);
Mask2D resample_nearest(const Mask2D& mask, int rows, int cols);

// Per-slice in-plane resampling; spacing is rescaled so the physical extent is kept.
Volume resample_inplane(const Volume& v, int rows, int cols);
LabelVolume resample_inplane(const LabelVolume& v, int rows, int cols);

// A rotation by quarter_turns * 90 degrees (counter-clockwise) applied after an
// optional horizontal flip.
struct AugmentParams {
    int quarter_turns = 0;
    bool flip = false;
};

AugmentParams draw_augment(Rng& rng);

template <typename T>
Grid2D<T> apply_augment(const Grid2D<T>& plane, AugmentParams params);

// Applies one random transform to both image and mask.
std::pair<Image2D, Mask2D> augment(const Image2D& image, const Mask2D& mask, Rng& rng);

// Volume id -> fold index.
struct FoldSplit {
    int folds = 0;
    std::vector<std::pair<std::string, int>> assignment; // sorted by id

    int fold_of(const std::string& id) const;
    std::vector<std::string> members(int fold) const;
    std::vector<std::string> complement(int fold) const;
};

FoldSplit split_folds(std::vector<std::string> ids, int k, std::uint64_t seed);

} // namespace colabel
