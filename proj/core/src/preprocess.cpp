#include "colabel/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace colabel {
namespace {

// Source coordinate of destination pixel centre `dst`.
double source_coord(int dst, int in, int out) {
    const double s = (dst + 0.5) * static_cast<double>(in) / out - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
}

void check_target(int rows, int cols) {
    if (rows < 1 || cols < 1) throw DimensionError("resample: target extent must be positive");
}

} // namespace

Volume normalize_intensity(const Volume& v) {
    Volume out = v;
    const auto values = v.voxels.values();
    if (values.empty()) return out;
    double mean = 0.0;
    for (float x : values) mean += x;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (float x : values) var += (x - mean) * (x - mean);
    var /= static_cast<double>(values.size());

    auto dst = out.voxels.values();
    if (!(var > 1e-20)) {
        std::fill(dst.begin(), dst.end(), 0.0f);
        return out;
    }
    const double inv_sd = 1.0 / std::sqrt(var);
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<float>((values[i] - mean) * inv_sd);
    return out;
}

Image2D resample_bilinear(const Image2D& image, int rows, int cols) {
    check_target(rows, cols);
    if (rows == image.rows() && cols == image.cols()) return image;
    Image2D out(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const double sy = source_coord(r, image.rows(), rows);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, image.rows() - 1);
        const double wy = sy - y0;
        for (int c = 0; c < cols; ++c) {
            const double sx = source_coord(c, image.cols(), cols);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, image.cols() - 1);
            const double wx = sx - x0;
            const double top = (1.0 - wx) * image(y0, x0) + wx * image(y0, x1);
            const double bottom = (1.0 - wx) * image(y1, x0) + wx * image(y1, x1);
            out(r, c) = static_cast<float>((1.0 - wy) * top + wy * bottom);
        }
    }
    return out;
}

Mask2D resample_nearest(const Mask2D& mask, int rows, int cols) {
    check_target(rows, cols);
    if (rows == mask.rows() && cols == mask.cols()) return mask;
    Mask2D out(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const int y = std::min(static_cast<int>((r + 0.5) * mask.rows() / rows), mask.rows() - 1);
        for (int c = 0; c < cols; ++c) {
            const int x = std::min(static_cast<int>((c + 0.5) * mask.cols() / cols), mask.cols() - 1);
            out(r, c) = mask(y, x);
        }
    }
    return out;
}

Volume resample_inplane(const Volume& v, int rows, int cols) {
    if (rows < 8 || cols < 8) throw DimensionError("resample_inplane: target must be at least 8x8");
    Volume out;
    out.id = v.id;
    out.voxels = Grid3D<float>(v.depth(), rows, cols);
    out.spacing = {v.spacing.row * v.height() / rows, v.spacing.col * v.width() / cols, v.spacing.slice};
    for (int n = 0; n < v.depth(); ++n) out.voxels.set_slice(n, resample_bilinear(v.voxels.slice(n), rows, cols));
    return out;
}

LabelVolume resample_inplane(const LabelVolume& v, int rows, int cols) {
    if (rows < 8 || cols < 8) throw DimensionError("resample_inplane: target must be at least 8x8");
    LabelVolume out;
    out.id = v.id;
    out.labels = MaskGrid(v.labels.depth(), rows, cols);
    out.spacing = {v.spacing.row * v.labels.rows() / rows, v.spacing.col * v.labels.cols() / cols, v.spacing.slice};
    for (int n = 0; n < v.labels.depth(); ++n) {
        out.labels.set_slice(n, resample_nearest(v.labels.slice(n), rows, cols));
    }
    return out;
}

AugmentParams draw_augment(Rng& rng) {
    // Each of the two draws consumes exactly one engine output.
    AugmentParams p;
    p.quarter_turns = static_cast<int>(rng() % 4);
    p.flip = (rng() & 1u) != 0;
    return p;
}

template <typename T>
Grid2D<T> apply_augment(const Grid2D<T>& plane, AugmentParams params) {
    Grid2D<T> src = plane;
    if (params.flip) {
        for (int r = 0; r < src.rows(); ++r) std::reverse(&src(r, 0), &src(r, 0) + src.cols());
    }
    const int turns = ((params.quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < turns; ++t) {
        // Counter-clockwise quarter turn: (r, c) -> (cols-1-c, r).
        Grid2D<T> rotated(src.cols(), src.rows());
        for (int r = 0; r < src.rows(); ++r) {
            for (int c = 0; c < src.cols(); ++c) rotated(src.cols() - 1 - c, r) = src(r, c);
        }
        src = std::move(rotated);
    }
    return src;
}

template Grid2D<float> apply_augment(const Grid2D<float>&, AugmentParams);
template Grid2D<std::uint8_t> apply_augment(const Grid2D<std::uint8_t>&, AugmentParams);

std::pair<Image2D, Mask2D> augment(const Image2D& image, const Mask2D& mask, Rng& rng) {
    if (!image.same_shape(Image2D(mask.rows(), mask.cols()))) throw DimensionError("augment: shape mismatch");
    const auto p = draw_augment(rng);
    return {apply_augment(image, p), apply_augment(mask, p)};
}

int FoldSplit::fold_of(const std::string& id) const {
    auto it = std::lower_bound(assignment.begin(), assignment.end(), id,
                               [](const auto& entry, const std::string& key) { return entry.first < key; });
    if (it == assignment.end() || it->first != id) throw UsageError("fold split has no volume '" + id + "'");
    return it->second;
}

std::vector<std::string> FoldSplit::members(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f == fold) out.push_back(id);
    }
    return out;
}

std::vector<std::string> FoldSplit::complement(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f != fold) out.push_back(id);
    }
    return out;
}

FoldSplit split_folds(std::vector<std::string> ids, int k, std::uint64_t seed) {
    if (k < 1) throw UsageError("split_folds: k must be positive");
    if (static_cast<int>(ids.size()) < k) throw UsageError("split_folds: fewer volumes than folds");
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw UsageError("split_folds: duplicate ids");

    std::vector<std::string> order = ids;
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    FoldSplit split;
    split.folds = k;
    for (std::size_t i = 0; i < order.size(); ++i) split.assignment.emplace_back(order[i], static_cast<int>(i % k));
    std::sort(split.assignment.begin(), split.assignment.end());
    return split;
}

} // namespace colabel
