#include "colabel/volume.hpp"

#include <algorithm>
#include <cmath>

namespace colabel {

void Volume::check_invariants() const {
    if (depth() < 3) throw SpecError("volume '" + id + "': depth must be at least 3");
    if (height() < 8 || width() < 8) throw SpecError("volume '" + id + "': in-plane size must be at least 8x8");
    if (!(spacing.row > 0.0 && spacing.col > 0.0 && spacing.slice > 0.0)) {
        throw SpecError("volume '" + id + "': spacing must be positive");
    }
    const auto values = voxels.values();
    if (!std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); })) {
        throw SpecError("volume '" + id + "': non-finite voxel");
    }
}

CentralAnnotation central_annotation(const LabelVolume& reference) {
    const int c = central_index(reference.labels.depth());
    CentralAnnotation out{reference.id, c, reference.labels.slice(c)};
    for (auto& v : out.mask.values()) v = v != 0 ? 1 : 0;
    return out;
}

bool is_binary(std::span<const std::uint8_t> values) {
    return std::all_of(values.begin(), values.end(), [](std::uint8_t v) { return v <= 1; });
}

std::size_t count_foreground(std::span<const std::uint8_t> values) {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

} // namespace colabel
