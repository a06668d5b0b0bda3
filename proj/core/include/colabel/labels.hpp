#pragma once

#include <compare>
#include <string>

#include "colabel/volume.hpp"

namespace colabel {

enum class Provenance { manual, semi, ssl, fused };

std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& name); // throws FormatError

struct SliceKey {
    std::string volume_id;
    int slice = 0;
    auto operator<=>(const SliceKey&) const = default;
};

std::string to_string(const SliceKey& key);

// A binary per-slice label together with where it came from.
struct PseudoMask {
    std::string volume_id;
    int slice = 0;
    Mask2D mask;
    Provenance provenance = Provenance::semi;

    SliceKey key() const { return {volume_id, slice}; }
    // Binary mask; manual provenance only on the central slice.
    void validate(int central) const;
};

} // namespace colabel
