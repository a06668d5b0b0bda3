#pragma once

#include <span>
#include <vector>

#include "colabel/labels.hpp"

namespace colabel {

// Per-pixel AND of the two foreground indicators; provenance fused.
PseudoMask fuse(const PseudoMask& semi, const PseudoMask& ssl);

struct FusionOptions {
    // Drop keys where both inputs have foreground but the intersection is empty.
    bool exclude_disagreement = false;
};

// One fused mask per key, ordered by key. Both lists must cover the same keys.
std::vector<PseudoMask> fuse_dataset(std::span<const PseudoMask> semis, std::span<const PseudoMask> ssls,
                                     const FusionOptions& options = {});

// |pred & truth| / |pred|; an empty prediction has no false positives and scores 1.
double precision(const Mask2D& pred, const Mask2D& truth);

} // namespace colabel
