#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "colabel/labels.hpp"
#include "colabel/training.hpp"

namespace colabel {

struct MixedEntry {
    std::string volume_id;
    int slice = 0;
    Image2D image;
    Mask2D target;
    Provenance source = Provenance::manual; // manual on the central slice, fused elsewhere
};

struct MixedDataset {
    std::vector<MixedEntry> entries;

    std::size_t count(Provenance source) const;
    std::vector<LabeledSlice> labeled_slices() const;
};

struct FinalTrainConfig {
    int epochs = 100;
    int batch_size = 4;
    ad::StepDecay lr;
    SegLossConfig loss;
    bool augment = true;
    bool warm_start = false; // start from the semi-stage network instead of a fresh one
    std::uint64_t seed = 0;

    void validate() const;
    SupervisedConfig supervised() const;
};

// Central slices take the manual mask, every other slice its fused label. With
// require_full_coverage off, slices without a fused label are skipped instead of
// raising PairingError (used when disagreement slices were excluded).
MixedDataset build_mixed_dataset(std::span<const Volume> volumes, std::span<const CentralAnnotation> centrals,
                                 std::span<const PseudoMask> fused, bool require_full_coverage = true);

// Central slice images paired with their manual masks, in volume order.
std::vector<LabeledSlice> central_slices(std::span<const Volume> volumes, std::span<const CentralAnnotation> centrals);

std::vector<double> train_final(SegmentationNet& net, ad::AdamState<float>& adam, const MixedDataset& ds,
                                const FinalTrainConfig& cfg, const EpochHooks& hooks = {});

// Same protocol as train_final on the central slices only.
std::vector<double> train_fs_lcs(SegmentationNet& net, ad::AdamState<float>& adam,
                                 std::span<const LabeledSlice> centrals, const FinalTrainConfig& cfg,
                                 const EpochHooks& hooks = {});

// Slice-wise argmax foreground, stacked to the volume's N x H x W grid.
MaskGrid predict_volume(SegmentationNet& net, const Volume& volume);

} // namespace colabel
