#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "colabel/labels.hpp"
#include "colabel/training.hpp"

namespace colabel {

struct SemiTrainConfig {
    int warmup_epochs = 50;
    int total_epochs = 100; // warm-up epochs count towards the total
    int batch_size = 4;
    double unlabeled_weight = 1.0;
    int unlabeled_ramp_epochs = 0; // > 0: weight ramps linearly after warm-up
    ad::StepDecay lr;
    SegLossConfig loss;
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const;
    int labeled_per_batch() const { return batch_size >= 2 ? batch_size / 2 : 1; }
    int unlabeled_per_batch() const { return batch_size - labeled_per_batch(); }
    double unlabeled_weight_at(int epoch) const;
};

// Per-pixel argmax over the class axis of probs [K,H,W] (or [1,K,H,W]); ties go
// to the lower class index.
Mask2D class_map(const ad::Tensor<float>& probs);
// Foreground indicator of the argmax labelling (class 1 of the binary task).
Mask2D pseudo_label(const ad::Tensor<float>& probs);
// One foreground mask per batch entry of probs [B,K,H,W].
std::vector<Mask2D> pseudo_labels(const ad::Tensor<float>& probs);

// Supervised training on central slices for cfg.warmup_epochs epochs.
std::vector<double> warmup_train(SegmentationNet& net, ad::AdamState<float>& adam,
                                 std::span<const LabeledSlice> labeled, const SemiTrainConfig& cfg,
                                 const EpochHooks& hooks = {});

// Called with the pseudo targets of each step, right before the gradient step.
using PseudoLabelObserver = std::function<void(int epoch, int step, std::span<const Mask2D> targets)>;

// Epochs [warmup_epochs, total_epochs). Each step mixes labeled_per_batch()
// labeled slices with unlabeled_per_batch() unlabeled slices whose targets are
// re-derived from the current network just before the step. An epoch is one pass
// over the labeled slices.
std::vector<double> semi_train(SegmentationNet& net, ad::AdamState<float>& adam,
                               std::span<const LabeledSlice> labeled, std::span<const Image2D> unlabeled,
                               const SemiTrainConfig& cfg, const EpochHooks& hooks = {},
                               const PseudoLabelObserver& observer = {});

// Argmax labels for every non-central slice of each volume.
std::vector<PseudoMask> emit_semi_labels(SegmentationNet& net, std::span<const Volume> volumes);

// Foreground masks for all slices of a volume, batched inference.
std::vector<Mask2D> predict_slices(SegmentationNet& net, const Volume& volume, int batch = 8);

} // namespace colabel
