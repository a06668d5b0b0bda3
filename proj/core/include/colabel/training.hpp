#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "colabel/autodiff/optim.hpp"
#include "colabel/segmentation.hpp"

namespace colabel {

struct LabeledSlice {
    Image2D image;
    Mask2D mask;
};

// Per-epoch callback and resume point shared by every training loop.
struct EpochHooks {
    int start_epoch = 0; // first epoch to run; earlier epochs are assumed done
    std::function<void(int epoch, double mean_loss)> on_epoch_end;
};

struct SupervisedConfig {
    int epochs = 100;
    int batch_size = 4;
    ad::StepDecay lr;
    SegLossConfig loss;
    bool augment = true;
    std::uint64_t seed = 0;
};

// Minibatch seg_loss training over epochs [hooks.start_epoch, cfg.epochs). Each
// epoch draws its shuffle and augmentations from a stream derived from
// (seed, stream, epoch), so a resumed run replays the uninterrupted one.
// Returns the per-epoch mean loss of the epochs that ran.
std::vector<double> train_supervised(SegmentationNet& net, ad::AdamState<float>& adam,
                                     std::span<const LabeledSlice> data, const SupervisedConfig& cfg,
                                     std::uint64_t stream, const EpochHooks& hooks = {});

// One optimisation step on a batch; returns the batch loss.
double supervised_step(SegmentationNet& net, ad::AdamState<float>& adam, std::span<const Image2D> images,
                       std::span<const Mask2D> masks, const SegLossConfig& loss, double lr);

// Throws NumericError for a non-finite loss.
void check_finite_loss(double loss, const char* stage);

} // namespace colabel
