#pragma once

#include <cstdint>
#include <span>

#include "colabel/unet.hpp"
#include "colabel/volume.hpp"

namespace colabel {

struct UNetConfig {
    int depth = 4;
    int base_channels = 16;
    int in_channels = 1;
    int classes = 2;

    void validate() const;
};

struct SegLossConfig {
    double gamma = 1.0;     // weight of the cross-entropy term
    double dice_eps = 1e-5; // soft-dice smoothing
    // Use sum(p^2) + sum(t^2) in the soft-dice denominator instead of sum(p) + sum(t).
    bool squared_dice_denominator = false;

    void validate() const;
};

// U-shaped segmentation network ending in a per-pixel channel softmax.
template <typename T>
class BasicSegmentationNet {
public:
    BasicSegmentationNet() = default;
    BasicSegmentationNet(const UNetConfig& config, std::uint64_t seed);

    // images [B,1,H,W] -> probabilities [B,K,H,W]
    ad::NodeId forward(ad::Graph<T>& graph, ad::NodeId images);

    const UNetConfig& config() const { return config_; }
    UShapedNet<T>& body() { return body_; }
    const UShapedNet<T>& body() const { return body_; }

    template <typename U>
    BasicSegmentationNet<U> cast() const {
        BasicSegmentationNet<U> out;
        out.config_ = config_;
        out.body_ = body_.template cast<U>();
        return out;
    }

private:
    template <typename>
    friend class BasicSegmentationNet;

    UNetConfig config_;
    UShapedNet<T> body_;
};

using SegmentationNet = BasicSegmentationNet<float>;

extern template class BasicSegmentationNet<float>;
extern template class BasicSegmentationNet<double>;

// [B,1,H,W] batch from equally sized slices.
ad::Tensor<float> stack_images(std::span<const Image2D> images);
// [B,K,H,W] one-hot targets from binary masks (K = 2: background, foreground).
ad::Tensor<float> one_hot(std::span<const Mask2D> masks, int classes = 2);

// Inference without gradient recording.
ad::Tensor<float> seg_forward(SegmentationNet& net, const ad::Tensor<float>& images);

// Soft-dice loss: 1 - mean over batch and classes of (2 sum(p t) + eps) / (sum(p) + sum(t) + eps).
// Throws UsageError when target is not one-hot.
template <typename T>
ad::NodeId dice_loss(ad::Graph<T>& g, ad::NodeId probs, ad::NodeId target, const SegLossConfig& cfg = {});

// Mean over pixels of -sum_k t_k log(clamp(p_k, 1e-7, 1 - 1e-7)).
template <typename T>
ad::NodeId ce_loss(ad::Graph<T>& g, ad::NodeId probs, ad::NodeId target);

// dice_loss + gamma * ce_loss.
template <typename T>
ad::NodeId seg_loss(ad::Graph<T>& g, ad::NodeId probs, ad::NodeId target, const SegLossConfig& cfg = {});

} // namespace colabel
