#include "colabel/segmentation.hpp"

#include <cmath>

namespace colabel {

void UNetConfig::validate() const {
    if (depth < 2) throw ConfigError("unet: depth must be at least 2");
    if (base_channels < 1) throw ConfigError("unet: base_channels must be positive");
    if (in_channels != 1) throw ConfigError("unet: in_channels must be 1");
    if (classes != 2) throw ConfigError("unet: only the binary task (classes = 2) is supported");
}

void SegLossConfig::validate() const {
    if (!(gamma >= 0.0)) throw ConfigError("seg loss: gamma must be non-negative");
    if (!(dice_eps > 0.0)) throw ConfigError("seg loss: dice smoothing must be positive");
}

template <typename T>
BasicSegmentationNet<T>::BasicSegmentationNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    body_ = UShapedNet<T>(UShapeLayout{config.in_channels, config.classes, config.depth, config.base_channels}, seed);
}

template <typename T>
ad::NodeId BasicSegmentationNet<T>::forward(ad::Graph<T>& graph, ad::NodeId images) {
    return graph.softmax_channels(body_.forward(graph, images));
}

template class BasicSegmentationNet<float>;
template class BasicSegmentationNet<double>;

ad::Tensor<float> stack_images(std::span<const Image2D> images) {
    if (images.empty()) throw UsageError("stack_images: empty batch");
    const int h = images[0].rows(), w = images[0].cols();
    ad::Tensor<float> out({static_cast<int>(images.size()), 1, h, w});
    auto dst = out.data().begin();
    for (const auto& img : images) {
        if (img.rows() != h || img.cols() != w) throw DimensionError("stack_images: slices differ in size");
        dst = std::copy(img.values().begin(), img.values().end(), dst);
    }
    return out;
}

ad::Tensor<float> one_hot(std::span<const Mask2D> masks, int classes) {
    if (masks.empty()) throw UsageError("one_hot: empty batch");
    if (classes != 2) throw UsageError("one_hot: binary masks need exactly two classes");
    const int h = masks[0].rows(), w = masks[0].cols();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    ad::Tensor<float> out({static_cast<int>(masks.size()), classes, h, w});
    for (std::size_t b = 0; b < masks.size(); ++b) {
        if (masks[b].rows() != h || masks[b].cols() != w) throw DimensionError("one_hot: masks differ in size");
        const auto v = masks[b].values();
        for (std::size_t p = 0; p < plane; ++p) {
            const bool fg = v[p] != 0;
            out[(b * 2 + 0) * plane + p] = fg ? 0.0f : 1.0f;
            out[(b * 2 + 1) * plane + p] = fg ? 1.0f : 0.0f;
        }
    }
    return out;
}

ad::Tensor<float> seg_forward(SegmentationNet& net, const ad::Tensor<float>& images) {
    ad::Graph<float> g(ad::GradMode::disabled);
    const auto out = net.forward(g, g.constant(images));
    return g.value(out);
}

template <typename T>
ad::NodeId dice_loss(ad::Graph<T>& g, ad::NodeId probs, ad::NodeId target, const SegLossConfig& cfg) {
    const auto& p = g.value(probs);
    const auto& t = g.value(target);
    if (p.shape() != t.shape() || p.rank() != 4) {
        throw DimensionError("dice_loss: probabilities " + ad::shape_string(p.shape()) + " vs target " +
                             ad::shape_string(t.shape()));
    }
    const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
    const int k = t.dim(1);
    for (int b = 0; b < t.dim(0); ++b) {
        for (std::size_t px = 0; px < plane; ++px) {
            T total = 0;
            for (int c = 0; c < k; ++c) {
                const T v = t[(static_cast<std::size_t>(b) * k + c) * plane + px];
                if (v != T(0) && v != T(1)) throw UsageError("dice_loss: target is not one-hot");
                total += v;
            }
            if (total != T(1)) throw UsageError("dice_loss: target is not one-hot");
        }
    }

    const T eps = static_cast<T>(cfg.dice_eps);
    const auto inter = g.sum_spatial(g.mul(probs, target));
    const auto denom = cfg.squared_dice_denominator
                           ? g.add(g.sum_spatial(g.mul(probs, probs)), g.sum_spatial(g.mul(target, target)))
                           : g.add(g.sum_spatial(probs), g.sum_spatial(target));
    const auto ratio = g.div(g.add_scalar(g.scale(inter, T(2)), eps), g.add_scalar(denom, eps));
    return g.add_scalar(g.scale(g.mean(ratio), T(-1)), T(1));
}

template <typename T>
ad::NodeId ce_loss(ad::Graph<T>& g, ad::NodeId probs, ad::NodeId target) {
    const auto& p = g.value(probs);
    const auto& t = g.value(target);
    if (p.shape() != t.shape() || p.rank() != 4) throw DimensionError("ce_loss: shape mismatch");
    const T pixels = static_cast<T>(p.dim(0)) * p.dim(2) * p.dim(3);
    const auto logp = g.log(g.clamp(probs, T(1e-7), T(1) - T(1e-7)));
    return g.scale(g.sum(g.mul(target, logp)), T(-1) / pixels);
}

template <typename T>
ad::NodeId seg_loss(ad::Graph<T>& g, ad::NodeId probs, ad::NodeId target, const SegLossConfig& cfg) {
    cfg.validate();
    const auto dice = dice_loss(g, probs, target, cfg);
    if (cfg.gamma == 0.0) return dice;
    return g.add(dice, g.scale(ce_loss(g, probs, target), static_cast<T>(cfg.gamma)));
}

template ad::NodeId dice_loss(ad::Graph<float>&, ad::NodeId, ad::NodeId, const SegLossConfig&);
template ad::NodeId dice_loss(ad::Graph<double>&, ad::NodeId, ad::NodeId, const SegLossConfig&);
template ad::NodeId ce_loss(ad::Graph<float>&, ad::NodeId, ad::NodeId);
template ad::NodeId ce_loss(ad::Graph<double>&, ad::NodeId, ad::NodeId);
template ad::NodeId seg_loss(ad::Graph<float>&, ad::NodeId, ad::NodeId, const SegLossConfig&);
template ad::NodeId seg_loss(ad::Graph<double>&, ad::NodeId, ad::NodeId, const SegLossConfig&);

} // namespace colabel
