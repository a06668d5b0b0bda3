#include "colabel/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "colabel/preprocess.hpp"

namespace colabel {

void check_finite_loss(double loss, const char* stage) {
    if (!std::isfinite(loss)) throw NumericError(std::string(stage) + ": loss became non-finite");
}

double supervised_step(SegmentationNet& net, ad::AdamState<float>& adam, std::span<const Image2D> images,
                       std::span<const Mask2D> masks, const SegLossConfig& loss, double lr) {
    ad::Graph<float> g;
    const auto probs = net.forward(g, g.constant(stack_images(images)));
    const auto l = seg_loss(g, probs, g.constant(one_hot(masks)), loss);
    const double value = g.value(l)[0];
    check_finite_loss(value, "supervised training");
    net.body().zero_grad();
    g.backward(l);
    const auto params = net.body().parameter_tensors();
    ad::adam_step<float>(params, adam, lr);
    return value;
}

std::vector<double> train_supervised(SegmentationNet& net, ad::AdamState<float>& adam,
                                     std::span<const LabeledSlice> data, const SupervisedConfig& cfg,
                                     std::uint64_t stream, const EpochHooks& hooks) {
    if (cfg.batch_size < 1) throw UsageError("train_supervised: batch size must be positive");
    std::vector<double> trace;
    if (hooks.start_epoch >= cfg.epochs) return trace;
    if (data.empty()) throw UsageError("train_supervised: empty training set");

    std::vector<std::size_t> order(data.size());
    std::vector<Image2D> images;
    std::vector<Mask2D> masks;
    for (int epoch = hooks.start_epoch; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, {stream, static_cast<std::uint64_t>(epoch)}));
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);

        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            images.clear();
            masks.clear();
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = data[order[i]];
                if (cfg.augment) {
                    const auto p = draw_augment(rng);
                    images.push_back(apply_augment(s.image, p));
                    masks.push_back(apply_augment(s.mask, p));
                } else {
                    images.push_back(s.image);
                    masks.push_back(s.mask);
                }
            }
            total += supervised_step(net, adam, images, masks, cfg.loss, cfg.lr(epoch)) * static_cast<double>(end - start);
        }
        const double mean = total / static_cast<double>(data.size());
        trace.push_back(mean);
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, mean);
    }
    return trace;
}

} // namespace colabel
