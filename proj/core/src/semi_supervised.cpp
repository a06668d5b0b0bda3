#include "colabel/semi_supervised.hpp"

#include <algorithm>
#include <numeric>

#include "colabel/preprocess.hpp"

namespace colabel {
namespace {

constexpr std::uint64_t kWarmupStream = 0x5741524D;   // "WARM"
constexpr std::uint64_t kLabeledStream = 0x4C41424C;  // "LABL"
constexpr std::uint64_t kUnlabeledStream = 0x554E4C42; // "UNLB"

} // namespace

void SemiTrainConfig::validate() const {
    if (warmup_epochs < 0 || warmup_epochs > total_epochs) {
        throw ConfigError("semi: warmup_epochs must lie in [0, total_epochs]");
    }
    if (batch_size < 1) throw ConfigError("semi: batch_size must be positive");
    if (!(unlabeled_weight >= 0.0)) throw ConfigError("semi: unlabeled_weight must be non-negative");
    if (unlabeled_ramp_epochs < 0) throw ConfigError("semi: unlabeled_ramp_epochs must be non-negative");
    loss.validate();
}

double SemiTrainConfig::unlabeled_weight_at(int epoch) const {
    if (unlabeled_ramp_epochs <= 0) return unlabeled_weight;
    const double progress = static_cast<double>(epoch - warmup_epochs + 1) / unlabeled_ramp_epochs;
    return unlabeled_weight * std::clamp(progress, 0.0, 1.0);
}

Mask2D class_map(const ad::Tensor<float>& probs) {
    int k = 0, h = 0, w = 0;
    if (probs.rank() == 3) {
        k = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
    } else if (probs.rank() == 4 && probs.dim(0) == 1) {
        k = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    } else {
        throw DimensionError("class_map: expected [K,H,W] probabilities, got " + ad::shape_string(probs.shape()));
    }
    if (k < 1 || k > 255) throw DimensionError("class_map: unsupported class count");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Mask2D out(h, w);
    auto dst = out.values();
    for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        for (int c = 1; c < k; ++c) {
            if (probs[c * plane + p] > probs[best * plane + p]) best = c;
        }
        dst[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

Mask2D pseudo_label(const ad::Tensor<float>& probs) {
    Mask2D m = class_map(probs);
    for (auto& v : m.values()) v = v == 1 ? 1 : 0;
    return m;
}

std::vector<Mask2D> pseudo_labels(const ad::Tensor<float>& probs) {
    if (probs.rank() != 4) throw DimensionError("pseudo_labels: expected [B,K,H,W]");
    const int k = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    const std::size_t sample = static_cast<std::size_t>(k) * h * w;
    std::vector<Mask2D> out;
    for (int b = 0; b < probs.dim(0); ++b) {
        auto first = probs.data().begin() + b * sample;
        out.push_back(pseudo_label(ad::Tensor<float>({k, h, w}, std::vector<float>(first, first + sample))));
    }
    return out;
}

std::vector<double> warmup_train(SegmentationNet& net, ad::AdamState<float>& adam,
                                 std::span<const LabeledSlice> labeled, const SemiTrainConfig& cfg,
                                 const EpochHooks& hooks) {
    cfg.validate();
    if (labeled.empty()) throw UsageError("warmup_train: empty labeled set");
    SupervisedConfig sup{cfg.warmup_epochs, cfg.batch_size, cfg.lr, cfg.loss, cfg.augment, cfg.seed};
    return train_supervised(net, adam, labeled, sup, kWarmupStream, hooks);
}

std::vector<double> semi_train(SegmentationNet& net, ad::AdamState<float>& adam,
                               std::span<const LabeledSlice> labeled, std::span<const Image2D> unlabeled,
                               const SemiTrainConfig& cfg, const EpochHooks& hooks,
                               const PseudoLabelObserver& observer) {
    cfg.validate();
    if (labeled.empty()) throw UsageError("semi_train: empty labeled set");

    const int n_lab = cfg.labeled_per_batch();
    const int n_unl = cfg.unlabeled_per_batch();
    std::vector<double> trace;
    std::vector<std::size_t> lab_order(labeled.size()), unl_order(unlabeled.size());
    std::vector<Image2D> lab_images, unl_images;
    std::vector<Mask2D> lab_masks;

    for (int epoch = std::max(hooks.start_epoch, cfg.warmup_epochs); epoch < cfg.total_epochs; ++epoch) {
        // Separate streams: the labeled half of every batch is independent of the
        // unlabeled pool and of the unlabeled weight.
        Rng lab_rng(derive_seed(cfg.seed, {kLabeledStream, static_cast<std::uint64_t>(epoch)}));
        Rng unl_rng(derive_seed(cfg.seed, {kUnlabeledStream, static_cast<std::uint64_t>(epoch)}));
        std::iota(lab_order.begin(), lab_order.end(), std::size_t{0});
        std::shuffle(lab_order.begin(), lab_order.end(), lab_rng);
        std::iota(unl_order.begin(), unl_order.end(), std::size_t{0});
        std::shuffle(unl_order.begin(), unl_order.end(), unl_rng);

        const double weight = cfg.unlabeled_weight_at(epoch);
        const bool use_unlabeled = weight > 0.0 && n_unl > 0 && !unlabeled.empty();
        const double lr = cfg.lr(epoch);
        std::size_t next_unlabeled = 0;
        double total = 0.0;
        int step = 0;

        for (std::size_t start = 0; start < lab_order.size(); start += n_lab, ++step) {
            const std::size_t end = std::min(lab_order.size(), start + n_lab);
            lab_images.clear();
            lab_masks.clear();
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = labeled[lab_order[i]];
                const auto p = cfg.augment ? draw_augment(lab_rng) : AugmentParams{};
                lab_images.push_back(apply_augment(s.image, p));
                lab_masks.push_back(apply_augment(s.mask, p));
            }

            ad::Graph<float> g;
            auto loss = seg_loss(g, net.forward(g, g.constant(stack_images(lab_images))),
                                 g.constant(one_hot(lab_masks)), cfg.loss);
            if (use_unlabeled) {
                unl_images.clear();
                for (int j = 0; j < n_unl; ++j) {
                    const auto& img = unlabeled[unl_order[next_unlabeled++ % unl_order.size()]];
                    unl_images.push_back(cfg.augment ? apply_augment(img, draw_augment(unl_rng)) : img);
                }
                const auto batch = stack_images(unl_images);
                // Targets come from the parameters as they are right now; no
                // gradient flows through their construction.
                const auto targets = pseudo_labels(seg_forward(net, batch));
                if (observer) observer(epoch, step, targets);
                const auto unl_loss =
                    seg_loss(g, net.forward(g, g.constant(batch)), g.constant(one_hot(targets)), cfg.loss);
                loss = g.add(loss, g.scale(unl_loss, static_cast<float>(weight)));
            }

            const double value = g.value(loss)[0];
            check_finite_loss(value, "semi-supervised training");
            net.body().zero_grad();
            g.backward(loss);
            const auto params = net.body().parameter_tensors();
            ad::adam_step<float>(params, adam, lr);
            total += value;
        }
        const double mean = total / std::max(step, 1);
        trace.push_back(mean);
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, mean);
    }
    return trace;
}

std::vector<Mask2D> predict_slices(SegmentationNet& net, const Volume& volume, int batch) {
    std::vector<Mask2D> out;
    std::vector<Image2D> images;
    for (int start = 0; start < volume.depth(); start += batch) {
        images.clear();
        for (int n = start; n < std::min(volume.depth(), start + batch); ++n) images.push_back(volume.voxels.slice(n));
        for (auto& m : pseudo_labels(seg_forward(net, stack_images(images)))) out.push_back(std::move(m));
    }
    return out;
}

std::vector<PseudoMask> emit_semi_labels(SegmentationNet& net, std::span<const Volume> volumes) {
    std::vector<PseudoMask> out;
    for (const auto& v : volumes) {
        const int c = central_index(v.depth());
        auto masks = predict_slices(net, v);
        for (int n = 0; n < v.depth(); ++n) {
            if (n == c) continue;
            out.push_back({v.id, n, std::move(masks[n]), Provenance::semi});
        }
    }
    return out;
}

} // namespace colabel
