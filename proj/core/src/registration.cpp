#include "colabel/registration.hpp"

#include <algorithm>
#include <numeric>

#include "colabel/metaimage.hpp"

namespace colabel {
namespace {

constexpr std::uint64_t kRegistrationStream = 0x52454749; // "REGI"

template <typename T = float>
ad::Tensor<T> field_tensor(const DeformationField& f) {
    const std::size_t plane = static_cast<std::size_t>(f.rows()) * f.cols();
    ad::Tensor<T> t({1, 2, f.rows(), f.cols()});
    std::copy_n(f.drow.values().begin(), plane, t.data().begin());
    std::copy_n(f.dcol.values().begin(), plane, t.data().begin() + plane);
    return t;
}

template <typename T = float>
ad::Tensor<T> image_tensor(const Image2D& img) {
    return ad::Tensor<T>({1, 1, img.rows(), img.cols()}, std::vector<T>(img.values().begin(), img.values().end()));
}

} // namespace

void RegNetConfig::validate() const {
    if (levels < 1) throw ConfigError("registration: levels must be at least 1");
    if (base_channels < 1) throw ConfigError("registration: base_channels must be positive");
    if (!(smoothness_weight >= 0.0)) throw ConfigError("registration: smoothness_weight must be non-negative");
    if (epochs < 0 || batch_size < 1 || pairs_per_epoch < 0) {
        throw ConfigError("registration: epochs, batch_size and pairs_per_epoch must be non-negative (batch >= 1)");
    }
}

template <typename T>
BasicRegistrationNet<T>::BasicRegistrationNet(const RegNetConfig& config, std::uint64_t seed) {
    config.validate();
    // Small head weights start the network near the identity transform.
    body_ = UShapedNet<T>(UShapeLayout{2, 2, config.levels + 1, config.base_channels}, seed, 1e-2);
}

template <typename T>
ad::NodeId BasicRegistrationNet<T>::forward(ad::Graph<T>& graph, ad::NodeId fixed, ad::NodeId moving) {
    return body_.forward(graph, graph.concat_channels(fixed, moving));
}

template class BasicRegistrationNet<float>;
template class BasicRegistrationNet<double>;

DeformationField reg_forward(RegistrationNet& net, const SlicePair& pair) {
    if (!pair.fixed.same_shape(pair.moving)) throw DimensionError("reg_forward: fixed and moving differ in shape");
    ad::Graph<float> g(ad::GradMode::disabled);
    const auto out = g.value(net.forward(g, g.constant(image_tensor(pair.fixed)), g.constant(image_tensor(pair.moving))));
    DeformationField f(pair.fixed.rows(), pair.fixed.cols());
    const std::size_t plane = f.drow.size();
    std::copy_n(out.data().begin(), plane, f.drow.values().begin());
    std::copy_n(out.data().begin() + plane, plane, f.dcol.values().begin());
    return f;
}

Image2D warp_bilinear(const Image2D& image, const DeformationField& field) {
    if (image.rows() != field.rows() || image.cols() != field.cols()) {
        throw DimensionError("warp_bilinear: field does not match image");
    }
    // Sampled in double: in float, r + drow alone is off by up to an ulp of the coordinate.
    ad::Graph<double> g(ad::GradMode::disabled);
    const auto out = g.value(g.warp_bilinear(g.constant(image_tensor<double>(image)), g.constant(field_tensor<double>(field))));
    std::vector<float> values(out.data().size());
    std::transform(out.data().begin(), out.data().end(), values.begin(), [](double v) { return static_cast<float>(v); });
    return Image2D(image.rows(), image.cols(), std::move(values));
}

Mask2D warp_label(const Mask2D& mask, const DeformationField& field) {
    Image2D as_float(mask.rows(), mask.cols());
    std::transform(mask.values().begin(), mask.values().end(), as_float.values().begin(),
                   [](std::uint8_t v) { return v != 0 ? 1.0f : 0.0f; });
    const Image2D warped = warp_bilinear(as_float, field);
    Mask2D out(mask.rows(), mask.cols());
    std::transform(warped.values().begin(), warped.values().end(), out.values().begin(),
                   [](float v) -> std::uint8_t { return v >= 0.5f ? 1 : 0; });
    return out;
}

double similarity_loss(const Image2D& warped, const Image2D& fixed) {
    if (!warped.same_shape(fixed)) throw DimensionError("similarity_loss: shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < warped.size(); ++i) {
        const double d = static_cast<double>(warped.values()[i]) - fixed.values()[i];
        total += d * d;
    }
    return warped.empty() ? 0.0 : total / static_cast<double>(warped.size());
}

double smoothness_loss(const DeformationField& field) {
    ad::Graph<float> g(ad::GradMode::disabled);
    return g.value(g.smoothness(g.constant(field_tensor(field))))[0];
}

template <typename T>
ad::NodeId similarity_loss(ad::Graph<T>& g, ad::NodeId warped, ad::NodeId fixed, Similarity kind) {
    if (kind == Similarity::ncc) return g.ncc_loss(warped, fixed);
    const auto diff = g.sub(warped, fixed);
    return g.mean(g.mul(diff, diff));
}

template <typename T>
ad::NodeId registration_loss(ad::Graph<T>& g, BasicRegistrationNet<T>& net, ad::NodeId fixed, ad::NodeId moving,
                             const RegNetConfig& cfg) {
    const auto field = net.forward(g, fixed, moving);
    const auto warped = g.warp_bilinear(moving, field);
    const auto sim = similarity_loss(g, warped, fixed, cfg.similarity);
    if (cfg.smoothness_weight == 0.0) return sim;
    return g.add(sim, g.scale(g.smoothness(field), static_cast<T>(cfg.smoothness_weight)));
}

template ad::NodeId similarity_loss(ad::Graph<float>&, ad::NodeId, ad::NodeId, Similarity);
template ad::NodeId similarity_loss(ad::Graph<double>&, ad::NodeId, ad::NodeId, Similarity);
template ad::NodeId registration_loss(ad::Graph<float>&, BasicRegistrationNet<float>&, ad::NodeId, ad::NodeId,
                                      const RegNetConfig&);
template ad::NodeId registration_loss(ad::Graph<double>&, BasicRegistrationNet<double>&, ad::NodeId, ad::NodeId,
                                      const RegNetConfig&);

std::vector<SlicePair> adjacent_pairs(std::span<const Volume> volumes) {
    std::vector<SlicePair> pairs;
    for (const auto& v : volumes) {
        for (int n = 0; n + 1 < v.depth(); ++n) {
            pairs.push_back({v.voxels.slice(n), v.voxels.slice(n + 1)});
            pairs.push_back({v.voxels.slice(n + 1), v.voxels.slice(n)});
        }
    }
    return pairs;
}

std::vector<double> train_registration(RegistrationNet& net, ad::AdamState<float>& adam,
                                       std::span<const Volume> volumes, const RegNetConfig& cfg,
                                       const EpochHooks& hooks) {
    cfg.validate();
    std::vector<double> trace;
    if (hooks.start_epoch >= cfg.epochs) return trace;
    const auto pairs = adjacent_pairs(volumes);
    if (pairs.empty()) throw UsageError("train_registration: no adjacent slice pairs");

    std::vector<std::size_t> order(pairs.size());
    std::vector<Image2D> fixed, moving;
    for (int epoch = hooks.start_epoch; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, {kRegistrationStream, static_cast<std::uint64_t>(epoch)}));
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t used =
            cfg.pairs_per_epoch > 0 ? std::min<std::size_t>(order.size(), cfg.pairs_per_epoch) : order.size();

        double total = 0.0;
        for (std::size_t start = 0; start < used; start += cfg.batch_size) {
            const std::size_t end = std::min(used, start + cfg.batch_size);
            fixed.clear();
            moving.clear();
            for (std::size_t i = start; i < end; ++i) {
                fixed.push_back(pairs[order[i]].fixed);
                moving.push_back(pairs[order[i]].moving);
            }
            ad::Graph<float> g;
            const auto loss =
                registration_loss(g, net, g.constant(stack_images(fixed)), g.constant(stack_images(moving)), cfg);
            const double value = g.value(loss)[0];
            check_finite_loss(value, "registration training");
            net.body().zero_grad();
            g.backward(loss);
            const auto params = net.body().parameter_tensors();
            ad::adam_step<float>(params, adam, cfg.lr(epoch));
            total += value * static_cast<double>(end - start);
        }
        const double mean = total / static_cast<double>(used);
        trace.push_back(mean);
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, mean);
    }
    return trace;
}

RegistrationScore evaluate_registration(RegistrationNet& net, std::span<const Volume> volumes) {
    const auto pairs = adjacent_pairs(volumes);
    RegistrationScore score;
    for (const auto& p : pairs) {
        const auto field = reg_forward(net, p);
        score.similarity += similarity_loss(warp_bilinear(p.moving, field), p.fixed);
        score.smoothness += smoothness_loss(field);
    }
    if (!pairs.empty()) {
        score.similarity /= static_cast<double>(pairs.size());
        score.smoothness /= static_cast<double>(pairs.size());
    }
    return score;
}

std::vector<PseudoMask> propagate_labels(RegistrationNet& net, const Volume& volume,
                                         const CentralAnnotation& central) {
    const int c = central_index(volume.depth());
    if (central.volume_id != volume.id || central.index != c) {
        throw PairingError("propagate_labels: annotation " + central.volume_id + "/" + std::to_string(central.index) +
                           " does not belong to the central slice of " + volume.id);
    }
    if (central.mask.rows() != volume.height() || central.mask.cols() != volume.width()) {
        throw DimensionError("propagate_labels: annotation shape differs from the volume");
    }
    std::vector<PseudoMask> out;
    for (int dir : {-1, +1}) {
        Mask2D label = central.mask;
        for (int n = c + dir; n >= 0 && n < volume.depth(); n += dir) {
            const auto field = reg_forward(net, {volume.voxels.slice(n), volume.voxels.slice(n - dir)});
            label = warp_label(label, field);
            out.push_back({volume.id, n, label, Provenance::ssl});
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.slice < b.slice; });
    return out;
}

void write_field_metaimage(const std::filesystem::path& header_path, const DeformationField& field) {
    Volume v;
    v.id = header_path.stem().string();
    v.voxels = Grid3D<float>(2, field.rows(), field.cols());
    v.voxels.set_slice(0, field.drow);
    v.voxels.set_slice(1, field.dcol);
    write_metaimage(header_path, v, ElementType::Float);
}

} // namespace colabel
