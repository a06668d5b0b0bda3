#include "colabel/unet.hpp"

#include "colabel/autodiff/optim.hpp"
#include "colabel/random.hpp"

namespace colabel {

template <typename T>
UShapedNet<T>::UShapedNet(UShapeLayout layout, std::uint64_t seed, double head_scale) : layout_(layout) {
    if (layout.depth < 2) throw SpecError("U-shaped net: depth must be at least 2");
    if (layout.base_channels < 1 || layout.in_channels < 1 || layout.out_channels < 1) {
        throw SpecError("U-shaped net: channel counts must be positive");
    }
    Rng rng(seed);
    auto add = [&](std::string name, int in, int out, int k) {
        Conv c{std::move(name), ad::Tensor<T>({out, in, k, k}), ad::Tensor<T>({out}), k / 2};
        ad::he_uniform(c.weight, rng);
        c.weight.set_requires_grad(true);
        c.bias.set_requires_grad(true);
        convs_.push_back(std::move(c));
    };
    auto channels = [&](int level) { return layout.base_channels << level; };

    for (int l = 0; l < layout.depth; ++l) {
        const int in = l == 0 ? layout.in_channels : channels(l - 1);
        add("enc" + std::to_string(l) + ".conv0", in, channels(l), 3);
        add("enc" + std::to_string(l) + ".conv1", channels(l), channels(l), 3);
    }
    for (int l = layout.depth - 2; l >= 0; --l) {
        add("dec" + std::to_string(l) + ".up", channels(l + 1), channels(l), 3);
        add("dec" + std::to_string(l) + ".conv0", 2 * channels(l), channels(l), 3);
        add("dec" + std::to_string(l) + ".conv1", channels(l), channels(l), 3);
    }
    add("head", channels(0), layout.out_channels, 1);
    for (auto& w : convs_.back().weight.data()) w = static_cast<T>(w * head_scale);
}

template <typename T>
void UShapedNet<T>::check_input(int height, int width) const {
    const int factor = 1 << (layout_.depth - 1);
    if (height % factor != 0 || width % factor != 0 || height < factor || width < factor) {
        throw DimensionError("U-shaped net of depth " + std::to_string(layout_.depth) + " needs H, W divisible by " +
                             std::to_string(factor) + ", got " + std::to_string(height) + "x" + std::to_string(width));
    }
}

template <typename T>
ad::NodeId UShapedNet<T>::apply(ad::Graph<T>& g, std::size_t conv, ad::NodeId x, bool relu) {
    auto& c = convs_[conv];
    const auto w = g.parameter(c.weight);
    const auto b = g.parameter(c.bias);
    const auto y = g.conv2d(x, w, b, 1, c.padding);
    return relu ? g.relu(y) : y;
}

template <typename T>
ad::NodeId UShapedNet<T>::forward(ad::Graph<T>& g, ad::NodeId input) {
    const auto& in = g.value(input);
    if (in.rank() != 4 || in.dim(1) != layout_.in_channels) {
        throw DimensionError("U-shaped net: expected [B," + std::to_string(layout_.in_channels) + ",H,W] input, got " +
                             ad::shape_string(in.shape()));
    }
    check_input(in.dim(2), in.dim(3));

    std::size_t k = 0;
    std::vector<ad::NodeId> skips;
    ad::NodeId x = input;
    for (int l = 0; l < layout_.depth; ++l) {
        if (l > 0) x = g.max_pool2d(x);
        x = apply(g, k++, x, true);
        x = apply(g, k++, x, true);
        skips.push_back(x);
    }
    for (int l = layout_.depth - 2; l >= 0; --l) {
        x = apply(g, k++, g.upsample_nearest2x(x), true);
        x = g.concat_channels(skips[l], x);
        x = apply(g, k++, x, true);
        x = apply(g, k++, x, true);
    }
    return apply(g, k, x, false);
}

template <typename T>
std::vector<ParamRef<T>> UShapedNet<T>::parameters() {
    std::vector<ParamRef<T>> out;
    for (auto& c : convs_) {
        out.push_back({c.name + ".weight", &c.weight});
        out.push_back({c.name + ".bias", &c.bias});
    }
    return out;
}

template <typename T>
std::vector<ad::Tensor<T>*> UShapedNet<T>::parameter_tensors() {
    std::vector<ad::Tensor<T>*> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
}

template <typename T>
std::size_t UShapedNet<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : convs_) n += c.weight.size() + c.bias.size();
    return n;
}

template <typename T>
void UShapedNet<T>::set_requires_grad(bool on) {
    for (auto& c : convs_) {
        c.weight.set_requires_grad(on);
        c.bias.set_requires_grad(on);
    }
}

template <typename T>
void UShapedNet<T>::zero_grad() {
    for (auto& c : convs_) {
        c.weight.zero_grad();
        c.bias.zero_grad();
    }
}

template <typename T>
std::vector<ad::NamedTensor> UShapedNet<T>::state() const {
    std::vector<ad::NamedTensor> out;
    for (const auto& c : convs_) {
        out.push_back({c.name + ".weight", c.weight.template cast<float>()});
        out.push_back({c.name + ".bias", c.bias.template cast<float>()});
    }
    return out;
}

template <typename T>
void UShapedNet<T>::load_state(const std::vector<ad::NamedTensor>& tensors) {
    auto params = parameters();
    if (tensors.size() != params.size()) {
        throw FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, network has " +
                          std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& src = tensors[i];
        auto& dst = *params[i].tensor;
        if (src.name != params[i].name || src.tensor.shape() != dst.shape()) {
            throw FormatError("checkpoint tensor '" + src.name + "' " + ad::shape_string(src.tensor.shape()) +
                              " does not match '" + params[i].name + "' " + ad::shape_string(dst.shape()));
        }
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src.tensor[k]);
    }
}

template class UShapedNet<float>;
template class UShapedNet<double>;

} // namespace colabel
