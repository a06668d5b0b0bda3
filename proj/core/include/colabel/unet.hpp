#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "colabel/autodiff/checkpoint.hpp"
#include "colabel/autodiff/graph.hpp"

namespace colabel {

struct UShapeLayout {
    int in_channels = 1;
    int out_channels = 2;
    int depth = 4;         // resolution levels; depth-1 pooling steps
    int base_channels = 16; // channels at full resolution, doubled per level
};

template <typename T>
struct ParamRef {
    std::string name;
    ad::Tensor<T>* tensor;
};

// Encoder-decoder of 3x3 conv + ReLU blocks with max-pool downsampling,
// nearest-neighbour upsampling followed by a 3x3 conv, skip concatenation and a
// 1x1 output head. Produces raw (linear) outputs.
template <typename T>
class UShapedNet {
public:
    UShapedNet() = default;
    // head_scale shrinks the initial head weights (used for near-zero initial fields).
    UShapedNet(UShapeLayout layout, std::uint64_t seed, double head_scale = 1.0);

    const UShapeLayout& layout() const { return layout_; }

    // input: [B, in_channels, H, W] with H, W divisible by 2^(depth-1).
    ad::NodeId forward(ad::Graph<T>& graph, ad::NodeId input);

    std::vector<ParamRef<T>> parameters();
    std::vector<ad::Tensor<T>*> parameter_tensors();
    std::size_t parameter_count() const;
    void set_requires_grad(bool on);
    void zero_grad();

    std::vector<ad::NamedTensor> state() const;
    void load_state(const std::vector<ad::NamedTensor>& tensors); // names and shapes must match

    template <typename U>
    UShapedNet<U> cast() const {
        UShapedNet<U> out;
        out.layout_ = layout_;
        for (const auto& c : convs_) {
            out.convs_.push_back({c.name, c.weight.template cast<U>(), c.bias.template cast<U>(), c.padding});
        }
        return out;
    }

    void check_input(int height, int width) const;

private:
    template <typename>
    friend class UShapedNet;

    struct Conv {
        std::string name;
        ad::Tensor<T> weight;
        ad::Tensor<T> bias;
        int padding = 1;
    };

    ad::NodeId apply(ad::Graph<T>& g, std::size_t conv, ad::NodeId x, bool relu);

    UShapeLayout layout_;
    std::vector<Conv> convs_;
};

extern template class UShapedNet<float>;
extern template class UShapedNet<double>;

} // namespace colabel
