#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "colabel/autodiff/tensor.hpp"

namespace colabel::ad {

struct NodeId {
    std::size_t index = 0;
    bool operator==(const NodeId&) const = default;
};

enum class OpTag {
    Constant,
    Parameter,
    Conv2d,
    Relu,
    Sigmoid,
    MaxPool2d,
    Upsample2x,
    Concat,
    Softmax,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    Scale,
    Sum,
    Mean,
    SumSpatial,
    Log,
    Clamp,
    Warp,
    Smoothness,
    Ncc,
};

const char* to_string(OpTag tag);

enum class GradMode { enabled, disabled };

// Append-only tape. Every op appends one node whose inputs precede it, so the
// node order is a topological order and backward() walks it in reverse once.
// Image tensors are NCHW.
template <typename T>
class Graph {
public:
    explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    NodeId constant(Tensor<T> value);
    // Leaf bound to an external tensor; backward() accumulates into param.grad()
    // when the graph records gradients and param.requires_grad() is set.
    NodeId parameter(Tensor<T>& param);

    NodeId conv2d(NodeId x, NodeId weight, NodeId bias, int stride = 1, int padding = 0);
    NodeId relu(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId max_pool2d(NodeId x); // 2x2 window, stride 2
    NodeId upsample_nearest2x(NodeId x);
    NodeId concat_channels(NodeId a, NodeId b);
    NodeId softmax_channels(NodeId x);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId add_scalar(NodeId x, T s);
    NodeId scale(NodeId x, T s);
    NodeId sum(NodeId x);
    NodeId mean(NodeId x);
    NodeId sum_spatial(NodeId x); // [B,C,H,W] -> [B,C]
    NodeId log(NodeId x);
    NodeId clamp(NodeId x, T lo, T hi);

    // Bilinear sampling of image [B,C,H,W] at (row + field[b,0], col + field[b,1]),
    // replicating edge pixels outside the grid.
    NodeId warp_bilinear(NodeId image, NodeId field);
    // Mean over all squared forward differences (rows and columns, every channel).
    NodeId smoothness(NodeId field);
    // 1 - mean over the batch of the global normalized cross-correlation.
    NodeId ncc_loss(NodeId a, NodeId b);

    const Tensor<T>& value(NodeId id) const { return nodes_.at(id.index).value; }
    // Empty unless backward() reached the node.
    std::span<const T> grad(NodeId id) const { return nodes_.at(id.index).grad; }
    OpTag tag(NodeId id) const { return nodes_.at(id.index).tag; }
    std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id.index).inputs; }
    std::size_t size() const { return nodes_.size(); }
    GradMode mode() const { return mode_; }

    // Requires a single-element loss. Gradients of parameter leaves are added to
    // the bound tensors' grad buffers.
    void backward(NodeId loss);

private:
    using Backward = std::function<void(Graph&, std::size_t)>;

    struct Node {
        OpTag tag;
        std::vector<NodeId> inputs;
        Tensor<T> value;
        Buffer<T> grad;
        bool needs_grad = false;
        Tensor<T>* param = nullptr;
        Backward back;
    };

    NodeId push(OpTag tag, std::vector<NodeId> inputs, Tensor<T> value, Backward back);
    const Node& node(NodeId id) const;
    bool needs(NodeId id) const { return nodes_[id.index].needs_grad; }
    // Gradient buffer of a node, allocated on first use.
    Buffer<T>& grad_of(NodeId id);
    NodeId elementwise(OpTag tag, NodeId a, NodeId b);

    GradMode mode_;
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

} // namespace colabel::ad
