#include "colabel/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include <Eigen/Core>

namespace colabel::ad {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative extent in shape " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

const char* to_string(OpTag tag) {
    switch (tag) {
    case OpTag::Constant: return "constant";
    case OpTag::Parameter: return "parameter";
    case OpTag::Conv2d: return "conv2d";
    case OpTag::Relu: return "relu";
    case OpTag::Sigmoid: return "sigmoid";
    case OpTag::MaxPool2d: return "max_pool2d";
    case OpTag::Upsample2x: return "upsample_nearest2x";
    case OpTag::Concat: return "concat_channels";
    case OpTag::Softmax: return "softmax_channels";
    case OpTag::Add: return "add";
    case OpTag::Sub: return "sub";
    case OpTag::Mul: return "mul";
    case OpTag::Div: return "div";
    case OpTag::AddScalar: return "add_scalar";
    case OpTag::Scale: return "scale";
    case OpTag::Sum: return "sum";
    case OpTag::Mean: return "mean";
    case OpTag::SumSpatial: return "sum_spatial";
    case OpTag::Log: return "log";
    case OpTag::Clamp: return "clamp";
    case OpTag::Warp: return "warp_bilinear";
    case OpTag::Smoothness: return "smoothness";
    case OpTag::Ncc: return "ncc_loss";
    }
    return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dims4 {
    int b, c, h, w;
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t sample() const { return static_cast<std::size_t>(c) * plane(); }
};

template <typename T>
Dims4 dims4(const Tensor<T>& t, const char* op) {
    if (t.rank() != 4) throw DimensionError(std::string(op) + ": expected NCHW tensor, got " + shape_string(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

struct ConvGeometry {
    int channels, height, width, kh, kw, stride, padding, out_h, out_w;
    int rows() const { return channels * kh * kw; }
    std::size_t cols() const { return static_cast<std::size_t>(out_h) * out_w; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

// Output columns [lo, hi) whose input column for kernel offset kj lies inside the row.
inline std::pair<int, int> valid_columns(const ConvGeometry& g, int kj) {
    const int shift = kj - g.padding;
    int lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
    int hi = g.width - 1 - shift < 0 ? 0 : (g.width - 1 - shift) / g.stride + 1;
    lo = std::min(lo, g.out_w);
    hi = std::clamp(hi, lo, g.out_w);
    return {lo, hi};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t ncols = g.cols();
    for (int c = 0; c < g.channels; ++c) {
        const T* plane = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                T* dst = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * ncols;
                const auto [lo, hi] = valid_columns(g, kj);
                const int shift = kj - g.padding;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.padding + ki;
                    T* row = dst + static_cast<std::size_t>(oy) * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(row, row + g.out_w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.width + shift;
                    std::fill(row, row + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo, src + hi, row + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) row[ox] = src[ox * g.stride];
                    }
                    std::fill(row + hi, row + g.out_w, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
    const std::size_t ncols = g.cols();
    for (int c = 0; c < g.channels; ++c) {
        T* plane = dx + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const T* src = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * ncols;
                const auto [lo, hi] = valid_columns(g, kj);
                const int shift = kj - g.padding;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.padding + ki;
                    if (iy < 0 || iy >= g.height) continue;
                    const T* row = src + static_cast<std::size_t>(oy) * g.out_w;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.width + shift;
                    if (g.stride == 1) {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] += row[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += row[ox];
                    }
                }
            }
        }
    }
}

// Bilinear sample with clamped neighbour indices; also returns the partial
// derivatives with respect to the sampling position.
template <typename T>
struct Sample {
    int y0, y1, x0, x1;
    T wy, wx;
};

template <typename T>
Sample<T> locate(T y, T x, int h, int w) {
    // Far outside the grid every neighbour clamps to the edge, so limiting the
    // coordinate first keeps the integer conversion safe without changing the result.
    y = std::clamp(y, T(-2), T(h + 1));
    x = std::clamp(x, T(-2), T(w + 1));
    const T fy = std::floor(y);
    const T fx = std::floor(x);
    const int iy = static_cast<int>(fy);
    const int ix = static_cast<int>(fx);
    return {std::clamp(iy, 0, h - 1), std::clamp(iy + 1, 0, h - 1), std::clamp(ix, 0, w - 1),
            std::clamp(ix + 1, 0, w - 1), y - fy, x - fx};
}

} // namespace

template <typename T>
NodeId Graph<T>::push(OpTag tag, std::vector<NodeId> inputs, Tensor<T> value, Backward back) {
    Node n{tag, std::move(inputs), std::move(value), {}, false, nullptr, std::move(back)};
    if (mode_ == GradMode::enabled) {
        n.needs_grad = std::any_of(n.inputs.begin(), n.inputs.end(), [&](NodeId i) { return needs(i); });
    }
    if (!n.needs_grad) n.back = nullptr;
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
    if (id.index >= nodes_.size()) throw UsageError("Graph: node id out of range");
    return nodes_[id.index];
}

template <typename T>
Buffer<T>& Graph<T>::grad_of(NodeId id) {
    auto& n = nodes_[id.index];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
}

template <typename T>
NodeId Graph<T>::constant(Tensor<T> value) {
    return push(OpTag::Constant, {}, std::move(value), nullptr);
}

template <typename T>
NodeId Graph<T>::parameter(Tensor<T>& param) {
    Tensor<T> copy(param.shape(), std::vector<T>(param.data().begin(), param.data().end()));
    Node n{OpTag::Parameter, {}, std::move(copy), {}, false, nullptr, nullptr};
    if (mode_ == GradMode::enabled && param.requires_grad()) {
        n.needs_grad = true;
        n.param = &param;
    }
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::conv2d(NodeId xi, NodeId wi, NodeId bi, int stride, int padding) {
    const auto& x = node(xi).value;
    const auto& w = node(wi).value;
    const auto& bias = node(bi).value;
    const Dims4 xd = dims4(x, "conv2d input");
    const Dims4 wd = dims4(w, "conv2d weight");
    if (wd.c != xd.c) {
        throw DimensionError("conv2d: weight expects " + std::to_string(wd.c) + " input channels, input has " +
                             std::to_string(xd.c));
    }
    if (bias.rank() != 1 || bias.dim(0) != wd.b) throw DimensionError("conv2d: bias must have one entry per filter");
    if (stride < 1 || padding < 0) throw DimensionError("conv2d: stride must be >= 1 and padding >= 0");
    const int span_h = xd.h + 2 * padding - wd.h;
    const int span_w = xd.w + 2 * padding - wd.w;
    if (span_h < 0 || span_w < 0) throw DimensionError("conv2d: kernel larger than padded input");

    ConvGeometry g{xd.c, xd.h, xd.w, wd.h, wd.w, stride, padding, span_h / stride + 1, span_w / stride + 1};
    const int out_c = wd.b;
    const std::size_t ncols = g.cols();
    Tensor<T> out({xd.b, out_c, g.out_h, g.out_w});

    Eigen::Map<const RowMat<T>> W(w.data().data(), out_c, g.rows());
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> B(bias.data().data(), out_c);
    Buffer<T> col(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * ncols);
    for (int b = 0; b < xd.b; ++b) {
        const T* xb = x.data().data() + b * xd.sample();
        const T* colp = xb;
        if (!g.is_pointwise()) {
            im2col(xb, g, col.data());
            colp = col.data();
        }
        Eigen::Map<const RowMat<T>> C(colp, g.rows(), ncols);
        Eigen::Map<RowMat<T>> Y(out.data().data() + b * out_c * ncols, out_c, ncols);
        Y.noalias() = W * C;
        Y.colwise() += B;
    }

    return push(OpTag::Conv2d, {xi, wi, bi}, std::move(out), [g, out_c](Graph& graph, std::size_t self) {
        const auto& n = graph.nodes_[self];
        const NodeId xid = n.inputs[0], wid = n.inputs[1], bid = n.inputs[2];
        const auto& x = graph.nodes_[xid.index].value;
        const auto& w = graph.nodes_[wid.index].value;
        const int batch = x.dim(0);
        const std::size_t ncols = g.cols();
        const std::size_t xs = static_cast<std::size_t>(g.channels) * g.height * g.width;
        const bool need_x = graph.needs(xid), need_w = graph.needs(wid), need_b = graph.needs(bid);

        Eigen::Map<const RowMat<T>> W(w.data().data(), out_c, g.rows());
        Buffer<T> col(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * ncols);
        Buffer<T> dcol(need_x && !g.is_pointwise() ? col.size() : 0);
        T* dw = need_w ? graph.grad_of(wid).data() : nullptr;
        T* db = need_b ? graph.grad_of(bid).data() : nullptr;
        T* dx = need_x ? graph.grad_of(xid).data() : nullptr;
        const T* gy = graph.nodes_[self].grad.data();

        for (int b = 0; b < batch; ++b) {
            Eigen::Map<const RowMat<T>> dY(gy + b * out_c * ncols, out_c, ncols);
            const T* xb = x.data().data() + b * xs;
            if (need_w) {
                const T* colp = xb;
                if (!g.is_pointwise()) {
                    im2col(xb, g, col.data());
                    colp = col.data();
                }
                Eigen::Map<const RowMat<T>> C(colp, g.rows(), ncols);
                Eigen::Map<RowMat<T>> dW(dw, out_c, g.rows());
                dW.noalias() += dY * C.transpose();
            }
            if (need_b) {
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dB(db, out_c);
                dB += dY.rowwise().sum();
            }
            if (need_x) {
                if (g.is_pointwise()) {
                    Eigen::Map<RowMat<T>> dX(dx + b * xs, g.rows(), ncols);
                    dX.noalias() += W.transpose() * dY;
                } else {
                    Eigen::Map<RowMat<T>> dC(dcol.data(), g.rows(), ncols);
                    dC.noalias() = W.transpose() * dY;
                    col2im_add(dcol.data(), g, dx + b * xs);
                }
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::relu(NodeId xi) {
    const auto& x = node(xi).value;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return push(OpTag::Relu, {xi}, std::move(out), [](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& x = g.nodes_[in.index].value;
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            if (x[i] > T(0)) dx[i] += gy[i];
        }
    });
}

template <typename T>
NodeId Graph<T>::sigmoid(NodeId xi) {
    const auto& x = node(xi).value;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
    return push(OpTag::Sigmoid, {xi}, std::move(out), [](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& y = g.nodes_[self].value;
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * y[i] * (T(1) - y[i]);
    });
}

template <typename T>
NodeId Graph<T>::max_pool2d(NodeId xi) {
    const auto& x = node(xi).value;
    const Dims4 d = dims4(x, "max_pool2d");
    if (d.h < 2 || d.w < 2) throw DimensionError("max_pool2d: input smaller than the 2x2 window");
    const int oh = d.h / 2, ow = d.w / 2;
    Tensor<T> out({d.b, d.c, oh, ow});
    std::vector<std::uint32_t> argmax(out.size());
    std::size_t o = 0;
    for (int bc = 0; bc < d.b * d.c; ++bc) {
        const std::size_t base = static_cast<std::size_t>(bc) * d.plane();
        for (int r = 0; r < oh; ++r) {
            for (int c = 0; c < ow; ++c, ++o) {
                std::size_t best = base + static_cast<std::size_t>(2 * r) * d.w + 2 * c;
                for (std::size_t cand : {best + 1, best + d.w, best + d.w + 1}) {
                    if (x[cand] > x[best]) best = cand;
                }
                out[o] = x[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return push(OpTag::MaxPool2d, {xi}, std::move(out), [argmax = std::move(argmax)](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < gy.size(); ++i) dx[argmax[i]] += gy[i];
    });
}

template <typename T>
NodeId Graph<T>::upsample_nearest2x(NodeId xi) {
    const auto& x = node(xi).value;
    const Dims4 d = dims4(x, "upsample_nearest2x");
    const int oh = 2 * d.h, ow = 2 * d.w;
    Tensor<T> out({d.b, d.c, oh, ow});
    for (int bc = 0; bc < d.b * d.c; ++bc) {
        const T* src = x.data().data() + static_cast<std::size_t>(bc) * d.plane();
        T* dst = out.data().data() + static_cast<std::size_t>(bc) * oh * ow;
        for (int r = 0; r < oh; ++r) {
            for (int c = 0; c < ow; ++c) dst[static_cast<std::size_t>(r) * ow + c] = src[(r / 2) * d.w + c / 2];
        }
    }
    return push(OpTag::Upsample2x, {xi}, std::move(out), [d](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        const int oh = 2 * d.h, ow = 2 * d.w;
        for (int bc = 0; bc < d.b * d.c; ++bc) {
            const T* src = gy.data() + static_cast<std::size_t>(bc) * oh * ow;
            T* dst = dx.data() + static_cast<std::size_t>(bc) * d.plane();
            for (int r = 0; r < oh; ++r) {
                for (int c = 0; c < ow; ++c) dst[(r / 2) * d.w + c / 2] += src[static_cast<std::size_t>(r) * ow + c];
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::concat_channels(NodeId ai, NodeId bi) {
    const auto& a = node(ai).value;
    const auto& b = node(bi).value;
    const Dims4 da = dims4(a, "concat_channels");
    const Dims4 db = dims4(b, "concat_channels");
    if (da.b != db.b || da.h != db.h || da.w != db.w) {
        throw DimensionError("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    Tensor<T> out({da.b, da.c + db.c, da.h, da.w});
    for (int n = 0; n < da.b; ++n) {
        T* dst = out.data().data() + n * (da.sample() + db.sample());
        std::copy_n(a.data().data() + n * da.sample(), da.sample(), dst);
        std::copy_n(b.data().data() + n * db.sample(), db.sample(), dst + da.sample());
    }
    return push(OpTag::Concat, {ai, bi}, std::move(out), [da, db](Graph& g, std::size_t self) {
        const auto& gy = g.nodes_[self].grad;
        const NodeId a = g.nodes_[self].inputs[0], b = g.nodes_[self].inputs[1];
        const std::size_t stride = da.sample() + db.sample();
        if (g.needs(a)) {
            auto& dx = g.grad_of(a);
            for (int n = 0; n < da.b; ++n) {
                for (std::size_t i = 0; i < da.sample(); ++i) dx[n * da.sample() + i] += gy[n * stride + i];
            }
        }
        if (g.needs(b)) {
            auto& dx = g.grad_of(b);
            for (int n = 0; n < db.b; ++n) {
                for (std::size_t i = 0; i < db.sample(); ++i) {
                    dx[n * db.sample() + i] += gy[n * stride + da.sample() + i];
                }
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::softmax_channels(NodeId xi) {
    const auto& x = node(xi).value;
    const Dims4 d = dims4(x, "softmax_channels");
    Tensor<T> out(x.shape());
    const std::size_t plane = d.plane();
    for (int n = 0; n < d.b; ++n) {
        const std::size_t base = n * d.sample();
        for (std::size_t p = 0; p < plane; ++p) {
            T mx = x[base + p];
            for (int k = 1; k < d.c; ++k) mx = std::max(mx, x[base + k * plane + p]);
            T total = 0;
            for (int k = 0; k < d.c; ++k) {
                const T e = std::exp(x[base + k * plane + p] - mx);
                out[base + k * plane + p] = e;
                total += e;
            }
            for (int k = 0; k < d.c; ++k) out[base + k * plane + p] /= total;
        }
    }
    return push(OpTag::Softmax, {xi}, std::move(out), [d](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& y = g.nodes_[self].value;
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        const std::size_t plane = d.plane();
        for (int n = 0; n < d.b; ++n) {
            const std::size_t base = n * d.sample();
            for (std::size_t p = 0; p < plane; ++p) {
                T dot = 0;
                for (int k = 0; k < d.c; ++k) dot += gy[base + k * plane + p] * y[base + k * plane + p];
                for (int k = 0; k < d.c; ++k) {
                    const std::size_t i = base + k * plane + p;
                    dx[i] += y[i] * (gy[i] - dot);
                }
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::elementwise(OpTag tag, NodeId ai, NodeId bi) {
    const auto& a = node(ai).value;
    const auto& b = node(bi).value;
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(to_string(tag)) + ": " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        switch (tag) {
        case OpTag::Add: out[i] = a[i] + b[i]; break;
        case OpTag::Sub: out[i] = a[i] - b[i]; break;
        case OpTag::Mul: out[i] = a[i] * b[i]; break;
        default: out[i] = a[i] / b[i]; break;
        }
    }
    return push(tag, {ai, bi}, std::move(out), [tag](Graph& g, std::size_t self) {
        const NodeId an = g.nodes_[self].inputs[0], bn = g.nodes_[self].inputs[1];
        const auto& a = g.nodes_[an.index].value;
        const auto& b = g.nodes_[bn.index].value;
        const auto& gy = g.nodes_[self].grad;
        if (g.needs(an)) {
            auto& da = g.grad_of(an);
            for (std::size_t i = 0; i < da.size(); ++i) {
                switch (tag) {
                case OpTag::Add:
                case OpTag::Sub: da[i] += gy[i]; break;
                case OpTag::Mul: da[i] += gy[i] * b[i]; break;
                default: da[i] += gy[i] / b[i]; break;
                }
            }
        }
        if (g.needs(bn)) {
            auto& db = g.grad_of(bn);
            for (std::size_t i = 0; i < db.size(); ++i) {
                switch (tag) {
                case OpTag::Add: db[i] += gy[i]; break;
                case OpTag::Sub: db[i] -= gy[i]; break;
                case OpTag::Mul: db[i] += gy[i] * a[i]; break;
                default: db[i] -= gy[i] * a[i] / (b[i] * b[i]); break;
                }
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) { return elementwise(OpTag::Add, a, b); }
template <typename T>
NodeId Graph<T>::sub(NodeId a, NodeId b) { return elementwise(OpTag::Sub, a, b); }
template <typename T>
NodeId Graph<T>::mul(NodeId a, NodeId b) { return elementwise(OpTag::Mul, a, b); }
template <typename T>
NodeId Graph<T>::div(NodeId a, NodeId b) { return elementwise(OpTag::Div, a, b); }

template <typename T>
NodeId Graph<T>::add_scalar(NodeId xi, T s) {
    const auto& x = node(xi).value;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
    return push(OpTag::AddScalar, {xi}, std::move(out), [](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i];
    });
}

template <typename T>
NodeId Graph<T>::scale(NodeId xi, T s) {
    const auto& x = node(xi).value;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
    return push(OpTag::Scale, {xi}, std::move(out), [s](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * s;
    });
}

template <typename T>
NodeId Graph<T>::sum(NodeId xi) {
    const auto& x = node(xi).value;
    Tensor<T> out({1}, std::vector<T>{std::accumulate(x.data().begin(), x.data().end(), T(0))});
    return push(OpTag::Sum, {xi}, std::move(out), [](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const T gy = g.nodes_[self].grad[0];
        for (auto& v : g.grad_of(in)) v += gy;
    });
}

template <typename T>
NodeId Graph<T>::mean(NodeId xi) {
    const auto& x = node(xi).value;
    if (x.size() == 0) throw DimensionError("mean: empty tensor");
    const T inv = T(1) / static_cast<T>(x.size());
    Tensor<T> out({1}, std::vector<T>{std::accumulate(x.data().begin(), x.data().end(), T(0)) * inv});
    return push(OpTag::Mean, {xi}, std::move(out), [inv](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const T gy = g.nodes_[self].grad[0] * inv;
        for (auto& v : g.grad_of(in)) v += gy;
    });
}

template <typename T>
NodeId Graph<T>::sum_spatial(NodeId xi) {
    const auto& x = node(xi).value;
    const Dims4 d = dims4(x, "sum_spatial");
    Tensor<T> out({d.b, d.c});
    for (int bc = 0; bc < d.b * d.c; ++bc) {
        const T* p = x.data().data() + static_cast<std::size_t>(bc) * d.plane();
        out[bc] = std::accumulate(p, p + d.plane(), T(0));
    }
    return push(OpTag::SumSpatial, {xi}, std::move(out), [d](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (int bc = 0; bc < d.b * d.c; ++bc) {
            T* p = dx.data() + static_cast<std::size_t>(bc) * d.plane();
            for (std::size_t i = 0; i < d.plane(); ++i) p[i] += gy[bc];
        }
    });
}

template <typename T>
NodeId Graph<T>::log(NodeId xi) {
    const auto& x = node(xi).value;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
    return push(OpTag::Log, {xi}, std::move(out), [](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& x = g.nodes_[in.index].value;
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] / x[i];
    });
}

template <typename T>
NodeId Graph<T>::clamp(NodeId xi, T lo, T hi) {
    const auto& x = node(xi).value;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
    return push(OpTag::Clamp, {xi}, std::move(out), [lo, hi](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& x = g.nodes_[in.index].value;
        const auto& gy = g.nodes_[self].grad;
        auto& dx = g.grad_of(in);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            if (x[i] >= lo && x[i] <= hi) dx[i] += gy[i];
        }
    });
}

template <typename T>
NodeId Graph<T>::warp_bilinear(NodeId ii, NodeId fi) {
    const auto& img = node(ii).value;
    const auto& field = node(fi).value;
    const Dims4 di = dims4(img, "warp_bilinear image");
    const Dims4 df = dims4(field, "warp_bilinear field");
    if (df.c != 2 || df.b != di.b || df.h != di.h || df.w != di.w) {
        throw DimensionError("warp_bilinear: field " + shape_string(field.shape()) + " does not match image " +
                             shape_string(img.shape()));
    }
    for (T v : field.data()) {
        if (!std::isfinite(v)) throw NumericError("warp_bilinear: non-finite displacement");
    }
    Tensor<T> out(img.shape());
    const std::size_t plane = di.plane();
    for (int n = 0; n < di.b; ++n) {
        const T* dy = field.data().data() + n * df.sample();
        const T* dxp = dy + plane;
        for (int r = 0; r < di.h; ++r) {
            for (int c = 0; c < di.w; ++c) {
                const std::size_t p = static_cast<std::size_t>(r) * di.w + c;
                const Sample<T> s = locate<T>(r + dy[p], c + dxp[p], di.h, di.w);
                const T w00 = (T(1) - s.wy) * (T(1) - s.wx), w01 = (T(1) - s.wy) * s.wx;
                const T w10 = s.wy * (T(1) - s.wx), w11 = s.wy * s.wx;
                for (int k = 0; k < di.c; ++k) {
                    const T* src = img.data().data() + n * di.sample() + k * plane;
                    out[n * di.sample() + k * plane + p] = w00 * src[s.y0 * di.w + s.x0] + w01 * src[s.y0 * di.w + s.x1] +
                                                           w10 * src[s.y1 * di.w + s.x0] + w11 * src[s.y1 * di.w + s.x1];
                }
            }
        }
    }
    return push(OpTag::Warp, {ii, fi}, std::move(out), [di](Graph& g, std::size_t self) {
        const NodeId in_img = g.nodes_[self].inputs[0], in_field = g.nodes_[self].inputs[1];
        const auto& img = g.nodes_[in_img.index].value;
        const auto& field = g.nodes_[in_field.index].value;
        const auto& gy = g.nodes_[self].grad;
        T* dimg = g.needs(in_img) ? g.grad_of(in_img).data() : nullptr;
        T* dfield = g.needs(in_field) ? g.grad_of(in_field).data() : nullptr;
        const std::size_t plane = di.plane();
        for (int n = 0; n < di.b; ++n) {
            const T* dy = field.data().data() + n * 2 * plane;
            const T* dxp = dy + plane;
            for (int r = 0; r < di.h; ++r) {
                for (int c = 0; c < di.w; ++c) {
                    const std::size_t p = static_cast<std::size_t>(r) * di.w + c;
                    const Sample<T> s = locate<T>(r + dy[p], c + dxp[p], di.h, di.w);
                    const std::size_t i00 = s.y0 * di.w + s.x0, i01 = s.y0 * di.w + s.x1;
                    const std::size_t i10 = s.y1 * di.w + s.x0, i11 = s.y1 * di.w + s.x1;
                    T grad_y = 0, grad_x = 0;
                    for (int k = 0; k < di.c; ++k) {
                        const std::size_t base = n * di.sample() + k * plane;
                        const T gv = gy[base + p];
                        const T* src = img.data().data() + base;
                        if (dimg) {
                            dimg[base + i00] += gv * (T(1) - s.wy) * (T(1) - s.wx);
                            dimg[base + i01] += gv * (T(1) - s.wy) * s.wx;
                            dimg[base + i10] += gv * s.wy * (T(1) - s.wx);
                            dimg[base + i11] += gv * s.wy * s.wx;
                        }
                        grad_y += gv * ((T(1) - s.wx) * (src[i10] - src[i00]) + s.wx * (src[i11] - src[i01]));
                        grad_x += gv * ((T(1) - s.wy) * (src[i01] - src[i00]) + s.wy * (src[i11] - src[i10]));
                    }
                    if (dfield) {
                        dfield[n * 2 * plane + p] += grad_y;
                        dfield[n * 2 * plane + plane + p] += grad_x;
                    }
                }
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::smoothness(NodeId fi) {
    const auto& f = node(fi).value;
    const Dims4 d = dims4(f, "smoothness");
    const std::size_t count =
        static_cast<std::size_t>(d.b) * d.c * (static_cast<std::size_t>(d.h - 1) * d.w + static_cast<std::size_t>(d.h) * (d.w - 1));
    if (count == 0) throw DimensionError("smoothness: field has no neighbouring pixels");
    T total = 0;
    for (int bc = 0; bc < d.b * d.c; ++bc) {
        const T* p = f.data().data() + static_cast<std::size_t>(bc) * d.plane();
        for (int r = 0; r < d.h; ++r) {
            for (int c = 0; c < d.w; ++c) {
                const T v = p[r * d.w + c];
                if (r + 1 < d.h) total += (p[(r + 1) * d.w + c] - v) * (p[(r + 1) * d.w + c] - v);
                if (c + 1 < d.w) total += (p[r * d.w + c + 1] - v) * (p[r * d.w + c + 1] - v);
            }
        }
    }
    const T inv = T(1) / static_cast<T>(count);
    Tensor<T> out({1}, std::vector<T>{total * inv});
    return push(OpTag::Smoothness, {fi}, std::move(out), [d, inv](Graph& g, std::size_t self) {
        const NodeId in = g.nodes_[self].inputs[0];
        const auto& f = g.nodes_[in.index].value;
        const T scale = T(2) * inv * g.nodes_[self].grad[0];
        auto& df = g.grad_of(in);
        for (int bc = 0; bc < d.b * d.c; ++bc) {
            const std::size_t base = static_cast<std::size_t>(bc) * d.plane();
            const T* p = f.data().data() + base;
            T* q = df.data() + base;
            for (int r = 0; r < d.h; ++r) {
                for (int c = 0; c < d.w; ++c) {
                    const int i = r * d.w + c;
                    if (r + 1 < d.h) {
                        const T diff = p[i + d.w] - p[i];
                        q[i + d.w] += scale * diff;
                        q[i] -= scale * diff;
                    }
                    if (c + 1 < d.w) {
                        const T diff = p[i + 1] - p[i];
                        q[i + 1] += scale * diff;
                        q[i] -= scale * diff;
                    }
                }
            }
        }
    });
}

template <typename T>
NodeId Graph<T>::ncc_loss(NodeId ai, NodeId bi) {
    const auto& a = node(ai).value;
    const auto& b = node(bi).value;
    if (a.shape() != b.shape() || a.rank() < 1 || a.dim(0) < 1) {
        throw DimensionError("ncc_loss: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    constexpr T eps = T(1e-8);
    const int batch = a.dim(0);
    const std::size_t n = a.size() / batch;
    struct Stats {
        T mean_a, mean_b, saa, sbb, sab;
    };
    std::vector<Stats> stats(batch);
    T total = 0;
    for (int s = 0; s < batch; ++s) {
        const T* pa = a.data().data() + s * n;
        const T* pb = b.data().data() + s * n;
        Stats st{};
        st.mean_a = std::accumulate(pa, pa + n, T(0)) / static_cast<T>(n);
        st.mean_b = std::accumulate(pb, pb + n, T(0)) / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T da = pa[i] - st.mean_a, db = pb[i] - st.mean_b;
            st.saa += da * da;
            st.sbb += db * db;
            st.sab += da * db;
        }
        stats[s] = st;
        total += st.sab / std::sqrt(st.saa * st.sbb + eps);
    }
    Tensor<T> out({1}, std::vector<T>{T(1) - total / static_cast<T>(batch)});
    return push(OpTag::Ncc, {ai, bi}, std::move(out), [stats, n, batch](Graph& g, std::size_t self) {
        const NodeId an = g.nodes_[self].inputs[0], bn = g.nodes_[self].inputs[1];
        const auto& a = g.nodes_[an.index].value;
        const auto& b = g.nodes_[bn.index].value;
        const T scale = -g.nodes_[self].grad[0] / static_cast<T>(batch);
        T* da = g.needs(an) ? g.grad_of(an).data() : nullptr;
        T* db = g.needs(bn) ? g.grad_of(bn).data() : nullptr;
        for (int s = 0; s < batch; ++s) {
            const Stats& st = stats[s];
            const T denom = std::sqrt(st.saa * st.sbb + eps);
            const T denom3 = denom * denom * denom;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = s * n + i;
                const T ca = a[k] - st.mean_a, cb = b[k] - st.mean_b;
                if (da) da[k] += scale * (cb / denom - st.sab * st.sbb * ca / denom3);
                if (db) db[k] += scale * (ca / denom - st.sab * st.saa * cb / denom3);
            }
        }
    });
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
    if (mode_ != GradMode::enabled) throw UsageError("backward: graph was built without gradient recording");
    const auto& root = node(loss);
    if (root.value.size() != 1) {
        throw UsageError("backward: loss must be a scalar, got shape " + shape_string(root.value.shape()));
    }
    if (backward_done_) throw UsageError("backward: already called on this graph");
    backward_done_ = true;
    if (!root.needs_grad) return;

    grad_of(loss)[0] += T(1);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.back) n.back(*this, i);
        if (n.param != nullptr) {
            if (!n.param->has_grad()) n.param->zero_grad();
            auto dst = n.param->grad();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
        }
    }
}

template class Graph<float>;
template class Graph<double>;

} // namespace colabel::ad
