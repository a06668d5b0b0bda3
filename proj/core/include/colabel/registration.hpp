#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "colabel/labels.hpp"
#include "colabel/training.hpp"
#include "colabel/unet.hpp"

namespace colabel {

enum class Similarity { mse, ncc };

struct RegNetConfig {
    int levels = 3; // downsampling steps, mirrored by the decoder
    int base_channels = 16;
    double smoothness_weight = 1.0;
    Similarity similarity = Similarity::mse;
    int epochs = 100;
    int batch_size = 4;
    int pairs_per_epoch = 0; // 0: every ordered adjacent pair each epoch
    ad::StepDecay lr;
    std::uint64_t seed = 0;

    void validate() const;
};

// Per-pixel displacement (rows, cols) in pixels: output(p) samples input(p + d(p)).
struct DeformationField {
    Grid2D<float> drow;
    Grid2D<float> dcol;

    DeformationField() = default;
    DeformationField(int rows, int cols) : drow(rows, cols, 0.0f), dcol(rows, cols, 0.0f) {}
    int rows() const { return drow.rows(); }
    int cols() const { return drow.cols(); }
};

struct SlicePair {
    Image2D fixed;
    Image2D moving;
};

// Convolutional network mapping a stacked (fixed, moving) pair to a field.
template <typename T>
class BasicRegistrationNet {
public:
    BasicRegistrationNet() = default;
    BasicRegistrationNet(const RegNetConfig& config, std::uint64_t seed);

    // fixed, moving: [B,1,H,W] -> field [B,2,H,W]
    ad::NodeId forward(ad::Graph<T>& graph, ad::NodeId fixed, ad::NodeId moving);

    UShapedNet<T>& body() { return body_; }
    const UShapedNet<T>& body() const { return body_; }

    template <typename U>
    BasicRegistrationNet<U> cast() const {
        BasicRegistrationNet<U> out;
        out.body_ = body_.template cast<U>();
        return out;
    }

private:
    template <typename>
    friend class BasicRegistrationNet;

    UShapedNet<T> body_;
};

using RegistrationNet = BasicRegistrationNet<float>;

extern template class BasicRegistrationNet<float>;
extern template class BasicRegistrationNet<double>;

DeformationField reg_forward(RegistrationNet& net, const SlicePair& pair);

Image2D warp_bilinear(const Image2D& image, const DeformationField& field);
// Warps the mask as floats and keeps pixels with value >= 0.5.
Mask2D warp_label(const Mask2D& mask, const DeformationField& field);

double similarity_loss(const Image2D& warped, const Image2D& fixed); // mean squared difference
double smoothness_loss(const DeformationField& field);

template <typename T>
ad::NodeId similarity_loss(ad::Graph<T>& g, ad::NodeId warped, ad::NodeId fixed, Similarity kind = Similarity::mse);

// similarity(moving warped by the predicted field, fixed) + weight * smoothness(field).
template <typename T>
ad::NodeId registration_loss(ad::Graph<T>& g, BasicRegistrationNet<T>& net, ad::NodeId fixed, ad::NodeId moving,
                             const RegNetConfig& cfg);

// Ordered pairs (fixed = n, moving = n +/- 1) over all volumes.
std::vector<SlicePair> adjacent_pairs(std::span<const Volume> volumes);

// Trains on image slices only. Returns the per-epoch mean loss.
std::vector<double> train_registration(RegistrationNet& net, ad::AdamState<float>& adam,
                                       std::span<const Volume> volumes, const RegNetConfig& cfg,
                                       const EpochHooks& hooks = {});

// Mean loss terms over all adjacent pairs under the current network.
struct RegistrationScore {
    double similarity = 0.0;
    double smoothness = 0.0;
};
RegistrationScore evaluate_registration(RegistrationNet& net, std::span<const Volume> volumes);

// Chains the central label outwards: the labelled slice is the moving image, its
// unlabelled neighbour the fixed one. One mask per non-central slice.
std::vector<PseudoMask> propagate_labels(RegistrationNet& net, const Volume& volume,
                                         const CentralAnnotation& central);

// Field as a float MetaImage with two slices: row then column displacement.
void write_field_metaimage(const std::filesystem::path& header_path, const DeformationField& field);

} // namespace colabel
