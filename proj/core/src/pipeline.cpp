#include "colabel/pipeline.hpp"

#include <map>

#include "colabel/semi_supervised.hpp"

namespace colabel {
namespace {

constexpr std::uint64_t kFinalStream = 0x46494E4C;   // "FINL"
constexpr std::uint64_t kBaselineStream = 0x46534C43; // "FSLC"

const CentralAnnotation& central_for(const Volume& v, std::span<const CentralAnnotation> centrals) {
    for (const auto& c : centrals) {
        if (c.volume_id != v.id) continue;
        if (c.index != central_index(v.depth())) {
            throw PairingError("annotation for " + v.id + " is on slice " + std::to_string(c.index) +
                               ", expected the central slice " + std::to_string(central_index(v.depth())));
        }
        if (c.mask.rows() != v.height() || c.mask.cols() != v.width()) {
            throw DimensionError("annotation for " + v.id + " does not match the volume's slice shape");
        }
        return c;
    }
    throw PairingError("no central annotation for volume " + v.id);
}

} // namespace

std::size_t MixedDataset::count(Provenance source) const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.source == source;
    return n;
}

std::vector<LabeledSlice> MixedDataset::labeled_slices() const {
    std::vector<LabeledSlice> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back({e.image, e.target});
    return out;
}

void FinalTrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("final: epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("final: batch_size must be positive");
    loss.validate();
}

SupervisedConfig FinalTrainConfig::supervised() const {
    return SupervisedConfig{epochs, batch_size, lr, loss, augment, seed};
}

MixedDataset build_mixed_dataset(std::span<const Volume> volumes, std::span<const CentralAnnotation> centrals,
                                 std::span<const PseudoMask> fused, bool require_full_coverage) {
    std::map<SliceKey, const PseudoMask*> by_key;
    for (const auto& m : fused) {
        if (m.provenance != Provenance::fused) {
            throw PairingError("build_mixed_dataset: " + to_string(m.key()) + " has provenance " +
                               to_string(m.provenance) + ", expected fused");
        }
        if (!by_key.emplace(m.key(), &m).second) {
            throw PairingError("build_mixed_dataset: duplicate fused label " + to_string(m.key()));
        }
    }

    MixedDataset ds;
    std::string missing;
    std::size_t used = 0;
    for (const auto& v : volumes) {
        const auto& central = central_for(v, centrals);
        for (int n = 0; n < v.depth(); ++n) {
            if (n == central.index) {
                ds.entries.push_back({v.id, n, v.voxels.slice(n), central.mask, Provenance::manual});
                continue;
            }
            const auto it = by_key.find(SliceKey{v.id, n});
            if (it == by_key.end()) {
                if (require_full_coverage) missing += " " + to_string(SliceKey{v.id, n});
                continue;
            }
            if (it->second->mask.rows() != v.height() || it->second->mask.cols() != v.width()) {
                throw PairingError("build_mixed_dataset: fused label " + to_string(it->first) + " has the wrong shape");
            }
            ds.entries.push_back({v.id, n, v.voxels.slice(n), it->second->mask, Provenance::fused});
            ++used;
        }
    }
    if (!missing.empty()) throw PairingError("build_mixed_dataset: no fused label for" + missing);
    if (used != by_key.size()) {
        throw PairingError("build_mixed_dataset: fused labels refer to slices outside the training volumes");
    }
    return ds;
}

std::vector<LabeledSlice> central_slices(std::span<const Volume> volumes, std::span<const CentralAnnotation> centrals) {
    std::vector<LabeledSlice> out;
    out.reserve(volumes.size());
    for (const auto& v : volumes) {
        const auto& c = central_for(v, centrals);
        out.push_back({v.voxels.slice(c.index), c.mask});
    }
    return out;
}

std::vector<double> train_final(SegmentationNet& net, ad::AdamState<float>& adam, const MixedDataset& ds,
                                const FinalTrainConfig& cfg, const EpochHooks& hooks) {
    cfg.validate();
    const auto data = ds.labeled_slices();
    return train_supervised(net, adam, data, cfg.supervised(), kFinalStream, hooks);
}

std::vector<double> train_fs_lcs(SegmentationNet& net, ad::AdamState<float>& adam,
                                 std::span<const LabeledSlice> centrals, const FinalTrainConfig& cfg,
                                 const EpochHooks& hooks) {
    cfg.validate();
    return train_supervised(net, adam, centrals, cfg.supervised(), kBaselineStream, hooks);
}

MaskGrid predict_volume(SegmentationNet& net, const Volume& volume) {
    const auto slices = predict_slices(net, volume);
    MaskGrid out(volume.depth(), volume.height(), volume.width());
    for (int n = 0; n < volume.depth(); ++n) out.set_slice(n, slices[n]);
    return out;
}

} // namespace colabel
