#include "colabel/fusion.hpp"

#include <map>

namespace colabel {
namespace {

std::map<SliceKey, const PseudoMask*> index_by_key(std::span<const PseudoMask> masks, const char* which) {
    std::map<SliceKey, const PseudoMask*> out;
    for (const auto& m : masks) {
        if (!out.emplace(m.key(), &m).second) {
            throw PairingError(std::string("fuse_dataset: duplicate key ") + to_string(m.key()) + " in " + which);
        }
    }
    return out;
}

} // namespace

PseudoMask fuse(const PseudoMask& semi, const PseudoMask& ssl) {
    if (semi.key() != ssl.key()) {
        throw PairingError("fuse: keys differ (" + to_string(semi.key()) + " vs " + to_string(ssl.key()) + ")");
    }
    if (!semi.mask.same_shape(ssl.mask)) {
        throw PairingError("fuse: mask shapes differ for " + to_string(semi.key()));
    }
    PseudoMask out{semi.volume_id, semi.slice, Mask2D(semi.mask.rows(), semi.mask.cols()), Provenance::fused};
    const auto a = semi.mask.values();
    const auto b = ssl.mask.values();
    auto o = out.mask.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (a[i] != 0 && b[i] != 0) ? 1 : 0;
    return out;
}

std::vector<PseudoMask> fuse_dataset(std::span<const PseudoMask> semis, std::span<const PseudoMask> ssls,
                                     const FusionOptions& options) {
    const auto a = index_by_key(semis, "semi list");
    const auto b = index_by_key(ssls, "ssl list");
    std::string missing;
    for (const auto& [key, _] : a) {
        if (!b.count(key)) missing += " " + to_string(key) + " (missing from ssl)";
    }
    for (const auto& [key, _] : b) {
        if (!a.count(key)) missing += " " + to_string(key) + " (missing from semi)";
    }
    if (!missing.empty()) throw PairingError("fuse_dataset: coverage mismatch:" + missing);

    std::vector<PseudoMask> out;
    out.reserve(a.size());
    for (const auto& [key, semi] : a) {
        const PseudoMask* ssl = b.at(key);
        PseudoMask fused = fuse(*semi, *ssl);
        if (options.exclude_disagreement && count_foreground(fused.mask.values()) == 0 && count_foreground(semi->mask.values()) > 0 &&
            count_foreground(ssl->mask.values()) > 0) {
            continue;
        }
        out.push_back(std::move(fused));
    }
    return out;
}

double precision(const Mask2D& pred, const Mask2D& truth) {
    if (!pred.same_shape(truth)) throw DimensionError("precision: shape mismatch");
    std::size_t positive = 0, hit = 0;
    const auto p = pred.values();
    const auto t = truth.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0) continue;
        ++positive;
        if (t[i] != 0) ++hit;
    }
    return positive == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(positive);
}

} // namespace colabel
