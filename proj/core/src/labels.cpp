#include "colabel/labels.hpp"

namespace colabel {

std::string to_string(Provenance p) {
    switch (p) {
    case Provenance::manual: return "manual";
    case Provenance::semi: return "semi";
    case Provenance::ssl: return "ssl";
    case Provenance::fused: return "fused";
    }
    return "unknown";
}

Provenance parse_provenance(const std::string& name) {
    for (auto p : {Provenance::manual, Provenance::semi, Provenance::ssl, Provenance::fused}) {
        if (to_string(p) == name) return p;
    }
    throw FormatError("unknown provenance '" + name + "'");
}

std::string to_string(const SliceKey& key) { return "(" + key.volume_id + ", " + std::to_string(key.slice) + ")"; }

void PseudoMask::validate(int central) const {
    if (!is_binary(mask.values())) throw UsageError("pseudo mask " + to_string(key()) + " is not binary");
    if (provenance == Provenance::manual && slice != central) {
        throw UsageError("manual mask on non-central slice " + to_string(key()));
    }
}

} // namespace colabel
