#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "colabel/phantom.hpp"
#include "colabel/pipeline.hpp"
#include "colabel/preprocess.hpp"

namespace colabel::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("colabel_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Small phantom used by the training tests: 32x32, 5 slices.
inline PhantomSpec small_phantom(int count = 4, std::uint64_t seed = 3) {
    PhantomSpec s;
    s.count = count;
    s.height = 32;
    s.width = 32;
    s.depth = 5;
    s.radius_row = {6.0, 9.0};
    s.radius_col = {6.0, 9.0};
    s.deformation_amplitude = 1.0;
    s.seed = seed;
    return s;
}

// Normalised phantom volumes with their references and central annotations.
struct PhantomData {
    std::vector<Volume> volumes;
    std::vector<LabelVolume> truth;
    std::vector<CentralAnnotation> centrals;

    std::vector<LabeledSlice> labeled() const { return central_slices(volumes, centrals); }
    std::vector<Image2D> unlabeled() const {
        std::vector<Image2D> out;
        for (const auto& v : volumes)
            for (int n = 0; n < v.depth(); ++n)
                if (n != central_index(v.depth())) out.push_back(v.voxels.slice(n));
        return out;
    }
};

inline PhantomData make_phantom_data(const PhantomSpec& spec) {
    PhantomData d;
    for (auto& pc : generate_phantom(spec)) {
        d.volumes.push_back(normalize_intensity(pc.volume));
        d.centrals.push_back(central_annotation(pc.truth));
        d.truth.push_back(std::move(pc.truth));
    }
    return d;
}

inline double dice2d(const Mask2D& a, const Mask2D& b) {
    std::size_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a.values()[i] != 0;
        sb += b.values()[i] != 0;
        inter += a.values()[i] && b.values()[i];
    }
    return sa + sb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

} // namespace colabel::testing
