#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "colabel/autodiff/tensor.hpp"

namespace colabel::ad {

// Binary layout, little-endian throughout:
//   "CLBLCKPT" | u32 version | u32 count |
//   count x (u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload)
inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'B', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

} // namespace colabel::ad
