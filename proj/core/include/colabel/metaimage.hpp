#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "colabel/volume.hpp"

namespace colabel {

enum class ElementType { UChar, Short, UShort, Float };

std::string to_string(ElementType type);
std::size_t element_size(ElementType type);

// Parsed .mhd header. Extents follow MetaImage order: x (columns), y (rows), z (slices).
struct MetaImageHeader {
    int ndims = 0;
    std::array<int, 3> dim_size{};
    std::array<double, 3> element_spacing{1.0, 1.0, 1.0};
    ElementType element_type = ElementType::Float;
    bool msb = false;
    std::string element_data_file;
    // Offset of the payload inside the header file when ElementDataFile = LOCAL.
    std::size_t local_offset = 0;
};

MetaImageHeader read_metaimage_header(const std::filesystem::path& header_path);

// Reads a 3D MetaImage and converts the payload to float.
Volume read_metaimage(const std::filesystem::path& header_path);
// Same, for segmentations: any nonzero element becomes 1.
LabelVolume read_label_metaimage(const std::filesystem::path& header_path);

// Writes header_path and a sibling .raw payload. Short/UShort/UChar payloads are
// rounded and saturated.
void write_metaimage(const std::filesystem::path& header_path, const Volume& volume,
                     ElementType type = ElementType::Float, bool msb = false);
void write_label_metaimage(const std::filesystem::path& header_path, const LabelVolume& labels);

} // namespace colabel
