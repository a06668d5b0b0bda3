#include "colabel/metaimage.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

namespace colabel {
namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

ElementType parse_element_type(const std::string& name) {
    if (name == "MET_UCHAR") return ElementType::UChar;
    if (name == "MET_SHORT") return ElementType::Short;
    if (name == "MET_USHORT") return ElementType::UShort;
    if (name == "MET_FLOAT") return ElementType::Float;
    throw FormatError("unsupported ElementType '" + name + "'");
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "True" || value == "true" || value == "1") return true;
    if (value == "False" || value == "false" || value == "0") return false;
    throw FormatError("key " + key + ": expected True/False, got '" + value + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value, int expected) {
    std::istringstream in(value);
    std::vector<T> out;
    T item{};
    while (in >> item) out.push_back(item);
    if (!in.eof()) throw FormatError("key " + key + ": malformed value '" + value + "'");
    if (static_cast<int>(out.size()) != expected) {
        throw FormatError("key " + key + " has " + std::to_string(out.size()) + " entries but NDims = " +
                          std::to_string(expected));
    }
    return out;
}

template <typename T>
T load_scalar(const unsigned char* bytes, bool swap) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, bytes, sizeof(T));
    if (swap) std::reverse(buf, buf + sizeof(T));
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

template <typename T>
void store_scalar(T value, bool swap, std::vector<unsigned char>& out) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if (swap) std::reverse(buf, buf + sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename I>
I saturate(float v) {
    const double r = std::nearbyint(static_cast<double>(v));
    if (!(r >= std::numeric_limits<I>::min())) return std::numeric_limits<I>::min();
    if (r > std::numeric_limits<I>::max()) return std::numeric_limits<I>::max();
    return static_cast<I>(r);
}

struct Payload {
    MetaImageHeader header;
    std::vector<float> values;
};

Payload read_payload(const std::filesystem::path& header_path) {
    Payload p{read_metaimage_header(header_path), {}};
    const auto& h = p.header;
    if (h.ndims != 3) throw FormatError(header_path.string() + ": NDims must be 3");

    std::filesystem::path data_path = h.element_data_file == "LOCAL"
                                          ? header_path
                                          : header_path.parent_path() / h.element_data_file;
    std::ifstream in(data_path, std::ios::binary);
    if (!in) throw FormatError("cannot open MetaImage payload " + data_path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (h.local_offset > bytes.size()) throw TruncationError(data_path.string() + ": payload missing");

    const std::size_t count = static_cast<std::size_t>(h.dim_size[0]) * h.dim_size[1] * h.dim_size[2];
    const std::size_t esize = element_size(h.element_type);
    const std::size_t available = bytes.size() - h.local_offset;
    if (available != count * esize) {
        throw TruncationError(data_path.string() + ": payload has " + std::to_string(available) +
                              " bytes, header declares " + std::to_string(count * esize));
    }

    const bool swap = h.msb != (std::endian::native == std::endian::big);
    const unsigned char* src = bytes.data() + h.local_offset;
    p.values.resize(count);
    for (std::size_t i = 0; i < count; ++i, src += esize) {
        switch (h.element_type) {
        case ElementType::UChar: p.values[i] = static_cast<float>(*src); break;
        case ElementType::Short: p.values[i] = static_cast<float>(load_scalar<std::int16_t>(src, swap)); break;
        case ElementType::UShort: p.values[i] = static_cast<float>(load_scalar<std::uint16_t>(src, swap)); break;
        case ElementType::Float: p.values[i] = load_scalar<float>(src, swap); break;
        }
    }
    return p;
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(std::numeric_limits<double>::max_digits10);
    os << v;
    return os.str();
}

void write_raw(const std::filesystem::path& header_path, int cols, int rows, int slices, const Spacing& spacing,
               ElementType type, bool msb, const std::vector<unsigned char>& payload) {
    auto raw_path = header_path;
    raw_path.replace_extension(".raw");
    if (!header_path.parent_path().empty()) std::filesystem::create_directories(header_path.parent_path());

    std::ofstream header(header_path, std::ios::binary | std::ios::trunc);
    if (!header) throw FormatError("cannot write " + header_path.string());
    header << "ObjectType = Image\n"
           << "NDims = 3\n"
           << "BinaryData = True\n"
           << "ElementByteOrderMSB = " << (msb ? "True" : "False") << "\n"
           << "DimSize = " << cols << " " << rows << " " << slices << "\n"
           << "ElementSpacing = " << format_double(spacing.col) << " " << format_double(spacing.row) << " "
           << format_double(spacing.slice) << "\n"
           << "ElementType = " << to_string(type) << "\n"
           << "ElementDataFile = " << raw_path.filename().string() << "\n";

    std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
    raw.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!raw || !header) throw FormatError("failed writing " + header_path.string());
}

} // namespace

std::string to_string(ElementType type) {
    switch (type) {
    case ElementType::UChar: return "MET_UCHAR";
    case ElementType::Short: return "MET_SHORT";
    case ElementType::UShort: return "MET_USHORT";
    case ElementType::Float: return "MET_FLOAT";
    }
    return "MET_UNKNOWN";
}

std::size_t element_size(ElementType type) {
    switch (type) {
    case ElementType::UChar: return 1;
    case ElementType::Short:
    case ElementType::UShort: return 2;
    case ElementType::Float: return 4;
    }
    return 0;
}

MetaImageHeader read_metaimage_header(const std::filesystem::path& header_path) {
    std::ifstream in(header_path, std::ios::binary);
    if (!in) throw FormatError("cannot open MetaImage header " + header_path.string());

    std::map<std::string, std::string> keys;
    std::string line;
    bool saw_data_file = false;
    while (!saw_data_file && std::getline(in, line)) {
        const auto eq = line.find('=');
        if (trim(line).empty()) continue;
        if (eq == std::string::npos) throw FormatError(header_path.string() + ": malformed line '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto [it, inserted] = keys.emplace(key, value);
        if (!inserted && it->second != value) {
            throw FormatError(header_path.string() + ": contradictory values for " + key);
        }
        // ElementDataFile terminates the header.
        saw_data_file = key == "ElementDataFile";
    }

    auto require = [&](const char* key) -> const std::string& {
        auto it = keys.find(key);
        if (it == keys.end()) throw FormatError(header_path.string() + ": missing required key " + key);
        return it->second;
    };

    MetaImageHeader h;
    try {
        h.ndims = std::stoi(require("NDims"));
    } catch (const std::logic_error&) {
        throw FormatError(header_path.string() + ": NDims is not an integer");
    }
    if (h.ndims < 1 || h.ndims > 3) throw FormatError(header_path.string() + ": NDims must be 1..3");

    const auto dims = parse_list<int>("DimSize", require("DimSize"), h.ndims);
    h.dim_size = {1, 1, 1};
    for (int i = 0; i < h.ndims; ++i) {
        if (dims[i] <= 0) throw FormatError(header_path.string() + ": DimSize entries must be positive");
        h.dim_size[i] = dims[i];
    }
    if (auto it = keys.find("ElementSpacing"); it != keys.end()) {
        const auto sp = parse_list<double>("ElementSpacing", it->second, h.ndims);
        for (int i = 0; i < h.ndims; ++i) {
            if (!(sp[i] > 0.0)) throw FormatError(header_path.string() + ": ElementSpacing must be positive");
            h.element_spacing[i] = sp[i];
        }
    }
    h.element_type = parse_element_type(require("ElementType"));

    std::optional<bool> msb;
    for (const char* key : {"ElementByteOrderMSB", "BinaryDataByteOrderMSB"}) {
        if (auto it = keys.find(key); it != keys.end()) {
            const bool v = parse_bool(key, it->second);
            if (msb && *msb != v) throw FormatError(header_path.string() + ": contradictory byte order keys");
            msb = v;
        }
    }
    h.msb = msb.value_or(false);

    if (auto it = keys.find("CompressedData"); it != keys.end() && parse_bool("CompressedData", it->second)) {
        throw FormatError(header_path.string() + ": compressed payloads are not supported");
    }
    if (auto it = keys.find("ElementNumberOfChannels"); it != keys.end() && trim(it->second) != "1") {
        throw FormatError(header_path.string() + ": multi-channel elements are not supported");
    }

    h.element_data_file = require("ElementDataFile");
    if (h.element_data_file == "LOCAL") {
        const auto pos = in.tellg();
        h.local_offset = pos < 0 ? 0 : static_cast<std::size_t>(pos);
        if (pos < 0) {
            // getline consumed the final line without a trailing newline: no payload.
            in.clear();
            in.seekg(0, std::ios::end);
            h.local_offset = static_cast<std::size_t>(in.tellg());
        }
    }
    return h;
}

Volume read_metaimage(const std::filesystem::path& header_path) {
    auto p = read_payload(header_path);
    const auto& d = p.header.dim_size;
    Volume v;
    v.id = header_path.stem().string();
    v.voxels = Grid3D<float>(d[2], d[1], d[0]);
    std::copy(p.values.begin(), p.values.end(), v.voxels.values().begin());
    v.spacing = {p.header.element_spacing[1], p.header.element_spacing[0], p.header.element_spacing[2]};
    return v;
}

LabelVolume read_label_metaimage(const std::filesystem::path& header_path) {
    auto p = read_payload(header_path);
    const auto& d = p.header.dim_size;
    LabelVolume v;
    v.id = header_path.stem().string();
    v.labels = MaskGrid(d[2], d[1], d[0]);
    std::transform(p.values.begin(), p.values.end(), v.labels.values().begin(),
                   [](float x) -> std::uint8_t { return x != 0.0f ? 1 : 0; });
    v.spacing = {p.header.element_spacing[1], p.header.element_spacing[0], p.header.element_spacing[2]};
    return v;
}

void write_metaimage(const std::filesystem::path& header_path, const Volume& volume, ElementType type, bool msb) {
    const bool swap = msb != (std::endian::native == std::endian::big);
    std::vector<unsigned char> payload;
    payload.reserve(volume.voxels.size() * element_size(type));
    for (float v : volume.voxels.values()) {
        switch (type) {
        case ElementType::UChar: payload.push_back(saturate<std::uint8_t>(v)); break;
        case ElementType::Short: store_scalar(saturate<std::int16_t>(v), swap, payload); break;
        case ElementType::UShort: store_scalar(saturate<std::uint16_t>(v), swap, payload); break;
        case ElementType::Float: store_scalar(v, swap, payload); break;
        }
    }
    write_raw(header_path, volume.width(), volume.height(), volume.depth(), volume.spacing, type, msb, payload);
}

void write_label_metaimage(const std::filesystem::path& header_path, const LabelVolume& labels) {
    const auto values = labels.labels.values();
    std::vector<unsigned char> payload(values.begin(), values.end());
    write_raw(header_path, labels.labels.cols(), labels.labels.rows(), labels.labels.depth(), labels.spacing,
              ElementType::UChar, false, payload);
}

} // namespace colabel
