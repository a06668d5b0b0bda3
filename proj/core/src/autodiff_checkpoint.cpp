#include "colabel/autodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace colabel::ad {
namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
public:
    Reader(std::vector<unsigned char> bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw TruncationError("checkpoint " + origin_ + " is truncated");
    }
    std::vector<unsigned char> bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

} // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    // Write-then-rename so an interrupted run never leaves a half-written checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
        if (!f) throw FormatError("cannot write checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint " + path.string());
    Reader in(std::vector<unsigned char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()),
              path.string());
    if (in.str(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
        throw FormatError(path.string() + " is not a checkpoint");
    }
    const auto version = in.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    std::vector<NamedTensor> tensors(in.u32());
    for (auto& [name, t] : tensors) {
        name = in.str(in.u32());
        Shape shape(in.u32());
        for (auto& d : shape) d = static_cast<int>(in.u32());
        std::vector<float> data(shape_size(shape));
        for (auto& v : data) v = in.f32();
        t = Tensor<float>(std::move(shape), std::move(data));
    }
    if (!in.done()) throw FormatError(path.string() + ": trailing bytes after last tensor");
    return tensors;
}

} // namespace colabel::ad
