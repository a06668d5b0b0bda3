#include "colabel/hashing.hpp"

#include <array>
#include <fstream>
#include <vector>

#include <openssl/evp.h>

#include "colabel/error.hpp"

namespace colabel {
namespace {

class Sha1 {
public:
    Sha1() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha1(), nullptr) != 1) throw Error("SHA-1: initialisation failed");
    }
    ~Sha1() { EVP_MD_CTX_free(ctx_); }
    Sha1(const Sha1&) = delete;
    Sha1& operator=(const Sha1&) = delete;

    void update(const void* data, std::size_t size) {
        if (EVP_DigestUpdate(ctx_, data, size) != 1) throw Error("SHA-1: update failed");
    }
    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_, digest.data(), &len) != 1) throw Error("SHA-1: finalisation failed");
        static constexpr char kHex[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out += kHex[digest[i] >> 4];
            out += kHex[digest[i] & 15];
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

} // namespace

std::string sha1_hex(std::string_view content) {
    Sha1 h;
    h.update(content.data(), content.size());
    return h.hex();
}

std::string blob_hash(std::string_view content) {
    Sha1 h;
    const std::string prefix = "blob " + std::to_string(content.size());
    h.update(prefix.data(), prefix.size() + 1); // includes the terminating NUL
    h.update(content.data(), content.size());
    return h.hex();
}

std::string file_blob_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string() + " for hashing");
    const auto size = std::filesystem::file_size(path);
    Sha1 h;
    const std::string prefix = "blob " + std::to_string(size);
    h.update(prefix.data(), prefix.size() + 1);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

} // namespace colabel
