#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace colabel {

// Git blob object id: SHA-1 over "blob <size>\0" followed by the content, as lowercase hex.
std::string blob_hash(std::string_view content);
std::string file_blob_hash(const std::filesystem::path& path);

// Plain SHA-1 hex digest.
std::string sha1_hex(std::string_view content);

} // namespace colabel
