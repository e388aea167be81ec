#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dydet {

/// Hex SHA-1 of raw bytes.
std::string sha1_hex(std::string_view bytes);

/// Git blob id of a file: SHA-1 of "blob <size>\0" followed by the content.
std::string git_blob_hash(const std::filesystem::path& file);

/// Hash of a regular file, or for a directory the SHA-1 of the sorted
/// "<relative path> <blob hash>\n" listing of every file beneath it.
std::string content_hash(const std::filesystem::path& path);

}  // namespace dydet
