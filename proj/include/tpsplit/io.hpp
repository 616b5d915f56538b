// File plumbing shared by every module: atomic writes, binary payloads,
// checksums.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tpsplit {

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partial file. Creates missing parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Whole file as bytes. Throws std::runtime_error when unreadable.
std::string read_text_file(const std::filesystem::path& path);

std::string encode_f32_le(std::span<const float> values);
std::vector<float> decode_f32_le(std::string_view bytes);

/// CRC-32 (IEEE 802.3) of a byte string, as 8 lowercase hex digits.
std::string crc32_hex(std::string_view bytes);

/// CRC-32 of a file's contents.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace tpsplit
