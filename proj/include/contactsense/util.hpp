#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace contactsense {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary and renames over the target.
void atomic_write(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace contactsense
