#pragma once

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace pairforge {

/// Reads a whole file; throws IoError when it cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes content, creating parent directories as needed.
void write_file(const std::filesystem::path& path, const std::string& content);

/// Parses path as JSON; throws MalformedRecord on parse failure.
nlohmann::json read_json(const std::filesystem::path& path);

/// Calls fn(line_number, line) for every non-empty line (1-based numbering).
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn);

/// Hex FNV-1a digest of a byte string / file, e.g. "fnv1a64:9e0f...".
std::string digest_bytes(std::string_view bytes);
std::string digest_file(const std::filesystem::path& path);

}  // namespace pairforge
