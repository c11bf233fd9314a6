#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

#include "cxplain/tensor.hpp"

namespace cxplain {

using Json = nlohmann::ordered_json;

// Binary matrix file: "CXMAT001", uint64 rows, uint64 cols, rows*cols
// little-endian float64 values in row-major order.
void write_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t file_fingerprint(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);
/// Stable fingerprint of a JSON value (hash of its compact dump).
std::string fingerprint(const Json& j);

/// Derives an independent stream seed from a global seed and a key.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key);

}  // namespace cxplain
