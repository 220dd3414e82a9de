#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace pretrain {

// FNV-1a 64 over raw bytes; used for input fingerprints in run manifests.
std::uint64_t fnv1a(std::string_view bytes);

std::string read_file(const std::string& path);
std::vector<std::string> read_lines(const std::string& path);
void write_file(const std::string& path, std::string_view content);

bool file_exists(const std::string& path);

// Lowercased whitespace tokenization (ASCII case folding; multi-byte UTF-8
// sequences pass through untouched).
std::vector<std::string> tokenize(std::string_view line);

std::string to_hex(std::uint64_t value);

// Shortest decimal that round-trips a double exactly.
std::string format_double(double value);

}  // namespace pretrain
