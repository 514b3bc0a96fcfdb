#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ssr {

// FNV-1a 64-bit. Used for config digests, cache keys, and model
// fingerprints; not cryptographic.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t v);

// Decodes UTF-8 into code points; invalid bytes become one code point
// each (their byte value), so every byte string decodes.
std::vector<std::uint32_t> utf8_codepoints(std::string_view s);

// Splits on runs of ASCII whitespace; no empty tokens.
std::vector<std::string> whitespace_tokens(std::string_view s);

std::string lowercase_ascii(std::string_view s);

// Filesystem helpers.
std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);
std::string iso8601_utc_now();

}  // namespace ssr
