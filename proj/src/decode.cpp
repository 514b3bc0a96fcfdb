#include "ssr/decode.hpp"

#include <bit>

#include "ssr/error.hpp"
#include "ssr/util.hpp"

namespace ssr {

void DecodeConfig::validate() const {
  if (max_new_tokens < 1) throw config_error("decode: max_new_tokens must be >= 1");
  if (strategy == DecodeStrategy::sample && !(temperature > 0.0))
    throw config_error("decode: sampling needs temperature > 0");
}

std::string DecodeConfig::digest() const {
  std::string s = strategy == DecodeStrategy::greedy ? "greedy" : "sample";
  s += "|n=" + std::to_string(max_new_tokens);
  if (strategy == DecodeStrategy::sample) {
    s += "|t=" + to_hex(std::bit_cast<std::uint64_t>(temperature));
    s += "|s=" + std::to_string(seed);
  }
  for (const TokenId t : stop_tokens) s += "|stop=" + std::to_string(t);
  return to_hex(fnv1a64(s));
}

}  // namespace ssr
