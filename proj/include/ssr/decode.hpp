#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "ssr/tokenizer.hpp"

namespace ssr {

enum class DecodeStrategy { greedy, sample };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  int max_new_tokens = 128;
  double temperature = 1.0;    // sample only
  std::uint64_t seed = 0;      // sample only
  std::set<TokenId> stop_tokens;

  // Throws config_error when max_new_tokens < 1 or sampling with
  // temperature <= 0.
  void validate() const;

  // Stable hash of every field that affects decoding, used to key
  // cached generations.
  std::string digest() const;
};

}  // namespace ssr
