#pragma once

#include <string>
#include <vector>

#include "ssr/decode.hpp"
#include "ssr/tokenizer.hpp"

namespace ssr {

// Contract every multimodal backend satisfies: a tokenizer with a
// special-token registry, an image encoder, and autoregressive
// generation. Weights are immutable during inference, so concurrent
// generate() calls on one frozen model are safe.
class MultimodalModel {
 public:
  virtual ~MultimodalModel() = default;

  virtual const Tokenizer& tokenizer() const = 0;

  // Returns at most cfg.max_new_tokens newly generated ids; generation
  // halts on any cfg.stop_tokens member (the stop token itself is
  // excluded). Greedy decoding is fully deterministic.
  // Throws input_error on an empty prompt or an unencodable image.
  virtual std::vector<TokenId> generate(const std::vector<TokenId>& prompt_tokens,
                                        const std::string& image,
                                        const DecodeConfig& cfg) const = 0;

  // Stable identity of architecture + weights; keys generation caches.
  virtual std::string fingerprint() const = 0;
};

}  // namespace ssr
