#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ssr {

using TokenId = int;

// Text <-> token-id codec with a special-token registry.
//
// Two stock layouts:
//  * byte_level(): ids 0..255 are raw bytes, specials sit above 256.
//    Encodes any string; round-trips everything.
//  * ascii(): 128-id layout for the toy model. Printable ASCII plus
//    '\n' and '\t' keep their byte value as id; specials occupy unused
//    control slots. Characters outside the table fail to encode.
//
// Specials are matched longest-first during encoding, so the literal
// "<Translation>" always encodes to its single registered id.
class Tokenizer {
 public:
  static Tokenizer byte_level(const std::vector<std::string>& specials = default_specials());
  static Tokenizer ascii(const std::vector<std::string>& specials = default_specials());

  static const std::vector<std::string>& default_specials();

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;
  std::string decode_one(TokenId id) const;

  // Single id of a registered special token; throws config_error if the
  // literal is not registered.
  TokenId special_id(std::string_view literal) const;
  bool has_special(std::string_view literal) const;
  bool is_special(TokenId id) const;

  int vocab_size() const { return static_cast<int>(pieces_.size()); }
  TokenId eos_id() const { return eos_id_; }

  // Stable digest of the table; feeds the model fingerprint.
  std::uint64_t digest() const;

 private:
  void rebuild_special_index();

  std::vector<std::string> pieces_;        // id -> literal
  std::map<std::string, TokenId> special_ids_;
  std::vector<std::pair<std::string, TokenId>> specials_by_len_;
  std::vector<TokenId> byte_to_id_;        // 256 entries; -1 when unmapped
  TokenId eos_id_ = -1;
};

inline constexpr const char* kTranslationToken = "<Translation>";
inline constexpr const char* kAnswerToken = "<Answer>";
inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kPadToken = "<pad>";

}  // namespace ssr
