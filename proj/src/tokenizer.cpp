#include "ssr/tokenizer.hpp"

#include <algorithm>

#include "ssr/error.hpp"
#include "ssr/util.hpp"

namespace ssr {

const std::vector<std::string>& Tokenizer::default_specials() {
  static const std::vector<std::string> s = {kPadToken, kEosToken, kTranslationToken, kAnswerToken};
  return s;
}

Tokenizer Tokenizer::byte_level(const std::vector<std::string>& specials) {
  Tokenizer t;
  t.pieces_.resize(256);
  t.byte_to_id_.assign(256, -1);
  for (int b = 0; b < 256; ++b) {
    t.pieces_[b] = std::string(1, static_cast<char>(b));
    t.byte_to_id_[b] = b;
  }
  for (const auto& sp : specials) {
    TokenId id = static_cast<TokenId>(t.pieces_.size());
    t.pieces_.push_back(sp);
    t.special_ids_[sp] = id;
    if (sp == kEosToken) t.eos_id_ = id;
  }
  t.rebuild_special_index();
  return t;
}

Tokenizer Tokenizer::ascii(const std::vector<std::string>& specials) {
  Tokenizer t;
  t.pieces_.resize(128);
  t.byte_to_id_.assign(256, -1);
  for (int b = 0; b < 128; ++b) {
    bool printable = b >= 0x20 && b < 0x7F;
    if (printable || b == '\n' || b == '\t') {
      t.pieces_[b] = std::string(1, static_cast<char>(b));
      t.byte_to_id_[b] = b;
    }
  }
  // Specials claim unused control slots from the bottom; <pad> lands on 0.
  TokenId slot = 0;
  for (const auto& sp : specials) {
    while (slot < 128 && !t.pieces_[slot].empty()) ++slot;
    if (slot >= 128) throw config_error("ascii tokenizer: out of special-token slots");
    t.pieces_[slot] = sp;
    t.special_ids_[sp] = slot;
    if (sp == kEosToken) t.eos_id_ = slot;
    ++slot;
  }
  t.rebuild_special_index();
  return t;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  // Longest special first at each position, then the single-byte table.
  std::vector<TokenId> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    for (const auto& [lit, id] : specials_by_len_) {
      if (text.compare(i, lit.size(), lit) == 0) {
        out.push_back(id);
        i += lit.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    unsigned char b = static_cast<unsigned char>(text[i]);
    TokenId id = byte_to_id_[b];
    if (id < 0)
      throw input_error("tokenizer: byte 0x" + to_hex(b).substr(14) +
                        " not encodable in this vocabulary");
    out.push_back(id);
    ++i;
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) out += decode_one(id);
  return out;
}

std::string Tokenizer::decode_one(TokenId id) const {
  if (id < 0 || id >= static_cast<TokenId>(pieces_.size()))
    throw input_error("tokenizer: id out of range: " + std::to_string(id));
  return pieces_[id];
}

TokenId Tokenizer::special_id(std::string_view literal) const {
  auto it = special_ids_.find(std::string(literal));
  if (it == special_ids_.end())
    throw config_error("special token not registered: " + std::string(literal));
  return it->second;
}

bool Tokenizer::has_special(std::string_view literal) const {
  return special_ids_.count(std::string(literal)) > 0;
}

bool Tokenizer::is_special(TokenId id) const {
  if (id < 0 || id >= static_cast<TokenId>(pieces_.size())) return false;
  return pieces_[id].size() > 1;
}

void Tokenizer::rebuild_special_index() {
  specials_by_len_.assign(special_ids_.begin(), special_ids_.end());
  std::sort(specials_by_len_.begin(), specials_by_len_.end(),
            [](const auto& a, const auto& b) {
              return a.first.size() != b.first.size() ? a.first.size() > b.first.size()
                                                      : a.first < b.first;
            });
}

std::uint64_t Tokenizer::digest() const {
  std::uint64_t h = fnv1a64("tokenizer");
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    h = fnv1a64(pieces_[i], h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
  }
  return h;
}

}  // namespace ssr
