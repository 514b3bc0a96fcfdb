#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <string>

#include "doctest.h"
#include "ssr/error.hpp"
#include "ssr/tokenizer.hpp"

using namespace ssr;

TEST_CASE("byte-level tokenizer round-trips arbitrary text") {
  const Tokenizer tok = Tokenizer::byte_level();
  for (const std::string s : {"hello", "甲乙丙", "mixed 中文 and ascii", "", "\n\t\x01"}) {
    CHECK(tok.decode(tok.encode(s)) == s);
  }
}

TEST_CASE("special tokens encode to a single id and decode back") {
  for (const Tokenizer& tok : {Tokenizer::byte_level(), Tokenizer::ascii()}) {
    const auto ids = tok.encode(kTranslationToken);
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == tok.special_id(kTranslationToken));
    CHECK(tok.decode(ids) == kTranslationToken);
    CHECK(tok.is_special(ids[0]));
  }
}

TEST_CASE("specials are matched longest-first inside text") {
  const Tokenizer tok = Tokenizer::byte_level();
  const std::string text = "a<Translation>b";
  const auto ids = tok.encode(text);
  REQUIRE(ids.size() == 3);
  CHECK(ids[1] == tok.special_id(kTranslationToken));
  CHECK(tok.decode(ids) == text);
}

TEST_CASE("ascii tokenizer uses 128 ids and keeps byte values for printable text") {
  const Tokenizer tok = Tokenizer::ascii();
  CHECK(tok.vocab_size() == 128);
  const auto ids = tok.encode("Ab z");
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == 'A');
  CHECK(ids[1] == 'b');
  CHECK(ids[2] == ' ');
  CHECK(ids[3] == 'z');
  CHECK(tok.decode(ids) == "Ab z");
  CHECK(tok.encode("\n")[0] == '\n');
}

TEST_CASE("ascii tokenizer rejects bytes outside its table") {
  const Tokenizer tok = Tokenizer::ascii();
  CHECK_THROWS_AS(tok.encode("中"), Error);
  CHECK_THROWS_AS(tok.encode(std::string(1, '\x01')), Error);
}

TEST_CASE("eos and pad are registered") {
  const Tokenizer tok = Tokenizer::ascii();
  CHECK(tok.eos_id() == tok.special_id(kEosToken));
  CHECK(tok.has_special(kPadToken));
  CHECK(tok.special_id(kPadToken) == 0);
  CHECK_FALSE(tok.has_special("<NotAToken>"));
  CHECK_THROWS_AS(tok.special_id("<NotAToken>"), Error);
}

TEST_CASE("tokenizer digests differ between layouts") {
  CHECK(Tokenizer::byte_level().digest() != Tokenizer::ascii().digest());
}

TEST_CASE("decode_one rejects out-of-range ids") {
  const Tokenizer tok = Tokenizer::ascii();
  CHECK_THROWS_AS(tok.decode_one(-1), Error);
  CHECK_THROWS_AS(tok.decode_one(tok.vocab_size()), Error);
}
