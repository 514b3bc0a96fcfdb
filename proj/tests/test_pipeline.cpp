#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ssr/corpus.hpp"
#include "ssr/error.hpp"
#include "ssr/pipeline.hpp"
#include "ssr/rng.hpp"
#include "ssr/tokenizer.hpp"
#include "ssr/util.hpp"

namespace fs = std::filesystem;
using namespace ssr;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "ssr_pipeline_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A hand-wired "perfect OCR" backend: reads the text straight out of
// the glyph image reference. Lets the cache plumbing be tested
// without a trained model, with the glyph contents as the oracle.
class StubCopier : public MultimodalModel {
 public:
  StubCopier() : tok_(Tokenizer::byte_level()) {}

  const Tokenizer& tokenizer() const override { return tok_; }

  std::vector<TokenId> generate(const std::vector<TokenId>& prompt_tokens,
                                const std::string& image,
                                const DecodeConfig& cfg) const override {
    cfg.validate();
    if (prompt_tokens.empty()) throw input_error("empty prompt");
    ++calls;
    return tok_.encode(glyph_grid_text(image));
  }

  std::string fingerprint() const override { return "stub-copier-v1"; }

  mutable int calls = 0;

 private:
  Tokenizer tok_;
};

Dataset glyph_dataset() {
  Dataset d;
  d.split_name = "unit";
  const char* texts[] = {"abc", "de\nfg", "", "xyz"};
  int i = 0;
  for (const char* t : texts) {
    Sample s;
    s.id = "g" + std::to_string(i++);
    s.image = std::string("glyph:") + t;
    s.target_text = "target";
    s.lang_pair = "en-zh";
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::string random_text(Rng& rng, std::size_t max_len, bool allow_separator_literal) {
  static const std::string alphabet = "ab z.#\n<>Ta甲乙";
  std::string out;
  const std::size_t len = uniform_below(rng, max_len + 1);
  for (std::size_t i = 0; i < len; ++i) {
    if (allow_separator_literal && uniform_below(rng, 8) == 0) {
      out += kTranslationToken;
      continue;
    }
    // Pick a whole UTF-8 code point from the alphabet.
    std::size_t pos = uniform_below(rng, alphabet.size());
    while (pos > 0 && (static_cast<unsigned char>(alphabet[pos]) & 0xC0) == 0x80) --pos;
    std::size_t end = pos + 1;
    while (end < alphabet.size() && (static_cast<unsigned char>(alphabet[end]) & 0xC0) == 0x80)
      ++end;
    out += alphabet.substr(pos, end - pos);
  }
  return out;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

TEST_CASE("built-in templates carry the family's native instruction verbatim") {
  const PromptTemplate q = template_for_family("qwen2-vl");
  CHECK(q.task == TaskKind::ocr);
  CHECK(q.instruction_text == "Convert the content in the image to Markdown.");
  CHECK(q.translation_suffix == ", then translate into Chinese.");
  CHECK(q.demo_separator_token == "<Translation>");
  CHECK(q.composed_instruction() ==
        "Convert the content in the image to Markdown, then translate into Chinese.");

  CHECK(template_for_family("vary").instruction_text ==
        "Convert the document to markdown format.");
  CHECK(template_for_family("textmonkey").instruction_text == "Read all the text in the image.");
  CHECK_FALSE(template_for_family("toy").instruction_text.empty());
  CHECK_THROWS_AS(template_for_family("llava"), Error);
}

TEST_CASE("template validation rejects empty instructions and unregistered separators") {
  const Tokenizer tok = Tokenizer::byte_level();
  PromptTemplate t = template_for_family("qwen2-vl");
  CHECK_NOTHROW(t.validate(tok));
  t.demo_separator_token = "<Bogus>";
  CHECK_THROWS_AS(t.validate(tok), Error);
  t = template_for_family("qwen2-vl");
  t.instruction_text.clear();
  CHECK_THROWS_AS(t.validate(tok), Error);
}

TEST_CASE("template config file round-trips and rejects malformed entries") {
  const fs::path dir = fresh_dir("templates");
  const fs::path good = dir / "templates.json";
  std::ofstream(good) << R"({
    "qwen2-vl": {"task": "ocr", "instruction_text": "Convert the content in the image to Markdown."},
    "custom":   {"task": "caption", "instruction_text": "Describe this image",
                 "translation_suffix": ", then translate into German.",
                 "demo_separator_token": "<Answer>"}
  })";
  const auto loaded = load_template_config(good.string());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.at("qwen2-vl").instruction_text ==
        "Convert the content in the image to Markdown.");
  CHECK(loaded.at("qwen2-vl").translation_suffix == ", then translate into Chinese.");
  CHECK(loaded.at("custom").task == TaskKind::caption);
  CHECK(loaded.at("custom").translation_suffix == ", then translate into German.");
  CHECK(loaded.at("custom").demo_separator_token == "<Answer>");

  const fs::path bad = dir / "bad.json";
  std::ofstream(bad) << R"({"qwen2-vl": {"task": "ocr"}})";  // no instruction_text
  CHECK_THROWS_AS(load_template_config(bad.string()), Error);
  const fs::path notjson = dir / "notjson.json";
  std::ofstream(notjson) << "not json";
  CHECK_THROWS_AS(load_template_config(notjson.string()), Error);
  CHECK_THROWS_AS(load_template_config((dir / "missing.json").string()), Error);
}

// ---------------------------------------------------------------------------
// Escaping and rendering
// ---------------------------------------------------------------------------

TEST_CASE("separator escaping inserts a backslash and unescaping inverts it") {
  const std::string sep = "<Translation>";
  CHECK(escape_separator("<Translation>", sep) == "<\\Translation>");
  CHECK(escape_separator("a<Translation>b<Translation>", sep) ==
        "a<\\Translation>b<\\Translation>");
  CHECK(escape_separator("plain", sep) == "plain");
  CHECK(unescape_separator("<\\Translation>", sep) == "<Translation>");

  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const std::string x = random_text(rng, 24, true);
    const std::string esc = escape_separator(x, sep);
    CHECK_FALSE(contains(esc, sep));
    CHECK(unescape_separator(esc, sep) == x);
  }
}

TEST_CASE("render/parse are strict inverses and parsing requires the separator line") {
  const PromptTemplate tmpl = template_for_family("qwen2-vl");
  const auto [x1, y1] = parse_ssr_response(render_ssr_response("A", "甲", tmpl), tmpl);
  CHECK(x1 == "A");
  CHECK(y1 == "甲");
  CHECK(render_ssr_response("A", "甲", tmpl) == "A\n<Translation>\n甲");

  // Recognition text containing the literal separator survives.
  const auto [x2, y2] =
      parse_ssr_response(render_ssr_response("pre <Translation> post", "甲", tmpl), tmpl);
  CHECK(x2 == "pre <Translation> post");
  CHECK(y2 == "甲");

  CHECK_THROWS_AS(parse_ssr_response("no separator here", tmpl), Error);

  Rng rng(12);
  for (int t = 0; t < 300; ++t) {
    const std::string x = random_text(rng, 20, true);
    const std::string y = random_text(rng, 20, false);
    const auto [px, py] = parse_ssr_response(render_ssr_response(x, y, tmpl), tmpl);
    CHECK(px == x);
    CHECK(py == y);
  }
}

// ---------------------------------------------------------------------------
// Example builders
// ---------------------------------------------------------------------------

TEST_CASE("recognize-then-translate example spells the rendered response exactly") {
  const Tokenizer tok = Tokenizer::byte_level();
  const PromptTemplate tmpl = template_for_family("qwen2-vl");
  const TrainingExample ex = build_ssr_example("A", "甲", tmpl, tok, "s1");

  CHECK(tok.decode(ex.instruction_tokens) ==
        "Convert the content in the image to Markdown, then translate into Chinese.");
  CHECK(tok.decode(ex.response_tokens) == "A\n<Translation>\n甲");

  // Response = tokens of the recognition line, the single separator
  // id, tokens of the target line.
  const TokenId sep = tok.special_id(kTranslationToken);
  std::vector<TokenId> expect = tok.encode("A\n");
  expect.push_back(sep);
  for (TokenId id : tok.encode("\n甲")) expect.push_back(id);
  CHECK(ex.response_tokens == expect);
  CHECK(std::count(ex.response_tokens.begin(), ex.response_tokens.end(), sep) == 1);

  REQUIRE(ex.loss_mask.size() == ex.instruction_tokens.size() + ex.response_tokens.size());
  for (std::size_t i = 0; i < ex.instruction_tokens.size(); ++i) CHECK_FALSE(ex.loss_mask[i]);
  for (std::size_t i = ex.instruction_tokens.size(); i < ex.loss_mask.size(); ++i)
    CHECK(ex.loss_mask[i]);

  CHECK(ex.meta.sample_id == "s1");
  CHECK(ex.meta.recipe == Recipe::ssr);
  CHECK(ex.meta.source_provenance == SourceProvenance::self_generated);
}

TEST_CASE("empty recognition text is degenerate but valid; empty target is an error") {
  const Tokenizer tok = Tokenizer::byte_level();
  const PromptTemplate tmpl = template_for_family("qwen2-vl");
  const TrainingExample ex = build_ssr_example("", "甲", tmpl, tok);
  CHECK(tok.decode(ex.response_tokens) == "\n<Translation>\n甲");
  try {
    build_ssr_example("A", "", tmpl, tok);
    FAIL("expected input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::input);
  }
  PromptTemplate bogus = tmpl;
  bogus.demo_separator_token = "<Nope>";
  try {
    build_ssr_example("A", "甲", bogus, tok);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("mask and layout hold for random recognition/target pairs") {
  const Tokenizer tok = Tokenizer::byte_level();
  const PromptTemplate tmpl = template_for_family("qwen2-vl");
  Rng rng(13);
  for (int t = 0; t < 200; ++t) {
    const std::string x = random_text(rng, 16, false);
    std::string y = random_text(rng, 16, false);
    if (y.empty()) y = "y";
    const TrainingExample ex = build_ssr_example(x, y, tmpl, tok);
    REQUIRE(ex.loss_mask.size() == ex.instruction_tokens.size() + ex.response_tokens.size());
    for (std::size_t i = 0; i < ex.loss_mask.size(); ++i)
      CHECK(ex.loss_mask[i] == (i >= ex.instruction_tokens.size()));
    CHECK(tok.decode(ex.response_tokens) == x + "\n<Translation>\n" + y);
    // Rendered text re-parses to the original pair.
    const auto [px, py] = parse_ssr_response(tok.decode(ex.response_tokens), tmpl);
    CHECK(px == x);
    CHECK(py == y);
  }
}

TEST_CASE("direct-translation baseline example holds the target alone") {
  const Tokenizer tok = Tokenizer::byte_level();
  const TrainingExample ex = build_sft_dimt_example("你好", tok, "s9");
  CHECK(tok.decode(ex.instruction_tokens) ==
        "Translate all the text in the image into Chinese and output in Markdown format.");
  CHECK(ex.response_tokens == tok.encode("你好"));
  CHECK(ex.response_tokens.size() == tok.encode("你好").size());
  for (std::size_t i = 0; i < ex.loss_mask.size(); ++i)
    CHECK(ex.loss_mask[i] == (i >= ex.instruction_tokens.size()));
  CHECK(ex.meta.recipe == Recipe::sft_dimt);
  CHECK(ex.meta.source_provenance == SourceProvenance::ground_truth);

  const TrainingExample again = build_sft_dimt_example("你好", tok, "s9");
  CHECK(again.instruction_tokens == ex.instruction_tokens);
  CHECK(again.response_tokens == ex.response_tokens);

  CHECK_THROWS_AS(build_sft_dimt_example("", tok), Error);
}

TEST_CASE("text-only translation example embeds the source in the instruction") {
  const Tokenizer tok = Tokenizer::byte_level();
  const TrainingExample ex = build_sft_mt_example("hello world", "你好世界", tok);
  CHECK(tok.decode(ex.instruction_tokens) == "Translate these text into Chinese.\nhello world");
  CHECK(ex.response_tokens == tok.encode("你好世界"));
  CHECK(ex.image.empty());
  CHECK(ex.meta.recipe == Recipe::sft_mt);
  CHECK_THROWS_AS(build_sft_mt_example("", "你好", tok), Error);
  CHECK_THROWS_AS(build_sft_mt_example("hello", "", tok), Error);
}

TEST_CASE("caption and question-answer variants use their own separators") {
  const Tokenizer tok = Tokenizer::byte_level();

  DemoPayload vqa;
  vqa.demo_text = "# Report";
  vqa.question = "日期是什么？";
  vqa.answer = "2024";
  const TrainingExample ev = build_demo_variant(TaskKind::vqa, vqa, tok);
  const std::string instr = tok.decode(ev.instruction_tokens);
  CHECK(instr ==
        "Convert the content in the image to Markdown, then answer the following question:\n"
        "日期是什么？");
  CHECK(instr.size() >= vqa.question.size());
  CHECK(instr.substr(instr.size() - vqa.question.size()) == vqa.question);  // ends with Q
  const TokenId ans = tok.special_id(kAnswerToken);
  std::vector<TokenId> expect = tok.encode("# Report\n");
  expect.push_back(ans);
  for (TokenId id : tok.encode("\n2024")) expect.push_back(id);
  CHECK(ev.response_tokens == expect);

  DemoPayload cap;
  cap.demo_text = "";
  cap.target_text = "甲";
  const TrainingExample ec = build_demo_variant(TaskKind::caption, cap, tok);
  CHECK(tok.decode(ec.instruction_tokens) == "Describe this image, then translate into Chinese.");
  CHECK(tok.decode(ec.response_tokens) == "\n<Translation>\n甲");

  for (std::size_t i = 0; i < ev.loss_mask.size(); ++i)
    CHECK(ev.loss_mask[i] == (i >= ev.instruction_tokens.size()));

  CHECK_THROWS_AS(build_demo_variant(TaskKind::ocr, vqa, tok), Error);
  DemoPayload no_q = vqa;
  no_q.question.clear();
  CHECK_THROWS_AS(build_demo_variant(TaskKind::vqa, no_q, tok), Error);
  DemoPayload no_a = vqa;
  no_a.answer.clear();
  CHECK_THROWS_AS(build_demo_variant(TaskKind::vqa, no_a, tok), Error);
}

TEST_CASE("chain-of-thought prompts: one combined prompt or a two-round cascade") {
  const PromptTemplate tmpl = template_for_family("qwen2-vl");

  const CotPrompts direct = build_cot_prompts(CotMode::direct, tmpl);
  CHECK(direct.round1 ==
        "Convert the content in the image to Markdown, then translate into Chinese.");
  CHECK(contains(direct.round1, "Convert the content in the image to Markdown"));
  CHECK(contains(direct.round1, "then translate into Chinese"));
  CHECK_FALSE(direct.round2.has_value());

  const CotPrompts cascade = build_cot_prompts(CotMode::cascade, tmpl, std::string("abc"));
  CHECK(cascade.round1 == "Convert the content in the image to Markdown.");
  REQUIRE(cascade.round2.has_value());
  CHECK(contains(*cascade.round2, "Translate these text into Chinese."));
  CHECK(contains(*cascade.round2, "abc"));

  try {
    build_cot_prompts(CotMode::cascade, tmpl);
    FAIL("expected input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::input);
  }
}

// ---------------------------------------------------------------------------
// Source selection
// ---------------------------------------------------------------------------

TEST_CASE("source selection returns exactly the requested provenance") {
  Sample s;
  s.id = "doc-7";
  s.image = "glyph:ab";
  s.target_text = "甲";

  std::map<std::string, SelfReviewRecord> records;
  SelfReviewRecord rec;
  rec.sample_id = "doc-7";
  rec.source_text = "abc";
  records["doc-7"] = rec;

  CHECK(select_source(s, records, SourceProvenance::self_generated) == "abc");
  CHECK(select_source(s, records, SourceProvenance::external_ocr, std::string("ocr text")) ==
        "ocr text");

  try {
    select_source(s, records, SourceProvenance::ground_truth);
    FAIL("expected provenance error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::provenance);
    CHECK(contains(e.what(), "doc-7"));
  }
  s.source_text = "ground";
  CHECK(select_source(s, records, SourceProvenance::ground_truth) == "ground");

  Sample other = s;
  other.id = "doc-8";
  try {
    select_source(other, records, SourceProvenance::self_generated);
    FAIL("expected provenance error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::provenance);
    CHECK(contains(e.what(), "doc-8"));
  }
  CHECK_THROWS_AS(select_source(s, records, SourceProvenance::external_ocr), Error);
}

// ---------------------------------------------------------------------------
// Self-review generation and cache
// ---------------------------------------------------------------------------

TEST_CASE("self-review generates once, reuses the warm cache, and flags empty output") {
  const fs::path cache = fresh_dir("cache_basic");
  StubCopier model;
  const Dataset d = glyph_dataset();
  const PromptTemplate tmpl = template_for_family("toy");
  DecodeConfig cfg;
  cfg.max_new_tokens = 64;

  const auto records = generate_selfreview(model, d, tmpl, cfg, cache.string());
  REQUIRE(records.size() == d.size());
  CHECK(model.calls == static_cast<int>(d.size()));
  CHECK(records[0].sample_id == "g0");
  CHECK(records[0].source_text == "abc");  // oracle: the glyph grid content
  CHECK(records[1].source_text == "de\nfg");
  CHECK(records[2].source_text.empty());
  CHECK(records[2].empty_generation);
  CHECK_FALSE(records[0].empty_generation);
  for (const auto& r : records) CHECK(r.decode_hash == decode_hash_for(cfg, model.fingerprint()));

  // Warm cache, same configuration: zero model calls, identical records.
  const int before = model.calls;
  const auto again = generate_selfreview(model, d, tmpl, cfg, cache.string());
  CHECK(model.calls == before);
  REQUIRE(again.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(again[i].sample_id == records[i].sample_id);
    CHECK(again[i].source_text == records[i].source_text);
    CHECK(again[i].decode_hash == records[i].decode_hash);
    CHECK(again[i].created_at == records[i].created_at);
    CHECK(again[i].empty_generation == records[i].empty_generation);
  }

  // No leftover temp files from the atomic writes.
  for (const auto& entry : fs::recursive_directory_iterator(cache))
    CHECK(entry.path().extension() != ".tmp");
}

TEST_CASE("a changed decode configuration misses the cache and regenerates") {
  const fs::path cache = fresh_dir("cache_hashes");
  StubCopier model;
  const Dataset d = glyph_dataset();
  const PromptTemplate tmpl = template_for_family("toy");

  DecodeConfig greedy;
  const auto first = generate_selfreview(model, d, tmpl, greedy, cache.string());
  const int after_first = model.calls;

  DecodeConfig sampled;
  sampled.strategy = DecodeStrategy::sample;
  sampled.temperature = 0.7;
  sampled.seed = 5;
  CHECK(decode_hash_for(sampled, model.fingerprint()) !=
        decode_hash_for(greedy, model.fingerprint()));

  const auto second = generate_selfreview(model, d, tmpl, sampled, cache.string());
  CHECK(model.calls == after_first + static_cast<int>(d.size()));  // full regeneration
  for (const auto& r : second) CHECK(r.decode_hash == decode_hash_for(sampled, model.fingerprint()));

  // The stale records were overwritten in place; rerunning with the
  // new configuration is now a pure cache hit.
  const int after_second = model.calls;
  generate_selfreview(model, d, tmpl, sampled, cache.string());
  CHECK(model.calls == after_second);
}

TEST_CASE("cache records bind to the model fingerprint") {
  const fs::path cache = fresh_dir("cache_fingerprint");
  StubCopier model;
  const Dataset d = glyph_dataset();
  const PromptTemplate tmpl = template_for_family("toy");
  DecodeConfig cfg;
  generate_selfreview(model, d, tmpl, cfg, cache.string());
  const fs::path file =
      selfreview_cache_path(cache.string(), model.fingerprint(), "g0");
  CHECK(fs::exists(file));
  // Files live under a per-fingerprint directory.
  CHECK(file.parent_path().filename().string() == model.fingerprint());
}

TEST_CASE("a corrupt cache file fails loudly instead of being silently regenerated") {
  const fs::path cache = fresh_dir("cache_corrupt");
  StubCopier model;
  const Dataset d = glyph_dataset();
  const PromptTemplate tmpl = template_for_family("toy");
  DecodeConfig cfg;
  generate_selfreview(model, d, tmpl, cfg, cache.string());
  const fs::path file = selfreview_cache_path(cache.string(), model.fingerprint(), "g1");
  std::ofstream(file) << "{ not json";
  try {
    generate_selfreview(model, d, tmpl, cfg, cache.string());
    FAIL("expected io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
}

TEST_CASE("record index keys by sample id and rejects duplicates") {
  SelfReviewRecord a;
  a.sample_id = "x";
  a.source_text = "1";
  SelfReviewRecord b = a;
  b.source_text = "2";
  CHECK(index_records({a}).at("x").source_text == "1");
  CHECK_THROWS_AS(index_records({a, b}), Error);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

TEST_CASE("training examples round-trip through JSON") {
  const Tokenizer tok = Tokenizer::byte_level();
  const PromptTemplate tmpl = template_for_family("qwen2-vl");
  TrainingExample ex = build_ssr_example("abc", "甲乙", tmpl, tok, "doc-1");
  ex.image = "glyph:abc";
  const TrainingExample back = TrainingExample::from_json(ex.to_json());
  CHECK(back.instruction_tokens == ex.instruction_tokens);
  CHECK(back.response_tokens == ex.response_tokens);
  CHECK(back.loss_mask == ex.loss_mask);
  CHECK(back.meta.sample_id == "doc-1");
  CHECK(back.meta.recipe == Recipe::ssr);
  CHECK(back.meta.source_provenance == SourceProvenance::self_generated);
  CHECK(back.image == "glyph:abc");

  CHECK_THROWS_AS(TrainingExample::from_json("{}"), Error);
  CHECK_THROWS_AS(TrainingExample::from_json("nope"), Error);
}
