// Tests for the experiment harness: self-review output splitting, the
// glyph-grid world, protocol evaluation, experiment configs, persisted
// runs, sweeps, and a structural smoke test of the forgetting
// experiment (the full criteria run in the acceptance binary).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/harness.hpp"
#include "ssr/rng.hpp"
#include "ssr/util.hpp"

using namespace ssr;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "ssr_harness_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string grid_of(const std::string& image) {
  REQUIRE(image.rfind("glyph:", 0) == 0);
  return image.substr(6);
}

// Scripted oracle for protocol tests. Knows the toy template's prompt
// shapes and answers from the "glyph:<text>" image itself, honoring
// stop tokens and max_new_tokens like a real backend.
class GlyphOracle : public MultimodalModel {
 public:
  enum class Style {
    faithful,        // native -> transcript; composed -> transcript <sep> cipher
    leaky,           // composed -> transcript <sep> TRANSCRIPT (no cipher)
    run_on,          // native also continues into <sep> + cipher
    never_separates  // composed -> transcript only, no separator
  };

  explicit GlyphOracle(Style style = Style::faithful, int shift = 7)
      : tok_(Tokenizer::byte_level()), tmpl_(template_for_family("toy")), style_(style),
        shift_(shift) {}

  const Tokenizer& tokenizer() const override { return tok_; }
  std::string fingerprint() const override { return "glyph-oracle-v1"; }

  std::vector<TokenId> generate(const std::vector<TokenId>& prompt_tokens,
                                const std::string& image,
                                const DecodeConfig& cfg) const override {
    ++calls;
    const std::string prompt = tok_.decode(prompt_tokens);
    const std::string response = respond(prompt, image);
    std::vector<TokenId> out;
    for (TokenId id : tok_.encode(response)) {
      if (cfg.stop_tokens.count(id)) break;
      out.push_back(id);
      if (static_cast<int>(out.size()) >= cfg.max_new_tokens) break;
    }
    return out;
  }

  mutable std::atomic<int> calls{0};

 private:
  std::string respond(const std::string& prompt, const std::string& image) const {
    const std::string sep = tmpl_.demo_separator_token;
    if (prompt == tmpl_.composed_instruction()) {
      const std::string x = grid_of(image);
      switch (style_) {
        case Style::faithful:
        case Style::run_on:
          return x + "\n" + sep + "\n" + glyph_cipher(x, shift_);
        case Style::leaky:
          return x + "\n" + sep + "\n" + x;
        case Style::never_separates:
          return x;
      }
    }
    if (prompt == tmpl_.instruction_text) {
      const std::string x = grid_of(image);
      if (style_ == Style::run_on) return x + "\n" + sep + "\n" + glyph_cipher(x, shift_);
      return x;
    }
    const std::string mt_prefix = "Translate these text into Chinese.\n";
    if (prompt.rfind(mt_prefix, 0) == 0) {
      // Text-only MT instruction or cascade round 2: translate the
      // text that follows.
      return glyph_cipher(prompt.substr(mt_prefix.size()), shift_);
    }
    if (prompt.find(", then answer the following question:") != std::string::npos)
      return std::string("scratch ") + kAnswerToken + " 2";
    // The pinned translate-the-image instruction has no glyph wording.
    return glyph_cipher(grid_of(image), shift_);
  }

  Tokenizer tok_;
  PromptTemplate tmpl_;
  Style style_;
  int shift_;
};

ProtocolConfig toy_protocol(const std::string& dataset = "unit") {
  ProtocolConfig cfg;
  cfg.tmpl = template_for_family("toy");
  cfg.decode.max_new_tokens = 64;
  cfg.dataset_name = dataset;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// split_ssr_output
// ---------------------------------------------------------------------------

TEST_CASE("split_ssr_output separates transcript and translation at the separator") {
  const auto r = split_ssr_output("abc <Translation> \xE7\x94\xB2\xE4\xB9\x99\xE4\xB8\x99",
                                  kTranslationToken);
  CHECK(r.ocr_text == "abc");
  CHECK(r.translation == "\xE7\x94\xB2\xE4\xB9\x99\xE4\xB8\x99");
  CHECK_FALSE(r.no_separator);
}

TEST_CASE("split_ssr_output without a separator flags and keeps the whole text") {
  const auto r = split_ssr_output("no marker here", kTranslationToken);
  CHECK(r.ocr_text == "");
  CHECK(r.translation == "no marker here");
  CHECK(r.no_separator);
}

TEST_CASE("split_ssr_output splits at the first of two separators, remainder verbatim") {
  const auto r = split_ssr_output("a <Translation> b <Translation> c", kTranslationToken);
  CHECK(r.ocr_text == "a");
  CHECK(r.translation == "b <Translation> c");
  CHECK_FALSE(r.no_separator);
}

TEST_CASE("split_ssr_output trims whitespace adjacent to the separator only") {
  const auto r = split_ssr_output("line one\nline two\n<Translation>\n  target  ",
                                  kTranslationToken);
  CHECK(r.ocr_text == "line one\nline two");
  CHECK(r.translation == "target  ");  // trailing spaces are not separator-adjacent
}

TEST_CASE("split_ssr_output unescapes a literal separator in the transcript half") {
  const std::string escaped = escape_separator("uses <Translation> inline", kTranslationToken);
  const auto r = split_ssr_output(escaped + "\n<Translation>\ny", kTranslationToken);
  CHECK(r.ocr_text == "uses <Translation> inline");
  CHECK(r.translation == "y");
}

TEST_CASE("split_ssr_output is a left inverse of response rendering") {
  const PromptTemplate tmpl = template_for_family("toy");
  Rng rng(41);
  const std::string alphabet = "abcdefghij XY.<>/\\";
  for (int trial = 0; trial < 200; ++trial) {
    std::string x, y;
    for (std::size_t i = 0, n = 1 + uniform_below(rng, 12); i < n; ++i)
      x += alphabet[uniform_below(rng, alphabet.size())];
    for (std::size_t i = 0, n = 1 + uniform_below(rng, 12); i < n; ++i)
      y += alphabet[uniform_below(rng, alphabet.size())];
    // Separator-free fields, no whitespace at the seams: the contract's
    // domain. Interior whitespace is fine.
    if (x.find(tmpl.demo_separator_token) != std::string::npos) continue;
    if (y.find(tmpl.demo_separator_token) != std::string::npos) continue;
    if (x.empty() || x.front() == ' ' || x.back() == ' ') continue;
    if (y.empty() || y.front() == ' ' || y.back() == ' ') continue;
    const auto r = split_ssr_output(render_ssr_response(x, y, tmpl), tmpl.demo_separator_token);
    CHECK(r.ocr_text == x);
    CHECK(r.translation == y);
    CHECK_FALSE(r.no_separator);
  }
}

TEST_CASE("ssr_decode generates with the composed instruction and splits") {
  const GlyphOracle oracle;
  DecodeConfig cfg;
  cfg.max_new_tokens = 64;
  const auto r = ssr_decode(oracle, "glyph:abc\ndef", template_for_family("toy"), cfg);
  CHECK(r.ocr_text == "abc\ndef");
  CHECK(r.translation == glyph_cipher("abc\ndef", 7));
  CHECK_FALSE(r.no_separator);

  const GlyphOracle mute(GlyphOracle::Style::never_separates);
  const auto m = ssr_decode(mute, "glyph:abc\ndef", template_for_family("toy"), cfg);
  CHECK(m.no_separator);
  CHECK(m.translation == "abc\ndef");
  CHECK(m.ocr_text == "");
}

// ---------------------------------------------------------------------------
// Glyph world
// ---------------------------------------------------------------------------

TEST_CASE("glyph_cipher shifts lowercase into disjoint uppercase") {
  CHECK(glyph_cipher("abc", 7) == "HIJ");
  CHECK(glyph_cipher("abc\ndef", 7) == "HIJ\nKLM");
  CHECK(glyph_cipher("xyz", 7) == "EFG");  // wraps around the ring
  // Bijective over the full ring and never lowercase in the output.
  std::set<std::string> images;
  for (char c = 'a'; c <= 'z'; ++c) {
    const std::string out = glyph_cipher(std::string(1, c), 7);
    CHECK(out.size() == 1);
    CHECK((out[0] >= 'A' && out[0] <= 'Z'));
    images.insert(out);
  }
  CHECK(images.size() == 26);
  // Non-lowercase input is preserved (grid newlines).
  CHECK(glyph_cipher("A1\n!", 7) == "A1\n!");
}

TEST_CASE("glyph_world_dataset is deterministic and well formed") {
  GlyphWorldConfig world;
  const Dataset a = glyph_world_dataset(world, 20, 99, "train");
  const Dataset b = glyph_world_dataset(world, 20, 99, "train");
  const Dataset c = glyph_world_dataset(world, 20, 100, "train");
  REQUIRE(a.samples.size() == 20);
  CHECK(a.split_name == "train");
  bool any_differs = false;
  for (std::size_t i = 0; i < 20; ++i) {
    const Sample& s = a.samples[i];
    CHECK(s.id == "train-" + std::to_string(i));
    REQUIRE(s.source_text.has_value());
    CHECK(s.image == "glyph:" + *s.source_text);
    CHECK(s.target_text == glyph_cipher(*s.source_text, world.cipher_shift));
    CHECK(s.domain == "glyph");
    CHECK(s.lang_pair == "en-zh");
    // 2x3 grid: two rows of three glyphs from the 12-letter alphabet.
    REQUIRE(s.source_text->size() == 7);
    CHECK((*s.source_text)[3] == '\n');
    for (char ch : *s.source_text)
      if (ch != '\n') CHECK((ch >= 'a' && ch < 'a' + world.alphabet));
    CHECK(*b.samples[i].source_text == *s.source_text);
    if (*c.samples[i].source_text != *s.source_text) any_differs = true;
  }
  CHECK(any_differs);
}

TEST_CASE("glyph world config validation") {
  GlyphWorldConfig world;
  world.rows = 0;
  CHECK_THROWS_AS(world.validate(), Error);
  world = {};
  world.alphabet = 1;
  CHECK_THROWS_AS(world.validate(), Error);
  world = {};
  world.cipher_shift = 26;
  CHECK_THROWS_AS(world.validate(), Error);
  world = {};
  CHECK_NOTHROW(world.validate());
}

TEST_CASE("glyph_external_ocr corrupts deterministically at the requested rate") {
  GlyphWorldConfig world;
  const std::string text = "abc\ndef";
  CHECK(glyph_external_ocr(text, world, 0.0, 5) == text);

  const std::string all = glyph_external_ocr(text, world, 1.0, 5);
  REQUIRE(all.size() == text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\n') {
      CHECK(all[i] == '\n');
    } else {
      CHECK(all[i] != text[i]);  // rate 1.0 changes every glyph
      CHECK((all[i] >= 'a' && all[i] < 'a' + world.alphabet));
    }
  }

  CHECK(glyph_external_ocr(text, world, 0.5, 5) == glyph_external_ocr(text, world, 0.5, 5));
  // Long-run rate roughly honored.
  std::string longtext;
  for (int i = 0; i < 2000; ++i) longtext += static_cast<char>('a' + (i % world.alphabet));
  const std::string corrupted = glyph_external_ocr(longtext, world, 0.3, 11);
  int changed = 0;
  for (std::size_t i = 0; i < longtext.size(); ++i)
    if (corrupted[i] != longtext[i]) ++changed;
  CHECK(changed > 400);
  CHECK(changed < 800);
  CHECK_THROWS_AS(glyph_external_ocr(text, world, 1.5, 5), Error);
}

TEST_CASE("glyph_eval_items pairs one translation and one transcription item per sample") {
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 5, 3, "eval");
  const std::vector<EvalItem> items = glyph_eval_items(d);
  REQUIRE(items.size() == 10);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(items[2 * i].task == EvalTask::dimt);
    CHECK(items[2 * i + 1].task == EvalTask::ocr);
    CHECK(items[2 * i].sample.id == d.samples[i].id);
    CHECK(items[2 * i + 1].sample.id == d.samples[i].id);
  }
}

TEST_CASE("eval item validation requires questions and answers for vqa") {
  EvalItem item;
  item.sample = glyph_world_dataset(GlyphWorldConfig{}, 1, 1, "x").samples[0];
  item.task = EvalTask::vqa;
  CHECK_THROWS_AS(item.validate(), Error);
  item.question = "How many rows?";
  CHECK_THROWS_AS(item.validate(), Error);
  item.answers = {"2"};
  CHECK_NOTHROW(item.validate());
  item.task = EvalTask::dimt;
  item.question.clear();
  item.answers.clear();
  CHECK_NOTHROW(item.validate());
}

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

TEST_CASE("experiment recipe names round trip") {
  for (ExperimentRecipe r : {ExperimentRecipe::ssr, ExperimentRecipe::sft_dimt,
                             ExperimentRecipe::sft_mt, ExperimentRecipe::cot_direct,
                             ExperimentRecipe::cot_cascade, ExperimentRecipe::base})
    CHECK(parse_experiment_recipe(experiment_recipe_name(r)) == r);
  CHECK_THROWS_AS(parse_experiment_recipe("made-up"), Error);
}

TEST_CASE("experiment config validates knob ranges and recipe compatibility") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  ExperimentConfig bad = cfg;
  bad.train_size = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.model_width = 65;  // not divisible by heads
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.warmup_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.ocr_gate = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);

  // Provenance choices only make sense for recipes that read sources.
  bad = cfg;
  bad.recipe = ExperimentRecipe::sft_dimt;
  bad.provenance = SourceProvenance::external_ocr;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.recipe = ExperimentRecipe::sft_mt;
  CHECK_NOTHROW(bad.validate());

  // Demonstration-task variants belong to the ssr recipe.
  bad = cfg;
  bad.recipe = ExperimentRecipe::sft_dimt;
  bad.demo_task = TaskKind::caption;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.recipe = ExperimentRecipe::ssr;
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("experiment config digest separates distinct configurations") {
  const ExperimentConfig cfg;
  CHECK(cfg.digest() == ExperimentConfig{}.digest());
  ExperimentConfig other = cfg;
  other.peak_lr = 5e-4;
  CHECK(other.digest() != cfg.digest());
  other = cfg;
  other.seeds = {1, 2};
  CHECK(other.digest() != cfg.digest());
  other = cfg;
  other.world.cipher_shift = 9;
  CHECK(other.digest() != cfg.digest());
}

TEST_CASE("experiment config serializes and parses losslessly") {
  ExperimentConfig cfg;
  cfg.recipe = ExperimentRecipe::sft_mt;
  cfg.provenance = SourceProvenance::external_ocr;
  cfg.train_size = 33;
  cfg.eval_size = 9;
  cfg.seeds = {4, 5, 6};
  cfg.world.rows = 3;
  cfg.world.alphabet = 9;
  cfg.model_width = 32;
  cfg.model_heads = 2;
  cfg.pretrain_epochs = 2;
  cfg.peak_lr = 7e-4;
  cfg.adapter_selector = "layers.";
  cfg.external_ocr_error_rate = 0.25;
  const ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.digest() == cfg.digest());
  CHECK(back.recipe == ExperimentRecipe::sft_mt);
  CHECK(back.provenance == SourceProvenance::external_ocr);
  CHECK(back.seeds == std::vector<std::uint64_t>{4, 5, 6});
  CHECK(back.world.alphabet == 9);
  CHECK(back.adapter_selector == "layers.");

  // Partial JSON keeps defaults for everything absent.
  const ExperimentConfig partial = ExperimentConfig::from_json(R"({"recipe": "base"})");
  CHECK(partial.recipe == ExperimentRecipe::base);
  CHECK(partial.train_size == ExperimentConfig{}.train_size);
  CHECK_THROWS_AS(ExperimentConfig::from_json("{nope"), Error);
  CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"recipe": 3})"), Error);
}

// ---------------------------------------------------------------------------
// run_protocol
// ---------------------------------------------------------------------------

TEST_CASE("run_protocol scores a faithful model perfectly on both domains") {
  const GlyphOracle oracle;
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 6, 17, "eval");
  const ProtocolResult r =
      run_protocol(ExperimentRecipe::ssr, oracle, glyph_eval_items(d), toy_protocol());
  REQUIRE(r.domains.count("dimt") == 1);
  REQUIRE(r.domains.count("ocr") == 1);
  CHECK(r.domains.at("dimt").corpus.at("ca") == doctest::Approx(1.0));
  CHECK(r.domains.at("ocr").corpus.at("ca") == doctest::Approx(1.0));
  CHECK(r.domains.at("dimt").recipe == "ssr");
  CHECK(r.domains.at("dimt").dataset == "unit");
  CHECK(r.domains.at("dimt").model_fingerprint == "glyph-oracle-v1");
  CHECK(r.generate_calls == 12);  // one per item
  CHECK(r.seconds_per_page >= 0.0);
  CHECK(oracle.calls.load() == 12);
}

TEST_CASE("run_protocol never mixes transcription into translation scoring") {
  // Sentinel: transcripts and translations use disjoint alphabets.  A
  // model that puts its (perfect) transcript into the translation slot
  // must score near zero on dimt while still scoring 1.0 on ocr; a
  // scorer that leaked OCR text into translation scoring would hand it
  // a perfect score instead.
  const GlyphOracle leaky(GlyphOracle::Style::leaky);
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 6, 17, "eval");
  const ProtocolResult r =
      run_protocol(ExperimentRecipe::ssr, leaky, glyph_eval_items(d), toy_protocol());
  CHECK(r.domains.at("ocr").corpus.at("ca") == doctest::Approx(1.0));
  CHECK(r.domains.at("dimt").corpus.at("ca") < 0.2);
  // Only the grid newline is shared between the alphabets, so BLEU
  // stays at smoothing-floor level (a leak would score 100).
  CHECK(r.domains.at("dimt").corpus.at("bleu") < 1.0);
}

TEST_CASE("run_protocol stops transcription at the separator for run-on models") {
  // A self-reviewing model keeps talking after its transcript; the OCR
  // probe must stop at the separator and score the transcript half.
  const GlyphOracle runon(GlyphOracle::Style::run_on);
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 5, 23, "eval");
  const ProtocolResult r =
      run_protocol(ExperimentRecipe::ssr, runon, glyph_eval_items(d), toy_protocol());
  CHECK(r.domains.at("ocr").corpus.at("ca") == doctest::Approx(1.0));
  CHECK(r.domains.at("dimt").corpus.at("ca") == doctest::Approx(1.0));
}

TEST_CASE("cot_cascade issues exactly two generate calls per sample") {
  const GlyphOracle oracle;
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 7, 29, "eval");
  std::vector<EvalItem> items;
  for (const Sample& s : d.samples) {
    EvalItem item;
    item.sample = s;
    item.task = EvalTask::dimt;
    items.push_back(item);
  }
  const ProtocolResult r =
      run_protocol(ExperimentRecipe::cot_cascade, oracle, items, toy_protocol());
  CHECK(oracle.calls.load() == 14);
  CHECK(r.generate_calls == 14);
  CHECK(r.domains.at("dimt").corpus.at("ca") == doctest::Approx(1.0));
  CHECK(r.domains.at("dimt").recipe == "cot_cascade");
}

TEST_CASE("single-pass recipes issue one generate call per translation item") {
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 4, 31, "eval");
  std::vector<EvalItem> items;
  for (const Sample& s : d.samples) {
    EvalItem item;
    item.sample = s;
    item.task = EvalTask::dimt;
    items.push_back(item);
  }
  for (ExperimentRecipe recipe :
       {ExperimentRecipe::base, ExperimentRecipe::sft_dimt, ExperimentRecipe::sft_mt,
        ExperimentRecipe::ssr, ExperimentRecipe::cot_direct}) {
    const GlyphOracle oracle;
    const ProtocolResult r = run_protocol(recipe, oracle, items, toy_protocol());
    CHECK(oracle.calls.load() == 4);
    CHECK(r.domains.at("dimt").corpus.at("ca") == doctest::Approx(1.0));
  }
}

TEST_CASE("run_protocol rejects bad inputs") {
  const GlyphOracle oracle;
  CHECK_THROWS_AS(run_protocol(ExperimentRecipe::ssr, oracle, {}, toy_protocol()), Error);

  Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 2, 37, "eval");
  std::vector<EvalItem> items;
  EvalItem item;
  item.sample = d.samples[0];
  item.sample.source_text.reset();  // sft_mt has nothing to translate
  item.task = EvalTask::dimt;
  items.push_back(item);
  try {
    run_protocol(ExperimentRecipe::sft_mt, oracle, items, toy_protocol());
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("run_protocol answers vqa items after the answer marker with anls") {
  const GlyphOracle oracle;
  const Dataset d = glyph_world_dataset(GlyphWorldConfig{}, 3, 41, "eval");
  std::vector<EvalItem> items;
  for (const Sample& s : d.samples) {
    EvalItem item;
    item.sample = s;
    item.task = EvalTask::vqa;
    item.question = "How many glyph rows are in the image?";
    item.answers = {"2", "two"};
    items.push_back(item);
  }
  const ProtocolResult r = run_protocol(ExperimentRecipe::ssr, oracle, items, toy_protocol());
  REQUIRE(r.domains.count("vqa") == 1);
  const MetricReport& rep = r.domains.at("vqa");
  CHECK(rep.corpus.at("ca") == doctest::Approx(1.0));  // "2" exactly
  REQUIRE(rep.corpus.count("anls") == 1);
  CHECK(rep.corpus.at("anls") == doctest::Approx(1.0));
  for (const SampleScores& s : rep.per_sample) {
    REQUIRE(s.anls.has_value());
    CHECK(*s.anls == doctest::Approx(1.0));
  }
}

// ---------------------------------------------------------------------------
// RunReport
// ---------------------------------------------------------------------------

TEST_CASE("run report serializes and parses losslessly") {
  RunReport rep;
  rep.config.recipe = ExperimentRecipe::cot_direct;
  rep.config.seeds = {9};
  rep.domains["dimt"] = score_corpus({"a", "b"}, {"HIJ", "KLM"}, {"HIJ", "KLM"}, "en-zh");
  rep.domains["dimt"].recipe = "cot_direct";
  rep.domains["dimt"].dataset = "glyph-eval";
  rep.domains["dimt"].model_fingerprint = "toy-x";
  rep.loss_trace_ref = "";
  rep.seconds_per_page = 0.125;
  rep.generate_calls = 4;
  rep.checkpoints = {"a.ckpt", "b.ckpt"};
  const std::string text = rep.to_json();
  const RunReport back = RunReport::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.config.recipe == ExperimentRecipe::cot_direct);
  CHECK(back.domains.at("dimt").corpus.at("ca") == doctest::Approx(1.0));
  CHECK(back.seconds_per_page == doctest::Approx(0.125));
  CHECK(back.generate_calls == 4);
  CHECK(back.checkpoints == std::vector<std::string>{"a.ckpt", "b.ckpt"});
  CHECK_THROWS_AS(RunReport::from_json("{broken"), Error);
}

// ---------------------------------------------------------------------------
// Experiments end to end (tiny budgets; the acceptance binary runs the
// full criteria)
// ---------------------------------------------------------------------------

namespace {

// Small enough to train in about a second, structured identically to
// the real configuration.
ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.train_size = 12;
  cfg.eval_size = 4;
  cfg.pretrain_size = 48;
  cfg.pretrain_epochs = 3;
  cfg.epochs = 2;
  cfg.ocr_gate = 0.0;  // structure tests must not depend on gate luck
  cfg.max_new_tokens = 16;
  return cfg;
}

}  // namespace

TEST_CASE("forgetting experiment produces a structurally complete, reproducible report") {
  const fs::path work = fresh_dir("forgetting_smoke");
  const ExperimentConfig cfg = tiny_config();
  const ForgettingReport r = forgetting_experiment(cfg, 5, work.string());

  CHECK(r.seed == 5);
  CHECK(r.pretrain_ocr_ca >= 0.0);
  for (const RunReport* arm : {&r.sft, &r.ssr}) {
    REQUIRE(arm->domains.count("dimt") == 1);
    REQUIRE(arm->domains.count("ocr") == 1);
    CHECK(arm->generate_calls > 0);
    REQUIRE(arm->checkpoints.size() == 1);
    CHECK(fs::exists(arm->checkpoints.front()));
    CHECK(fs::exists(arm->loss_trace_ref));
  }
  CHECK(r.sft.config.recipe == ExperimentRecipe::sft_dimt);
  CHECK(r.ssr.config.recipe == ExperimentRecipe::ssr);
  REQUIRE(r.sft_trace.epoch_means.size() == 2);
  REQUIRE(r.ssr_trace.epoch_means.size() == 2);
  for (double m : r.sft_trace.epoch_means) CHECK(std::isfinite(m));
  CHECK(r.sft_ocr_ca == doctest::Approx(r.sft.domains.at("ocr").corpus.at("ca")));
  CHECK(r.ssr_translation_ca == doctest::Approx(r.ssr.domains.at("dimt").corpus.at("ca")));

  // Identical on a rerun over the same work dir (cache reuse) in
  // everything except re-measured wall-clock timing.
  const auto sanitized = [](ForgettingReport rep) {
    rep.sft.seconds_per_page = 0.0;
    rep.ssr.seconds_per_page = 0.0;
    return rep.to_json();
  };
  const ForgettingReport again = forgetting_experiment(cfg, 5, work.string());
  CHECK(sanitized(again) == sanitized(r));
  // ... and the JSON itself round trips, reloading traces from disk.
  const ForgettingReport parsed = ForgettingReport::from_json(r.to_json());
  CHECK(parsed.to_json() == r.to_json());
  CHECK(parsed.ssr_trace.epoch_means == r.ssr_trace.epoch_means);
}

TEST_CASE("forgetting experiment aborts with a gate error when pretraining falls short") {
  const fs::path work = fresh_dir("forgetting_gate");
  ExperimentConfig cfg = tiny_config();
  cfg.pretrain_size = 8;  // nowhere near enough
  cfg.pretrain_epochs = 1;
  cfg.ocr_gate = 0.99;
  try {
    forgetting_experiment(cfg, 1, work.string());
    FAIL("expected gate error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::gate);
    CHECK(std::string(e.what()).find("0.99") != std::string::npos);
  }
}

TEST_CASE("run_experiment persists a run directory and resumes from report.json") {
  const fs::path root = fresh_dir("runs_resume");
  ExperimentConfig cfg = tiny_config();
  cfg.recipe = ExperimentRecipe::base;  // prompting only: fast
  const RunReport first = run_experiment(cfg, root.string());

  const fs::path dir = run_dir_for(root.string(), cfg);
  CHECK(fs::exists(dir / "config.json"));
  CHECK(fs::exists(dir / "report.json"));
  CHECK(ExperimentConfig::from_json(read_file((dir / "config.json").string())).digest() ==
        cfg.digest());
  CHECK(read_file((dir / "report.json").string()) == first.to_json());

  // A second call returns the stored report rather than recomputing:
  // plant a marker in the report file and watch it come back.
  RunReport marked = first;
  marked.seconds_per_page = 42.0;
  write_file_atomic((dir / "report.json").string(), marked.to_json());
  const RunReport second = run_experiment(cfg, root.string());
  CHECK(second.seconds_per_page == doctest::Approx(42.0));
}

TEST_CASE("run_experiment trains adapters and merges multi-seed reports") {
  const fs::path root = fresh_dir("runs_multiseed");
  ExperimentConfig cfg = tiny_config();
  cfg.recipe = ExperimentRecipe::ssr;
  cfg.seeds = {1, 2};
  const RunReport rep = run_experiment(cfg, root.string());

  REQUIRE(rep.domains.count("dimt") == 1);
  const MetricReport& dimt = rep.domains.at("dimt");
  REQUIRE(dimt.sample_ids.size() == 2 * cfg.eval_size);
  CHECK(dimt.sample_ids.front().rfind("s1:", 0) == 0);
  CHECK(dimt.sample_ids.back().rfind("s2:", 0) == 0);
  REQUIRE(rep.checkpoints.size() == 2);
  for (const std::string& ckpt : rep.checkpoints) CHECK(fs::exists(ckpt));
  CHECK(fs::exists(rep.loss_trace_ref));
  const fs::path dir = run_dir_for(root.string(), cfg);
  CHECK(fs::exists(dir / "loss_trace.jsonl"));
  CHECK(fs::exists(dir / "loss_trace-seed2.jsonl"));

  // The merged corpus is the arithmetic seed mean.
  ExperimentConfig s1 = cfg;
  s1.seeds = {1};
  ExperimentConfig s2 = cfg;
  s2.seeds = {2};
  const RunReport r1 = run_experiment(s1, root.string());
  const RunReport r2 = run_experiment(s2, root.string());
  CHECK(dimt.corpus.at("ca") ==
        doctest::Approx(0.5 * (r1.domains.at("dimt").corpus.at("ca") +
                               r2.domains.at("dimt").corpus.at("ca"))));
}

TEST_CASE("sweep isolates failures and reuses completed runs") {
  const fs::path root = fresh_dir("sweep");
  ExperimentConfig good = tiny_config();
  good.recipe = ExperimentRecipe::base;
  ExperimentConfig direct = tiny_config();
  direct.recipe = ExperimentRecipe::cot_direct;
  ExperimentConfig bad = tiny_config();
  bad.recipe = ExperimentRecipe::base;
  bad.train_size = 0;  // fails validation inside run_experiment

  const SweepResult r = sweep({good, bad, direct}, root.string());
  REQUIRE(r.reports.size() == 2);
  REQUIRE(r.failures.size() == 1);
  CHECK(r.failures.front().first == bad.digest());
  CHECK(r.failures.front().second.find("train_size") != std::string::npos);
  CHECK(r.reports[0].config.digest() == good.digest());
  CHECK(r.reports[1].config.digest() == direct.digest());

  // Completed digests resume from disk; the failure stays a failure.
  const SweepResult again = sweep({good, bad, direct}, root.string());
  REQUIRE(again.reports.size() == 2);
  CHECK(again.reports[0].to_json() == r.reports[0].to_json());
  CHECK(again.failures.size() == 1);
  CHECK_THROWS_AS(sweep({good}, root.string(), 0), Error);
}
