#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssr/corpus.hpp"
#include "ssr/decode.hpp"
#include "ssr/model_iface.hpp"
#include "ssr/tokenizer.hpp"

namespace ssr {

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

// The monolingual task a template drives: plain OCR of the document,
// image captioning, or visual question answering.
enum class TaskKind { ocr, caption, vqa };

std::string task_name(TaskKind t);
TaskKind parse_task(const std::string& name);

// Per-model-family prompt pieces. `instruction_text` is the family's
// native monolingual instruction kept verbatim (trailing period and
// all); `translation_suffix` is appended to turn it into the combined
// recognize-then-translate instruction; `demo_separator_token` is the
// special token separating the two response stages.
struct PromptTemplate {
  TaskKind task = TaskKind::ocr;
  std::string instruction_text;
  std::string translation_suffix = ", then translate into Chinese.";
  std::string demo_separator_token = std::string(kTranslationToken);

  // Throws config_error when instruction_text is empty or the
  // separator token is not registered with the tokenizer.
  void validate(const Tokenizer& tok) const;

  // The combined instruction: instruction_text with one trailing
  // period dropped (so the suffix's comma reads naturally), plus
  // translation_suffix. "Convert the content in the image to
  // Markdown." becomes "Convert the content in the image to
  // Markdown, then translate into Chinese."
  std::string composed_instruction() const;
};

// Built-in templates for the model families the toolkit knows about:
// "qwen2-vl", "vary", "textmonkey", and the in-repo "toy" model.
// Throws config_error for an unknown family.
PromptTemplate template_for_family(const std::string& family);

// Loads a JSON file mapping family name -> {task, instruction_text,
// translation_suffix, demo_separator_token}. Missing optional fields
// fall back to the defaults above. Throws config_error on malformed
// content, io_error when unreadable.
std::map<std::string, PromptTemplate> load_template_config(const std::string& path);

// ---------------------------------------------------------------------------
// Self-review records
// ---------------------------------------------------------------------------

// One cached self-generated source text. decode_hash binds the text
// to exactly one (model fingerprint, decode configuration) pair so a
// cache built by a different model or decode setup is never reused;
// image_hash additionally binds it to the sample's image content, so
// two datasets that reuse an id never alias each other's records.
struct SelfReviewRecord {
  std::string sample_id;
  std::string source_text;
  std::string decode_hash;
  std::string image_hash;
  std::string created_at;        // ISO 8601 UTC
  bool empty_generation = false; // model produced no text; kept, flagged
};

std::string decode_hash_for(const DecodeConfig& cfg, const std::string& model_fingerprint);

// Cache file location: <cache_dir>/selfreview/<fingerprint>/<id>.json
// (ids are percent-encoded so arbitrary sample ids map to safe names).
std::string selfreview_cache_path(const std::string& cache_dir,
                                  const std::string& model_fingerprint,
                                  const std::string& sample_id);

// Generates (or reuses from cache) one source text per sample, in
// dataset order. A cached record whose decode_hash matches is reused
// without touching the model; a stale hash is regenerated and
// overwritten. Cache writes are write-temp-then-rename, so a crash
// never leaves a half-written record. Samples are processed in
// parallel; the model is only read.
std::vector<SelfReviewRecord> generate_selfreview(const MultimodalModel& model,
                                                  const Dataset& d,
                                                  const PromptTemplate& tmpl,
                                                  const DecodeConfig& cfg,
                                                  const std::string& cache_dir);

// Keys records by sample id for select_source. Throws input_error on
// duplicate sample ids.
std::map<std::string, SelfReviewRecord> index_records(const std::vector<SelfReviewRecord>& records);

// ---------------------------------------------------------------------------
// Training examples
// ---------------------------------------------------------------------------

// Which fine-tuning recipe produced an example.
enum class Recipe { ssr, sft_dimt, sft_mt };

// Where the source-language text came from.
enum class SourceProvenance { self_generated, ground_truth, external_ocr };

std::string recipe_name(Recipe r);
Recipe parse_recipe(const std::string& name);
std::string provenance_name(SourceProvenance p);
SourceProvenance parse_provenance(const std::string& name);

struct ExampleMeta {
  std::string sample_id;
  Recipe recipe = Recipe::ssr;
  SourceProvenance source_provenance = SourceProvenance::self_generated;
};

// One supervised example: the prompt, the target continuation, and a
// loss mask over their concatenation (false on every instruction
// position, true on every response position). `image` carries the
// sample's image reference for multimodal training; it is empty for
// text-only recipes.
struct TrainingExample {
  std::vector<TokenId> instruction_tokens;
  std::vector<TokenId> response_tokens;
  std::vector<bool> loss_mask;
  ExampleMeta meta;
  std::string image;

  std::vector<TokenId> full_tokens() const;

  std::string to_json() const;
  static TrainingExample from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Response rendering
// ---------------------------------------------------------------------------

// Escapes literal occurrences of the separator token inside free text
// by inserting a backslash after its first character
// ("<Translation>" -> "<\Translation>"); unescape_separator is the
// inverse. Keeps split-at-first-separator parsing well defined.
std::string escape_separator(const std::string& text, const std::string& separator);
std::string unescape_separator(const std::string& text, const std::string& separator);

// Renders the two-stage response as text:
//   escape(x_prime) + "\n" + separator + "\n" + y
std::string render_ssr_response(const std::string& x_prime, const std::string& y,
                                const PromptTemplate& tmpl);

// Strict inverse of render_ssr_response: splits at the first
// "\n<separator>\n" line and unescapes the recognition half. Throws
// input_error when no separator line is present.
std::pair<std::string, std::string> parse_ssr_response(const std::string& text,
                                                       const PromptTemplate& tmpl);

// ---------------------------------------------------------------------------
// Example builders
// ---------------------------------------------------------------------------

// Recognize-then-translate example. Instruction is the composed
// instruction; response tokens spell exactly the rendered response
// (recognition text, newline, separator token, newline, target), and
// the loss covers the whole response — recognition, separator, and
// translation alike. Empty x_prime is allowed (degenerate but valid);
// empty y throws input_error; an unregistered separator throws
// config_error.
TrainingExample build_ssr_example(const std::string& x_prime, const std::string& y,
                                  const PromptTemplate& tmpl, const Tokenizer& tok,
                                  const std::string& sample_id = "",
                                  SourceProvenance provenance = SourceProvenance::self_generated);

// Direct-translation baseline: fixed instruction "Translate all the
// text in the image into Chinese and output in Markdown format.",
// response is the target text alone. Empty y throws input_error.
TrainingExample build_sft_dimt_example(const std::string& y, const Tokenizer& tok,
                                       const std::string& sample_id = "");

// Text-only parallel-corpus baseline: the source sentence is embedded
// in the instruction ("Translate these text into Chinese.\n" + x) and
// the response is the target alone. No image. Empty x or y throws
// input_error.
TrainingExample build_sft_mt_example(const std::string& x, const std::string& y,
                                     const Tokenizer& tok,
                                     const std::string& sample_id = "");

// Payload for the caption / VQA template variants. demo_text is the
// self-generated monolingual stage; caption pairs it with
// target_text, vqa with question (appended to the instruction) and
// answer.
struct DemoPayload {
  std::string demo_text;
  std::string target_text;
  std::string question;
  std::string answer;
};

// Builds the caption variant ("Describe this image, then translate
// into Chinese." with a <Translation> separator) or the VQA variant
// (OCR instruction + ", then answer the following question:" + the
// question, with an <Answer> separator). task=ocr is rejected with
// input_error (use build_ssr_example); vqa without question or answer
// throws input_error. `base` optionally overrides the monolingual
// instruction (defaults are the Qwen2-VL family strings).
TrainingExample build_demo_variant(TaskKind task, const DemoPayload& payload,
                                   const Tokenizer& tok,
                                   const PromptTemplate* base = nullptr,
                                   const std::string& sample_id = "");

// ---------------------------------------------------------------------------
// Chain-of-thought prompting baselines
// ---------------------------------------------------------------------------

enum class CotMode { direct, cascade };

std::string cot_mode_name(CotMode m);
CotMode parse_cot_mode(const std::string& name);

struct CotPrompts {
  std::string round1;
  std::optional<std::string> round2;
};

// direct: one prompt holding both clauses (the composed instruction).
// cascade: round 1 is the native instruction verbatim; round 2 embeds
// the round-1 output under "Translate these text into Chinese." and
// therefore requires prior_ocr (input_error when absent).
CotPrompts build_cot_prompts(CotMode mode, const PromptTemplate& tmpl,
                             const std::optional<std::string>& prior_ocr = std::nullopt);

// ---------------------------------------------------------------------------
// Source selection
// ---------------------------------------------------------------------------

// Returns the source text of exactly the requested provenance, never
// substituting another: self_generated reads the record index,
// ground_truth reads sample.source_text, external_ocr returns
// external_text verbatim. A missing source throws provenance_error
// naming the sample id.
std::string select_source(const Sample& sample,
                          const std::map<std::string, SelfReviewRecord>& records,
                          SourceProvenance provenance,
                          const std::optional<std::string>& external_text = std::nullopt);

}  // namespace ssr
