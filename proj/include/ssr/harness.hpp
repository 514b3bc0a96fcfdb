#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssr/adapter.hpp"
#include "ssr/corpus.hpp"
#include "ssr/decode.hpp"
#include "ssr/metrics.hpp"
#include "ssr/model_iface.hpp"
#include "ssr/pipeline.hpp"
#include "ssr/toy_model.hpp"
#include "ssr/training.hpp"

namespace ssr {

// ---------------------------------------------------------------------------
// Evaluation items
// ---------------------------------------------------------------------------

enum class EvalTask { dimt, ocr, vqa, cross_lingual_vqa };

std::string eval_task_name(EvalTask t);
EvalTask parse_eval_task(const std::string& name);

// One test prompt: the sample plus what is asked of the model. VQA
// tasks carry a question and at least one acceptable answer; for
// cross-lingual VQA the caller supplies already-translated questions.
struct EvalItem {
  Sample sample;
  EvalTask task = EvalTask::dimt;
  std::string question;
  std::vector<std::string> answers;

  void validate() const;  // throws validation_error
};

// ---------------------------------------------------------------------------
// Self-review decoding
// ---------------------------------------------------------------------------

// A generated response split into its two halves. When the separator
// never appears, the whole output is kept as `translation` and
// `no_separator` is set — a flag, never a failure.
struct SsrDecodeResult {
  std::string ocr_text;
  std::string translation;
  bool no_separator = false;
};

// Splits at the FIRST occurrence of `separator`, trimming whitespace
// adjacent to it; any later separator stays verbatim inside
// `translation`. The transcript half is unescaped, so this is the left
// inverse of response rendering for separator-free fields.
SsrDecodeResult split_ssr_output(const std::string& text, const std::string& separator);

// Generates with the template's composed instruction and splits the
// decoded text. Purely syntactic: works on any model.
SsrDecodeResult ssr_decode(const MultimodalModel& model, const std::string& image,
                           const PromptTemplate& tmpl, const DecodeConfig& cfg);

// ---------------------------------------------------------------------------
// The glyph-grid world
// ---------------------------------------------------------------------------

// Synthetic desk-scale domain: an "image" is a rows x cols grid of
// lowercase glyphs, transcription reads the grid row by row, and
// translation applies a fixed bijective cipher into UPPERCASE — so
// transcripts and translations share no characters, and any leak of
// one into the other's scoring is visible immediately.
struct GlyphWorldConfig {
  int rows = 2;
  int cols = 3;
  int alphabet = 12;     // glyphs are 'a' .. 'a'+alphabet-1
  int cipher_shift = 7;  // translation glyph = uppercase of (glyph + shift) mod 26

  void validate() const;  // throws config_error
};

// The world's translation oracle: lowercase letters shift by `shift`
// within the alphabet ring and come out uppercase; every other
// character (grid newlines) is kept.
std::string glyph_cipher(const std::string& text, int shift = 7);

// n samples with id "<split_name>-<i>", a "glyph:" image, the grid
// text as source_text, and its cipher as target_text.
Dataset glyph_world_dataset(const GlyphWorldConfig& world, std::size_t n, std::uint64_t seed,
                            const std::string& split_name);

// A transcript with seeded glyph substitutions, standing in for a
// third-party OCR engine of the given error rate.
std::string glyph_external_ocr(const std::string& text, const GlyphWorldConfig& world,
                               double error_rate, std::uint64_t seed);

// One dimt item and one ocr item per sample, in dataset order.
std::vector<EvalItem> glyph_eval_items(const Dataset& d);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

// Everything run_protocol/run_experiment can vary. The four
// prompting-only recipes reuse the pretrained base model; the three
// fine-tuning recipes train an adapter on identical budgets.
enum class ExperimentRecipe { ssr, sft_dimt, sft_mt, cot_direct, cot_cascade, base };

std::string experiment_recipe_name(ExperimentRecipe r);
ExperimentRecipe parse_experiment_recipe(const std::string& name);

// A full experiment row: the recipe and its data/provenance choices,
// plus every world, model, and budget knob that affects the outcome —
// all of it feeds digest(), so a run directory never mixes results
// from different settings. Defaults are the desk-scale configuration
// used by the forgetting experiment.
struct ExperimentConfig {
  ExperimentRecipe recipe = ExperimentRecipe::ssr;
  TaskKind demo_task = TaskKind::ocr;                              // ssr only
  SourceProvenance provenance = SourceProvenance::self_generated;  // ssr / sft_mt
  std::size_t train_size = 256;
  std::size_t eval_size = 48;
  std::string lang_pair = "en-zh";
  std::vector<std::uint64_t> seeds = {1};

  GlyphWorldConfig world;

  // Base-model pretraining. Keyed by its own seed so every run seed
  // shares one cached base checkpoint.
  int model_layers = 2;
  int model_width = 64;
  int model_heads = 4;
  std::uint64_t pretrain_seed = 7;
  std::size_t pretrain_size = 256;
  int pretrain_epochs = 10;
  int pretrain_batch = 8;
  double pretrain_lr = 3e-3;
  double ocr_gate = 0.95;

  // Fine-tuning budget, identical across recipes by construction.
  int epochs = 3;
  int batch_size = 8;
  double peak_lr = 1e-3;
  double warmup_ratio = 0.1;
  double clip_norm = 1.0;
  int adapter_rank = 8;
  double adapter_alpha = 16.0;
  // Adapter placement. The default covers every block projection plus
  // the output head: the glyph world's translations use letters the
  // pretrained head has never emitted, so the head must be adaptable.
  std::string adapter_selector = "layers.|lm_head";

  int max_new_tokens = 24;
  double external_ocr_error_rate = 0.1;  // provenance=external_ocr simulation

  void validate() const;  // throws config_error
  std::string digest() const;
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct ProtocolConfig {
  PromptTemplate tmpl;     // decides instructions and the separator
  DecodeConfig decode;     // eos (and, for transcription, the separator)
                           // are added to stop_tokens automatically
  std::string lang = "en-zh";
  std::string dataset_name;
};

struct ProtocolResult {
  // One report per task present in the test set ("dimt", "ocr",
  // "vqa", "cross_lingual_vqa").
  std::map<std::string, MetricReport> domains;
  double seconds_per_page = 0.0;   // generate wall-clock only, per distinct image
  std::int64_t generate_calls = 0;
};

// Runs the recipe's inference protocol over the test set and scores
// each task domain. Translation scores are computed on the translation
// field only (for ssr/cot, the text after the first separator);
// transcription is scored CA/WA against the model's native-instruction
// output with generation stopped at the separator. Throws config_error
// on a recipe/item mismatch (sft_mt without source_text), input_error
// on an empty test set.
ProtocolResult run_protocol(ExperimentRecipe recipe, const MultimodalModel& model,
                            const std::vector<EvalItem>& testset, const ProtocolConfig& cfg);

// ---------------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------------

struct RunReport {
  ExperimentConfig config;
  std::map<std::string, MetricReport> domains;  // seed-mean; every domain present
  std::string loss_trace_ref;                   // empty for prompting-only recipes
  double seconds_per_page = 0.0;
  std::int64_t generate_calls = 0;
  std::vector<std::string> checkpoints;         // final adapter per seed

  std::string to_json() const;
  static RunReport from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// The forgetting experiment
// ---------------------------------------------------------------------------

// Outcome of one seed: both arms' reports plus the headline numbers.
// All accuracies are character accuracy in [0, 1].
struct ForgettingReport {
  std::uint64_t seed = 0;
  double pretrain_ocr_ca = 0.0;   // held-out, after passing the gate
  RunReport sft;                  // recipe sft_dimt
  RunReport ssr;                  // recipe ssr
  double sft_ocr_ca = 0.0;
  double ssr_ocr_ca = 0.0;
  double sft_translation_ca = 0.0;
  double ssr_translation_ca = 0.0;
  LossTrace sft_trace;
  LossTrace ssr_trace;

  std::string to_json() const;
  static ForgettingReport from_json(const std::string& text);
};

// Pretrains the toy model on glyph transcription to the OCR gate
// (gate_error with the measured accuracy when it falls short), then
// fine-tunes two adapter copies on the same translation data and
// budget — one as plain translation SFT, one with self-review — and
// evaluates both on held-out transcription and translation. `work_dir`
// holds the pretraining cache, self-review cache, checkpoints, and
// loss traces ("" = a per-config temp directory). cfg.recipe is
// ignored: both arms always run.
ForgettingReport forgetting_experiment(const ExperimentConfig& cfg, std::uint64_t seed,
                                       const std::string& work_dir = "");
ForgettingReport forgetting_experiment(std::uint64_t seed);  // default config

// ---------------------------------------------------------------------------
// Persisted runs and sweeps
// ---------------------------------------------------------------------------

// <root>/<config digest>; holds config.json, report.json,
// loss_trace*.jsonl, selfreview-cache/, checkpoints/.
std::string run_dir_for(const std::string& root, const ExperimentConfig& cfg);

// Runs one experiment row end to end (pretrain-or-load the base,
// fine-tune when the recipe trains, evaluate every seed) and persists
// it under run_dir_for. A directory whose report.json already exists
// is returned as-is without recomputation.
RunReport run_experiment(const ExperimentConfig& cfg, const std::string& root);

struct SweepResult {
  std::vector<RunReport> reports;  // successes, in config order
  std::vector<std::pair<std::string, std::string>> failures;  // digest -> reason
};

// Runs every config, isolating failures: one bad row never stops the
// rest. Sequential by default; `parallelism` > 1 opts into running
// rows concurrently (each row stays internally deterministic).
SweepResult sweep(const std::vector<ExperimentConfig>& configs, const std::string& root,
                  int parallelism = 1);

}  // namespace ssr
