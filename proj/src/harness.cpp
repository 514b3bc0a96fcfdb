#include "ssr/harness.hpp"

#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <set>
#include <utility>

#include <json.hpp>

#include "ssr/error.hpp"
#include "ssr/rng.hpp"
#include "ssr/util.hpp"

namespace fs = std::filesystem;

namespace ssr {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Eval items
// ---------------------------------------------------------------------------

std::string eval_task_name(EvalTask t) {
  switch (t) {
    case EvalTask::dimt: return "dimt";
    case EvalTask::ocr: return "ocr";
    case EvalTask::vqa: return "vqa";
    case EvalTask::cross_lingual_vqa: return "cross_lingual_vqa";
  }
  throw input_error("unknown eval task");
}

EvalTask parse_eval_task(const std::string& name) {
  if (name == "dimt") return EvalTask::dimt;
  if (name == "ocr") return EvalTask::ocr;
  if (name == "vqa") return EvalTask::vqa;
  if (name == "cross_lingual_vqa") return EvalTask::cross_lingual_vqa;
  throw config_error("unknown eval task: " + name);
}

void EvalItem::validate() const {
  if (sample.id.empty()) throw validation_error("eval item without a sample id");
  const bool is_vqa = task == EvalTask::vqa || task == EvalTask::cross_lingual_vqa;
  if (is_vqa) {
    if (question.empty())
      throw validation_error("vqa item " + sample.id + " has no question");
    if (answers.empty())
      throw validation_error("vqa item " + sample.id + " must carry at least one answer");
  }
}

// ---------------------------------------------------------------------------
// Self-review decoding
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kWs = " \t\r\n";

std::string ltrim(std::string s) {
  const auto pos = s.find_first_not_of(kWs);
  return pos == std::string::npos ? std::string() : s.substr(pos);
}

std::string rtrim(std::string s) {
  const auto pos = s.find_last_not_of(kWs);
  return pos == std::string::npos ? std::string() : s.substr(0, pos + 1);
}

std::string trim(std::string s) { return ltrim(rtrim(std::move(s))); }

std::uint64_t sub_seed(std::uint64_t seed, const std::string& salt) {
  return fnv1a64(salt + ":" + std::to_string(seed));
}

}  // namespace

SsrDecodeResult split_ssr_output(const std::string& text, const std::string& separator) {
  if (separator.empty()) throw config_error("ssr decode separator must not be empty");
  const auto pos = text.find(separator);
  if (pos == std::string::npos) return {"", text, true};
  SsrDecodeResult r;
  r.ocr_text = unescape_separator(rtrim(text.substr(0, pos)), separator);
  r.translation = ltrim(text.substr(pos + separator.size()));
  r.no_separator = false;
  return r;
}

SsrDecodeResult ssr_decode(const MultimodalModel& model, const std::string& image,
                           const PromptTemplate& tmpl, const DecodeConfig& cfg) {
  const Tokenizer& tok = model.tokenizer();
  tmpl.validate(tok);
  DecodeConfig d = cfg;
  d.stop_tokens.insert(tok.eos_id());
  const std::vector<TokenId> prompt = tok.encode(tmpl.composed_instruction());
  const std::string text = tok.decode(model.generate(prompt, image, d));
  return split_ssr_output(text, tmpl.demo_separator_token);
}

// ---------------------------------------------------------------------------
// Glyph world
// ---------------------------------------------------------------------------

void GlyphWorldConfig::validate() const {
  if (rows < 1 || rows > 8 || cols < 1 || cols > 8)
    throw config_error("glyph grid must be between 1x1 and 8x8");
  if (alphabet < 2 || alphabet > 26)
    throw config_error("glyph alphabet must have 2..26 letters");
  if (cipher_shift < 1 || cipher_shift > 25)
    throw config_error("cipher shift must be in 1..25");
}

std::string glyph_cipher(const std::string& text, int shift) {
  std::string out = text;
  for (char& c : out)
    if (c >= 'a' && c <= 'z') c = static_cast<char>('A' + (c - 'a' + shift) % 26);
  return out;
}

Dataset glyph_world_dataset(const GlyphWorldConfig& world, std::size_t n, std::uint64_t seed,
                            const std::string& split_name) {
  world.validate();
  Dataset d;
  d.split_name = split_name;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::string text;
    for (int r = 0; r < world.rows; ++r) {
      if (r > 0) text += '\n';
      for (int c = 0; c < world.cols; ++c)
        text += static_cast<char>('a' + uniform_below(rng, world.alphabet));
    }
    Sample s;
    s.id = split_name + "-" + std::to_string(i);
    s.image = "glyph:" + text;
    s.source_text = text;
    s.target_text = glyph_cipher(text, world.cipher_shift);
    s.domain = "glyph";
    s.lang_pair = "en-zh";
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::string glyph_external_ocr(const std::string& text, const GlyphWorldConfig& world,
                               double error_rate, std::uint64_t seed) {
  world.validate();
  if (error_rate < 0.0 || error_rate > 1.0)
    throw config_error("external OCR error rate must be in [0, 1]");
  Rng rng(fnv1a64(text) ^ seed);
  std::string out = text;
  for (char& c : out) {
    if (c < 'a' || c >= static_cast<char>('a' + world.alphabet)) continue;
    if (uniform_real(rng) >= error_rate) continue;
    // Substitute with a different in-alphabet glyph, deterministically.
    const int offset = 1 + static_cast<int>(uniform_below(rng, world.alphabet - 1));
    c = static_cast<char>('a' + (c - 'a' + offset) % world.alphabet);
  }
  return out;
}

std::vector<EvalItem> glyph_eval_items(const Dataset& d) {
  std::vector<EvalItem> items;
  items.reserve(d.samples.size() * 2);
  for (const Sample& s : d.samples) {
    EvalItem translate;
    translate.sample = s;
    translate.task = EvalTask::dimt;
    items.push_back(translate);
    EvalItem transcribe;
    transcribe.sample = s;
    transcribe.task = EvalTask::ocr;
    items.push_back(transcribe);
  }
  return items;
}

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

std::string experiment_recipe_name(ExperimentRecipe r) {
  switch (r) {
    case ExperimentRecipe::ssr: return "ssr";
    case ExperimentRecipe::sft_dimt: return "sft_dimt";
    case ExperimentRecipe::sft_mt: return "sft_mt";
    case ExperimentRecipe::cot_direct: return "cot_direct";
    case ExperimentRecipe::cot_cascade: return "cot_cascade";
    case ExperimentRecipe::base: return "base";
  }
  throw input_error("unknown experiment recipe");
}

ExperimentRecipe parse_experiment_recipe(const std::string& name) {
  if (name == "ssr") return ExperimentRecipe::ssr;
  if (name == "sft_dimt") return ExperimentRecipe::sft_dimt;
  if (name == "sft_mt") return ExperimentRecipe::sft_mt;
  if (name == "cot_direct") return ExperimentRecipe::cot_direct;
  if (name == "cot_cascade") return ExperimentRecipe::cot_cascade;
  if (name == "base") return ExperimentRecipe::base;
  throw config_error("unknown experiment recipe: " + name);
}

namespace {

bool recipe_trains(ExperimentRecipe r) {
  return r == ExperimentRecipe::ssr || r == ExperimentRecipe::sft_dimt ||
         r == ExperimentRecipe::sft_mt;
}

bool recipe_reads_source(ExperimentRecipe r) {
  return r == ExperimentRecipe::ssr || r == ExperimentRecipe::sft_mt;
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  if (train_size == 0) throw config_error("train_size must be positive");
  if (eval_size == 0) throw config_error("eval_size must be positive");
  if (lang_pair.empty()) throw config_error("lang_pair must not be empty");
  if (seeds.empty()) throw config_error("at least one seed is required");
  if (model_layers < 1 || model_width < 1 || model_heads < 1 || model_width % model_heads != 0)
    throw config_error("model dims must be positive with width divisible by heads");
  if (pretrain_size == 0 || pretrain_epochs < 1 || pretrain_batch < 1)
    throw config_error("pretraining size, epochs, and batch must be positive");
  if (pretrain_lr <= 0.0) throw config_error("pretrain_lr must be positive");
  if (ocr_gate < 0.0 || ocr_gate > 1.0) throw config_error("ocr_gate must be in [0, 1]");
  if (epochs < 1 || batch_size < 1) throw config_error("epochs and batch_size must be positive");
  if (peak_lr <= 0.0) throw config_error("peak_lr must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
    throw config_error("warmup_ratio must be in [0, 1)");
  if (clip_norm < 0.0) throw config_error("clip_norm must not be negative");
  if (adapter_rank < 1 || adapter_alpha <= 0.0)
    throw config_error("adapter rank/alpha must be positive");
  if (max_new_tokens < 1) throw config_error("max_new_tokens must be positive");
  if (external_ocr_error_rate < 0.0 || external_ocr_error_rate > 1.0)
    throw config_error("external_ocr_error_rate must be in [0, 1]");
  if (provenance != SourceProvenance::self_generated && !recipe_reads_source(recipe))
    throw config_error("provenance applies only to recipes that consume source text "
                       "(ssr, sft_mt); recipe " + experiment_recipe_name(recipe) +
                       " does not");
  if (demo_task != TaskKind::ocr && recipe != ExperimentRecipe::ssr)
    throw config_error("demonstration-task variants apply to the ssr recipe only");
}

std::string ExperimentConfig::to_json() const {
  ordered_json j;
  j["recipe"] = experiment_recipe_name(recipe);
  j["demo_task"] = task_name(demo_task);
  j["provenance"] = provenance_name(provenance);
  j["train_size"] = train_size;
  j["eval_size"] = eval_size;
  j["lang_pair"] = lang_pair;
  j["seeds"] = seeds;
  j["world"] = {{"rows", world.rows},
                {"cols", world.cols},
                {"alphabet", world.alphabet},
                {"cipher_shift", world.cipher_shift}};
  j["model"] = {{"layers", model_layers}, {"width", model_width}, {"heads", model_heads}};
  j["pretrain"] = {{"seed", pretrain_seed}, {"size", pretrain_size},
                   {"epochs", pretrain_epochs}, {"batch", pretrain_batch},
                   {"lr", pretrain_lr},        {"ocr_gate", ocr_gate}};
  j["finetune"] = {{"epochs", epochs},
                   {"batch_size", batch_size},
                   {"peak_lr", peak_lr},
                   {"warmup_ratio", warmup_ratio},
                   {"clip_norm", clip_norm},
                   {"adapter_rank", adapter_rank},
                   {"adapter_alpha", adapter_alpha},
                   {"adapter_selector", adapter_selector}};
  j["max_new_tokens"] = max_new_tokens;
  j["external_ocr_error_rate"] = external_ocr_error_rate;
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("malformed experiment config: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("recipe")) cfg.recipe = parse_experiment_recipe(j["recipe"].get<std::string>());
    if (j.contains("demo_task")) cfg.demo_task = parse_task(j["demo_task"].get<std::string>());
    if (j.contains("provenance"))
      cfg.provenance = parse_provenance(j["provenance"].get<std::string>());
    cfg.train_size = j.value("train_size", cfg.train_size);
    cfg.eval_size = j.value("eval_size", cfg.eval_size);
    cfg.lang_pair = j.value("lang_pair", cfg.lang_pair);
    if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("world")) {
      const json& w = j["world"];
      cfg.world.rows = w.value("rows", cfg.world.rows);
      cfg.world.cols = w.value("cols", cfg.world.cols);
      cfg.world.alphabet = w.value("alphabet", cfg.world.alphabet);
      cfg.world.cipher_shift = w.value("cipher_shift", cfg.world.cipher_shift);
    }
    if (j.contains("model")) {
      const json& m = j["model"];
      cfg.model_layers = m.value("layers", cfg.model_layers);
      cfg.model_width = m.value("width", cfg.model_width);
      cfg.model_heads = m.value("heads", cfg.model_heads);
    }
    if (j.contains("pretrain")) {
      const json& p = j["pretrain"];
      cfg.pretrain_seed = p.value("seed", cfg.pretrain_seed);
      cfg.pretrain_size = p.value("size", cfg.pretrain_size);
      cfg.pretrain_epochs = p.value("epochs", cfg.pretrain_epochs);
      cfg.pretrain_batch = p.value("batch", cfg.pretrain_batch);
      cfg.pretrain_lr = p.value("lr", cfg.pretrain_lr);
      cfg.ocr_gate = p.value("ocr_gate", cfg.ocr_gate);
    }
    if (j.contains("finetune")) {
      const json& f = j["finetune"];
      cfg.epochs = f.value("epochs", cfg.epochs);
      cfg.batch_size = f.value("batch_size", cfg.batch_size);
      cfg.peak_lr = f.value("peak_lr", cfg.peak_lr);
      cfg.warmup_ratio = f.value("warmup_ratio", cfg.warmup_ratio);
      cfg.clip_norm = f.value("clip_norm", cfg.clip_norm);
      cfg.adapter_rank = f.value("adapter_rank", cfg.adapter_rank);
      cfg.adapter_alpha = f.value("adapter_alpha", cfg.adapter_alpha);
      cfg.adapter_selector = f.value("adapter_selector", cfg.adapter_selector);
    }
    cfg.max_new_tokens = j.value("max_new_tokens", cfg.max_new_tokens);
    cfg.external_ocr_error_rate = j.value("external_ocr_error_rate", cfg.external_ocr_error_rate);
  } catch (const json::exception& e) {
    throw config_error(std::string("malformed experiment config: ") + e.what());
  }
  return cfg;
}

std::string ExperimentConfig::digest() const { return to_hex(fnv1a64(to_json())); }

// ---------------------------------------------------------------------------
// run_protocol
// ---------------------------------------------------------------------------

namespace {

MetricReport finish_report(MetricReport r, ExperimentRecipe recipe, const ProtocolConfig& cfg,
                           const MultimodalModel& model) {
  r.recipe = experiment_recipe_name(recipe);
  r.dataset = cfg.dataset_name;
  r.model_fingerprint = model.fingerprint();
  return r;
}

}  // namespace

ProtocolResult run_protocol(ExperimentRecipe recipe, const MultimodalModel& model,
                            const std::vector<EvalItem>& testset, const ProtocolConfig& cfg) {
  if (testset.empty()) throw input_error("run_protocol: empty test set");
  const Tokenizer& tok = model.tokenizer();
  cfg.tmpl.validate(tok);
  for (const EvalItem& item : testset) item.validate();

  const TokenId sep_id = tok.special_id(cfg.tmpl.demo_separator_token);
  DecodeConfig gen_cfg = cfg.decode;
  gen_cfg.validate();
  gen_cfg.stop_tokens.insert(tok.eos_id());
  DecodeConfig transcript_cfg = gen_cfg;  // stop before a self-review separator
  transcript_cfg.stop_tokens.insert(sep_id);

  double gen_seconds = 0.0;
  std::int64_t calls = 0;
  const auto timed = [&](const std::vector<TokenId>& prompt, const std::string& image,
                         const DecodeConfig& d) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<TokenId> out = model.generate(prompt, image, d);
    gen_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++calls;
    return tok.decode(out);
  };

  const std::vector<TokenId> native_prompt = tok.encode(cfg.tmpl.instruction_text);
  const std::vector<TokenId> composed_prompt = tok.encode(cfg.tmpl.composed_instruction());

  std::vector<std::string> dimt_ids, dimt_hyps, dimt_refs;
  std::vector<std::string> ocr_ids, ocr_hyps, ocr_refs;
  struct QaRow {
    std::string id;
    std::string pred;
    std::vector<std::string> answers;
  };
  std::map<EvalTask, std::vector<QaRow>> qa_rows;
  std::set<std::string> pages;

  for (const EvalItem& item : testset) {
    pages.insert(item.sample.id);
    switch (item.task) {
      case EvalTask::dimt: {
        std::string hyp;
        switch (recipe) {
          case ExperimentRecipe::base:
          case ExperimentRecipe::sft_dimt: {
            // The pinned translate-the-image instruction, via its builder.
            const TrainingExample probe = build_sft_dimt_example("-", tok);
            hyp = trim(timed(probe.instruction_tokens, item.sample.image, gen_cfg));
            break;
          }
          case ExperimentRecipe::sft_mt: {
            if (!item.sample.source_text)
              throw config_error("recipe sft_mt needs source_text on eval item " +
                                 item.sample.id);
            const TrainingExample probe = build_sft_mt_example(*item.sample.source_text, "-", tok);
            hyp = trim(timed(probe.instruction_tokens, "", gen_cfg));  // text-only baseline
            break;
          }
          case ExperimentRecipe::ssr:
          case ExperimentRecipe::cot_direct: {
            const std::string text = timed(composed_prompt, item.sample.image, gen_cfg);
            hyp = trim(split_ssr_output(text, cfg.tmpl.demo_separator_token).translation);
            break;
          }
          case ExperimentRecipe::cot_cascade: {
            const std::string round1 =
                rtrim(timed(native_prompt, item.sample.image, transcript_cfg));
            const CotPrompts prompts = build_cot_prompts(CotMode::cascade, cfg.tmpl, round1);
            hyp = trim(timed(tok.encode(*prompts.round2), item.sample.image, gen_cfg));
            break;
          }
        }
        dimt_ids.push_back(item.sample.id);
        dimt_hyps.push_back(hyp);
        dimt_refs.push_back(item.sample.target_text);
        break;
      }
      case EvalTask::ocr: {
        if (!item.sample.source_text)
          throw validation_error("ocr eval item " + item.sample.id + " has no source_text");
        const std::string text = timed(native_prompt, item.sample.image, transcript_cfg);
        ocr_ids.push_back(item.sample.id);
        ocr_hyps.push_back(trim(text));
        ocr_refs.push_back(*item.sample.source_text);
        break;
      }
      case EvalTask::vqa:
      case EvalTask::cross_lingual_vqa: {
        DemoPayload payload;
        payload.demo_text = "-";
        payload.question = item.question;
        payload.answer = item.answers.front();
        const TrainingExample probe =
            build_demo_variant(TaskKind::vqa, payload, tok, &cfg.tmpl);
        const std::string text = timed(probe.instruction_tokens, item.sample.image, gen_cfg);
        const std::string pred = trim(split_ssr_output(text, kAnswerToken).translation);
        qa_rows[item.task].push_back({item.sample.id, pred, item.answers});
        break;
      }
    }
  }

  ProtocolResult result;
  if (!dimt_ids.empty())
    result.domains["dimt"] =
        finish_report(score_corpus(dimt_ids, dimt_hyps, dimt_refs, cfg.lang), recipe, cfg, model);
  if (!ocr_ids.empty())
    result.domains["ocr"] =
        finish_report(score_corpus(ocr_ids, ocr_hyps, ocr_refs, "en"), recipe, cfg, model);
  for (const auto& [task, rows] : qa_rows) {
    std::vector<std::string> ids, hyps, refs;
    for (const QaRow& row : rows) {
      ids.push_back(row.id);
      hyps.push_back(row.pred);
      refs.push_back(row.answers.front());
    }
    const std::string lang = task == EvalTask::cross_lingual_vqa ? cfg.lang : "en";
    MetricReport rep = score_corpus(ids, hyps, refs, lang);
    double anls_sum = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double a = anls(rows[i].pred, rows[i].answers);
      rep.per_sample[i].anls = a;
      anls_sum += a;
    }
    rep.corpus["anls"] = anls_sum / static_cast<double>(rows.size());
    result.domains[eval_task_name(task)] = finish_report(std::move(rep), recipe, cfg, model);
  }

  result.generate_calls = calls;
  result.seconds_per_page = pages.empty() ? 0.0 : gen_seconds / static_cast<double>(pages.size());
  return result;
}

// ---------------------------------------------------------------------------
// RunReport serialization
// ---------------------------------------------------------------------------

std::string RunReport::to_json() const {
  ordered_json j;
  j["config"] = json::parse(config.to_json());
  j["domains"] = ordered_json::object();
  for (const auto& [name, report] : domains) j["domains"][name] = json::parse(report.to_json());
  j["loss_trace"] = loss_trace_ref;
  j["seconds_per_page"] = seconds_per_page;
  j["generate_calls"] = generate_calls;
  j["checkpoints"] = checkpoints;
  return j.dump(2) + "\n";
}

RunReport RunReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw input_error(std::string("malformed run report: ") + e.what());
  }
  RunReport r;
  try {
    r.config = ExperimentConfig::from_json(j.at("config").dump());
    for (const auto& [name, body] : j.at("domains").items())
      r.domains[name] = MetricReport::from_json(body.dump());
    r.loss_trace_ref = j.value("loss_trace", std::string());
    r.seconds_per_page = j.value("seconds_per_page", 0.0);
    r.generate_calls = j.value("generate_calls", std::int64_t{0});
    if (j.contains("checkpoints")) r.checkpoints = j["checkpoints"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw input_error(std::string("malformed run report: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Experiment internals
// ---------------------------------------------------------------------------

namespace {

ToyConfig model_config(const ExperimentConfig& cfg) {
  ToyConfig mc;
  mc.layers = cfg.model_layers;
  mc.width = cfg.model_width;
  mc.heads = cfg.model_heads;
  mc.validate();
  return mc;
}

TrainingExample transcription_example(const Sample& s, const PromptTemplate& tmpl,
                                      const Tokenizer& tok) {
  if (!s.source_text)
    throw validation_error("transcription sample " + s.id + " has no source_text");
  TrainingExample ex;
  ex.instruction_tokens = tok.encode(tmpl.instruction_text);
  ex.response_tokens = tok.encode(*s.source_text);
  ex.loss_mask.assign(ex.instruction_tokens.size(), false);
  ex.loss_mask.insert(ex.loss_mask.end(), ex.response_tokens.size(), true);
  ex.meta.sample_id = s.id;
  ex.meta.source_provenance = SourceProvenance::ground_truth;
  ex.image = s.image;
  return ex;
}

// Digest of everything that determines the pretrained base checkpoint.
std::string pretrain_digest(const ExperimentConfig& cfg) {
  ordered_json j;
  j["world"] = {cfg.world.rows, cfg.world.cols, cfg.world.alphabet, cfg.world.cipher_shift};
  j["model"] = {cfg.model_layers, cfg.model_width, cfg.model_heads};
  j["seed"] = cfg.pretrain_seed;
  j["size"] = cfg.pretrain_size;
  j["epochs"] = cfg.pretrain_epochs;
  j["batch"] = cfg.pretrain_batch;
  j["lr"] = cfg.pretrain_lr;
  j["warmup"] = cfg.warmup_ratio;
  j["clip"] = cfg.clip_norm;
  return to_hex(fnv1a64(j.dump()));
}

// Trains (or loads from the shared cache) the transcription-pretrained
// base model. Always returns the checkpoint's bytes, so a fresh run and
// a cached run hold bit-identical parameters.
ToyModel pretrained_base(const ExperimentConfig& cfg, const std::string& root) {
  const fs::path dir = fs::path(root) / "pretrain";
  fs::create_directories(dir);
  const fs::path ckpt = dir / (pretrain_digest(cfg) + ".ckpt");
  if (!fs::exists(ckpt)) {
    ToyModel model(model_config(cfg), sub_seed(cfg.pretrain_seed, "model-init"));
    const PromptTemplate tmpl = template_for_family("toy");
    const Dataset pre = glyph_world_dataset(cfg.world, cfg.pretrain_size,
                                            sub_seed(cfg.pretrain_seed, "pretrain-world"),
                                            "pretrain");
    std::vector<TrainingExample> examples;
    examples.reserve(pre.samples.size());
    for (const Sample& s : pre.samples)
      examples.push_back(transcription_example(s, tmpl, model.tokenizer()));
    TrainConfig t;
    t.epochs = cfg.pretrain_epochs;
    t.batch_size = cfg.pretrain_batch;
    t.peak_lr = cfg.pretrain_lr;
    t.warmup_ratio = cfg.warmup_ratio;
    t.clip_norm = cfg.clip_norm;
    t.seed = sub_seed(cfg.pretrain_seed, "pretrain");
    train_full(model, examples, t);
    model.save(ckpt);
  }
  return ToyModel::load(ckpt);
}

std::string toy_caption(const std::string& transcript) {
  std::string flat = transcript;
  for (char& c : flat)
    if (c == '\n') c = ' ';
  return "glyph grid " + flat;
}

constexpr const char* kGlyphQuestion = "How many glyph rows are in the image?";

// Builds one arm's training set. Self-generated sources come from the
// self-review pass of `base` (cached under cache_dir); ground-truth and
// external-OCR sources follow the provenance setting.
std::vector<TrainingExample> build_arm_examples(const ExperimentConfig& cfg,
                                                ExperimentRecipe recipe, const Dataset& train,
                                                const MultimodalModel& base,
                                                const PromptTemplate& tmpl, std::uint64_t seed,
                                                const std::string& cache_dir) {
  const Tokenizer& tok = base.tokenizer();
  std::map<std::string, SelfReviewRecord> records;
  if (recipe_reads_source(recipe) && cfg.provenance == SourceProvenance::self_generated) {
    DecodeConfig d;
    d.max_new_tokens = cfg.max_new_tokens;
    d.stop_tokens = {tok.eos_id(), tok.special_id(tmpl.demo_separator_token)};
    records = index_records(generate_selfreview(base, train, tmpl, d, cache_dir));
  }

  std::vector<TrainingExample> examples;
  examples.reserve(train.samples.size());
  for (const Sample& s : train.samples) {
    std::optional<std::string> external;
    if (recipe_reads_source(recipe) && cfg.provenance == SourceProvenance::external_ocr) {
      if (!s.source_text)
        throw provenance_error("sample " + s.id + " has no transcript to corrupt");
      external = glyph_external_ocr(*s.source_text, cfg.world, cfg.external_ocr_error_rate,
                                    sub_seed(seed, "external-ocr"));
    }
    TrainingExample ex;
    switch (recipe) {
      case ExperimentRecipe::ssr: {
        const std::string x = select_source(s, records, cfg.provenance, external);
        switch (cfg.demo_task) {
          case TaskKind::ocr:
            ex = build_ssr_example(x, s.target_text, tmpl, tok, s.id, cfg.provenance);
            break;
          case TaskKind::caption: {
            DemoPayload payload;
            payload.demo_text = toy_caption(x);
            payload.target_text = s.target_text;
            ex = build_demo_variant(TaskKind::caption, payload, tok, nullptr, s.id);
            ex.meta.source_provenance = cfg.provenance;
            break;
          }
          case TaskKind::vqa: {
            DemoPayload payload;
            payload.demo_text = x;
            payload.question = kGlyphQuestion;
            payload.answer = std::to_string(cfg.world.rows);
            ex = build_demo_variant(TaskKind::vqa, payload, tok, &tmpl, s.id);
            ex.meta.source_provenance = cfg.provenance;
            break;
          }
        }
        break;
      }
      case ExperimentRecipe::sft_dimt:
        ex = build_sft_dimt_example(s.target_text, tok, s.id);
        break;
      case ExperimentRecipe::sft_mt: {
        const std::string x = select_source(s, records, cfg.provenance, external);
        ex = build_sft_mt_example(x, s.target_text, tok, s.id);
        ex.meta.source_provenance = cfg.provenance;
        break;
      }
      default:
        throw config_error("recipe " + experiment_recipe_name(recipe) + " does not train");
    }
    if (recipe != ExperimentRecipe::sft_mt) ex.image = s.image;  // MT is text-only
    examples.push_back(std::move(ex));
  }
  return examples;
}

TrainConfig arm_train_config(const ExperimentConfig& cfg, std::uint64_t seed,
                             const std::string& checkpoint_dir, const std::string& trace_path) {
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.peak_lr = cfg.peak_lr;
  t.warmup_ratio = cfg.warmup_ratio;
  t.clip_norm = cfg.clip_norm;
  t.seed = sub_seed(seed, "train");
  t.checkpoint_dir = checkpoint_dir;
  t.trace_path = trace_path;
  return t;
}

ProtocolConfig protocol_config(const ExperimentConfig& cfg, const PromptTemplate& tmpl,
                               const std::string& dataset_name) {
  ProtocolConfig p;
  p.tmpl = tmpl;
  p.decode.max_new_tokens = cfg.max_new_tokens;
  p.lang = cfg.lang_pair;
  p.dataset_name = dataset_name;
  return p;
}

std::vector<EvalItem> ocr_only(const std::vector<EvalItem>& items) {
  std::vector<EvalItem> out;
  for (const EvalItem& item : items)
    if (item.task == EvalTask::ocr) out.push_back(item);
  return out;
}

double held_out_ocr_ca(const MultimodalModel& model, const std::vector<EvalItem>& items,
                       const ProtocolConfig& pcfg) {
  const ProtocolResult r = run_protocol(ExperimentRecipe::base, model, ocr_only(items), pcfg);
  return r.domains.at("ocr").corpus.at("ca");
}

// Per-key arithmetic mean of corpus metrics; per-sample rows are kept,
// prefixed with their seed. Single-seed reports pass through verbatim.
MetricReport merge_seed_reports(const std::vector<std::pair<std::uint64_t, MetricReport>>& parts) {
  if (parts.empty()) throw input_error("no per-seed reports to merge");
  if (parts.size() == 1) return parts.front().second;
  MetricReport out;
  out.dataset = parts.front().second.dataset;
  out.recipe = parts.front().second.recipe;
  std::map<std::string, double> sums;
  std::vector<std::string> fingerprints;
  for (const auto& [seed, rep] : parts) {
    for (std::size_t i = 0; i < rep.per_sample.size(); ++i) {
      out.sample_ids.push_back("s" + std::to_string(seed) + ":" + rep.sample_ids[i]);
      out.per_sample.push_back(rep.per_sample[i]);
    }
    for (const auto& [key, value] : rep.corpus) sums[key] += value;
    if (fingerprints.empty() || fingerprints.back() != rep.model_fingerprint)
      fingerprints.push_back(rep.model_fingerprint);
  }
  for (const auto& [key, value] : sums)
    out.corpus[key] = value / static_cast<double>(parts.size());
  std::string joined;
  for (const std::string& f : fingerprints) joined += (joined.empty() ? "" : "+") + f;
  out.model_fingerprint = joined;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forgetting experiment
// ---------------------------------------------------------------------------

std::string ForgettingReport::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["pretrain_ocr_ca"] = pretrain_ocr_ca;
  j["sft_ocr_ca"] = sft_ocr_ca;
  j["ssr_ocr_ca"] = ssr_ocr_ca;
  j["sft_translation_ca"] = sft_translation_ca;
  j["ssr_translation_ca"] = ssr_translation_ca;
  j["sft"] = json::parse(sft.to_json());
  j["ssr"] = json::parse(ssr.to_json());
  return j.dump(2) + "\n";
}

ForgettingReport ForgettingReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw input_error(std::string("malformed forgetting report: ") + e.what());
  }
  ForgettingReport r;
  try {
    r.seed = j.at("seed").get<std::uint64_t>();
    r.pretrain_ocr_ca = j.at("pretrain_ocr_ca").get<double>();
    r.sft_ocr_ca = j.at("sft_ocr_ca").get<double>();
    r.ssr_ocr_ca = j.at("ssr_ocr_ca").get<double>();
    r.sft_translation_ca = j.at("sft_translation_ca").get<double>();
    r.ssr_translation_ca = j.at("ssr_translation_ca").get<double>();
    r.sft = RunReport::from_json(j.at("sft").dump());
    r.ssr = RunReport::from_json(j.at("ssr").dump());
  } catch (const json::exception& e) {
    throw input_error(std::string("malformed forgetting report: ") + e.what());
  }
  for (const std::string& ref : {r.sft.loss_trace_ref, r.ssr.loss_trace_ref}) {
    if (ref.empty() || !fs::exists(ref)) continue;
    LossTrace trace = LossTrace::from_jsonl(read_file(ref));
    (ref == r.sft.loss_trace_ref ? r.sft_trace : r.ssr_trace) = std::move(trace);
  }
  return r;
}

ForgettingReport forgetting_experiment(const ExperimentConfig& cfg_in, std::uint64_t seed,
                                       const std::string& work_dir) {
  ExperimentConfig cfg = cfg_in;
  cfg.seeds = {seed};
  cfg.validate();
  const std::string work =
      work_dir.empty()
          ? (fs::temp_directory_path() / "ssr_forgetting" / cfg.digest()).string()
          : work_dir;
  fs::create_directories(work);

  const ToyModel base = pretrained_base(cfg, work);
  const PromptTemplate tmpl = template_for_family("toy");
  const Dataset eval_set =
      glyph_world_dataset(cfg.world, cfg.eval_size, sub_seed(seed, "eval-world"), "eval");
  const std::vector<EvalItem> items = glyph_eval_items(eval_set);
  const ProtocolConfig pcfg = protocol_config(cfg, tmpl, "glyph-eval");

  ForgettingReport report;
  report.seed = seed;
  report.pretrain_ocr_ca = held_out_ocr_ca(base, items, pcfg);
  if (report.pretrain_ocr_ca < cfg.ocr_gate)
    throw gate_error("pretraining missed the transcription gate: held-out character accuracy " +
                     std::to_string(report.pretrain_ocr_ca) + " < " +
                     std::to_string(cfg.ocr_gate) +
                     " (grow pretrain size or epochs, or lower the gate)");

  const Dataset train_set =
      glyph_world_dataset(cfg.world, cfg.train_size, sub_seed(seed, "train-world"), "train");

  const auto run_arm = [&](ExperimentRecipe recipe, const std::string& name, RunReport& out,
                           LossTrace& trace_out) {
    const std::vector<TrainingExample> examples =
        build_arm_examples(cfg, recipe, train_set, base, tmpl, seed,
                           work + "/selfreview-cache/seed-" + std::to_string(seed));
    // Both arms share the adapter seed and budget: the data construction
    // is the only difference between them.
    AdaptedModel model(base, AdapterConfig{cfg.adapter_rank, cfg.adapter_alpha, cfg.adapter_selector},
                       sub_seed(seed, "adapter"));
    const std::string ckpt_dir = work + "/checkpoints/" + name + "-seed" + std::to_string(seed);
    const std::string trace_path = ckpt_dir + "/loss_trace.jsonl";
    const TrainResult tr = train(model, examples, arm_train_config(cfg, seed, ckpt_dir, trace_path));
    const ProtocolResult pr = run_protocol(recipe, model, items, pcfg);
    out.config = cfg;
    out.config.recipe = recipe;
    for (const auto& [domain, rep] : pr.domains) out.domains[domain] = rep;
    out.loss_trace_ref = trace_path;
    out.seconds_per_page = pr.seconds_per_page;
    out.generate_calls = pr.generate_calls;
    out.checkpoints = {tr.final_checkpoint};
    trace_out = tr.trace;
  };

  run_arm(ExperimentRecipe::sft_dimt, "sft", report.sft, report.sft_trace);
  run_arm(ExperimentRecipe::ssr, "ssr", report.ssr, report.ssr_trace);

  report.sft_ocr_ca = report.sft.domains.at("ocr").corpus.at("ca");
  report.ssr_ocr_ca = report.ssr.domains.at("ocr").corpus.at("ca");
  report.sft_translation_ca = report.sft.domains.at("dimt").corpus.at("ca");
  report.ssr_translation_ca = report.ssr.domains.at("dimt").corpus.at("ca");
  return report;
}

ForgettingReport forgetting_experiment(std::uint64_t seed) {
  return forgetting_experiment(ExperimentConfig{}, seed, "");
}

// ---------------------------------------------------------------------------
// Persisted runs and sweeps
// ---------------------------------------------------------------------------

std::string run_dir_for(const std::string& root, const ExperimentConfig& cfg) {
  return (fs::path(root) / cfg.digest()).string();
}

RunReport run_experiment(const ExperimentConfig& cfg, const std::string& root) {
  cfg.validate();
  const std::string dir = run_dir_for(root, cfg);
  const fs::path report_path = fs::path(dir) / "report.json";
  if (fs::exists(report_path)) return RunReport::from_json(read_file(report_path.string()));
  fs::create_directories(dir);
  write_file_atomic((fs::path(dir) / "config.json").string(), cfg.to_json());

  const ToyModel base = pretrained_base(cfg, root);  // cache shared across rows
  const PromptTemplate tmpl = template_for_family("toy");

  RunReport rep;
  rep.config = cfg;
  std::map<std::string, std::vector<std::pair<std::uint64_t, MetricReport>>> per_domain;
  double seconds_sum = 0.0;
  for (std::size_t idx = 0; idx < cfg.seeds.size(); ++idx) {
    const std::uint64_t seed = cfg.seeds[idx];
    const Dataset eval_set =
        glyph_world_dataset(cfg.world, cfg.eval_size, sub_seed(seed, "eval-world"), "eval");
    const std::vector<EvalItem> items = glyph_eval_items(eval_set);
    const ProtocolConfig pcfg = protocol_config(cfg, tmpl, "glyph-eval");

    const double base_ca = held_out_ocr_ca(base, items, pcfg);
    if (base_ca < cfg.ocr_gate)
      throw gate_error("pretraining missed the transcription gate for seed " +
                       std::to_string(seed) + ": held-out character accuracy " +
                       std::to_string(base_ca) + " < " + std::to_string(cfg.ocr_gate));

    ProtocolResult pr;
    if (recipe_trains(cfg.recipe)) {
      const Dataset train_set =
          glyph_world_dataset(cfg.world, cfg.train_size, sub_seed(seed, "train-world"), "train");
      const std::vector<TrainingExample> examples =
          build_arm_examples(cfg, cfg.recipe, train_set, base, tmpl, seed,
                             dir + "/selfreview-cache/seed-" + std::to_string(seed));
      AdaptedModel model(base, AdapterConfig{cfg.adapter_rank, cfg.adapter_alpha, cfg.adapter_selector},
                         sub_seed(seed, "adapter"));
      const std::string trace_path =
          idx == 0 ? dir + "/loss_trace.jsonl"
                   : dir + "/loss_trace-seed" + std::to_string(seed) + ".jsonl";
      const std::string ckpt_dir = dir + "/checkpoints/seed-" + std::to_string(seed);
      const TrainResult tr =
          train(model, examples, arm_train_config(cfg, seed, ckpt_dir, trace_path));
      rep.checkpoints.push_back(tr.final_checkpoint);
      if (idx == 0) rep.loss_trace_ref = trace_path;
      pr = run_protocol(cfg.recipe, model, items, pcfg);
    } else {
      pr = run_protocol(cfg.recipe, base, items, pcfg);
    }
    for (const auto& [domain, domain_report] : pr.domains)
      per_domain[domain].emplace_back(seed, domain_report);
    seconds_sum += pr.seconds_per_page;
    rep.generate_calls += pr.generate_calls;
  }

  for (const auto& [domain, parts] : per_domain) rep.domains[domain] = merge_seed_reports(parts);
  rep.seconds_per_page = seconds_sum / static_cast<double>(cfg.seeds.size());
  write_file_atomic(report_path.string(), rep.to_json());
  return rep;
}

SweepResult sweep(const std::vector<ExperimentConfig>& configs, const std::string& root,
                  int parallelism) {
  if (parallelism < 1) throw config_error("sweep parallelism must be at least 1");
  SweepResult result;
  const std::size_t n = configs.size();
  std::vector<std::optional<RunReport>> slots(n);
  std::vector<std::optional<std::pair<std::string, std::string>>> errors(n);

  const auto run_one = [&](std::size_t i) {
    try {
      slots[i] = run_experiment(configs[i], root);
    } catch (const Error& e) {
      errors[i] = {configs[i].digest(), e.what()};
    } catch (const std::exception& e) {
      errors[i] = {configs[i].digest(), std::string("unexpected failure: ") + e.what()};
    }
  };

  if (parallelism == 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(parallelism)
#endif
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i)
      run_one(static_cast<std::size_t>(i));
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (slots[i]) result.reports.push_back(std::move(*slots[i]));
    if (errors[i]) result.failures.push_back(std::move(*errors[i]));
  }
  return result;
}

}  // namespace ssr
