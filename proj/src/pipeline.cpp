#include "ssr/pipeline.hpp"

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <utility>

#include <nlohmann/json.hpp>

#include "ssr/error.hpp"
#include "ssr/util.hpp"

namespace ssr {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::string strip_trailing_period(const std::string& s) {
  if (!s.empty() && s.back() == '.') return s.substr(0, s.size() - 1);
  return s;
}

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
  if (from.empty()) return text;
  std::string out;
  out.reserve(text.size());
  std::size_t pos = 0;
  for (;;) {
    std::size_t hit = text.find(from, pos);
    if (hit == std::string::npos) {
      out.append(text, pos, std::string::npos);
      return out;
    }
    out.append(text, pos, hit - pos);
    out.append(to);
    pos = hit + from.size();
  }
}

// The backslash-escaped spelling of a separator token: the literal
// with '\' inserted after its first character.
std::string escaped_form(const std::string& separator) {
  return separator.substr(0, 1) + "\\" + separator.substr(1);
}

std::string percent_encode(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  out.reserve(s.size());
  for (unsigned char c : s) {
    bool safe = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
                (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
    if (safe) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xF]);
    }
  }
  return out;
}

std::vector<TokenId> concat_response(const Tokenizer& tok, const std::string& first_segment,
                                     TokenId separator_id, const std::string& second_segment) {
  std::vector<TokenId> resp = tok.encode(first_segment);
  resp.push_back(separator_id);
  std::vector<TokenId> tail = tok.encode(second_segment);
  resp.insert(resp.end(), tail.begin(), tail.end());
  return resp;
}

TrainingExample assemble(std::vector<TokenId> instruction, std::vector<TokenId> response,
                         ExampleMeta meta) {
  TrainingExample ex;
  ex.instruction_tokens = std::move(instruction);
  ex.response_tokens = std::move(response);
  ex.loss_mask.assign(ex.instruction_tokens.size(), false);
  ex.loss_mask.insert(ex.loss_mask.end(), ex.response_tokens.size(), true);
  ex.meta = std::move(meta);
  return ex;
}

}  // namespace

// ---------------------------------------------------------------------------
// Enum names
// ---------------------------------------------------------------------------

std::string task_name(TaskKind t) {
  switch (t) {
    case TaskKind::ocr: return "ocr";
    case TaskKind::caption: return "caption";
    case TaskKind::vqa: return "vqa";
  }
  throw config_error("task_name: invalid task value");
}

TaskKind parse_task(const std::string& name) {
  if (name == "ocr") return TaskKind::ocr;
  if (name == "caption") return TaskKind::caption;
  if (name == "vqa") return TaskKind::vqa;
  throw config_error("unknown task \"" + name + "\" (known: ocr, caption, vqa)");
}

std::string recipe_name(Recipe r) {
  switch (r) {
    case Recipe::ssr: return "ssr";
    case Recipe::sft_dimt: return "sft_dimt";
    case Recipe::sft_mt: return "sft_mt";
  }
  throw config_error("recipe_name: invalid recipe value");
}

Recipe parse_recipe(const std::string& name) {
  if (name == "ssr") return Recipe::ssr;
  if (name == "sft_dimt") return Recipe::sft_dimt;
  if (name == "sft_mt") return Recipe::sft_mt;
  throw config_error("unknown recipe \"" + name + "\" (known: ssr, sft_dimt, sft_mt)");
}

std::string provenance_name(SourceProvenance p) {
  switch (p) {
    case SourceProvenance::self_generated: return "self_generated";
    case SourceProvenance::ground_truth: return "ground_truth";
    case SourceProvenance::external_ocr: return "external_ocr";
  }
  throw config_error("provenance_name: invalid provenance value");
}

SourceProvenance parse_provenance(const std::string& name) {
  if (name == "self_generated") return SourceProvenance::self_generated;
  if (name == "ground_truth") return SourceProvenance::ground_truth;
  if (name == "external_ocr") return SourceProvenance::external_ocr;
  throw config_error("unknown source provenance \"" + name +
                     "\" (known: self_generated, ground_truth, external_ocr)");
}

std::string cot_mode_name(CotMode m) {
  switch (m) {
    case CotMode::direct: return "direct";
    case CotMode::cascade: return "cascade";
  }
  throw config_error("cot_mode_name: invalid mode value");
}

CotMode parse_cot_mode(const std::string& name) {
  if (name == "direct") return CotMode::direct;
  if (name == "cascade") return CotMode::cascade;
  throw config_error("unknown chain-of-thought mode \"" + name + "\" (known: direct, cascade)");
}

// ---------------------------------------------------------------------------
// PromptTemplate
// ---------------------------------------------------------------------------

void PromptTemplate::validate(const Tokenizer& tok) const {
  if (instruction_text.empty()) throw config_error("prompt template: empty instruction_text");
  if (demo_separator_token.empty())
    throw config_error("prompt template: empty demo_separator_token");
  if (!tok.has_special(demo_separator_token))
    throw config_error("prompt template: separator token \"" + demo_separator_token +
                       "\" is not registered with the tokenizer");
}

std::string PromptTemplate::composed_instruction() const {
  return strip_trailing_period(instruction_text) + translation_suffix;
}

PromptTemplate template_for_family(const std::string& family) {
  PromptTemplate t;
  if (family == "qwen2-vl") {
    t.instruction_text = "Convert the content in the image to Markdown.";
  } else if (family == "vary") {
    t.instruction_text = "Convert the document to markdown format.";
  } else if (family == "textmonkey") {
    t.instruction_text = "Read all the text in the image.";
  } else if (family == "toy") {
    t.instruction_text = "Read the glyphs in the image.";
  } else {
    throw config_error("unknown model family \"" + family +
                       "\" (known: qwen2-vl, textmonkey, toy, vary)");
  }
  return t;
}

std::map<std::string, PromptTemplate> load_template_config(const std::string& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error("template config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw config_error("template config " + path + ": top level must be an object");
  std::map<std::string, PromptTemplate> out;
  for (const auto& [family, obj] : j.items()) {
    if (!obj.is_object())
      throw config_error("template config " + path + ": entry \"" + family + "\" must be an object");
    PromptTemplate t;
    try {
      if (obj.contains("task")) t.task = parse_task(obj.at("task").get<std::string>());
      t.instruction_text = obj.at("instruction_text").get<std::string>();
      if (obj.contains("translation_suffix"))
        t.translation_suffix = obj.at("translation_suffix").get<std::string>();
      if (obj.contains("demo_separator_token"))
        t.demo_separator_token = obj.at("demo_separator_token").get<std::string>();
    } catch (const json::exception& e) {
      throw config_error("template config " + path + ": entry \"" + family + "\": " + e.what());
    }
    if (t.instruction_text.empty())
      throw config_error("template config " + path + ": entry \"" + family +
                         "\": empty instruction_text");
    out.emplace(family, std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Self-review cache
// ---------------------------------------------------------------------------

std::string decode_hash_for(const DecodeConfig& cfg, const std::string& model_fingerprint) {
  return to_hex(fnv1a64(cfg.digest() + "|" + model_fingerprint));
}

std::string selfreview_cache_path(const std::string& cache_dir,
                                  const std::string& model_fingerprint,
                                  const std::string& sample_id) {
  std::filesystem::path p(cache_dir);
  p /= "selfreview";
  p /= percent_encode(model_fingerprint);
  p /= percent_encode(sample_id) + ".json";
  return p.string();
}

namespace {

std::string record_to_json(const SelfReviewRecord& rec) {
  ordered_json j;
  j["sample_id"] = rec.sample_id;
  j["source_text"] = rec.source_text;
  j["decode_hash"] = rec.decode_hash;
  j["image_hash"] = rec.image_hash;
  j["created_at"] = rec.created_at;
  j["empty_generation"] = rec.empty_generation;
  return j.dump(2) + "\n";
}

SelfReviewRecord record_from_json(const std::string& text, const std::string& path) {
  try {
    json j = json::parse(text);
    SelfReviewRecord rec;
    rec.sample_id = j.at("sample_id").get<std::string>();
    rec.source_text = j.at("source_text").get<std::string>();
    rec.decode_hash = j.at("decode_hash").get<std::string>();
    // Records written before image binding lack the field; the empty
    // string never matches a real hash, so they are regenerated.
    rec.image_hash = j.value("image_hash", std::string());
    rec.created_at = j.at("created_at").get<std::string>();
    rec.empty_generation = j.value("empty_generation", false);
    return rec;
  } catch (const json::exception& e) {
    throw io_error("self-review cache file " + path + " is corrupt: " + e.what());
  }
}

}  // namespace

std::vector<SelfReviewRecord> generate_selfreview(const MultimodalModel& model, const Dataset& d,
                                                  const PromptTemplate& tmpl,
                                                  const DecodeConfig& cfg,
                                                  const std::string& cache_dir) {
  const Tokenizer& tok = model.tokenizer();
  tmpl.validate(tok);
  cfg.validate();
  const std::string fingerprint = model.fingerprint();
  const std::string expected_hash = decode_hash_for(cfg, fingerprint);
  const std::vector<TokenId> prompt = tok.encode(tmpl.instruction_text);

  namespace fs = std::filesystem;
  fs::path dir = fs::path(cache_dir) / "selfreview" / percent_encode(fingerprint);
  fs::create_directories(dir);

  const std::int64_t n = static_cast<std::int64_t>(d.samples.size());
  std::vector<SelfReviewRecord> out(static_cast<std::size_t>(n));
  std::exception_ptr first_error = nullptr;
  std::atomic<bool> failed{false};

#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    if (failed.load(std::memory_order_relaxed)) continue;
    try {
      const Sample& s = d.samples[static_cast<std::size_t>(i)];
      const std::string path = selfreview_cache_path(cache_dir, fingerprint, s.id);
      const std::string image_hash = to_hex(fnv1a64(s.image));
      if (fs::exists(path)) {
        SelfReviewRecord cached = record_from_json(read_file(path), path);
        if (cached.decode_hash == expected_hash && cached.image_hash == image_hash) {
          cached.sample_id = s.id;
          out[static_cast<std::size_t>(i)] = std::move(cached);
          continue;
        }
      }
      std::vector<TokenId> generated = model.generate(prompt, s.image, cfg);
      SelfReviewRecord rec;
      rec.sample_id = s.id;
      rec.source_text = tok.decode(generated);
      rec.decode_hash = expected_hash;
      rec.image_hash = image_hash;
      rec.created_at = iso8601_utc_now();
      rec.empty_generation = rec.source_text.empty();
      write_file_atomic(path, record_to_json(rec));
      out[static_cast<std::size_t>(i)] = std::move(rec);
    } catch (...) {
#pragma omp critical(ssr_selfreview_error)
      {
        if (!first_error) {
          first_error = std::current_exception();
          failed.store(true, std::memory_order_relaxed);
        }
      }
    }
  }

  if (first_error) std::rethrow_exception(first_error);
  return out;
}

std::map<std::string, SelfReviewRecord> index_records(
    const std::vector<SelfReviewRecord>& records) {
  std::map<std::string, SelfReviewRecord> out;
  for (const SelfReviewRecord& rec : records) {
    auto [it, inserted] = out.emplace(rec.sample_id, rec);
    if (!inserted)
      throw input_error("duplicate self-review record for sample \"" + rec.sample_id + "\"");
  }
  return out;
}

// ---------------------------------------------------------------------------
// TrainingExample
// ---------------------------------------------------------------------------

std::vector<TokenId> TrainingExample::full_tokens() const {
  std::vector<TokenId> all = instruction_tokens;
  all.insert(all.end(), response_tokens.begin(), response_tokens.end());
  return all;
}

std::string TrainingExample::to_json() const {
  ordered_json j;
  j["instruction_tokens"] = instruction_tokens;
  j["response_tokens"] = response_tokens;
  std::vector<int> mask;
  mask.reserve(loss_mask.size());
  for (bool b : loss_mask) mask.push_back(b ? 1 : 0);
  j["loss_mask"] = mask;
  j["meta"] = {{"sample_id", meta.sample_id},
               {"recipe", recipe_name(meta.recipe)},
               {"source_provenance", provenance_name(meta.source_provenance)}};
  j["image"] = image;
  return j.dump();
}

TrainingExample TrainingExample::from_json(const std::string& text) {
  try {
    json j = json::parse(text);
    TrainingExample ex;
    ex.instruction_tokens = j.at("instruction_tokens").get<std::vector<TokenId>>();
    ex.response_tokens = j.at("response_tokens").get<std::vector<TokenId>>();
    for (int v : j.at("loss_mask").get<std::vector<int>>()) ex.loss_mask.push_back(v != 0);
    const json& m = j.at("meta");
    ex.meta.sample_id = m.at("sample_id").get<std::string>();
    ex.meta.recipe = parse_recipe(m.at("recipe").get<std::string>());
    ex.meta.source_provenance = parse_provenance(m.at("source_provenance").get<std::string>());
    ex.image = j.value("image", std::string());
    if (ex.loss_mask.size() != ex.instruction_tokens.size() + ex.response_tokens.size())
      throw input_error("training example: loss_mask length does not match token count");
    return ex;
  } catch (const json::exception& e) {
    throw input_error(std::string("training example: malformed JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Response rendering
// ---------------------------------------------------------------------------

std::string escape_separator(const std::string& text, const std::string& separator) {
  if (separator.size() < 2) return text;
  return replace_all(text, separator, escaped_form(separator));
}

std::string unescape_separator(const std::string& text, const std::string& separator) {
  if (separator.size() < 2) return text;
  return replace_all(text, escaped_form(separator), separator);
}

std::string render_ssr_response(const std::string& x_prime, const std::string& y,
                                const PromptTemplate& tmpl) {
  return escape_separator(x_prime, tmpl.demo_separator_token) + "\n" + tmpl.demo_separator_token +
         "\n" + y;
}

std::pair<std::string, std::string> parse_ssr_response(const std::string& text,
                                                       const PromptTemplate& tmpl) {
  const std::string marker = "\n" + tmpl.demo_separator_token + "\n";
  const std::size_t pos = text.find(marker);
  if (pos == std::string::npos)
    throw input_error("response has no \"" + tmpl.demo_separator_token + "\" separator line");
  std::string x = unescape_separator(text.substr(0, pos), tmpl.demo_separator_token);
  std::string y = text.substr(pos + marker.size());
  return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Example builders
// ---------------------------------------------------------------------------

TrainingExample build_ssr_example(const std::string& x_prime, const std::string& y,
                                  const PromptTemplate& tmpl, const Tokenizer& tok,
                                  const std::string& sample_id, SourceProvenance provenance) {
  tmpl.validate(tok);
  if (y.empty())
    throw input_error("build_ssr_example: empty target text" +
                      (sample_id.empty() ? "" : " for sample \"" + sample_id + "\""));
  const TokenId sep_id = tok.special_id(tmpl.demo_separator_token);
  std::vector<TokenId> instruction = tok.encode(tmpl.composed_instruction());
  std::vector<TokenId> response =
      concat_response(tok, escape_separator(x_prime, tmpl.demo_separator_token) + "\n", sep_id,
                      "\n" + y);
  return assemble(std::move(instruction), std::move(response),
                  ExampleMeta{sample_id, Recipe::ssr, provenance});
}

TrainingExample build_sft_dimt_example(const std::string& y, const Tokenizer& tok,
                                       const std::string& sample_id) {
  if (y.empty())
    throw input_error("build_sft_dimt_example: empty target text" +
                      (sample_id.empty() ? "" : " for sample \"" + sample_id + "\""));
  static const std::string kInstruction =
      "Translate all the text in the image into Chinese and output in Markdown format.";
  return assemble(tok.encode(kInstruction), tok.encode(y),
                  ExampleMeta{sample_id, Recipe::sft_dimt, SourceProvenance::ground_truth});
}

TrainingExample build_sft_mt_example(const std::string& x, const std::string& y,
                                     const Tokenizer& tok, const std::string& sample_id) {
  if (x.empty()) throw input_error("build_sft_mt_example: empty source text");
  if (y.empty()) throw input_error("build_sft_mt_example: empty target text");
  const std::string instruction = "Translate these text into Chinese.\n" + x;
  return assemble(tok.encode(instruction), tok.encode(y),
                  ExampleMeta{sample_id, Recipe::sft_mt, SourceProvenance::ground_truth});
}

TrainingExample build_demo_variant(TaskKind task, const DemoPayload& payload, const Tokenizer& tok,
                                   const PromptTemplate* base, const std::string& sample_id) {
  if (task == TaskKind::ocr)
    throw input_error("build_demo_variant: task=ocr is the standard recognize-then-translate "
                      "example; use build_ssr_example");

  std::string instruction_text;
  std::string separator;
  std::string target;
  if (task == TaskKind::caption) {
    const std::string base_instruction = base ? base->instruction_text : "Describe this image";
    instruction_text = strip_trailing_period(base_instruction) + ", then translate into Chinese.";
    separator = std::string(kTranslationToken);
    if (payload.target_text.empty())
      throw input_error("build_demo_variant: caption variant requires a target text");
    target = payload.target_text;
  } else {  // vqa
    if (payload.question.empty() || payload.answer.empty())
      throw input_error("build_demo_variant: vqa variant requires both a question and an answer");
    const std::string base_instruction =
        base ? base->instruction_text : "Convert the content in the image to Markdown.";
    instruction_text = strip_trailing_period(base_instruction) +
                       ", then answer the following question:\n" + payload.question;
    separator = std::string(kAnswerToken);
    target = payload.answer;
  }

  if (!tok.has_special(separator))
    throw config_error("build_demo_variant: separator token \"" + separator +
                       "\" is not registered with the tokenizer");
  const TokenId sep_id = tok.special_id(separator);
  std::vector<TokenId> response =
      concat_response(tok, escape_separator(payload.demo_text, separator) + "\n", sep_id,
                      "\n" + target);
  return assemble(tok.encode(instruction_text), std::move(response),
                  ExampleMeta{sample_id, Recipe::ssr, SourceProvenance::self_generated});
}

// ---------------------------------------------------------------------------
// Chain-of-thought prompting baselines
// ---------------------------------------------------------------------------

CotPrompts build_cot_prompts(CotMode mode, const PromptTemplate& tmpl,
                             const std::optional<std::string>& prior_ocr) {
  if (tmpl.instruction_text.empty())
    throw config_error("build_cot_prompts: empty instruction_text");
  CotPrompts out;
  if (mode == CotMode::direct) {
    out.round1 = tmpl.composed_instruction();
    return out;
  }
  if (!prior_ocr.has_value())
    throw input_error("build_cot_prompts: cascade round 2 requires the round-1 recognition output");
  out.round1 = tmpl.instruction_text;
  out.round2 = "Translate these text into Chinese.\n" + *prior_ocr;
  return out;
}

// ---------------------------------------------------------------------------
// Source selection
// ---------------------------------------------------------------------------

std::string select_source(const Sample& sample,
                          const std::map<std::string, SelfReviewRecord>& records,
                          SourceProvenance provenance,
                          const std::optional<std::string>& external_text) {
  switch (provenance) {
    case SourceProvenance::self_generated: {
      auto it = records.find(sample.id);
      if (it == records.end())
        throw provenance_error("no self-review record for sample \"" + sample.id + "\"");
      return it->second.source_text;
    }
    case SourceProvenance::ground_truth: {
      if (!sample.source_text.has_value())
        throw provenance_error("sample \"" + sample.id + "\" has no ground-truth source text");
      return *sample.source_text;
    }
    case SourceProvenance::external_ocr: {
      if (!external_text.has_value())
        throw provenance_error("no external recognition text supplied for sample \"" + sample.id +
                               "\"");
      return *external_text;
    }
  }
  throw config_error("select_source: invalid provenance value");
}

}  // namespace ssr
