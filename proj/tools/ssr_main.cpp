// ssr — command-line surface over the toolkit.
//
// Subcommands: selfreview, build, train, eval, augment, experiment,
// sweep. Every subcommand accepts --config <json file>; explicitly
// passed flags override config values, which override built-in
// defaults. Exit codes: 0 success, 2 validation/configuration error,
// 3 experiment-gate failure, 1 unexpected internal failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssr/adapter.hpp"
#include "ssr/augment.hpp"
#include "ssr/corpus.hpp"
#include "ssr/error.hpp"
#include "ssr/harness.hpp"
#include "ssr/pipeline.hpp"
#include "ssr/toy_model.hpp"
#include "ssr/training.hpp"
#include "ssr/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return json::parse(ssr::read_file(path));
  } catch (const json::exception& e) {
    throw ssr::config_error("config file " + path + ": " + e.what());
  }
}

// Defaults < config file < explicit flags. A flag that was typed wins;
// otherwise a config key with the matching name fills the slot.
class ConfigLayer {
 public:
  ConfigLayer(const CLI::App* cmd, json values) : cmd_(cmd), values_(std::move(values)) {}

  template <typename T>
  void fill(const std::string& flag, const std::string& key, T& slot) const {
    if (cmd_->count(flag) > 0 || !values_.contains(key)) return;
    try {
      slot = values_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ssr::config_error("config key \"" + key + "\": " + e.what());
    }
  }

 private:
  const CLI::App* cmd_;
  json values_;
};

ssr::PromptTemplate resolve_template(const std::string& templates_path,
                                     const std::string& family) {
  if (templates_path.empty()) return ssr::template_for_family(family);
  const auto all = ssr::load_template_config(templates_path);
  const auto it = all.find(family);
  if (it == all.end())
    throw ssr::config_error("template config " + templates_path + " has no family \"" +
                            family + "\"");
  return it->second;
}

// Self-review records travel between `selfreview` and `build` as one
// JSON array (the per-sample cache under --cache stays the library's
// concern).
std::string records_to_json(const std::vector<ssr::SelfReviewRecord>& records) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : records) {
    ordered_json j;
    j["sample_id"] = r.sample_id;
    j["source_text"] = r.source_text;
    j["decode_hash"] = r.decode_hash;
    j["image_hash"] = r.image_hash;
    j["created_at"] = r.created_at;
    j["empty_generation"] = r.empty_generation;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<ssr::SelfReviewRecord> records_from_json(const std::string& path) {
  std::vector<ssr::SelfReviewRecord> out;
  try {
    const json arr = json::parse(ssr::read_file(path));
    if (!arr.is_array()) throw ssr::input_error("records file " + path + ": expected an array");
    for (const json& j : arr) {
      ssr::SelfReviewRecord r;
      r.sample_id = j.at("sample_id").get<std::string>();
      r.source_text = j.at("source_text").get<std::string>();
      r.decode_hash = j.value("decode_hash", std::string());
      r.image_hash = j.value("image_hash", std::string());
      r.created_at = j.value("created_at", std::string());
      r.empty_generation = j.value("empty_generation", false);
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ssr::input_error("records file " + path + ": " + e.what());
  }
  return out;
}

std::map<std::string, std::string> load_external_map(const std::string& path) {
  std::map<std::string, std::string> out;
  if (path.empty()) return out;
  try {
    const json j = json::parse(ssr::read_file(path));
    if (!j.is_object())
      throw ssr::input_error("external source file " + path +
                             ": expected an object of sample id -> text");
    for (const auto& [id, text] : j.items()) out[id] = text.get<std::string>();
  } catch (const json::exception& e) {
    throw ssr::input_error("external source file " + path + ": " + e.what());
  }
  return out;
}

// Unlabeled-image manifests: JSONL like a corpus manifest, but only
// `id` and `image` are required — synthesis exists to supply targets.
ssr::Dataset load_image_manifest(const std::string& path) {
  ssr::Dataset d;
  d.manifest_path = path;
  d.split_name = fs::path(path).stem().string();
  std::stringstream ss(ssr::read_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ssr::Sample s;
      s.id = j.at("id").get<std::string>();
      s.image = j.at("image").get<std::string>();
      s.target_text = j.value("target_text", std::string());
      if (j.contains("source_text") && !j["source_text"].is_null())
        s.source_text = j["source_text"].get<std::string>();
      s.domain = j.value("domain", std::string());
      s.lang_pair = j.value("lang_pair", std::string());
      if (s.id.empty() || s.image.empty())
        throw ssr::input_error("image manifest " + path + " line " +
                               std::to_string(line_no) + ": id and image must be non-empty");
      d.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ssr::input_error("image manifest " + path + " line " + std::to_string(line_no) +
                             ": " + e.what());
    }
  }
  return d;
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> parts;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) parts.push_back(part);
  return parts;
}

json domains_to_json(const std::map<std::string, ssr::MetricReport>& domains) {
  ordered_json out = ordered_json::object();
  for (const auto& [name, report] : domains) out[name] = json::parse(report.to_json());
  return out;
}

void print_domain_summary(const std::map<std::string, ssr::MetricReport>& domains) {
  for (const auto& [name, report] : domains) {
    std::cout << "  " << name << ":";
    for (const auto& [metric, value] : report.corpus) std::cout << " " << metric << "=" << value;
    std::cout << "\n";
  }
}

// ---------------------------------------------------------------------------
// selfreview
// ---------------------------------------------------------------------------

struct SelfreviewOpts {
  std::string config, model, data, out;
  std::string cache = "selfreview-cache";
  std::string family = "toy";
  std::string templates;
  int max_new_tokens = 128;
  bool strict = false;
};

void run_selfreview(const CLI::App* cmd, SelfreviewOpts& o) {
  const ConfigLayer layer(cmd, load_config_json(o.config));
  layer.fill("--model", "model", o.model);
  layer.fill("--data", "data", o.data);
  layer.fill("--out", "out", o.out);
  layer.fill("--cache", "cache", o.cache);
  layer.fill("--family", "family", o.family);
  layer.fill("--templates", "templates", o.templates);
  layer.fill("--max-new-tokens", "max_new_tokens", o.max_new_tokens);
  layer.fill("--strict", "strict", o.strict);
  if (o.model.empty()) throw ssr::config_error("selfreview: --model is required");
  if (o.data.empty()) throw ssr::config_error("selfreview: --data is required");
  if (o.out.empty()) throw ssr::config_error("selfreview: --out is required");

  const ssr::ToyModel model = ssr::ToyModel::load(o.model);
  const ssr::Dataset d = ssr::load_manifest(o.data, o.strict);
  const ssr::PromptTemplate tmpl = resolve_template(o.templates, o.family);
  tmpl.validate(model.tokenizer());

  ssr::DecodeConfig cfg;
  cfg.max_new_tokens = o.max_new_tokens;
  cfg.stop_tokens.insert(model.tokenizer().eos_id());
  if (model.tokenizer().has_special(tmpl.demo_separator_token))
    cfg.stop_tokens.insert(model.tokenizer().special_id(tmpl.demo_separator_token));

  const auto records = ssr::generate_selfreview(model, d, tmpl, cfg, o.cache);
  ssr::write_file_atomic(o.out, records_to_json(records));

  std::size_t empty = 0;
  for (const auto& r : records) empty += r.empty_generation ? 1 : 0;
  std::cout << "selfreview: " << records.size() << " records (" << empty
            << " empty generations) -> " << o.out << "\n"
            << "cache: " << o.cache << "\n";
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

struct BuildOpts {
  std::string config, data, out, records, external;
  std::string recipe;  // ssr | sft_dimt | sft_mt
  std::string task = "ocr";
  std::string provenance;  // defaults depend on the recipe
  std::string family = "toy";
  std::string templates;
  bool strict = false;
};

void run_build(const CLI::App* cmd, BuildOpts& o) {
  const ConfigLayer layer(cmd, load_config_json(o.config));
  layer.fill("--data", "data", o.data);
  layer.fill("--out", "out", o.out);
  layer.fill("--records", "records", o.records);
  layer.fill("--external", "external", o.external);
  layer.fill("--recipe", "recipe", o.recipe);
  layer.fill("--task", "task", o.task);
  layer.fill("--provenance", "provenance", o.provenance);
  layer.fill("--family", "family", o.family);
  layer.fill("--templates", "templates", o.templates);
  layer.fill("--strict", "strict", o.strict);
  if (o.data.empty()) throw ssr::config_error("build: --data is required");
  if (o.out.empty()) throw ssr::config_error("build: --out is required");
  if (o.recipe.empty()) throw ssr::config_error("build: --recipe is required");

  const ssr::Recipe recipe = ssr::parse_recipe(o.recipe);
  if (o.provenance.empty())
    o.provenance = recipe == ssr::Recipe::ssr ? "self_generated" : "ground_truth";
  const ssr::SourceProvenance provenance = ssr::parse_provenance(o.provenance);
  const ssr::TaskKind task = ssr::parse_task(o.task);
  if (recipe != ssr::Recipe::ssr && task != ssr::TaskKind::ocr)
    throw ssr::config_error("build: --task variants apply to the ssr recipe only");
  if (task == ssr::TaskKind::vqa)
    throw ssr::config_error(
        "build: vqa demonstrations need question/answer annotations, which corpus "
        "manifests do not carry");

  const ssr::Dataset d = ssr::load_manifest(o.data, o.strict);
  const ssr::PromptTemplate tmpl = resolve_template(o.templates, o.family);
  const ssr::Tokenizer tok = ssr::Tokenizer::ascii();
  tmpl.validate(tok);

  std::map<std::string, ssr::SelfReviewRecord> records;
  const bool needs_sources = recipe != ssr::Recipe::sft_dimt;
  if (needs_sources && provenance == ssr::SourceProvenance::self_generated) {
    if (o.records.empty())
      throw ssr::config_error("build: provenance self_generated needs --records");
    records = ssr::index_records(records_from_json(o.records));
  }
  const auto external = load_external_map(o.external);
  if (needs_sources && provenance == ssr::SourceProvenance::external_ocr && external.empty())
    throw ssr::config_error("build: provenance external_ocr needs --external");

  std::string lines;
  for (const ssr::Sample& s : d.samples) {
    std::optional<std::string> external_text;
    if (const auto it = external.find(s.id); it != external.end()) external_text = it->second;

    ssr::TrainingExample ex;
    switch (recipe) {
      case ssr::Recipe::ssr: {
        const std::string x = ssr::select_source(s, records, provenance, external_text);
        if (task == ssr::TaskKind::ocr) {
          ex = ssr::build_ssr_example(x, s.target_text, tmpl, tok, s.id, provenance);
        } else {
          ssr::DemoPayload payload;
          payload.demo_text = x;
          payload.target_text = s.target_text;
          ex = ssr::build_demo_variant(task, payload, tok, &tmpl, s.id);
          ex.meta.source_provenance = provenance;
        }
        ex.image = s.image;
        break;
      }
      case ssr::Recipe::sft_dimt:
        ex = ssr::build_sft_dimt_example(s.target_text, tok, s.id);
        ex.image = s.image;
        break;
      case ssr::Recipe::sft_mt: {
        const std::string x = ssr::select_source(s, records, provenance, external_text);
        ex = ssr::build_sft_mt_example(x, s.target_text, tok, s.id);
        break;  // text-only: no image reference
      }
    }
    lines += ex.to_json() + "\n";
  }
  ssr::write_file_atomic(o.out, lines);
  std::cout << "build: " << d.samples.size() << " " << ssr::recipe_name(recipe) << " examples ("
            << ssr::provenance_name(provenance) << ") -> " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string config, examples, base, out, trace;
  std::uint64_t seed = 0;
  bool full = false;
  // Adapter placement (ignored with --full).
  int rank = 16;
  double alpha = 16.0;
  std::string targets;
  std::uint64_t adapter_seed = 0;  // 0 = reuse --seed
  // TrainConfig mirrors.
  int epochs = 3;
  int batch_size = 32;
  double peak_lr = 1e-4;
  double warmup_ratio = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string loss_reduction = "token_mean";
  int grad_accum = 1;
  double clip_norm = 0.0;
  bool no_eos = false;
};

void run_train(const CLI::App* cmd, TrainOpts& o) {
  const ConfigLayer layer(cmd, load_config_json(o.config));
  layer.fill("--examples", "examples", o.examples);
  layer.fill("--base", "base", o.base);
  layer.fill("--out", "out", o.out);
  layer.fill("--trace", "trace_path", o.trace);
  layer.fill("--full", "full", o.full);
  layer.fill("--rank", "rank", o.rank);
  layer.fill("--alpha", "alpha", o.alpha);
  layer.fill("--targets", "target_selector", o.targets);
  layer.fill("--adapter-seed", "adapter_seed", o.adapter_seed);
  layer.fill("--epochs", "epochs", o.epochs);
  layer.fill("--batch-size", "batch_size", o.batch_size);
  layer.fill("--peak-lr", "peak_lr", o.peak_lr);
  layer.fill("--warmup-ratio", "warmup_ratio", o.warmup_ratio);
  layer.fill("--beta1", "adam_beta1", o.adam_beta1);
  layer.fill("--beta2", "adam_beta2", o.adam_beta2);
  layer.fill("--adam-eps", "adam_eps", o.adam_eps);
  layer.fill("--reduction", "loss_reduction", o.loss_reduction);
  layer.fill("--grad-accum", "grad_accum", o.grad_accum);
  layer.fill("--clip-norm", "clip_norm", o.clip_norm);
  layer.fill("--no-eos", "no_eos", o.no_eos);
  if (o.examples.empty()) throw ssr::config_error("train: --examples is required");
  if (o.base.empty()) throw ssr::config_error("train: --base is required");
  if (o.out.empty()) throw ssr::config_error("train: --out is required");

  std::vector<ssr::TrainingExample> examples;
  {
    std::stringstream ss(ssr::read_file(o.examples));
    std::string line;
    while (std::getline(ss, line))
      if (!line.empty()) examples.push_back(ssr::TrainingExample::from_json(line));
  }

  ssr::TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.peak_lr = o.peak_lr;
  tc.warmup_ratio = o.warmup_ratio;
  tc.adam_beta1 = o.adam_beta1;
  tc.adam_beta2 = o.adam_beta2;
  tc.adam_eps = o.adam_eps;
  tc.seed = o.seed;
  tc.loss_reduction = ssr::parse_reduction(o.loss_reduction);
  tc.grad_accum = o.grad_accum;
  tc.clip_norm = o.clip_norm;
  tc.append_eos = !o.no_eos;
  tc.checkpoint_dir = o.out;
  tc.trace_path = o.trace;

  ssr::ToyModel base = ssr::ToyModel::load(o.base);
  ssr::TrainResult result;
  if (o.full) {
    result = ssr::train_full(base, examples, tc);
  } else {
    ssr::AdapterConfig acfg;
    acfg.rank = o.rank;
    acfg.alpha = o.alpha;
    acfg.target_selector = o.targets;
    ssr::AdaptedModel model(base, acfg, o.adapter_seed == 0 ? o.seed : o.adapter_seed);
    result = ssr::train(model, examples, tc);
  }

  std::cout << "train: " << examples.size() << " examples, " << result.total_steps
            << " optimizer steps\n"
            << "final checkpoint: " << result.final_checkpoint << "\n";
  for (std::size_t e = 0; e < result.trace.epoch_means.size(); ++e)
    std::cout << "  epoch " << (e + 1) << " mean loss " << result.trace.epoch_means[e] << "\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
  std::string config, model, adapter, data, out;
  std::string recipe = "base";
  std::string tasks = "dimt";
  std::string family = "toy";
  std::string templates;
  std::string lang = "en-zh";
  std::string dataset_name;
  int max_new_tokens = 128;
  bool strict = false;
};

void run_eval(const CLI::App* cmd, EvalOpts& o) {
  const ConfigLayer layer(cmd, load_config_json(o.config));
  layer.fill("--model", "model", o.model);
  layer.fill("--adapter", "adapter", o.adapter);
  layer.fill("--data", "data", o.data);
  layer.fill("--out", "out", o.out);
  layer.fill("--recipe", "recipe", o.recipe);
  layer.fill("--tasks", "tasks", o.tasks);
  layer.fill("--family", "family", o.family);
  layer.fill("--templates", "templates", o.templates);
  layer.fill("--lang", "lang", o.lang);
  layer.fill("--dataset-name", "dataset_name", o.dataset_name);
  layer.fill("--max-new-tokens", "max_new_tokens", o.max_new_tokens);
  layer.fill("--strict", "strict", o.strict);
  if (o.model.empty()) throw ssr::config_error("eval: --model is required");
  if (o.data.empty()) throw ssr::config_error("eval: --data is required");

  const ssr::Dataset d = ssr::load_manifest(o.data, o.strict);
  std::vector<ssr::EvalItem> items;
  for (const std::string& name : split_csv(o.tasks)) {
    const ssr::EvalTask task = ssr::parse_eval_task(name);
    if (task == ssr::EvalTask::vqa || task == ssr::EvalTask::cross_lingual_vqa)
      throw ssr::config_error(
          "eval: vqa tasks need question/answer annotations, which corpus manifests "
          "do not carry");
    for (const ssr::Sample& s : d.samples) {
      ssr::EvalItem item;
      item.sample = s;
      item.task = task;
      items.push_back(std::move(item));
    }
  }

  ssr::ProtocolConfig pcfg;
  pcfg.tmpl = resolve_template(o.templates, o.family);
  pcfg.decode.max_new_tokens = o.max_new_tokens;
  pcfg.lang = o.lang;
  pcfg.dataset_name = o.dataset_name.empty() ? fs::path(o.data).filename().string()
                                             : o.dataset_name;

  const ssr::ToyModel base = ssr::ToyModel::load(o.model);
  ssr::ProtocolResult result;
  const ssr::ExperimentRecipe recipe = ssr::parse_experiment_recipe(o.recipe);
  if (o.adapter.empty()) {
    result = ssr::run_protocol(recipe, base, items, pcfg);
  } else {
    const ssr::AdaptedModel model = ssr::AdaptedModel::load(base, o.adapter);
    result = ssr::run_protocol(recipe, model, items, pcfg);
  }

  ordered_json out;
  out["dataset"] = pcfg.dataset_name;
  out["recipe"] = o.recipe;
  out["domains"] = domains_to_json(result.domains);
  out["seconds_per_page"] = result.seconds_per_page;
  out["generate_calls"] = result.generate_calls;
  const std::string text = out.dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    ssr::write_file_atomic(o.out, text);
    std::cout << "eval: " << items.size() << " items (" << o.recipe << ") -> " << o.out << "\n";
    print_domain_summary(result.domains);
  }
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

struct AugmentOpts {
  std::string config, images, model, out, base;
  std::string translator = "cipher";
  int cipher_key = 7;
  std::string endpoint, credentials_env;
  int timeout_ms = 10000;
  int max_retries = 3;
  int backoff_ms = 100;
  std::string family = "toy";
  std::string templates;
  std::string src_lang = "en", tgt_lang = "zh";
  int max_new_tokens = 128;
  int concurrency = 0;
  bool no_dedup = false;
  bool strict = false;
};

void run_augment(const CLI::App* cmd, AugmentOpts& o) {
  const ConfigLayer layer(cmd, load_config_json(o.config));
  layer.fill("--images", "images", o.images);
  layer.fill("--model", "model", o.model);
  layer.fill("--out", "out", o.out);
  layer.fill("--base", "base", o.base);
  layer.fill("--translator", "translator", o.translator);
  layer.fill("--cipher-key", "cipher_key", o.cipher_key);
  layer.fill("--endpoint", "endpoint", o.endpoint);
  layer.fill("--credentials-env", "credentials_env", o.credentials_env);
  layer.fill("--timeout-ms", "timeout_ms", o.timeout_ms);
  layer.fill("--max-retries", "max_retries", o.max_retries);
  layer.fill("--backoff-ms", "backoff_ms", o.backoff_ms);
  layer.fill("--family", "family", o.family);
  layer.fill("--templates", "templates", o.templates);
  layer.fill("--src-lang", "src_lang", o.src_lang);
  layer.fill("--tgt-lang", "tgt_lang", o.tgt_lang);
  layer.fill("--max-new-tokens", "max_new_tokens", o.max_new_tokens);
  layer.fill("--concurrency", "concurrency", o.concurrency);
  layer.fill("--no-dedup", "no_dedup", o.no_dedup);
  layer.fill("--strict", "strict", o.strict);
  if (o.images.empty()) throw ssr::config_error("augment: --images is required");
  if (o.model.empty()) throw ssr::config_error("augment: --model is required");
  if (o.out.empty()) throw ssr::config_error("augment: --out is required");

  std::unique_ptr<ssr::TranslatorClient> translator;
  if (o.translator == "cipher") {
    translator = std::make_unique<ssr::CipherTranslator>(o.cipher_key);
  } else if (o.translator == "http") {
    ssr::TranslatorConfig tcfg;
    tcfg.endpoint = o.endpoint;
    tcfg.credentials_env = o.credentials_env;
    tcfg.timeout_ms = o.timeout_ms;
    tcfg.max_retries = o.max_retries;
    tcfg.backoff_ms = o.backoff_ms;
    translator = std::make_unique<ssr::HttpTranslator>(tcfg);
  } else {
    throw ssr::config_error("augment: unknown translator \"" + o.translator +
                            "\" (cipher|http)");
  }

  const ssr::ToyModel model = ssr::ToyModel::load(o.model);
  const ssr::Dataset images = load_image_manifest(o.images);
  const ssr::PromptTemplate tmpl = resolve_template(o.templates, o.family);
  tmpl.validate(model.tokenizer());
  ssr::DecodeConfig dcfg;
  dcfg.max_new_tokens = o.max_new_tokens;
  dcfg.stop_tokens.insert(model.tokenizer().eos_id());

  // synthesize() has no language parameters; wrap the client so the
  // requested pair reaches it.
  struct LangPinned : ssr::TranslatorClient {
    ssr::TranslatorClient* inner;
    std::string src, tgt;
    std::string translate(const std::string& text, const std::string&,
                          const std::string&) override {
      return inner->translate(text, src, tgt);
    }
    std::string id() const override { return inner->id(); }
  };
  LangPinned pinned;
  pinned.inner = translator.get();
  pinned.src = o.src_lang;
  pinned.tgt = o.tgt_lang;

  const ssr::SynthesisResult result =
      ssr::synthesize(model, images, pinned, tmpl, dcfg, o.concurrency);

  fs::create_directories(o.out);
  const std::string synth_path = (fs::path(o.out) / "synthetic.jsonl").string();
  const std::string merged_path = (fs::path(o.out) / "merged.jsonl").string();
  const std::string skips_path = (fs::path(o.out) / "skips.json").string();
  ssr::write_synthetic_manifest(result.samples, synth_path);

  ssr::Dataset base;
  if (!o.base.empty()) base = ssr::load_manifest(o.base, o.strict);
  const ssr::Dataset merged = ssr::merge(base, result.samples, !o.no_dedup);
  ssr::write_manifest(merged, merged_path);

  ordered_json skips = ordered_json::array();
  for (const auto& s : result.skips)
    skips.push_back(ordered_json{{"sample_id", s.sample_id}, {"reason", s.reason}});
  ssr::write_file_atomic(skips_path, skips.dump(2) + "\n");

  std::cout << "augment: " << images.samples.size() << " images -> " << result.samples.size()
            << " synthetic pairs (" << result.skips.size() << " skipped) via "
            << pinned.id() << "\n"
            << "merged: " << base.samples.size() << " base + "
            << (merged.samples.size() - base.samples.size()) << " kept = "
            << merged.samples.size() << " -> " << merged_path << "\n"
            << "synthetic manifest: " << synth_path << "\n";
}

// ---------------------------------------------------------------------------
// experiment / sweep
// ---------------------------------------------------------------------------

struct ExperimentFlagOpts {
  std::string recipe, demo_task, provenance, lang_pair, selector;
  std::uint64_t train_size = 0, eval_size = 0;
  int epochs = 0, batch_size = 0, rank = 0, max_new_tokens = 0;
  double peak_lr = 0, warmup_ratio = 0, clip_norm = 0, alpha = 0, external_error_rate = 0;
  int world_rows = 0, world_cols = 0, world_alphabet = 0, world_shift = 0;
  std::uint64_t pretrain_size = 0;
  int pretrain_epochs = 0;
  double ocr_gate = 0;
};

// Registers the shared experiment-knob flags on `cmd`, bound to `f`.
void add_experiment_flags(CLI::App* cmd, ExperimentFlagOpts& f) {
  cmd->add_option("--recipe", f.recipe,
                  "Recipe: ssr|sft_dimt|sft_mt|cot_direct|cot_cascade|base");
  cmd->add_option("--demo-task", f.demo_task, "SSR demonstration task: ocr|caption|vqa");
  cmd->add_option("--provenance", f.provenance,
                  "Source provenance: self_generated|ground_truth|external_ocr");
  cmd->add_option("--lang-pair", f.lang_pair, "Language pair label (default en-zh)");
  cmd->add_option("--train-size", f.train_size, "Fine-tuning set size");
  cmd->add_option("--eval-size", f.eval_size, "Held-out evaluation set size");
  cmd->add_option("--epochs", f.epochs, "Fine-tuning epochs");
  cmd->add_option("--batch-size", f.batch_size, "Fine-tuning batch size");
  cmd->add_option("--peak-lr", f.peak_lr, "Peak learning rate");
  cmd->add_option("--warmup-ratio", f.warmup_ratio, "Warmup fraction of total steps");
  cmd->add_option("--clip-norm", f.clip_norm, "Gradient-norm clip (0 disables)");
  cmd->add_option("--rank", f.rank, "Adapter rank");
  cmd->add_option("--alpha", f.alpha, "Adapter alpha");
  cmd->add_option("--selector", f.selector, "Adapter target selector");
  cmd->add_option("--max-new-tokens", f.max_new_tokens, "Decode budget per generation");
  cmd->add_option("--external-error-rate", f.external_error_rate,
                  "Synthetic external-OCR error rate");
  cmd->add_option("--world-rows", f.world_rows, "Glyph grid rows");
  cmd->add_option("--world-cols", f.world_cols, "Glyph grid columns");
  cmd->add_option("--world-alphabet", f.world_alphabet, "Glyph alphabet size");
  cmd->add_option("--world-shift", f.world_shift, "Translation cipher shift");
  cmd->add_option("--pretrain-size", f.pretrain_size, "Pretraining set size");
  cmd->add_option("--pretrain-epochs", f.pretrain_epochs, "Pretraining epochs");
  cmd->add_option("--ocr-gate", f.ocr_gate, "Held-out OCR gate the base model must reach");
}

// Applies the typed flags onto one config row.
void apply_experiment_flags(const CLI::App* cmd, const ExperimentFlagOpts& f,
                            ssr::ExperimentConfig& cfg) {
  if (cmd->count("--recipe")) cfg.recipe = ssr::parse_experiment_recipe(f.recipe);
  if (cmd->count("--demo-task")) cfg.demo_task = ssr::parse_task(f.demo_task);
  if (cmd->count("--provenance")) cfg.provenance = ssr::parse_provenance(f.provenance);
  if (cmd->count("--lang-pair")) cfg.lang_pair = f.lang_pair;
  if (cmd->count("--train-size")) cfg.train_size = f.train_size;
  if (cmd->count("--eval-size")) cfg.eval_size = f.eval_size;
  if (cmd->count("--epochs")) cfg.epochs = f.epochs;
  if (cmd->count("--batch-size")) cfg.batch_size = f.batch_size;
  if (cmd->count("--peak-lr")) cfg.peak_lr = f.peak_lr;
  if (cmd->count("--warmup-ratio")) cfg.warmup_ratio = f.warmup_ratio;
  if (cmd->count("--clip-norm")) cfg.clip_norm = f.clip_norm;
  if (cmd->count("--rank")) cfg.adapter_rank = f.rank;
  if (cmd->count("--alpha")) cfg.adapter_alpha = f.alpha;
  if (cmd->count("--selector")) cfg.adapter_selector = f.selector;
  if (cmd->count("--max-new-tokens")) cfg.max_new_tokens = f.max_new_tokens;
  if (cmd->count("--external-error-rate")) cfg.external_ocr_error_rate = f.external_error_rate;
  if (cmd->count("--world-rows")) cfg.world.rows = f.world_rows;
  if (cmd->count("--world-cols")) cfg.world.cols = f.world_cols;
  if (cmd->count("--world-alphabet")) cfg.world.alphabet = f.world_alphabet;
  if (cmd->count("--world-shift")) cfg.world.cipher_shift = f.world_shift;
  if (cmd->count("--pretrain-size")) cfg.pretrain_size = f.pretrain_size;
  if (cmd->count("--pretrain-epochs")) cfg.pretrain_epochs = f.pretrain_epochs;
  if (cmd->count("--ocr-gate")) cfg.ocr_gate = f.ocr_gate;
}

struct ExperimentOpts {
  std::string config;
  std::string runs = "runs";
  std::vector<std::uint64_t> seeds;
  bool forgetting = false;
  ExperimentFlagOpts flags;
};

void run_experiment_cmd(const CLI::App* cmd, ExperimentOpts& o) {
  ssr::ExperimentConfig cfg;
  if (!o.config.empty()) cfg = ssr::ExperimentConfig::from_json(ssr::read_file(o.config));
  apply_experiment_flags(cmd, o.flags, cfg);
  cfg.seeds = o.seeds;

  if (o.forgetting) {
    // Both arms (plain translation SFT vs self-review) per seed.
    ssr::ExperimentConfig probe = cfg;
    probe.recipe = ssr::ExperimentRecipe::ssr;  // recipe is ignored; keep the digest stable
    const std::string work =
        (fs::path(o.runs) / "forgetting" / probe.digest()).string();
    double sft_drop = 0, ssr_drop = 0, tx_delta = 0;
    for (const std::uint64_t seed : o.seeds) {
      const ssr::ForgettingReport rep = ssr::forgetting_experiment(probe, seed, work);
      const std::string path =
          (fs::path(work) / ("report-seed" + std::to_string(seed) + ".json")).string();
      ssr::write_file_atomic(path, rep.to_json());
      std::cout << "seed " << seed << ": pretrain ocr ca " << rep.pretrain_ocr_ca
                << " | sft ocr " << rep.sft_ocr_ca << " tx " << rep.sft_translation_ca
                << " | ssr ocr " << rep.ssr_ocr_ca << " tx " << rep.ssr_translation_ca
                << "\n  report: " << path << "\n";
      sft_drop += rep.pretrain_ocr_ca - rep.sft_ocr_ca;
      ssr_drop += rep.pretrain_ocr_ca - rep.ssr_ocr_ca;
      tx_delta += rep.ssr_translation_ca - rep.sft_translation_ca;
    }
    const double n = static_cast<double>(o.seeds.size());
    std::cout << "mean over " << o.seeds.size() << " seed(s): sft ocr drop "
              << 100.0 * sft_drop / n << " pts, ssr ocr drop " << 100.0 * ssr_drop / n
              << " pts, ssr-sft translation delta " << 100.0 * tx_delta / n << " pts\n";
    return;
  }

  const ssr::RunReport report = ssr::run_experiment(cfg, o.runs);
  std::cout << "experiment " << cfg.digest() << " ("
            << ssr::experiment_recipe_name(cfg.recipe) << ") -> "
            << ssr::run_dir_for(o.runs, cfg) << "\n";
  print_domain_summary(report.domains);
  std::cout << "  seconds/page " << report.seconds_per_page << ", generate calls "
            << report.generate_calls << "\n";
}

struct SweepOpts {
  std::string config;
  std::string runs = "runs";
  int parallel = 1;
  std::vector<std::uint64_t> seeds;
  ExperimentFlagOpts flags;
};

void run_sweep(const CLI::App* cmd, SweepOpts& o) {
  json doc;
  try {
    doc = json::parse(ssr::read_file(o.config));
  } catch (const json::exception& e) {
    throw ssr::config_error("sweep config " + o.config + ": " + e.what());
  }
  const json rows = doc.is_array() ? doc : doc.value("configs", json::array());
  if (!rows.is_array() || rows.empty())
    throw ssr::config_error("sweep config " + o.config +
                            ": expected an array of experiment configs (or {\"configs\": [...]})");

  std::vector<ssr::ExperimentConfig> configs;
  for (const json& row : rows) {
    ssr::ExperimentConfig cfg = ssr::ExperimentConfig::from_json(row.dump());
    apply_experiment_flags(cmd, o.flags, cfg);
    if (!o.seeds.empty()) cfg.seeds = o.seeds;
    configs.push_back(std::move(cfg));
  }

  const ssr::SweepResult result = ssr::sweep(configs, o.runs, o.parallel);
  for (const ssr::RunReport& rep : result.reports) {
    std::cout << "ok " << rep.config.digest() << " ("
              << ssr::experiment_recipe_name(rep.config.recipe) << ")\n";
    print_domain_summary(rep.domains);
  }
  for (const auto& [digest, reason] : result.failures)
    std::cout << "failed " << digest << ": " << reason << "\n";
  std::cout << "sweep: " << result.reports.size() << " succeeded, " << result.failures.size()
            << " failed, runs under " << o.runs << "\n";
  if (!result.failures.empty())
    throw ssr::config_error(std::to_string(result.failures.size()) +
                            " sweep row(s) failed; see summary above");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SSR fine-tuning toolkit: self-reviewing translation data pipelines,\n"
               "desk-scale training, evaluation protocols, and experiment sweeps."};
  app.require_subcommand(1);

  SelfreviewOpts selfreview_opts;
  CLI::App* selfreview = app.add_subcommand(
      "selfreview", "Generate (or reuse cached) self-review transcripts for a dataset");
  selfreview->add_option("--config", selfreview_opts.config, "JSON config file");
  selfreview->add_option("--model", selfreview_opts.model, "Base model checkpoint");
  selfreview->add_option("--data", selfreview_opts.data, "Dataset manifest (JSONL)");
  selfreview->add_option("--out", selfreview_opts.out, "Output records file (JSON array)");
  selfreview->add_option("--cache", selfreview_opts.cache, "Per-sample generation cache dir");
  selfreview->add_option("--family", selfreview_opts.family, "Prompt template family");
  selfreview->add_option("--templates", selfreview_opts.templates, "Template config file");
  selfreview->add_option("--max-new-tokens", selfreview_opts.max_new_tokens, "Decode budget");
  selfreview->add_flag("--strict", selfreview_opts.strict, "Escalate manifest warnings");
  selfreview->callback([&] { run_selfreview(selfreview, selfreview_opts); });

  BuildOpts build_opts;
  CLI::App* build =
      app.add_subcommand("build", "Build training examples from a dataset manifest");
  build->add_option("--config", build_opts.config, "JSON config file");
  build->add_option("--data", build_opts.data, "Dataset manifest (JSONL)");
  build->add_option("--out", build_opts.out, "Output examples file (JSONL)");
  build->add_option("--recipe", build_opts.recipe, "ssr|sft_dimt|sft_mt");
  build->add_option("--task", build_opts.task, "SSR demonstration task: ocr|caption");
  build->add_option("--provenance", build_opts.provenance,
                    "self_generated|ground_truth|external_ocr");
  build->add_option("--records", build_opts.records, "Self-review records (from selfreview)");
  build->add_option("--external", build_opts.external,
                    "External OCR texts: JSON object of sample id -> text");
  build->add_option("--family", build_opts.family, "Prompt template family");
  build->add_option("--templates", build_opts.templates, "Template config file");
  build->add_flag("--strict", build_opts.strict, "Escalate manifest warnings");
  build->callback([&] { run_build(build, build_opts); });

  TrainOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "Fine-tune an adapter (or the full model)");
  train->add_option("--config", train_opts.config, "JSON config file");
  train->add_option("--examples", train_opts.examples, "Built examples file (JSONL)");
  train->add_option("--base", train_opts.base, "Base model checkpoint");
  train->add_option("--out", train_opts.out, "Checkpoint output directory");
  train->add_option("--seed", train_opts.seed, "Training seed")->required();
  train->add_flag("--full", train_opts.full, "Train every base parameter (pretraining)");
  train->add_option("--rank", train_opts.rank, "Adapter rank");
  train->add_option("--alpha", train_opts.alpha, "Adapter alpha");
  train->add_option("--targets", train_opts.targets,
                    "Adapter target selector ('|'-separated name substrings)");
  train->add_option("--adapter-seed", train_opts.adapter_seed,
                    "Adapter init seed (default: --seed)");
  train->add_option("--epochs", train_opts.epochs, "Epochs");
  train->add_option("--batch-size", train_opts.batch_size, "Batch size");
  train->add_option("--peak-lr", train_opts.peak_lr, "Peak learning rate");
  train->add_option("--warmup-ratio", train_opts.warmup_ratio, "Warmup fraction");
  train->add_option("--beta1", train_opts.adam_beta1, "Adam beta1");
  train->add_option("--beta2", train_opts.adam_beta2, "Adam beta2");
  train->add_option("--adam-eps", train_opts.adam_eps, "Adam epsilon");
  train->add_option("--reduction", train_opts.loss_reduction, "sum|token_mean");
  train->add_option("--grad-accum", train_opts.grad_accum, "Gradient accumulation chunks");
  train->add_option("--clip-norm", train_opts.clip_norm, "Gradient-norm clip (0 disables)");
  train->add_flag("--no-eos", train_opts.no_eos, "Do not append <eos> to responses");
  train->add_option("--trace", train_opts.trace, "Loss trace path (JSONL)");
  train->callback([&] { run_train(train, train_opts); });

  EvalOpts eval_opts;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Run an evaluation protocol and write a metric report");
  eval_cmd->add_option("--config", eval_opts.config, "JSON config file");
  eval_cmd->add_option("--model", eval_opts.model, "Base model checkpoint");
  eval_cmd->add_option("--adapter", eval_opts.adapter, "Adapter checkpoint (optional)");
  eval_cmd->add_option("--data", eval_opts.data, "Dataset manifest (JSONL)");
  eval_cmd->add_option("--out", eval_opts.out, "Report file (default: stdout)");
  eval_cmd->add_option("--recipe", eval_opts.recipe,
                       "ssr|sft_dimt|sft_mt|cot_direct|cot_cascade|base");
  eval_cmd->add_option("--tasks", eval_opts.tasks, "Comma-separated tasks: dimt,ocr");
  eval_cmd->add_option("--family", eval_opts.family, "Prompt template family");
  eval_cmd->add_option("--templates", eval_opts.templates, "Template config file");
  eval_cmd->add_option("--lang", eval_opts.lang, "Language pair for scoring");
  eval_cmd->add_option("--dataset-name", eval_opts.dataset_name, "Name recorded in reports");
  eval_cmd->add_option("--max-new-tokens", eval_opts.max_new_tokens, "Decode budget");
  eval_cmd->add_flag("--strict", eval_opts.strict, "Escalate manifest warnings");
  eval_cmd->callback([&] { run_eval(eval_cmd, eval_opts); });

  AugmentOpts augment_opts;
  CLI::App* augment = app.add_subcommand(
      "augment", "Synthesize translation pairs for unlabeled images and merge");
  augment->add_option("--config", augment_opts.config, "JSON config file");
  augment->add_option("--images", augment_opts.images, "Unlabeled image manifest (JSONL)");
  augment->add_option("--model", augment_opts.model, "OCR model checkpoint");
  augment->add_option("--out", augment_opts.out, "Output directory");
  augment->add_option("--base", augment_opts.base, "Base corpus manifest to merge into");
  augment->add_option("--translator", augment_opts.translator, "cipher|http");
  augment->add_option("--cipher-key", augment_opts.cipher_key, "Cipher translator key");
  augment->add_option("--endpoint", augment_opts.endpoint, "HTTP translator endpoint");
  augment->add_option("--credentials-env", augment_opts.credentials_env,
                      "Environment variable holding the API token");
  augment->add_option("--timeout-ms", augment_opts.timeout_ms, "Per-call timeout");
  augment->add_option("--max-retries", augment_opts.max_retries, "Attempts per call");
  augment->add_option("--backoff-ms", augment_opts.backoff_ms, "Retry backoff base");
  augment->add_option("--family", augment_opts.family, "Prompt template family");
  augment->add_option("--templates", augment_opts.templates, "Template config file");
  augment->add_option("--src-lang", augment_opts.src_lang, "Source language code");
  augment->add_option("--tgt-lang", augment_opts.tgt_lang, "Target language code");
  augment->add_option("--max-new-tokens", augment_opts.max_new_tokens, "Decode budget");
  augment->add_option("--concurrency", augment_opts.concurrency,
                      "Worker threads (0 = library default)");
  augment->add_flag("--no-dedup", augment_opts.no_dedup, "Keep duplicate-target pairs");
  augment->add_flag("--strict", augment_opts.strict, "Escalate manifest warnings");
  augment->callback([&] { run_augment(augment, augment_opts); });

  ExperimentOpts exp_opts;
  CLI::App* experiment = app.add_subcommand(
      "experiment", "Run one experiment row, or the two-arm forgetting experiment");
  experiment->add_option("--config", exp_opts.config, "Experiment config (JSON)");
  experiment->add_option("--runs", exp_opts.runs, "Run directory root");
  experiment->add_option("--seed", exp_opts.seeds, "Run seed (repeatable)")->required();
  experiment->add_flag("--forgetting", exp_opts.forgetting,
                       "Run both arms (sft_dimt vs ssr) and report retention");
  add_experiment_flags(experiment, exp_opts.flags);
  experiment->callback([&] { run_experiment_cmd(experiment, exp_opts); });

  SweepOpts sweep_opts;
  CLI::App* sweep_cmd = app.add_subcommand(
      "sweep", "Run many experiment rows with resume and failure isolation");
  sweep_cmd->add_option("--config", sweep_opts.config,
                        "Sweep config: JSON array of experiment configs, or {\"configs\": [...]}")
      ->required();
  sweep_cmd->add_option("--runs", sweep_opts.runs, "Run directory root");
  sweep_cmd->add_option("--parallel", sweep_opts.parallel, "Rows to run concurrently");
  sweep_cmd->add_option("--seed", sweep_opts.seeds,
                        "Override every row's seeds (repeatable)");
  add_experiment_flags(sweep_cmd, sweep_opts.flags);
  sweep_cmd->callback([&] { run_sweep(sweep_cmd, sweep_opts); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the parse diagnostic
    return rc == 0 ? 0 : 2;     // bad flags are validation errors
  } catch (const ssr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ssr::ErrorKind::gate ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
