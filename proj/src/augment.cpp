#include "ssr/augment.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <httplib.h>
#include <json.hpp>

#include "ssr/error.hpp"
#include "ssr/util.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ssr {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// TranslatorConfig
// ---------------------------------------------------------------------------

void TranslatorConfig::validate() const {
  if (endpoint.empty()) throw config_error("translator endpoint must not be empty");
  if (timeout_ms <= 0) throw config_error("translator timeout_ms must be positive");
  if (max_retries < 1) throw config_error("translator max_retries must be at least 1");
  if (backoff_ms < 0) throw config_error("translator backoff_ms must not be negative");
}

// ---------------------------------------------------------------------------
// CipherTranslator
// ---------------------------------------------------------------------------

namespace {

char rotate_in(char c, char lo, int span, int shift) {
  int offset = ((c - lo + shift) % span + span) % span;
  return static_cast<char>(lo + offset);
}

std::string rotate_text(const std::string& text, int shift) {
  std::string out = text;
  for (char& c : out) {
    if (c >= 'a' && c <= 'z') c = rotate_in(c, 'a', 26, shift);
    else if (c >= 'A' && c <= 'Z') c = rotate_in(c, 'A', 26, shift);
    else if (c >= '0' && c <= '9') c = rotate_in(c, '0', 10, shift);
  }
  return out;
}

}  // namespace

CipherTranslator::CipherTranslator(int key) : key_(key) {}

std::string CipherTranslator::translate(const std::string& text, const std::string&,
                                        const std::string&) {
  return rotate_text(text, key_);
}

std::string CipherTranslator::decipher(const std::string& text) const {
  return rotate_text(text, -key_);
}

std::string CipherTranslator::id() const { return "cipher:rot" + std::to_string(key_); }

// ---------------------------------------------------------------------------
// HttpTranslator
// ---------------------------------------------------------------------------

HttpTranslator::HttpTranslator(TranslatorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.endpoint.rfind("http://", 0) != 0)
    throw config_error("translator endpoint must be an http:// URL: " + cfg_.endpoint);
  auto path_at = cfg_.endpoint.find('/', std::string("http://").size());
  host_ = cfg_.endpoint.substr(0, path_at);
  path_ = path_at == std::string::npos ? "/" : cfg_.endpoint.substr(path_at);
  if (!cfg_.credentials_env.empty()) {
    const char* v = std::getenv(cfg_.credentials_env.c_str());
    if (v == nullptr || *v == '\0')
      throw config_error("credentials environment variable is not set: " + cfg_.credentials_env);
    token_ = v;
  }
}

std::string HttpTranslator::id() const { return "http:" + cfg_.endpoint; }

std::string HttpTranslator::translate(const std::string& text, const std::string& src_lang,
                                      const std::string& tgt_lang) {
  json body;
  body["text"] = text;
  body["src_lang"] = src_lang;
  body["tgt_lang"] = tgt_lang;
  const std::string payload = body.dump();

  std::string last_failure = "no attempt made";
  for (int attempt = 1; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 1 && cfg_.backoff_ms > 0) {
      auto wait = std::chrono::milliseconds(cfg_.backoff_ms) * (1 << (attempt - 2));
      std::this_thread::sleep_for(wait);
    }
    // A fresh connection per attempt keeps this callable from many
    // threads at once without shared client state.
    httplib::Client cli(host_);
    cli.set_connection_timeout(0, cfg_.timeout_ms * 1000);
    cli.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
    cli.set_write_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

    auto res = cli.Post(path_, headers, payload, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
      continue;  // retryable
    }
    if (res->status == 200) {
      try {
        json reply = json::parse(res->body);
        return reply.at("translation").get<std::string>();
      } catch (const json::exception& e) {
        throw io_error("malformed translation response: " + std::string(e.what()));
      }
    }
    if (res->status == 429 || res->status >= 500) {
      last_failure = "status " + std::to_string(res->status);
      continue;  // retryable
    }
    throw io_error("translator rejected request with status " + std::to_string(res->status));
  }
  throw io_error("translation failed after " + std::to_string(cfg_.max_retries) +
                 " attempts: " + last_failure);
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

namespace {

std::pair<std::string, std::string> split_lang_pair(const std::string& lang_pair) {
  auto dash = lang_pair.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 == lang_pair.size())
    return {"en", "zh"};
  return {lang_pair.substr(0, dash), lang_pair.substr(dash + 1)};
}

}  // namespace

SynthesisResult synthesize(const MultimodalModel& model, const Dataset& images,
                           TranslatorClient& translator, const PromptTemplate& tmpl,
                           const DecodeConfig& cfg, int concurrency) {
  tmpl.validate(model.tokenizer());
  cfg.validate();
  if (concurrency < 0) throw config_error("synthesize concurrency must not be negative");

  const std::int64_t n = static_cast<std::int64_t>(images.samples.size());
  SynthesisResult result;
  if (n == 0) return result;

  const Tokenizer& tok = model.tokenizer();
  const std::vector<TokenId> prompt = tok.encode(tmpl.instruction_text);
  const std::string ocr_fingerprint = model.fingerprint();
  const std::string translator_id = translator.id();

  std::vector<std::optional<SyntheticSample>> made(n);
  std::vector<std::optional<SkipRecord>> skipped(n);

  std::atomic<bool> failed{false};
  std::exception_ptr first_error;

#ifdef _OPENMP
  const int threads = concurrency > 0 ? concurrency : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
#endif
  for (std::int64_t i = 0; i < n; ++i) {
    if (failed.load(std::memory_order_relaxed)) continue;
    const Sample& s = images.samples[i];
    std::string stage = "generate";
    try {
      std::vector<TokenId> gen = model.generate(prompt, s.image, cfg);
      std::string source = tok.decode(gen);
      if (source.empty()) {
        skipped[i] = SkipRecord{s.id, "empty-source"};
        continue;
      }
      stage = "translate";
      auto [src_lang, tgt_lang] = split_lang_pair(s.lang_pair);
      std::string target = translator.translate(source, src_lang, tgt_lang);

      Sample out;
      out.id = "synth:" + s.id;
      out.image = s.image;
      out.target_text = std::move(target);
      out.source_text = std::move(source);
      out.domain = s.domain;
      out.lang_pair = s.lang_pair;
      made[i] = SyntheticSample{std::move(out),
                                SyntheticProvenance{"unsupervised", ocr_fingerprint, translator_id}};
    } catch (const Error& e) {
      skipped[i] = SkipRecord{s.id, stage + ": " + e.what()};
    } catch (...) {
#ifdef _OPENMP
#pragma omp critical(ssr_synthesize_error)
#endif
      {
        if (!failed.exchange(true)) first_error = std::current_exception();
      }
    }
  }
  if (failed.load()) std::rethrow_exception(first_error);

  for (std::int64_t i = 0; i < n; ++i) {
    if (made[i]) result.samples.push_back(std::move(*made[i]));
    if (skipped[i]) result.skips.push_back(std::move(*skipped[i]));
  }
  if (result.samples.empty())
    throw io_error("synthesis produced no samples: all " + std::to_string(n) + " inputs failed");
  return result;
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

Dataset merge(const Dataset& base, const std::vector<SyntheticSample>& synth, bool dedup) {
  Dataset out = base;

  std::unordered_set<std::string> ids;
  ids.reserve(base.samples.size() + synth.size());
  for (const Sample& s : base.samples) ids.insert(s.id);

  std::unordered_set<std::string> targets;
  if (dedup) {
    targets.reserve(base.samples.size() + synth.size());
    for (const Sample& s : base.samples) targets.insert(s.target_text);
  }

  for (const SyntheticSample& ss : synth) {
    if (!ids.insert(ss.sample.id).second)
      throw input_error("id collision while merging synthetic data: " + ss.sample.id);
    if (dedup && !targets.insert(ss.sample.target_text).second) continue;
    out.samples.push_back(ss.sample);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic manifests
// ---------------------------------------------------------------------------

void write_synthetic_manifest(const std::vector<SyntheticSample>& synth,
                              const std::string& path) {
  std::ostringstream out;
  for (const SyntheticSample& ss : synth) {
    const Sample& s = ss.sample;
    ordered_json j;
    j["id"] = s.id;
    j["image"] = s.image;
    j["target_text"] = s.target_text;
    if (s.source_text) j["source_text"] = *s.source_text;
    j["domain"] = s.domain;
    j["lang_pair"] = s.lang_pair;
    j["provenance"] = {{"origin", ss.provenance.origin},
                       {"ocr_model", ss.provenance.ocr_model},
                       {"translator", ss.provenance.translator_id}};
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<SyntheticSample> load_synthetic_manifest(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<SyntheticSample> result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw input_error("synthetic manifest line " + std::to_string(line_no) +
                        ": malformed record: " + e.what());
    }
    try {
      SyntheticSample ss;
      ss.sample.id = j.at("id").get<std::string>();
      ss.sample.image = j.at("image").get<std::string>();
      ss.sample.target_text = j.at("target_text").get<std::string>();
      if (j.contains("source_text") && !j["source_text"].is_null())
        ss.sample.source_text = j["source_text"].get<std::string>();
      if (j.contains("domain")) ss.sample.domain = j["domain"].get<std::string>();
      if (j.contains("lang_pair")) ss.sample.lang_pair = j["lang_pair"].get<std::string>();
      if (!j.contains("provenance"))
        throw input_error("synthetic manifest line " + std::to_string(line_no) + " (id " +
                          ss.sample.id + "): missing provenance");
      const json& p = j.at("provenance");
      ss.provenance.origin = p.at("origin").get<std::string>();
      ss.provenance.ocr_model = p.at("ocr_model").get<std::string>();
      ss.provenance.translator_id = p.at("translator").get<std::string>();
      result.push_back(std::move(ss));
    } catch (const json::exception& e) {
      throw input_error("synthetic manifest line " + std::to_string(line_no) +
                        ": bad record: " + e.what());
    }
  }
  return result;
}

}  // namespace ssr
