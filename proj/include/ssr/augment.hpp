#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssr/corpus.hpp"
#include "ssr/decode.hpp"
#include "ssr/model_iface.hpp"
#include "ssr/pipeline.hpp"

namespace ssr {

// ---------------------------------------------------------------------------
// Translator clients
// ---------------------------------------------------------------------------

// Connection settings for a live translation service. Credentials are
// never stored in config files; `credentials_env` names the environment
// variable holding the API token (empty = unauthenticated endpoint).
struct TranslatorConfig {
  std::string endpoint;          // e.g. "http://127.0.0.1:8089/translate"
  std::string credentials_env;
  int timeout_ms = 10000;        // per-call connect/read/write timeout
  int max_retries = 3;           // total attempts per call
  int backoff_ms = 100;          // base of the exponential retry backoff

  // Throws config_error on an empty endpoint, a non-positive timeout,
  // fewer than one attempt, or a negative backoff.
  void validate() const;
};

// Interface every translation backend satisfies. translate() must be
// safe to call concurrently from several threads; it either returns the
// translation or throws io_error once its retry budget is exhausted —
// it never blocks past the configured timeout per attempt.
class TranslatorClient {
 public:
  virtual ~TranslatorClient() = default;

  virtual std::string translate(const std::string& text,
                                const std::string& src_lang,
                                const std::string& tgt_lang) = 0;

  // Stable identity recorded in synthetic-sample provenance.
  virtual std::string id() const = 0;
};

// Offline deterministic stub: a bijective per-character cipher that
// rotates letters within their case and digits within 0-9 by `key`
// positions, leaving every other code unit untouched. A pure function —
// no state, no I/O — so augment tests never depend on a live service.
class CipherTranslator : public TranslatorClient {
 public:
  explicit CipherTranslator(int key = 7);

  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& tgt_lang) override;
  std::string id() const override;

  // The inverse rotation; decipher(cipher(s)) == s for every string.
  std::string decipher(const std::string& text) const;

 private:
  int key_;
};

// HTTP client for a JSON translation endpoint. Each call POSTs
//   {"text": ..., "src_lang": ..., "tgt_lang": ...}
// and expects 200 with {"translation": ...}. Transport failures and
// 429/5xx responses are retried with exponential backoff (backoff_ms,
// doubling per attempt) up to max_retries attempts; other non-200
// statuses and malformed bodies fail immediately. When credentials_env
// is set, its value is sent as "Authorization: Bearer <token>"; a named
// but unset variable is a config_error at construction.
class HttpTranslator : public TranslatorClient {
 public:
  explicit HttpTranslator(TranslatorConfig cfg);

  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& tgt_lang) override;
  std::string id() const override;

 private:
  TranslatorConfig cfg_;
  std::string token_;   // resolved at construction
  std::string host_;    // scheme://host:port
  std::string path_;
};

// ---------------------------------------------------------------------------
// Synthetic samples
// ---------------------------------------------------------------------------

// Where a synthetic pair came from. Always present; reports must treat
// these pairs as machine-labeled, never as ground truth.
struct SyntheticProvenance {
  std::string origin = "unsupervised";
  std::string ocr_model;       // generating model's fingerprint
  std::string translator_id;

  bool operator==(const SyntheticProvenance&) const = default;
};

struct SyntheticSample {
  Sample sample;               // id is "synth:<origin-id>"
  SyntheticProvenance provenance;

  bool operator==(const SyntheticSample&) const = default;
};

inline bool is_synthetic_id(const std::string& id) {
  return id.rfind("synth:", 0) == 0;
}

// One sample that produced no synthetic pair, and why ("empty-source",
// "translate: <cause>", "generate: <cause>").
struct SkipRecord {
  std::string sample_id;
  std::string reason;

  bool operator==(const SkipRecord&) const = default;
};

struct SynthesisResult {
  std::vector<SyntheticSample> samples;  // input order
  std::vector<SkipRecord> skips;         // input order
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// OCR every image with `model` under the template's verbatim
// instruction, translate the recognized text, and pair the two.
// Samples whose OCR output is empty, or whose translation fails after
// the client's retry budget, are skipped with a recorded reason — a
// pair is never fabricated. Input order is preserved. Work runs in
// parallel (`concurrency` threads; 0 = library default), which is safe
// because the model is frozen and translate() is thread-safe.
// Throws io_error when every sample of a non-empty input failed.
SynthesisResult synthesize(const MultimodalModel& model, const Dataset& images,
                           TranslatorClient& translator, const PromptTemplate& tmpl,
                           const DecodeConfig& cfg, int concurrency = 0);

// Append kept synthetic pairs to a copy of `base`. Base samples are
// never modified and keep their positions. With dedup, a synthetic pair
// whose target_text duplicates any earlier target (base or already-kept
// synthetic) is dropped, which keeps merging associative across
// batches. Throws input_error on any id collision.
Dataset merge(const Dataset& base, const std::vector<SyntheticSample>& synth,
              bool dedup);

// Line-delimited JSON: the corpus manifest fields plus a "provenance"
// object per line. Loading a line without provenance is an input_error
// (synthetic data must never masquerade as ground truth).
void write_synthetic_manifest(const std::vector<SyntheticSample>& synth,
                              const std::string& path);
std::vector<SyntheticSample> load_synthetic_manifest(const std::string& path);

}  // namespace ssr
