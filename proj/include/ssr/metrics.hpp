#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ssr {

// Minimal unit-cost insert/delete/substitute edit count.
std::size_t levenshtein(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b);
std::size_t levenshtein(const std::string& a, const std::string& b);  // over code points

// max(0, (N - ED) / N) with N = |ref| in the unit of measurement.
// Throws input_error on empty ref.
double char_accuracy(const std::string& hyp, const std::string& ref);
double word_accuracy(const std::string& hyp, const std::string& ref);

// Thresholded normalized Levenshtein similarity over the answer set.
// Lowercasing is ASCII-only; tau defaults to 0.5.
double anls(const std::string& prediction, const std::vector<std::string>& answers,
            double tau = 0.5);

// Corpus-level BLEU-4 in [0, 100]: uniform weights, brevity penalty.
// Tokenization is character-level (code points) when the target language
// of `lang` is zh/ja/ko, whitespace + ASCII-punctuation splitting
// otherwise. `lang` accepts either a bare language tag or a pair like
// "en-zh" (the part after '-' decides). Zero matched n-gram counts are
// floored to kBleuEpsilon; orders with no hypothesis n-grams at all are
// skipped so identical corpora of short sentences still score 100.
inline constexpr double kBleuEpsilon = 0.1;
double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
            const std::string& lang = "");

// Removes inline/display math ($...$, $$...$$, \(...\), \[...\]),
// markdown table blocks (contiguous lines containing '|'), and fenced
// code blocks. Idempotent; untouched prose keeps its order.
std::string strip_plain(const std::string& md);

// bleu over strip_plain of both sides.
double bleu_pt(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
               const std::string& lang = "");

// Tokenization used by bleu; exposed for the scorer and tests.
std::vector<std::string> bleu_tokenize(const std::string& text, const std::string& lang);

struct SampleScores {
  double bleu = 0.0;
  double bleu_pt = 0.0;
  double steds = 0.0;
  double ca = 0.0;
  double wa = 0.0;
  std::optional<double> anls;
};

// Per-sample and corpus-level scores plus run metadata. Serialized as
// JSON with sorted keys and no timestamps, so identical inputs produce
// byte-identical report files.
struct MetricReport {
  std::vector<std::string> sample_ids;
  std::vector<SampleScores> per_sample;
  std::map<std::string, double> corpus;  // aggregate name -> value
  std::string model_fingerprint;
  std::string dataset;
  std::string recipe;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

// Scores hypothesis/reference pairs: corpus BLEU and BLEU-PT plus
// per-sample scores for everything else. `ids` may be empty (indices are
// used). Parallel over samples with a deterministic reduce.
MetricReport score_corpus(const std::vector<std::string>& ids,
                          const std::vector<std::string>& hyps,
                          const std::vector<std::string>& refs, const std::string& lang);

}  // namespace ssr
