#include "ssr/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "nlohmann/json.hpp"
#include "ssr/error.hpp"
#include "ssr/structure_tree.hpp"
#include "ssr/util.hpp"

namespace ssr {

std::size_t levenshtein(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0) return m;
  if (m == 0) return n;
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
  return levenshtein(utf8_codepoints(a), utf8_codepoints(b));
}

namespace {

// Token ids for word-level edit distance: identical words share an id.
std::size_t token_levenshtein(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::string, std::uint32_t> ids;
  auto encode = [&](const std::vector<std::string>& words) {
    std::vector<std::uint32_t> out;
    out.reserve(words.size());
    for (const auto& w : words) {
      auto [it, _] = ids.emplace(w, static_cast<std::uint32_t>(ids.size()));
      out.push_back(it->second);
    }
    return out;
  };
  return levenshtein(encode(a), encode(b));
}

}  // namespace

double char_accuracy(const std::string& hyp, const std::string& ref) {
  const auto r = utf8_codepoints(ref);
  if (r.empty()) throw input_error("char_accuracy: empty reference");
  const auto h = utf8_codepoints(hyp);
  const double n = static_cast<double>(r.size());
  const double ed = static_cast<double>(levenshtein(h, r));
  return std::max(0.0, (n - ed) / n);
}

double word_accuracy(const std::string& hyp, const std::string& ref) {
  const auto r = whitespace_tokens(ref);
  if (r.empty()) throw input_error("word_accuracy: empty reference");
  const auto h = whitespace_tokens(hyp);
  const double n = static_cast<double>(r.size());
  const double ed = static_cast<double>(token_levenshtein(h, r));
  return std::max(0.0, (n - ed) / n);
}

double anls(const std::string& prediction, const std::vector<std::string>& answers, double tau) {
  if (answers.empty()) throw input_error("anls: empty answer set");
  const std::string p = lowercase_ascii(prediction);
  const auto pc = utf8_codepoints(p);
  double best = 0.0;
  for (const auto& answer : answers) {
    const std::string a = lowercase_ascii(answer);
    const auto ac = utf8_codepoints(a);
    const std::size_t denom = std::max(ac.size(), pc.size());
    double s = denom == 0 ? 1.0 : 1.0 - static_cast<double>(levenshtein(ac, pc)) / static_cast<double>(denom);
    best = std::max(best, s);
  }
  return best >= tau ? best : 0.0;
}

namespace {

bool is_cjk_target(const std::string& lang) {
  std::string tag = lowercase_ascii(lang);
  const auto dash = tag.rfind('-');
  if (dash != std::string::npos) tag = tag.substr(dash + 1);
  return tag == "zh" || tag == "ja" || tag == "ko";
}

}  // namespace

std::vector<std::string> bleu_tokenize(const std::string& text, const std::string& lang) {
  std::vector<std::string> toks;
  if (is_cjk_target(lang)) {
    // Character-level: one token per non-whitespace code point.
    std::size_t i = 0;
    const auto n = text.size();
    while (i < n) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      std::size_t len = 1;
      if (c >= 0xF0)
        len = 4;
      else if (c >= 0xE0)
        len = 3;
      else if (c >= 0xC0)
        len = 2;
      len = std::min(len, n - i);
      std::string piece = text.substr(i, len);
      i += len;
      if (piece.size() == 1 && std::isspace(static_cast<unsigned char>(piece[0]))) continue;
      toks.push_back(std::move(piece));
    }
    return toks;
  }
  // Whitespace split, with ASCII punctuation broken out as single tokens.
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      toks.push_back(cur);
      cur.clear();
    }
  };
  for (const char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      toks.push_back(std::string(1, ch));
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return toks;
}

namespace {

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

NGramCounts ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  NGramCounts counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
            const std::string& lang) {
  if (hyps.size() != refs.size() || hyps.empty())
    throw input_error("bleu: hypothesis/reference count mismatch");
  constexpr std::size_t kMaxOrder = 4;

  std::vector<std::vector<std::string>> hyp_toks(hyps.size()), ref_toks(refs.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    hyp_toks[i] = bleu_tokenize(hyps[i], lang);
    ref_toks[i] = bleu_tokenize(refs[i], lang);
  }
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto& t : hyp_toks) hyp_len += t.size();
  for (const auto& t : ref_toks) ref_len += t.size();
  if (hyp_len == 0) return 0.0;

  double log_sum = 0.0;
  std::size_t orders_used = 0;
  for (std::size_t n = 1; n <= kMaxOrder; ++n) {
    std::size_t total = 0, matched = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto hc = ngram_counts(hyp_toks[i], n);
      const auto rc = ngram_counts(ref_toks[i], n);
      for (const auto& [gram, count] : hc) {
        total += count;
        const auto it = rc.find(gram);
        if (it != rc.end()) matched += std::min(count, it->second);
      }
    }
    if (total == 0) continue;  // corpus too short for this order
    const double numer = matched == 0 ? kBleuEpsilon : static_cast<double>(matched);
    log_sum += std::log(numer / static_cast<double>(total));
    ++orders_used;
  }
  if (orders_used == 0) return 0.0;
  const double geo = std::exp(log_sum / static_cast<double>(orders_used));
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * geo;
}

std::string strip_plain(const std::string& md) {
  // Line pass: drop fenced code blocks and contiguous table ('|') blocks.
  std::vector<std::string> lines;
  {
    std::string cur;
    for (const char c : md) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    lines.push_back(cur);
  }
  auto is_fence = [](const std::string& line) {
    const auto pos = line.find_first_not_of(" \t");
    return pos != std::string::npos && line.compare(pos, 3, "```") == 0;
  };
  std::vector<std::string> kept;
  bool in_code = false;
  for (const auto& line : lines) {
    if (is_fence(line)) {
      in_code = !in_code;
      continue;
    }
    if (in_code) continue;
    if (line.find('|') != std::string::npos) continue;  // table row
    kept.push_back(line);
  }
  std::string joined;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (i) joined.push_back('\n');
    joined += kept[i];
  }

  // Character pass: drop math spans, leaving unmatched delimiters alone.
  std::string out;
  out.reserve(joined.size());
  const std::size_t n = joined.size();
  std::size_t i = 0;
  while (i < n) {
    const char c = joined[i];
    if (c == '\\' && i + 1 < n && (joined[i + 1] == '(' || joined[i + 1] == '[')) {
      const std::string close = joined[i + 1] == '(' ? "\\)" : "\\]";
      const auto end = joined.find(close, i + 2);
      if (end != std::string::npos) {
        i = end + 2;
        continue;
      }
      out.push_back(c);
      ++i;
    } else if (c == '$') {
      if (i + 1 < n && joined[i + 1] == '$') {
        const auto end = joined.find("$$", i + 2);
        if (end != std::string::npos) {
          i = end + 2;
          continue;
        }
        out += "$$";
        i += 2;
      } else {
        const auto end = joined.find('$', i + 1);
        if (end != std::string::npos) {
          i = end + 1;
          continue;
        }
        out.push_back(c);
        ++i;
      }
    } else {
      out.push_back(c);
      ++i;
    }
  }
  return out;
}

double bleu_pt(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
               const std::string& lang) {
  std::vector<std::string> h(hyps.size()), r(refs.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) h[i] = strip_plain(hyps[i]);
  for (std::size_t i = 0; i < refs.size(); ++i) r[i] = strip_plain(refs[i]);
  return bleu(h, r, lang);
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["model_fingerprint"] = model_fingerprint;
  j["recipe"] = recipe;
  j["corpus"] = corpus;
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    nlohmann::ordered_json s;
    s["id"] = i < sample_ids.size() ? sample_ids[i] : std::to_string(i);
    s["bleu"] = per_sample[i].bleu;
    s["bleu_pt"] = per_sample[i].bleu_pt;
    s["steds"] = per_sample[i].steds;
    s["ca"] = per_sample[i].ca;
    s["wa"] = per_sample[i].wa;
    if (per_sample[i].anls) s["anls"] = *per_sample[i].anls;
    samples.push_back(std::move(s));
  }
  j["samples"] = std::move(samples);
  return j.dump(2) + "\n";
}

MetricReport score_corpus(const std::vector<std::string>& ids,
                          const std::vector<std::string>& hyps,
                          const std::vector<std::string>& refs, const std::string& lang) {
  if (hyps.size() != refs.size() || hyps.empty())
    throw input_error("score_corpus: hypothesis/reference count mismatch");
  if (!ids.empty() && ids.size() != hyps.size())
    throw input_error("score_corpus: id count mismatch");
  MetricReport report;
  const std::size_t n = hyps.size();
  report.per_sample.resize(n);
  // Pure per-sample work; deterministic because each slot is independent.
#pragma omp parallel for schedule(static)
  for (long k = 0; k < static_cast<long>(n); ++k) {
    const auto i = static_cast<std::size_t>(k);
    SampleScores s;
    s.bleu = bleu({hyps[i]}, {refs[i]}, lang);
    s.bleu_pt = bleu_pt({hyps[i]}, {refs[i]}, lang);
    s.steds = steds(hyps[i], refs[i]);
    s.ca = refs[i].empty() ? (hyps[i].empty() ? 1.0 : 0.0) : char_accuracy(hyps[i], refs[i]);
    const bool ref_has_word = !whitespace_tokens(refs[i]).empty();
    s.wa = ref_has_word ? word_accuracy(hyps[i], refs[i]) : s.ca;
    report.per_sample[k] = s;
  }
  for (std::size_t i = 0; i < n; ++i)
    report.sample_ids.push_back(ids.empty() ? std::to_string(i) : ids[i]);

  report.corpus["bleu"] = bleu(hyps, refs, lang);
  report.corpus["bleu_pt"] = bleu_pt(hyps, refs, lang);
  double steds_sum = 0.0, ca_sum = 0.0, wa_sum = 0.0;
  for (const auto& s : report.per_sample) {
    steds_sum += s.steds;
    ca_sum += s.ca;
    wa_sum += s.wa;
  }
  report.corpus["steds"] = steds_sum / static_cast<double>(n);
  report.corpus["ca"] = ca_sum / static_cast<double>(n);
  report.corpus["wa"] = wa_sum / static_cast<double>(n);
  return report;
}

MetricReport MetricReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw input_error(std::string("metric report: ") + e.what());
  }
  MetricReport r;
  r.dataset = j.value("dataset", "");
  r.model_fingerprint = j.value("model_fingerprint", "");
  r.recipe = j.value("recipe", "");
  if (j.contains("corpus"))
    for (const auto& [k, v] : j.at("corpus").items()) r.corpus[k] = v.get<double>();
  if (j.contains("samples")) {
    for (const auto& s : j.at("samples")) {
      r.sample_ids.push_back(s.value("id", ""));
      SampleScores sc;
      sc.bleu = s.value("bleu", 0.0);
      sc.bleu_pt = s.value("bleu_pt", 0.0);
      sc.steds = s.value("steds", 0.0);
      sc.ca = s.value("ca", 0.0);
      sc.wa = s.value("wa", 0.0);
      if (s.contains("anls")) sc.anls = s.at("anls").get<double>();
      r.per_sample.push_back(sc);
    }
  }
  return r;
}

}  // namespace ssr
