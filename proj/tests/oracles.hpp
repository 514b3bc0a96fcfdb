// Test-side oracles, written straight from the textbook definitions and
// kept independent of the library implementations they validate.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssr/structure_tree.hpp"

namespace oracles {

// Memoized recursive Levenshtein from the recurrence, not a DP table.
inline std::size_t levenshtein(const std::vector<std::string>& a,
                               const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i,
                                                                std::size_t j) -> std::size_t {
    if (i == a.size()) return b.size() - j;
    if (j == b.size()) return a.size() - i;
    const auto key = std::make_pair(i, j);
    const auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    std::size_t best = go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
    best = std::min(best, go(i + 1, j) + 1);
    best = std::min(best, go(i, j + 1) + 1);
    memo[key] = best;
    return best;
  };
  return go(0, 0);
}

inline std::size_t levenshtein_chars(const std::string& a, const std::string& b) {
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    for (const char c : s) out.push_back(std::string(1, c));
    return out;
  };
  return levenshtein(split(a), split(b));
}

// Corpus BLEU from the definition: brute-force n-gram lists, clipped
// counts, epsilon floor on zero matches, orders without hypothesis
// n-grams skipped, brevity penalty.
inline double bleu(const std::vector<std::vector<std::string>>& hyps,
                   const std::vector<std::vector<std::string>>& refs, double epsilon) {
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto& h : hyps) hyp_len += h.size();
  for (const auto& r : refs) ref_len += r.size();
  if (hyp_len == 0) return 0.0;

  auto grams = [](const std::vector<std::string>& toks, std::size_t n) {
    std::vector<std::vector<std::string>> out;
    for (std::size_t i = 0; i + n <= toks.size(); ++i)
      out.push_back({toks.begin() + i, toks.begin() + i + n});
    return out;
  };

  double log_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::size_t total = 0, matched = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      const auto hg = grams(hyps[s], n);
      auto rg = grams(refs[s], n);
      total += hg.size();
      std::vector<bool> taken(rg.size(), false);
      for (const auto& g : hg) {
        for (std::size_t k = 0; k < rg.size(); ++k) {
          if (!taken[k] && rg[k] == g) {
            taken[k] = true;  // clipping: each reference n-gram matches once
            ++matched;
            break;
          }
        }
      }
    }
    if (total == 0) continue;
    const double numer = matched == 0 ? epsilon : static_cast<double>(matched);
    log_sum += std::log(numer / static_cast<double>(total));
    ++used;
  }
  if (used == 0) return 0.0;
  const double bp = hyp_len >= ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(used));
}

// Ordered-forest edit distance from the plain recursion over rightmost
// trees. Exponential; only for small trees.
struct ForestNode {
  std::string label;
  std::vector<ForestNode> children;
};

inline ForestNode to_forest_node(const ssr::StructureTree& t, std::size_t id) {
  ForestNode n;
  n.label = t.nodes[id].label;
  for (const std::size_t c : t.nodes[id].children) n.children.push_back(to_forest_node(t, c));
  return n;
}

inline std::size_t forest_size(const std::vector<ForestNode>& f) {
  std::size_t n = 0;
  for (const auto& t : f) n += 1 + forest_size(t.children);
  return n;
}

inline std::size_t forest_distance(std::vector<ForestNode> f, std::vector<ForestNode> g) {
  if (f.empty()) return forest_size(g);
  if (g.empty()) return forest_size(f);
  const ForestNode v = f.back();
  const ForestNode w = g.back();

  // delete v: its children join the forest in order
  auto f_del = std::vector<ForestNode>(f.begin(), f.end() - 1);
  f_del.insert(f_del.end(), v.children.begin(), v.children.end());
  std::size_t best = forest_distance(f_del, g) + 1;

  // insert w
  auto g_ins = std::vector<ForestNode>(g.begin(), g.end() - 1);
  g_ins.insert(g_ins.end(), w.children.begin(), w.children.end());
  best = std::min(best, forest_distance(f, g_ins) + 1);

  // match v with w
  const std::size_t match =
      forest_distance({f.begin(), f.end() - 1}, {g.begin(), g.end() - 1}) +
      forest_distance(v.children, w.children) + (v.label == w.label ? 0 : 1);
  return std::min(best, match);
}

inline std::size_t tree_edit_distance(const ssr::StructureTree& a, const ssr::StructureTree& b) {
  std::vector<ForestNode> fa, fb;
  if (!a.nodes.empty()) fa.push_back(to_forest_node(a, 0));
  if (!b.nodes.empty()) fb.push_back(to_forest_node(b, 0));
  return forest_distance(fa, fb);
}

// Central finite difference of a scalar function of one parameter.
template <typename F>
double finite_diff(F&& f, double& x, double h = 1e-5) {
  const double keep = x;
  x = keep + h;
  const double up = f();
  x = keep - h;
  const double down = f();
  x = keep;
  return (up - down) / (2.0 * h);
}

}  // namespace oracles
