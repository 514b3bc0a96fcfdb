#include "ssr/structure_tree.hpp"

#include <algorithm>
#include <cctype>

#include "ssr/error.hpp"

namespace ssr {

std::size_t StructureTree::add(const std::string& label, std::size_t parent) {
  if (parent >= nodes.size()) throw input_error("structure tree: bad parent index");
  nodes.push_back({label, {}});
  const std::size_t id = nodes.size() - 1;
  nodes[parent].children.push_back(id);
  return id;
}

StructureTree StructureTree::doc_root() {
  StructureTree t;
  t.nodes.push_back({"doc", {}});
  return t;
}

namespace {

std::string trimmed(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int heading_level(const std::string& t) {
  std::size_t i = 0;
  while (i < t.size() && t[i] == '#') ++i;
  if (i == 0 || i > 6) return 0;
  if (i < t.size() && t[i] != ' ' && t[i] != '\t') return 0;
  return static_cast<int>(i);
}

bool is_list_item(const std::string& t) {
  if (t.size() >= 2 && (t[0] == '-' || t[0] == '*' || t[0] == '+') && (t[1] == ' ' || t[1] == '\t'))
    return true;
  std::size_t i = 0;
  while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
  return i > 0 && i + 1 < t.size() && (t[i] == '.' || t[i] == ')') &&
         (t[i + 1] == ' ' || t[i + 1] == '\t');
}

}  // namespace

StructureTree parse_structure_tree(const std::string& md) {
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
    if (!cur.empty()) lines.push_back(cur);
  }

  StructureTree tree = StructureTree::doc_root();
  // Open heading scopes: (level, node) with the doc root at level 0.
  std::vector<std::pair<int, std::size_t>> scopes = {{0, 0}};
  auto scope = [&] { return scopes.back().second; };

  std::size_t i = 0;
  const std::size_t n = lines.size();
  while (i < n) {
    const std::string t = trimmed(lines[i]);
    if (t.empty()) {
      ++i;
      continue;
    }
    if (t.compare(0, 3, "```") == 0) {  // fenced code block
      ++i;
      while (i < n && trimmed(lines[i]).compare(0, 3, "```") != 0) ++i;
      if (i < n) ++i;  // closing fence
      tree.add("code", scope());
      continue;
    }
    if (const int lvl = heading_level(t)) {
      while (scopes.back().first >= lvl) scopes.pop_back();
      scopes.emplace_back(lvl, tree.add("h" + std::to_string(lvl), scope()));
      ++i;
      continue;
    }
    if (t.compare(0, 2, "$$") == 0 || t.compare(0, 2, "\\[") == 0) {  // display math
      const std::string close = t[0] == '$' ? "$$" : "\\]";
      // Single-line form ("$$ x $$") closes immediately.
      const bool closed_inline = t.size() > 2 && t.find(close, 2) != std::string::npos;
      ++i;
      if (!closed_inline) {
        while (i < n && trimmed(lines[i]).find(close) == std::string::npos) ++i;
        if (i < n) ++i;
      }
      tree.add("formula", scope());
      continue;
    }
    if (t.find('|') != std::string::npos) {  // table block
      while (i < n && trimmed(lines[i]).find('|') != std::string::npos) ++i;
      tree.add("table", scope());
      continue;
    }
    if (is_list_item(t)) {
      while (i < n && is_list_item(trimmed(lines[i]))) ++i;
      tree.add("list", scope());
      continue;
    }
    // Paragraph: contiguous plain lines.
    while (i < n) {
      const std::string u = trimmed(lines[i]);
      if (u.empty() || heading_level(u) || is_list_item(u) || u.find('|') != std::string::npos ||
          u.compare(0, 3, "```") == 0 || u.compare(0, 2, "$$") == 0 || u.compare(0, 2, "\\[") == 0)
        break;
      ++i;
    }
    tree.add("paragraph", scope());
  }
  return tree;
}

namespace {

// Post-order annotation for the keyroot dynamic program.
struct Annotated {
  std::vector<std::string> labels;     // by post-order id
  std::vector<std::size_t> lmd;       // leftmost leaf descendant, by post-order id
  std::vector<std::size_t> keyroots;  // increasing post-order ids

  explicit Annotated(const StructureTree& t) {
    if (t.nodes.empty()) return;
    postorder(t, 0);
    std::vector<std::size_t> max_for_lmd(labels.size(), 0);
    for (std::size_t id = 0; id < labels.size(); ++id) max_for_lmd[lmd[id]] = id;
    for (std::size_t id = 0; id < labels.size(); ++id)
      if (max_for_lmd[lmd[id]] == id) keyroots.push_back(id);
  }

 private:
  std::size_t postorder(const StructureTree& t, std::size_t node) {
    std::size_t leftmost = static_cast<std::size_t>(-1);
    for (const std::size_t c : t.nodes[node].children) {
      const std::size_t child_lmd = postorder(t, c);
      if (leftmost == static_cast<std::size_t>(-1)) leftmost = child_lmd;
    }
    labels.push_back(t.nodes[node].label);
    const std::size_t id = labels.size() - 1;
    if (leftmost == static_cast<std::size_t>(-1)) leftmost = id;
    lmd.push_back(leftmost);
    return leftmost;
  }
};

void treedist(const Annotated& A, const Annotated& B, std::size_t i, std::size_t j,
              std::vector<std::vector<std::size_t>>& td) {
  const std::size_t li = A.lmd[i], lj = B.lmd[j];
  const std::size_t m = i - li + 2, n = j - lj + 2;
  std::vector<std::vector<std::size_t>> fd(m, std::vector<std::size_t>(n, 0));
  for (std::size_t x = 1; x < m; ++x) fd[x][0] = fd[x - 1][0] + 1;
  for (std::size_t y = 1; y < n; ++y) fd[0][y] = fd[0][y - 1] + 1;
  for (std::size_t x = 1; x < m; ++x) {
    for (std::size_t y = 1; y < n; ++y) {
      const std::size_t a = li + x - 1, b = lj + y - 1;
      if (A.lmd[a] == li && B.lmd[b] == lj) {
        const std::size_t cost = A.labels[a] == B.labels[b] ? 0 : 1;
        fd[x][y] = std::min({fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[x - 1][y - 1] + cost});
        td[a][b] = fd[x][y];
      } else {
        const std::size_t x0 = A.lmd[a] - li, y0 = B.lmd[b] - lj;
        fd[x][y] = std::min({fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[x0][y0] + td[a][b]});
      }
    }
  }
}

}  // namespace

std::size_t tree_edit_distance(const StructureTree& a, const StructureTree& b) {
  if (a.nodes.empty()) return b.nodes.size();
  if (b.nodes.empty()) return a.nodes.size();
  const Annotated A(a), B(b);
  std::vector<std::vector<std::size_t>> td(A.labels.size(),
                                           std::vector<std::size_t>(B.labels.size(), 0));
  for (const std::size_t i : A.keyroots)
    for (const std::size_t j : B.keyroots) treedist(A, B, i, j, td);
  return td[A.labels.size() - 1][B.labels.size() - 1];
}

double steds(const std::string& hyp_md, const std::string& ref_md) {
  const StructureTree th = parse_structure_tree(hyp_md);
  const StructureTree tr = parse_structure_tree(ref_md);
  const std::size_t denom = std::max(th.size(), tr.size());
  if (denom == 0) return 1.0;
  const double ted = static_cast<double>(tree_edit_distance(th, tr));
  return 1.0 - ted / static_cast<double>(denom);
}

}  // namespace ssr
