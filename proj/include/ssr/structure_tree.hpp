#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ssr {

// Ordered labeled tree describing document layout. Nodes are stored in
// a flat pool; children are ordered by document position.
struct StructureTree {
  struct Node {
    std::string label;
    std::vector<std::size_t> children;
  };
  std::vector<Node> nodes;  // nodes[0] is the "doc" root when non-empty

  std::size_t size() const { return nodes.size(); }
  std::size_t add(const std::string& label, std::size_t parent);
  static StructureTree doc_root();
};

// Line-oriented markdown layout parse. Labels: doc, h1..h6, paragraph,
// table, formula, list, code. Headings open scopes (an h3 nests under
// the nearest open h2/h1); blank input yields a bare doc root.
StructureTree parse_structure_tree(const std::string& md);

// Minimal unit-cost ordered-tree edit distance (insert/delete/relabel
// each cost 1) via the classical keyroot dynamic program.
std::size_t tree_edit_distance(const StructureTree& a, const StructureTree& b);

// 1 - TED/max(node counts); in [0,1], 1.0 for identical layouts.
double steds(const std::string& hyp_md, const std::string& ref_md);

}  // namespace ssr
