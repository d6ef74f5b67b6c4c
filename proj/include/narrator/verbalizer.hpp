#pragma once

// Ego-graph verbalization: BFS tree decomposition, saliency pruning, pre-order
// paragraph rendering with cross-edge references, and masked-token instances.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "narrator/errors.hpp"
#include "narrator/tag_core.hpp"
#include "narrator/text.hpp"

namespace narrator {

inline constexpr std::size_t kDefaultHops = 2;
inline constexpr std::string_view kMaskPlaceholder = "<mask>";

struct BfsTree {
  NodeId root = 0;
  /// Every retained node has an entry; children in ascending id order.
  std::map<NodeId, std::vector<NodeId>> children;
  std::map<NodeId, NodeId> parent;
  /// Oriented from the earlier-visited endpoint.
  std::set<std::pair<NodeId, NodeId>> cross_edges;
  std::map<NodeId, std::size_t> depth;
  /// BFS visit order of the retained nodes.
  std::vector<NodeId> visit_order;

  bool contains(NodeId v) const { return depth.count(v) != 0; }
  std::size_t size() const { return depth.size(); }

  std::vector<NodeId> preorder() const {
    std::vector<NodeId> out;
    std::vector<NodeId> stack{root};
    while (!stack.empty()) {
      const NodeId v = stack.back();
      stack.pop_back();
      out.push_back(v);
      const auto& kids = children.at(v);
      for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
    }
    return out;
  }
};

/// BFS from the root over the k-hop ego graph. Neighbors are expanded in
/// ascending id order; every induced edge that is not a tree edge becomes a
/// cross edge.
inline BfsTree build_bfs_tree(const TextAttributedGraph& graph, std::size_t hops) {
  if (hops < 1) throw PreconditionError("hop count must be >= 1");
  BfsTree tree;
  tree.root = graph.root();
  tree.depth[tree.root] = 0;
  tree.children[tree.root];
  std::deque<NodeId> queue{tree.root};
  while (!queue.empty()) {
    const NodeId u = queue.front();
    queue.pop_front();
    tree.visit_order.push_back(u);
    const std::size_t d = tree.depth[u];
    if (d == hops) continue;
    for (NodeId v : graph.neighbors(u)) {
      if (tree.contains(v)) continue;
      tree.depth[v] = d + 1;
      tree.parent[v] = u;
      tree.children[u].push_back(v);
      tree.children[v];
      queue.push_back(v);
    }
  }
  std::map<NodeId, std::size_t> rank;
  for (std::size_t i = 0; i < tree.visit_order.size(); ++i) rank[tree.visit_order[i]] = i;
  for (auto [u, v] : graph.edges()) {
    if (!tree.contains(u) || !tree.contains(v)) continue;
    const auto pu = tree.parent.find(u);
    const auto pv = tree.parent.find(v);
    const bool tree_edge = (pu != tree.parent.end() && pu->second == v) || (pv != tree.parent.end() && pv->second == u);
    if (tree_edge) continue;
    if (rank[u] < rank[v]) {
      tree.cross_edges.insert({u, v});
    } else {
      tree.cross_edges.insert({v, u});
    }
  }
  return tree;
}

inline BfsTree build_bfs_tree(const ExplanationInstance& instance, std::size_t hops) {
  return build_bfs_tree(instance.graph(), hops);
}

/// Largest token saliency of a node; -inf for a node without tokens.
inline double max_token_score(const ExplanationInstance& instance, NodeId v) {
  const auto& scores = instance.saliency().token_scores.at(v);
  double best = -std::numeric_limits<double>::infinity();
  for (double s : scores) best = std::max(best, s);
  return best;
}

/// Drops every non-root node that has no token scoring strictly above
/// `threshold` and no retained descendant.
inline BfsTree prune(const BfsTree& tree, const ExplanationInstance& instance, double threshold) {
  if (std::isnan(threshold) || threshold < 0.0) throw PreconditionError("prune threshold must be >= 0");
  std::set<NodeId> keep;
  // Reverse BFS order visits every child before its parent.
  for (auto it = tree.visit_order.rbegin(); it != tree.visit_order.rend(); ++it) {
    const NodeId v = *it;
    bool kept = v == tree.root || max_token_score(instance, v) > threshold;
    for (NodeId c : tree.children.at(v)) kept = kept || keep.count(c);
    if (kept) keep.insert(v);
  }
  BfsTree out;
  out.root = tree.root;
  for (NodeId v : tree.visit_order) {
    if (!keep.count(v)) continue;
    out.visit_order.push_back(v);
    out.depth[v] = tree.depth.at(v);
    auto& kids = out.children[v];
    for (NodeId c : tree.children.at(v)) {
      if (keep.count(c)) kids.push_back(c);
    }
    if (auto p = tree.parent.find(v); p != tree.parent.end()) out.parent[v] = p->second;
  }
  for (const auto& e : tree.cross_edges) {
    if (keep.count(e.first) && keep.count(e.second)) out.cross_edges.insert(e);
  }
  return out;
}

struct SaliencyParagraph {
  std::string text;
  /// Dotted section path per retained node; the root's path is empty.
  std::map<NodeId, std::string> section_paths;
  bool with_scores = false;
};

inline std::string section_header(std::string_view path) {
  return path.empty() ? std::string("ROOT") : "Node-" + std::string(path);
}

inline std::map<NodeId, std::string> assign_section_paths(const BfsTree& tree) {
  std::map<NodeId, std::string> paths;
  paths[tree.root] = "";
  for (NodeId v : tree.preorder()) {
    const auto& kids = tree.children.at(v);
    for (std::size_t i = 0; i < kids.size(); ++i) {
      const std::string& base = paths[v];
      paths[kids[i]] = base.empty() ? std::to_string(i + 1) : base + "." + std::to_string(i + 1);
    }
  }
  return paths;
}

/// Renders one token; nullopt omits it from the line.
using TokenRenderer = std::function<std::optional<std::string>(NodeId node, std::size_t index, const std::string& token)>;

/// Pre-order rendering, one line per node:
///   "<header>: tok tok ... [See Node-<path>.]"
inline SaliencyParagraph render_with(const BfsTree& tree, const ExplanationInstance& instance,
                                     const TokenRenderer& render_token, bool with_scores) {
  SaliencyParagraph out;
  out.with_scores = with_scores;
  out.section_paths = assign_section_paths(tree);
  const auto order = tree.preorder();
  std::map<NodeId, std::size_t> position;
  for (std::size_t i = 0; i < order.size(); ++i) position[order[i]] = i;

  std::map<NodeId, std::vector<NodeId>> references;
  for (auto [src, dst] : tree.cross_edges) references[src].push_back(dst);
  for (auto& [_, dsts] : references) {
    std::sort(dsts.begin(), dsts.end(), [&](NodeId a, NodeId b) { return position[a] < position[b]; });
  }

  for (std::size_t i = 0; i < order.size(); ++i) {
    const NodeId v = order[i];
    if (i) out.text += '\n';
    out.text += section_header(out.section_paths[v]);
    out.text += ':';
    const auto& tokens = instance.graph().node(v).tokens;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (auto rendered = render_token(v, t, tokens[t])) {
        out.text += ' ';
        out.text += *rendered;
      }
    }
    if (auto it = references.find(v); it != references.end()) {
      for (NodeId dst : it->second) out.text += " [See " + section_header(out.section_paths[dst]) + ".]";
    }
  }
  return out;
}

/// Scores render as "token(2.52)".
inline SaliencyParagraph render_paragraph(const BfsTree& tree, const ExplanationInstance& instance, bool with_scores) {
  if (!with_scores) {
    return render_with(
        tree, instance, [](NodeId, std::size_t, const std::string& tok) { return std::optional<std::string>(tok); },
        false);
  }
  return render_with(
      tree, instance,
      [&](NodeId v, std::size_t t, const std::string& tok) {
        return std::optional<std::string>(tok + "(" + text::fixed2(instance.token_score(v, t)) + ")");
      },
      true);
}

/// Whole k-hop ego graph without scores and without pruning.
inline std::string serialize_plain(const ExplanationInstance& instance, std::size_t hops = kDefaultHops) {
  return render_paragraph(build_bfs_tree(instance, hops), instance, false).text;
}

/// Number of node-text tokens in the k-hop ego graph (headers and references excluded).
inline std::size_t ego_token_count(const BfsTree& tree, const ExplanationInstance& instance) {
  std::size_t total = 0;
  for (NodeId v : tree.visit_order) total += instance.graph().node(v).tokens.size();
  return total;
}

struct RationaleToken {
  NodeId node = 0;
  std::size_t index = 0;
  std::string token;

  friend bool operator==(const RationaleToken&, const RationaleToken&) = default;
};

struct MaskedInstance {
  /// Ordered by document position.
  std::vector<RationaleToken> rationale_tokens;
  std::string masked_document;
  std::string plain_document;
  double tau = 0.0;
  std::size_t total_tokens = 0;
};

/// ceil(tau * total), tolerant of binary rounding in the product (0.3 * 10 -> 3).
inline std::size_t rationale_count(double tau, std::size_t total) {
  if (total == 0) return 0;
  const double raw = tau * static_cast<double>(total);
  auto m = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(m, 1, total);
}

/// Masks the top ceil(tau*T) tokens of the k-hop ego graph by token saliency.
/// Ties go to the lower node id, then the lower token index.
inline MaskedInstance build_masked_instance(const ExplanationInstance& instance, std::size_t hops, double tau,
                                            std::string_view placeholder = kMaskPlaceholder) {
  if (!(tau > 0.0 && tau <= 1.0)) throw PreconditionError("tau must lie in (0, 1]");
  const BfsTree tree = build_bfs_tree(instance, hops);

  struct Ranked {
    double score;
    NodeId node;
    std::size_t index;
  };
  std::vector<Ranked> all;
  for (NodeId v : tree.visit_order) {
    const auto& scores = instance.saliency().token_scores[v];
    for (std::size_t t = 0; t < scores.size(); ++t) all.push_back({scores[t], v, t});
  }
  MaskedInstance out;
  out.tau = tau;
  out.total_tokens = all.size();
  const std::size_t m = rationale_count(tau, all.size());
  std::sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.node != b.node) return a.node < b.node;
    return a.index < b.index;
  });
  std::set<std::pair<NodeId, std::size_t>> masked;
  for (std::size_t i = 0; i < m; ++i) masked.insert({all[i].node, all[i].index});

  const std::string ph(placeholder);
  out.masked_document = render_with(
                            tree, instance,
                            [&](NodeId v, std::size_t t, const std::string& tok) {
                              return std::optional<std::string>(masked.count({v, t}) ? ph : tok);
                            },
                            false)
                            .text;
  out.plain_document = render_paragraph(tree, instance, false).text;
  for (NodeId v : tree.preorder()) {
    const auto& tokens = instance.graph().node(v).tokens;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (masked.count({v, t})) out.rationale_tokens.push_back({v, t, tokens[t]});
    }
  }
  return out;
}

/// One parsed line of a rendered paragraph.
struct ParsedSection {
  std::string path;  // empty for ROOT
  std::vector<std::string> references;
};

/// Reads section headers and trailing "[See ...]" references back out of a
/// rendered paragraph. Throws SchemaError on lines without a recognizable header.
inline std::vector<ParsedSection> parse_paragraph_structure(std::string_view text) {
  std::vector<ParsedSection> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) throw SchemaError("line without section header");
    const std::string_view header = line.substr(0, colon);
    ParsedSection sec;
    if (header == "ROOT") {
      sec.path = "";
    } else if (header.substr(0, 5) == "Node-" && header.size() > 5) {
      sec.path = std::string(header.substr(5));
    } else {
      throw SchemaError("unrecognized section header \"" + std::string(header) + "\"");
    }
    std::string_view rest = line.substr(colon + 1);
    static constexpr std::string_view kOpen = " [See ";
    while (rest.size() >= 2 && rest.substr(rest.size() - 2) == ".]") {
      const auto open = rest.rfind(kOpen);
      if (open == std::string_view::npos) break;
      const std::string_view target = rest.substr(open + kOpen.size(), rest.size() - 2 - open - kOpen.size());
      if (target == "ROOT") {
        sec.references.insert(sec.references.begin(), "");
      } else if (target.substr(0, 5) == "Node-") {
        sec.references.insert(sec.references.begin(), std::string(target.substr(5)));
      } else {
        break;
      }
      rest = rest.substr(0, open);
    }
    out.push_back(std::move(sec));
    if (end == text.size()) break;
  }
  return out;
}

}  // namespace narrator
