#pragma once

// Data model for saliency-annotated text-attributed graphs and the JSON
// interchange format that carries one explanation instance per document.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/hashing.hpp"
#include "narrator/io.hpp"
#include "narrator/text.hpp"

namespace narrator {

using json = nlohmann::json;
using NodeId = std::uint32_t;

struct NodeRecord {
  NodeId id = 0;
  std::vector<std::string> tokens;

  friend bool operator==(const NodeRecord&, const NodeRecord&) = default;
};

/// Undirected simple graph with dense node ids 0..N-1 and a designated root.
class TextAttributedGraph {
 public:
  using Edge = std::pair<NodeId, NodeId>;

  /// Validates and canonicalizes. Nodes may arrive in any order; edges in any
  /// orientation. Throws SchemaError / ReferenceError.
  static TextAttributedGraph create(std::vector<NodeRecord> nodes, std::vector<Edge> edges, NodeId root) {
    TextAttributedGraph g;
    const std::size_t n = nodes.size();
    if (n == 0) throw SchemaError("graph has no nodes");
    std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < n; ++i) {
      if (nodes[i].id != i) {
        throw SchemaError("node ids must be unique and dense 0..N-1 (saw id " + std::to_string(nodes[i].id) +
                          " at rank " + std::to_string(i) + ")");
      }
      for (const auto& tok : nodes[i].tokens) {
        if (tok.empty()) throw SchemaError("node " + std::to_string(i) + " has an empty token");
        for (char c : tok) {
          if (text::is_space(c)) {
            throw SchemaError("node " + std::to_string(i) + " token contains whitespace: \"" + tok + "\"");
          }
        }
      }
    }
    if (root >= n) throw ReferenceError("root " + std::to_string(root) + " is not a node");

    std::set<Edge> seen;
    for (auto [u, v] : edges) {
      if (u >= n || v >= n) {
        throw ReferenceError("edge [" + std::to_string(u) + "," + std::to_string(v) + "] references a missing node");
      }
      if (u == v) throw SchemaError("self-loop on node " + std::to_string(u));
      if (u > v) std::swap(u, v);
      if (!seen.insert({u, v}).second) {
        throw SchemaError("duplicate edge [" + std::to_string(u) + "," + std::to_string(v) + "]");
      }
    }
    g.nodes_ = std::move(nodes);
    g.edges_.assign(seen.begin(), seen.end());
    g.root_ = root;
    g.adjacency_.assign(n, {});
    for (auto [u, v] : g.edges_) {
      g.adjacency_[u].push_back(v);
      g.adjacency_[v].push_back(u);
    }
    for (auto& adj : g.adjacency_) std::sort(adj.begin(), adj.end());
    return g;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  NodeId root() const noexcept { return root_; }
  const std::vector<NodeRecord>& nodes() const noexcept { return nodes_; }
  const NodeRecord& node(NodeId id) const { return nodes_.at(id); }
  /// Canonical edge list: (min, max) pairs in ascending order.
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  /// Neighbors in ascending id order.
  const std::vector<NodeId>& neighbors(NodeId id) const { return adjacency_.at(id); }

  bool has_edge(NodeId u, NodeId v) const {
    if (u > v) std::swap(u, v);
    return std::binary_search(edges_.begin(), edges_.end(), Edge{u, v});
  }

  friend bool operator==(const TextAttributedGraph& a, const TextAttributedGraph& b) {
    return a.root_ == b.root_ && a.nodes_ == b.nodes_ && a.edges_ == b.edges_;
  }

 private:
  TextAttributedGraph() = default;

  std::vector<NodeRecord> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<NodeId>> adjacency_;
  NodeId root_ = 0;
};

/// Raw, unnormalized importance scores aligned to a graph. Indexed by node id.
struct SaliencyAnnotation {
  std::string graph_ref;
  std::vector<double> node_scores;
  std::vector<std::vector<double>> token_scores;

  friend bool operator==(const SaliencyAnnotation&, const SaliencyAnnotation&) = default;
};

struct PredictionRecord {
  std::string label;
  std::vector<std::string> label_set;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

inline json graph_to_json(const TextAttributedGraph& g) {
  json nodes = json::array();
  for (const auto& n : g.nodes()) nodes.push_back({{"id", n.id}, {"tokens", n.tokens}});
  json edges = json::array();
  for (auto [u, v] : g.edges()) edges.push_back(json::array({u, v}));
  return {{"nodes", std::move(nodes)}, {"edges", std::move(edges)}, {"root", g.root()}};
}

/// SHA-256 over the canonical graph encoding; independent of input node/edge order.
inline std::string content_hash(const TextAttributedGraph& g) { return sha256_hex(graph_to_json(g).dump()); }

/// One unit flowing through the pipeline. Immutable once created.
class ExplanationInstance {
 public:
  /// Validates every invariant; an empty `saliency.graph_ref` is filled with the graph hash.
  static ExplanationInstance create(std::string instance_id, TextAttributedGraph graph, SaliencyAnnotation saliency,
                                    PredictionRecord prediction) {
    const std::size_t n = graph.size();
    if (saliency.node_scores.size() != n) {
      throw AlignmentError("node_scores covers " + std::to_string(saliency.node_scores.size()) + " of " +
                           std::to_string(n) + " nodes");
    }
    if (saliency.token_scores.size() != n) {
      throw AlignmentError("token_scores covers " + std::to_string(saliency.token_scores.size()) + " of " +
                           std::to_string(n) + " nodes");
    }
    for (NodeId v = 0; v < n; ++v) {
      check_score(saliency.node_scores[v], "node_scores", v);
      const auto& ts = saliency.token_scores[v];
      if (ts.size() != graph.node(v).tokens.size()) {
        throw AlignmentError("token_scores[" + std::to_string(v) + "] has " + std::to_string(ts.size()) +
                             " entries for " + std::to_string(graph.node(v).tokens.size()) + " tokens");
      }
      for (double s : ts) check_score(s, "token_scores", v);
    }
    const std::string hash = content_hash(graph);
    if (saliency.graph_ref.empty()) {
      saliency.graph_ref = hash;
    } else if (saliency.graph_ref != hash) {
      throw ReferenceError("saliency graph_ref " + saliency.graph_ref + " does not match graph hash " + hash);
    }
    const auto& ls = prediction.label_set;
    if (ls.empty()) throw SchemaError("label_set is empty");
    if (std::set<std::string>(ls.begin(), ls.end()).size() != ls.size()) {
      throw SchemaError("label_set has duplicate entries");
    }
    if (std::find(ls.begin(), ls.end(), prediction.label) == ls.end()) {
      throw SchemaError("label \"" + prediction.label + "\" is not in label_set");
    }
    for (const auto& l : ls) {
      if (l.empty()) throw SchemaError("label_set contains an empty label");
    }
    ExplanationInstance inst;
    inst.id_ = std::move(instance_id);
    inst.graph_ = std::move(graph);
    inst.saliency_ = std::move(saliency);
    inst.prediction_ = std::move(prediction);
    return inst;
  }

  const std::string& id() const noexcept { return id_; }
  const TextAttributedGraph& graph() const noexcept { return *graph_; }
  const SaliencyAnnotation& saliency() const noexcept { return saliency_; }
  const PredictionRecord& prediction() const noexcept { return prediction_; }

  double token_score(NodeId node, std::size_t index) const { return saliency_.token_scores.at(node).at(index); }

  friend bool operator==(const ExplanationInstance& a, const ExplanationInstance& b) {
    return a.id_ == b.id_ && *a.graph_ == *b.graph_ && a.saliency_ == b.saliency_ && a.prediction_ == b.prediction_;
  }

 private:
  ExplanationInstance() = default;

  static void check_score(double s, const char* field, NodeId v) {
    if (!std::isfinite(s) || s < 0.0) {
      throw SchemaError(std::string(field) + " for node " + std::to_string(v) + " must be finite and >= 0");
    }
  }

  std::string id_;
  // optional only because the graph type has no public default constructor
  std::optional<TextAttributedGraph> graph_;
  SaliencyAnnotation saliency_;
  PredictionRecord prediction_;
};

namespace detail {

inline void expect_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> required,
                        std::initializer_list<std::string_view> optional = {}) {
  if (!obj.is_object()) throw SchemaError(std::string(where) + " must be an object");
  for (auto key : required) {
    if (!obj.contains(std::string(key))) {
      throw SchemaError(std::string(where) + " is missing field \"" + std::string(key) + "\"");
    }
  }
  for (const auto& [key, _] : obj.items()) {
    const bool known = std::find(required.begin(), required.end(), key) != required.end() ||
                       std::find(optional.begin(), optional.end(), key) != optional.end();
    if (!known) throw SchemaError(std::string(where) + " has unexpected field \"" + key + "\"");
  }
}

inline NodeId as_node_id(const json& v, std::string_view where) {
  if (!v.is_number_integer()) throw SchemaError(std::string(where) + " must be an integer node id");
  const auto x = v.get<std::int64_t>();
  if (x < 0 || x > static_cast<std::int64_t>(UINT32_MAX)) {
    throw SchemaError(std::string(where) + " is out of range");
  }
  return static_cast<NodeId>(x);
}

inline NodeId key_to_node_id(const std::string& key, std::string_view where) {
  NodeId id = 0;
  const auto* end = key.data() + key.size();
  auto [ptr, ec] = std::from_chars(key.data(), end, id);
  if (key.empty() || ec != std::errc() || ptr != end) {
    throw SchemaError(std::string(where) + " key \"" + key + "\" is not a node id");
  }
  return id;
}

inline double as_score(const json& v, std::string_view where) {
  if (!v.is_number()) throw SchemaError(std::string(where) + " must be a number");
  return v.get<double>();
}

inline std::string as_string(const json& v, std::string_view where) {
  if (!v.is_string()) throw SchemaError(std::string(where) + " must be a string");
  return v.get<std::string>();
}

inline ExplanationInstance instance_from_json_unchecked(const json& doc) {
  expect_keys(doc, "document", {"nodes", "edges", "root", "saliency", "prediction", "instance_id"});

  const json& jnodes = doc.at("nodes");
  if (!jnodes.is_array()) throw SchemaError("nodes must be an array");
  std::vector<NodeRecord> nodes;
  nodes.reserve(jnodes.size());
  for (const auto& jn : jnodes) {
    expect_keys(jn, "node", {"id", "tokens"});
    NodeRecord rec;
    rec.id = as_node_id(jn.at("id"), "node.id");
    const json& toks = jn.at("tokens");
    if (!toks.is_array()) throw SchemaError("node.tokens must be an array");
    for (const auto& t : toks) {
      std::string s = as_string(t, "token");
      if (s.find('\n') != std::string::npos || s.find('\r') != std::string::npos) {
        throw SchemaError("token in node " + std::to_string(rec.id) + " contains a newline");
      }
      rec.tokens.push_back(std::move(s));
    }
    nodes.push_back(std::move(rec));
  }
  const std::size_t n = nodes.size();

  const json& jedges = doc.at("edges");
  if (!jedges.is_array()) throw SchemaError("edges must be an array");
  std::vector<TextAttributedGraph::Edge> edges;
  for (const auto& je : jedges) {
    if (!je.is_array() || je.size() != 2) throw SchemaError("each edge must be a [u, v] pair");
    edges.emplace_back(as_node_id(je[0], "edge endpoint"), as_node_id(je[1], "edge endpoint"));
  }
  const NodeId root = as_node_id(doc.at("root"), "root");
  auto graph = TextAttributedGraph::create(std::move(nodes), std::move(edges), root);

  const json& jsal = doc.at("saliency");
  expect_keys(jsal, "saliency", {"node_scores", "token_scores"}, {"graph_ref"});
  SaliencyAnnotation sal;
  if (jsal.contains("graph_ref")) sal.graph_ref = as_string(jsal.at("graph_ref"), "saliency.graph_ref");

  const json& jns = jsal.at("node_scores");
  if (!jns.is_object()) throw SchemaError("saliency.node_scores must be an object");
  std::vector<std::optional<double>> node_scores(n);
  for (const auto& [key, value] : jns.items()) {
    const NodeId id = key_to_node_id(key, "node_scores");
    if (id >= n) throw ReferenceError("node_scores references missing node " + key);
    node_scores[id] = as_score(value, "node score");
  }
  const json& jts = jsal.at("token_scores");
  if (!jts.is_object()) throw SchemaError("saliency.token_scores must be an object");
  std::vector<std::optional<std::vector<double>>> token_scores(n);
  for (const auto& [key, value] : jts.items()) {
    const NodeId id = key_to_node_id(key, "token_scores");
    if (id >= n) throw ReferenceError("token_scores references missing node " + key);
    if (!value.is_array()) throw SchemaError("token_scores[" + key + "] must be an array");
    std::vector<double> scores;
    for (const auto& s : value) scores.push_back(as_score(s, "token score"));
    token_scores[id] = std::move(scores);
  }
  for (NodeId v = 0; v < n; ++v) {
    if (!node_scores[v]) throw AlignmentError("node_scores is missing node " + std::to_string(v));
    if (!token_scores[v]) throw AlignmentError("token_scores is missing node " + std::to_string(v));
    sal.node_scores.push_back(*node_scores[v]);
    sal.token_scores.push_back(std::move(*token_scores[v]));
  }

  const json& jpred = doc.at("prediction");
  expect_keys(jpred, "prediction", {"label", "label_set"});
  PredictionRecord pred;
  pred.label = as_string(jpred.at("label"), "prediction.label");
  const json& jls = jpred.at("label_set");
  if (!jls.is_array()) throw SchemaError("prediction.label_set must be an array");
  for (const auto& l : jls) pred.label_set.push_back(as_string(l, "label"));

  return ExplanationInstance::create(as_string(doc.at("instance_id"), "instance_id"), std::move(graph),
                                     std::move(sal), std::move(pred));
}

}  // namespace detail

/// Parses and validates an interchange document (already-parsed JSON).
inline ExplanationInstance instance_from_json(const json& doc) {
  try {
    return detail::instance_from_json_unchecked(doc);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed document: ") + e.what());
  }
}

/// Parses and validates an interchange document.
inline ExplanationInstance load_instance(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("not valid JSON: ") + e.what());
  }
  return instance_from_json(doc);
}

inline ExplanationInstance load_instance_file(const std::filesystem::path& path) {
  return load_instance(io::read_file(path));
}

inline json instance_to_json(const ExplanationInstance& inst) {
  json doc = graph_to_json(inst.graph());
  json node_scores = json::object();
  json token_scores = json::object();
  for (NodeId v = 0; v < inst.graph().size(); ++v) {
    node_scores[std::to_string(v)] = inst.saliency().node_scores[v];
    token_scores[std::to_string(v)] = inst.saliency().token_scores[v];
  }
  doc["saliency"] = {{"graph_ref", inst.saliency().graph_ref},
                     {"node_scores", std::move(node_scores)},
                     {"token_scores", std::move(token_scores)}};
  doc["prediction"] = {{"label", inst.prediction().label}, {"label_set", inst.prediction().label_set}};
  doc["instance_id"] = inst.id();
  return doc;
}

/// Canonical text: sorted keys, nodes by id, normalized sorted edges, shortest round-trip doubles.
inline std::string save_instance(const ExplanationInstance& inst) { return instance_to_json(inst).dump(2) + "\n"; }

inline void save_instance_file(const ExplanationInstance& inst, const std::filesystem::path& path) {
  io::write_file_atomic(path, save_instance(inst));
}

}  // namespace narrator
