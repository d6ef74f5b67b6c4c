#pragma once

#include <random>
#include <string>
#include <vector>

#include "narrator/tag_core.hpp"

namespace narrator::testing {

inline std::filesystem::path data_dir() { return std::filesystem::path(NARRATOR_TEST_DATA_DIR); }

/// Builds a validated instance; scores[v] are the per-token scores of node v.
inline ExplanationInstance make_instance(const std::vector<std::vector<std::string>>& tokens,
                                         const std::vector<std::pair<NodeId, NodeId>>& edges,
                                         const std::vector<std::vector<double>>& scores, NodeId root = 0,
                                         std::string label = "Theory",
                                         std::vector<std::string> label_set = {"Theory", "Neural Networks"},
                                         std::string id = "fixture") {
  std::vector<NodeRecord> nodes;
  SaliencyAnnotation sal;
  for (NodeId v = 0; v < tokens.size(); ++v) {
    nodes.push_back({v, tokens[v]});
    double sum = 0.0;
    for (double s : scores[v]) sum += s;
    sal.node_scores.push_back(sum);
    sal.token_scores.push_back(scores[v]);
  }
  auto graph = TextAttributedGraph::create(std::move(nodes), edges, root);
  return ExplanationInstance::create(std::move(id), std::move(graph), std::move(sal),
                                     {std::move(label), std::move(label_set)});
}

/// Uniform scores of 1.0 for every token.
inline ExplanationInstance make_flat_instance(const std::vector<std::vector<std::string>>& tokens,
                                              const std::vector<std::pair<NodeId, NodeId>>& edges, NodeId root = 0) {
  std::vector<std::vector<double>> scores;
  for (const auto& t : tokens) scores.emplace_back(t.size(), 1.0);
  return make_instance(tokens, edges, scores, root);
}

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "graph",   "neural", "network", "bayesian", "inference", "markov", "decision", "learning", "policy",
      "theorem", "proof",  "kernel",  "sparse",   "random",    "model",  "robot",    "vision",   "search",
      "genetic", "rule",   "tree",    "case",     "based",     "data",   "signal",   "optimal",  "bound"};
  return words;
}

struct RandomShape {
  std::size_t max_nodes = 50;
  std::size_t max_tokens = 8;
  double extra_edge_prob = 0.08;
  /// Draw scores from a small set so ties occur.
  bool coarse_scores = false;
};

/// Connected random graph (random spanning tree plus extra edges) with a random root.
inline ExplanationInstance random_instance(std::mt19937_64& rng, const RandomShape& shape = {},
                                           std::string id = "random") {
  std::uniform_int_distribution<std::size_t> nd(1, shape.max_nodes);
  const std::size_t n = nd(rng);
  std::vector<std::vector<std::string>> tokens(n);
  std::vector<std::vector<double>> scores(n);
  std::uniform_int_distribution<std::size_t> td(0, shape.max_tokens);
  std::uniform_int_distribution<std::size_t> wd(0, vocabulary().size() - 1);
  std::uniform_real_distribution<double> sd(0.0, 10.0);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t t = td(rng);
    for (std::size_t i = 0; i < t; ++i) {
      tokens[v].push_back(vocabulary()[wd(rng)]);
      scores[v].push_back(shape.coarse_scores ? 0.5 * coarse(rng) : sd(rng));
    }
  }
  std::vector<std::pair<NodeId, NodeId>> edges;
  std::set<std::pair<NodeId, NodeId>> seen;
  auto add = [&](NodeId a, NodeId b) {
    if (a == b) return;
    if (a > b) std::swap(a, b);
    if (seen.insert({a, b}).second) edges.emplace_back(a, b);
  };
  for (NodeId v = 1; v < n; ++v) {
    std::uniform_int_distribution<NodeId> pd(0, v - 1);
    add(pd(rng), v);
  }
  std::bernoulli_distribution extra(shape.extra_edge_prob);
  for (NodeId a = 0; a < n; ++a) {
    for (NodeId b = a + 1; b < n; ++b) {
      if (extra(rng)) add(a, b);
    }
  }
  std::shuffle(edges.begin(), edges.end(), rng);
  std::uniform_int_distribution<NodeId> rd(0, static_cast<NodeId>(n - 1));
  return make_instance(tokens, edges, scores, rd(rng), "Theory", {"Theory", "Neural Networks"}, std::move(id));
}

}  // namespace narrator::testing
