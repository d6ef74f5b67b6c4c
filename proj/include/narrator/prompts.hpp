#pragma once

// Versioned prompt assets. Every score log line records scoring_template_hash()
// so results can be tied to the exact wording that produced them.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/hashing.hpp"
#include "narrator/text.hpp"

namespace narrator::prompts {

inline constexpr std::string_view kGenerationVersion = "generation-v1";
inline constexpr std::string_view kScoringVersion = "scoring-v1";

// Section markers shared by the scoring prompts (and read by the simulated scorer).
inline constexpr std::string_view kExplanationMarker = "### Explanation\n";
inline constexpr std::string_view kDocumentMarker = "### Document\n";
inline constexpr std::string_view kLabelsMarker = "Candidate labels: ";
inline constexpr std::string_view kGraphOpen = "<verbalized-graph>\n";
inline constexpr std::string_view kGraphClose = "\n</verbalized-graph>";
inline constexpr std::string_view kLabelHeading = "### Classification Label\n";

inline constexpr std::string_view kExemplarGraphWithScores =
    "ROOT: gradient(3.41) boosting(4.87) for(0.12) ranking(2.95) web(1.08) documents(0.77)\n"
    "Node-1: boosted(2.66) trees(3.02) learn(0.91) additive(1.73) models(0.88)\n"
    "Node-1.1: decision(1.22) tree(1.40) induction(0.95) from(0.05) examples(0.61)\n"
    "Node-2: learning(1.15) to(0.07) rank(2.21) with(0.04) pairwise(1.36) losses(0.98) [See Node-1.1.]";

inline constexpr std::string_view kExemplarGraphPlain =
    "ROOT: gradient boosting for ranking web documents\n"
    "Node-1: boosted trees learn additive models\n"
    "Node-1.1: decision tree induction from examples\n"
    "Node-2: learning to rank with pairwise losses [See Node-1.1.]";

inline constexpr std::string_view kExemplarLabel = "Machine Learning";

inline constexpr std::string_view kExemplarReasoning =
    "0. Graph structure: ROOT is the node being classified. Node-1 and Node-2 are its direct neighbors; "
    "Node-1.1 is two hops away, below Node-1, and Node-2 also links to it.\n"
    "1. Words: 'boosting', 'gradient' and 'ranking' in ROOT point at learning algorithms.\n"
    "2. Neighbors: Node-1 (boosted trees) and Node-2 (learning to rank) reinforce that reading; "
    "Node-1.1 adds weaker support through decision trees.";

inline constexpr std::string_view kExemplarExplanation =
    "ROOT is labeled Machine Learning because it studies gradient boosting for ranking.\n"
    "  - Node-1: boosted trees, the model family ROOT builds on.\n"
    "    - Node-1.1: decision tree induction, weaker but consistent support.\n"
    "  - Node-2: learning to rank, the task ROOT addresses.";

inline constexpr std::string_view kGenerationWithScores =
    "The verbalized graph below describes the neighborhood of Node 0 (ROOT). Each line is one node, and every word "
    "is followed by its importance score in brackets. These words drove the classification of Node 0 into one of "
    "{num_labels} categories ({labels}).\n"
    "Write a concise, readable explanation of why Node 0 received its label, pointing to the decisive keywords "
    "inside nodes and to the relations between nodes.\n"
    "\n"
    "## Example\n"
    "\n"
    "### Verbalized Graph\n"
    "<verbalized-graph>\n{exemplar_graph}\n</verbalized-graph>\n"
    "\n"
    "### Classification Label\n{exemplar_label}\n"
    "\n"
    "### Reasoning\n{exemplar_reasoning}\n"
    "\n"
    "### Free-Text Explanation\n{exemplar_explanation}\n"
    "\n"
    "## Task\n"
    "\n"
    "### Verbalized Graph\n"
    "<verbalized-graph>\n{document}\n</verbalized-graph>\n"
    "\n"
    "### Classification Label\n{label}\n"
    "\n"
    "### Reasoning\n"
    "\n"
    "### Free-Text Explanation\n"
    "\n"
    "Notes:\n"
    "1. Write the reasoning first, then the free-text explanation, following the example.\n"
    "2. Use the importance (saliency) score behind each word as guidance; there is no need to quote the scores.\n"
    "3. Keep the node indexes and indentation so the explanation mirrors the graph hierarchy.\n";

inline constexpr std::string_view kGenerationPlain =
    "The verbalized graph below describes the neighborhood of Node 0 (ROOT). Each line is one node. Its words "
    "drove the classification of Node 0 into one of {num_labels} categories ({labels}).\n"
    "Write a concise, readable explanation of why Node 0 received its label, pointing to the decisive keywords "
    "inside nodes and to the relations between nodes.\n"
    "\n"
    "## Example\n"
    "\n"
    "### Verbalized Graph\n"
    "<verbalized-graph>\n{exemplar_graph}\n</verbalized-graph>\n"
    "\n"
    "### Classification Label\n{exemplar_label}\n"
    "\n"
    "### Reasoning\n{exemplar_reasoning}\n"
    "\n"
    "### Free-Text Explanation\n{exemplar_explanation}\n"
    "\n"
    "## Task\n"
    "\n"
    "### Verbalized Graph\n"
    "<verbalized-graph>\n{document}\n</verbalized-graph>\n"
    "\n"
    "### Classification Label\n{label}\n"
    "\n"
    "### Reasoning\n"
    "\n"
    "### Free-Text Explanation\n"
    "\n"
    "Notes:\n"
    "1. Write the reasoning first, then the free-text explanation, following the example.\n"
    "2. Judge importance from the words themselves and from how close each node sits to ROOT.\n"
    "3. Keep the node indexes and indentation so the explanation mirrors the graph hierarchy.\n";

inline constexpr std::string_view kMaskFillWithExplanation =
    "Each {mask} in the document below hides one original word. Use the explanation to recover them.\n"
    "\n"
    "### Explanation\n{explanation}\n"
    "\n"
    "### Document\n{document}\n"
    "\n"
    "### Hidden words, in order:";

inline constexpr std::string_view kMaskFillPlain =
    "Each {mask} in the document below hides one original word. Recover them.\n"
    "\n"
    "### Document\n{document}\n"
    "\n"
    "### Hidden words, in order:";

inline constexpr std::string_view kClassifyWithExplanation =
    "Candidate labels: {labels}\n"
    "\n"
    "### Explanation\n{explanation}\n"
    "\n"
    "### Answer\nThe label of ROOT is:";

inline constexpr std::string_view kClassifyPlain =
    "Candidate labels: {labels}\n"
    "\n"
    "### Answer\nThe label of ROOT is:";

inline std::string labels_json(const std::vector<std::string>& labels) { return nlohmann::json(labels).dump(); }

inline std::string scoring_template_hash() {
  return short_hash(std::string(kScoringVersion) + "\n" + std::string(kMaskFillWithExplanation) + "\n" +
                    std::string(kMaskFillPlain) + "\n" + std::string(kClassifyWithExplanation) + "\n" +
                    std::string(kClassifyPlain));
}

inline std::string generation_template_hash() {
  return short_hash(std::string(kGenerationVersion) + "\n" + std::string(kGenerationWithScores) + "\n" +
                    std::string(kGenerationPlain));
}

inline std::string generation_prompt(bool with_scores, const std::string& document, const std::string& label,
                                     const std::vector<std::string>& label_set) {
  const std::map<std::string, std::string> values = {
      {"num_labels", std::to_string(label_set.size())},
      {"labels", labels_json(label_set)},
      {"exemplar_graph", std::string(with_scores ? kExemplarGraphWithScores : kExemplarGraphPlain)},
      {"exemplar_label", std::string(kExemplarLabel)},
      {"exemplar_reasoning", std::string(kExemplarReasoning)},
      {"exemplar_explanation", std::string(kExemplarExplanation)},
      {"document", document},
      {"label", label},
  };
  return text::substitute(with_scores ? kGenerationWithScores : kGenerationPlain, values);
}

inline std::string mask_fill_prompt(const std::string& masked_document, const std::string* explanation,
                                    std::string_view placeholder) {
  std::map<std::string, std::string> values = {{"document", masked_document}, {"mask", std::string(placeholder)}};
  if (explanation) values["explanation"] = *explanation;
  return text::substitute(explanation ? kMaskFillWithExplanation : kMaskFillPlain, values);
}

inline std::string classification_prompt(const std::vector<std::string>& label_set, const std::string* explanation) {
  std::map<std::string, std::string> values = {{"labels", labels_json(label_set)}};
  if (explanation) values["explanation"] = *explanation;
  return text::substitute(explanation ? kClassifyWithExplanation : kClassifyPlain, values);
}

}  // namespace narrator::prompts
