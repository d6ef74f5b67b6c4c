#pragma once

// Explanation-quality measurements:
//   f_S  faithfulness to important inputs: PMI between the explanation and the
//        masked high-saliency tokens, integrated over a grid of mask ratios
//   f_F  faithfulness to the prediction: PMI between the label-masked
//        explanation and the predicted label
//   f_B  brevity: explanation length over ego-graph text length

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/lm_backend.hpp"
#include "narrator/parallel.hpp"
#include "narrator/prompts.hpp"
#include "narrator/tag_core.hpp"
#include "narrator/text.hpp"
#include "narrator/verbalizer.hpp"

namespace narrator {

/// Discrete distribution over mask ratios; the f_S integral becomes a weighted sum.
struct TauDistribution {
  std::vector<double> grid;
  std::vector<double> weights;

  static TauDistribution uniform(std::vector<double> grid) {
    TauDistribution d;
    d.weights.assign(grid.size(), grid.empty() ? 0.0 : 1.0 / static_cast<double>(grid.size()));
    d.grid = std::move(grid);
    d.validate();
    return d;
  }

  static TauDistribution point(double tau) { return uniform({tau}); }

  /// Uniform over {0.05, 0.10, ..., 0.30}.
  static TauDistribution standard() { return uniform({0.05, 0.10, 0.15, 0.20, 0.25, 0.30}); }

  void validate() const {
    if (grid.empty()) throw PreconditionError("tau grid is empty");
    if (grid.size() != weights.size()) throw PreconditionError("tau grid and weights differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!(grid[i] > 0.0 && grid[i] <= 1.0)) throw PreconditionError("tau values must lie in (0, 1]");
      if (i && !(grid[i] > grid[i - 1])) throw PreconditionError("tau grid must be strictly increasing");
      if (!(weights[i] >= 0.0)) throw PreconditionError("tau weights must be non-negative");
      sum += weights[i];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw PreconditionError("tau weights must sum to 1");
  }
};

struct ScoreTriple {
  double f_s = 0.0;
  double f_f = 0.0;
  double f_b = 0.0;

  friend bool operator==(const ScoreTriple&, const ScoreTriple&) = default;

  nlohmann::json to_json() const { return {{"f_s", f_s}, {"f_f", f_f}, {"f_b", f_b}}; }
  static ScoreTriple from_json(const nlohmann::json& j) {
    return {j.at("f_s").get<double>(), j.at("f_f").get<double>(), j.at("f_b").get<double>()};
  }
};

struct ScoringContext {
  std::string scoring_model;
  TauDistribution tau_dist = TauDistribution::standard();
  std::size_t hop_k = kDefaultHops;
  std::string mask_placeholder = std::string(kMaskPlaceholder);
  /// Longest allowed scoring prompt in bytes; 0 disables the check.
  std::size_t context_budget = 0;
  /// Parallel backend calls per instance.
  std::size_t max_concurrent = 1;

  void validate() const {
    if (hop_k < 1) throw PreconditionError("hop_k must be >= 1");
    if (mask_placeholder.empty()) throw PreconditionError("mask placeholder is empty");
    tau_dist.validate();
  }
};

namespace detail {

inline void check_budget(const std::string& prompt, const ScoringContext& ctx, const ExplanationInstance& inst) {
  if (ctx.context_budget && prompt.size() > ctx.context_budget) {
    throw InstanceTooLarge("instance " + inst.id() + ": scoring prompt of " + std::to_string(prompt.size()) +
                           " bytes exceeds the budget of " + std::to_string(ctx.context_budget));
  }
}

}  // namespace detail

/// log P(R_tau | G_M, E) - log P(R_tau | G_M) at one mask ratio. Zero when the
/// ego graph has no tokens to mask.
inline double input_pmi_at_tau(LanguageModelBackend& backend, const ExplanationInstance& instance,
                               const std::string& explanation, const ScoringContext& ctx, double tau) {
  const MaskedInstance masked = build_masked_instance(instance, ctx.hop_k, tau, ctx.mask_placeholder);
  if (masked.rationale_tokens.empty()) return 0.0;
  std::vector<std::string> rationale;
  rationale.reserve(masked.rationale_tokens.size());
  for (const auto& r : masked.rationale_tokens) rationale.push_back(r.token);

  const std::string with_e = prompts::mask_fill_prompt(masked.masked_document, &explanation, ctx.mask_placeholder);
  const std::string without_e = prompts::mask_fill_prompt(masked.masked_document, nullptr, ctx.mask_placeholder);
  detail::check_budget(with_e, ctx, instance);
  const double conditioned = backend.log_prob({with_e, rationale, ctx.scoring_model});
  const double marginal = backend.log_prob({without_e, rationale, ctx.scoring_model});
  return conditioned - marginal;
}

/// Per-tau PMI values, in grid order. Backend calls for distinct tau run concurrently.
inline std::vector<double> input_pmi_profile(LanguageModelBackend& backend, const ExplanationInstance& instance,
                                             const std::string& explanation, const ScoringContext& ctx) {
  ctx.validate();
  if (text::count_whitespace_tokens(explanation) == 0) throw PreconditionError("explanation is empty");
  const auto& grid = ctx.tau_dist.grid;
  std::vector<double> pmi(grid.size(), 0.0);
  parallel_for(grid.size(), ctx.max_concurrent,
               [&](std::size_t j) { pmi[j] = input_pmi_at_tau(backend, instance, explanation, ctx, grid[j]); });
  return pmi;
}

inline double score_input_faithfulness(LanguageModelBackend& backend, const ExplanationInstance& instance,
                                       const std::string& explanation, const ScoringContext& ctx) {
  const auto pmi = input_pmi_profile(backend, instance, explanation, ctx);
  double total = 0.0;
  for (std::size_t j = 0; j < pmi.size(); ++j) total += ctx.tau_dist.weights[j] * pmi[j];
  return total;
}

/// Replaces every case-insensitive occurrence of any label with the placeholder,
/// longest labels first, until no label occurs anywhere in the text.
inline std::string mask_labels(std::string explanation, const std::vector<std::string>& label_set,
                               std::string_view placeholder) {
  std::vector<std::string> labels;
  for (const auto& l : label_set) {
    if (l.empty()) continue;
    if (text::icontains(placeholder, l)) {
      throw PreconditionError("label \"" + l + "\" occurs inside the mask placeholder \"" + std::string(placeholder) +
                              "\"");
    }
    labels.push_back(l);
  }
  std::stable_sort(labels.begin(), labels.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  for (int pass = 0; pass < 64; ++pass) {
    bool changed = false;
    for (const auto& l : labels) {
      std::size_t pos = 0;
      while ((pos = text::ifind(explanation, l, pos)) != std::string::npos) {
        explanation.replace(pos, l.size(), placeholder);
        pos += placeholder.size();
        changed = true;
      }
    }
    if (!changed) return explanation;
  }
  throw PreconditionError("label masking did not converge");
}

/// log P(y | E') - log P(y), with both terms sharing the classification prompt scaffold.
inline double score_prediction_faithfulness(LanguageModelBackend& backend, const ExplanationInstance& instance,
                                            const std::string& explanation, const ScoringContext& ctx) {
  ctx.validate();
  const auto& pred = instance.prediction();
  if (pred.label_set.empty()) throw PreconditionError("label_set is empty");
  const std::string masked = mask_labels(explanation, pred.label_set, ctx.mask_placeholder);
  const auto label_units = text::split_whitespace(pred.label);
  const std::string with_e = prompts::classification_prompt(pred.label_set, &masked);
  const std::string without_e = prompts::classification_prompt(pred.label_set, nullptr);
  detail::check_budget(with_e, ctx, instance);
  const double conditioned = backend.log_prob({with_e, label_units, ctx.scoring_model});
  const double marginal = backend.log_prob({without_e, label_units, ctx.scoring_model});
  return conditioned - marginal;
}

/// |E| / |G| in whitespace tokens; |G| counts node text of the k-hop ego graph.
inline double score_brevity(const ExplanationInstance& instance, const std::string& explanation,
                            const ScoringContext& ctx) {
  const std::size_t graph_len = ego_token_count(build_bfs_tree(instance, ctx.hop_k), instance);
  if (graph_len == 0) throw DivisionDomain("instance " + instance.id() + " has no text in its ego graph");
  return static_cast<double>(text::count_whitespace_tokens(explanation)) / static_cast<double>(graph_len);
}

inline ScoreTriple score_all(LanguageModelBackend& backend, const ExplanationInstance& instance,
                             const std::string& explanation, const ScoringContext& ctx) {
  ScoreTriple t;
  t.f_b = score_brevity(instance, explanation, ctx);
  t.f_s = score_input_faithfulness(backend, instance, explanation, ctx);
  t.f_f = score_prediction_faithfulness(backend, instance, explanation, ctx);
  return t;
}

}  // namespace narrator
