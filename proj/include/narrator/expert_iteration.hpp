#pragma once

// Expert iteration: generate candidates with the current generator model,
// score them, keep the best, fine-tune on the keepers, repeat.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/finetune.hpp"
#include "narrator/hashing.hpp"
#include "narrator/io.hpp"
#include "narrator/lm_backend.hpp"
#include "narrator/measures.hpp"
#include "narrator/parallel.hpp"
#include "narrator/prompts.hpp"
#include "narrator/tag_core.hpp"
#include "narrator/verbalizer.hpp"

namespace narrator {

// ---------------------------------------------------------------------------
// Candidates

struct Provenance {
  std::size_t iteration = 0;
  std::string model;
  double temperature = 1.0;
  std::size_t max_tokens = 512;
  std::string prompt_hash;
  /// Completion index within the generation request.
  std::size_t index = 0;
  /// Position in the iteration's pool; ties are broken by (iteration, sequence).
  std::size_t sequence = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ExplanationCandidate {
  std::string candidate_id;
  std::string instance_id;
  std::string text;
  std::optional<ScoreTriple> scores;
  Provenance provenance;

  friend bool operator==(const ExplanationCandidate&, const ExplanationCandidate&) = default;
};

inline bool provenance_less(const ExplanationCandidate& a, const ExplanationCandidate& b) {
  return std::pair(a.provenance.iteration, a.provenance.sequence) <
         std::pair(b.provenance.iteration, b.provenance.sequence);
}

inline json candidate_to_json(const ExplanationCandidate& c) {
  const auto& p = c.provenance;
  return {{"candidate_id", c.candidate_id},
          {"instance_id", c.instance_id},
          {"text", c.text},
          {"scores", c.scores ? c.scores->to_json() : json(nullptr)},
          {"provenance",
           {{"iteration", p.iteration},
            {"model", p.model},
            {"temperature", p.temperature},
            {"max_tokens", p.max_tokens},
            {"prompt_hash", p.prompt_hash},
            {"index", p.index},
            {"sequence", p.sequence}}}};
}

inline ExplanationCandidate candidate_from_json(const json& j) {
  ExplanationCandidate c;
  c.candidate_id = j.at("candidate_id").get<std::string>();
  c.instance_id = j.at("instance_id").get<std::string>();
  c.text = j.at("text").get<std::string>();
  if (!j.at("scores").is_null()) c.scores = ScoreTriple::from_json(j.at("scores"));
  const auto& p = j.at("provenance");
  c.provenance = {p.at("iteration").get<std::size_t>(),   p.at("model").get<std::string>(),
                  p.at("temperature").get<double>(),      p.at("max_tokens").get<std::size_t>(),
                  p.at("prompt_hash").get<std::string>(), p.at("index").get<std::size_t>(),
                  p.at("sequence").get<std::size_t>()};
  return c;
}

struct CandidateBatch {
  std::string instance_id;
  std::vector<ExplanationCandidate> candidates;
  std::size_t iteration = 0;
  std::string generator_model;
};

// ---------------------------------------------------------------------------
// Selection

enum class Objective { f_S, f_F, f_B };

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::f_S: return "f_S";
    case Objective::f_F: return "f_F";
    case Objective::f_B: return "f_B";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "f_S" || s == "f_s") return Objective::f_S;
  if (s == "f_F" || s == "f_f") return Objective::f_F;
  if (s == "f_B" || s == "f_b") return Objective::f_B;
  throw PreconditionError("unknown objective \"" + std::string(s) + "\" (expected f_S, f_F or f_B)");
}

inline double objective_value(const ScoreTriple& t, Objective o) {
  switch (o) {
    case Objective::f_S: return t.f_s;
    case Objective::f_F: return t.f_f;
    case Objective::f_B: return t.f_b;
  }
  return 0.0;
}

struct SelectionStrategy {
  enum class Kind { balanced_top_fraction, weighted_sum, single_objective };

  Kind kind = Kind::balanced_top_fraction;
  double fraction = 0.5;
  std::array<double, 3> lambdas{1.0, 1.0, 1.0};
  Objective objective = Objective::f_S;
  std::size_t quota = 50;

  static SelectionStrategy balanced(double fraction, std::size_t quota) {
    SelectionStrategy s;
    s.fraction = fraction;
    s.quota = quota;
    s.validate();
    return s;
  }

  static SelectionStrategy weighted(double l_s, double l_f, double l_b, std::size_t quota) {
    SelectionStrategy s;
    s.kind = Kind::weighted_sum;
    s.lambdas = {l_s, l_f, l_b};
    s.quota = quota;
    s.validate();
    return s;
  }

  static SelectionStrategy single(Objective o, std::size_t quota) {
    SelectionStrategy s;
    s.kind = Kind::single_objective;
    s.objective = o;
    s.quota = quota;
    s.validate();
    return s;
  }

  /// "balanced_top_fraction[:f]", "weighted_sum[:ls,lf,lb]" or "single_objective:f_X".
  static SelectionStrategy parse(std::string_view spec, std::size_t quota) {
    const auto colon = spec.find(':');
    const std::string_view kind = spec.substr(0, colon);
    const std::string arg = colon == std::string_view::npos ? "" : std::string(spec.substr(colon + 1));
    auto number = [&](const std::string& s) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || s.empty()) throw PreconditionError("bad number \"" + s + "\" in strategy " + std::string(spec));
      return v;
    };
    if (kind == "balanced_top_fraction" || kind == "balanced") {
      return balanced(arg.empty() ? 0.5 : number(arg), quota);
    }
    if (kind == "weighted_sum") {
      if (arg.empty()) return weighted(1.0, 1.0, 1.0, quota);
      std::string spaced = arg;
      std::replace(spaced.begin(), spaced.end(), ',', ' ');
      const auto parts = text::split_whitespace(spaced);
      if (parts.size() != 3) throw PreconditionError("weighted_sum needs three lambdas: " + std::string(spec));
      return weighted(number(parts[0]), number(parts[1]), number(parts[2]), quota);
    }
    if (kind == "single_objective") return single(parse_objective(arg), quota);
    throw PreconditionError("unknown selection strategy \"" + std::string(spec) + "\"");
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::balanced_top_fraction: return "balanced_top_fraction:" + text::fixed(fraction, 6);
      case Kind::weighted_sum:
        return "weighted_sum:" + text::fixed(lambdas[0], 6) + "," + text::fixed(lambdas[1], 6) + "," +
               text::fixed(lambdas[2], 6);
      case Kind::single_objective: return "single_objective:" + std::string(objective_name(objective));
    }
    return "?";
  }

  void validate() const {
    if (quota < 1) throw PreconditionError("selection quota must be >= 1");
    if (kind == Kind::balanced_top_fraction && !(fraction > 0.0 && fraction <= 1.0)) {
      throw PreconditionError("balanced fraction must lie in (0, 1]");
    }
    if (kind == Kind::weighted_sum) {
      for (double l : lambdas) {
        if (!std::isfinite(l)) throw PreconditionError("weighted_sum lambdas must be finite");
      }
    }
  }
};

struct SelectionResult {
  /// In provenance order.
  std::vector<ExplanationCandidate> selected;
  /// No candidate passed the balanced thresholds. Not an error: the iteration
  /// proceeds without a fine-tune.
  bool empty_selection = false;
};

namespace detail {

/// Nearest-rank quantile: the ceil(p*n)-th smallest value (at least the first).
inline double nearest_rank(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  const double raw = p * static_cast<double>(values.size());
  const auto rank = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

/// Population z-scores; a constant column maps to zeros.
inline std::vector<double> z_scores(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  std::vector<double> z(v.size(), 0.0);
  if (sd > 0.0) {
    for (std::size_t i = 0; i < v.size(); ++i) z[i] = (v[i] - mean) / sd;
  }
  return z;
}

inline std::vector<double> weighted_z(const std::vector<ExplanationCandidate>& pool,
                                      const std::array<double, 3>& lambdas) {
  std::vector<double> s, f, b;
  for (const auto& c : pool) {
    s.push_back(c.scores->f_s);
    f.push_back(c.scores->f_f);
    b.push_back(c.scores->f_b);
  }
  const auto zs = z_scores(s), zf = z_scores(f), zb = z_scores(b);
  std::vector<double> out(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) out[i] = lambdas[0] * zs[i] + lambdas[1] * zf[i] - lambdas[2] * zb[i];
  return out;
}

/// Takes the `quota` best indices by `key` (descending), ties by provenance.
inline std::vector<std::size_t> take_best(const std::vector<ExplanationCandidate>& pool,
                                          std::vector<std::size_t> idx, const std::vector<double>& key,
                                          std::size_t quota) {
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] > key[b];
    return provenance_less(pool[a], pool[b]);
  });
  if (idx.size() > quota) idx.resize(quota);
  return idx;
}

}  // namespace detail

/// The balanced predicate's thresholds for a pool.
struct BalancedThresholds {
  double min_f_s;
  double min_f_f;
  double max_f_b;
};

inline BalancedThresholds balanced_thresholds(const std::vector<ExplanationCandidate>& pool, double fraction) {
  std::vector<double> s, f, b;
  for (const auto& c : pool) {
    s.push_back(c.scores->f_s);
    f.push_back(c.scores->f_f);
    b.push_back(c.scores->f_b);
  }
  return {detail::nearest_rank(s, 1.0 - fraction), detail::nearest_rank(f, 1.0 - fraction),
          detail::nearest_rank(b, fraction)};
}

inline SelectionResult select(std::vector<ExplanationCandidate> pool, const SelectionStrategy& strategy) {
  strategy.validate();
  for (const auto& c : pool) {
    if (!c.scores) throw PreconditionError("candidate " + c.candidate_id + " has not been scored");
  }
  SelectionResult result;
  if (pool.empty()) {
    result.empty_selection = true;
    return result;
  }
  std::stable_sort(pool.begin(), pool.end(), provenance_less);

  std::vector<std::size_t> chosen;
  switch (strategy.kind) {
    case SelectionStrategy::Kind::balanced_top_fraction: {
      const auto th = balanced_thresholds(pool, strategy.fraction);
      std::vector<std::size_t> passing;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& t = *pool[i].scores;
        if (t.f_s >= th.min_f_s && t.f_f >= th.min_f_f && t.f_b <= th.max_f_b) passing.push_back(i);
      }
      if (passing.empty()) {
        result.empty_selection = true;
        return result;
      }
      chosen = detail::take_best(pool, passing, detail::weighted_z(pool, {1.0, 1.0, 1.0}), strategy.quota);
      break;
    }
    case SelectionStrategy::Kind::weighted_sum: {
      std::vector<std::size_t> all(pool.size());
      std::iota(all.begin(), all.end(), 0);
      chosen = detail::take_best(pool, all, detail::weighted_z(pool, strategy.lambdas), strategy.quota);
      break;
    }
    case SelectionStrategy::Kind::single_objective: {
      std::vector<std::size_t> all(pool.size());
      std::iota(all.begin(), all.end(), 0);
      std::vector<double> key;
      const double sign = strategy.objective == Objective::f_B ? -1.0 : 1.0;
      for (const auto& c : pool) key.push_back(sign * objective_value(*c.scores, strategy.objective));
      chosen = detail::take_best(pool, all, key, strategy.quota);
      break;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i : chosen) result.selected.push_back(pool[i]);
  return result;
}

// ---------------------------------------------------------------------------
// Prompts

struct PromptOptions {
  bool with_scores = true;
  /// Share of the paragraph's lowest-saliency tokens dropped before prompting.
  double tail_mask_fraction = 0.0;
  std::size_t hop_k = kDefaultHops;
  std::optional<double> prune_threshold;
};

/// Tokens removed by tail masking: floor(f * T) lowest scores, ties dropping the
/// later (node, index) first.
inline std::set<std::pair<NodeId, std::size_t>> tail_masked_tokens(const BfsTree& tree,
                                                                   const ExplanationInstance& instance,
                                                                   double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw PreconditionError("tail_mask_fraction must lie in [0, 1)");
  struct Entry {
    double score;
    NodeId node;
    std::size_t index;
  };
  std::vector<Entry> all;
  for (NodeId v : tree.visit_order) {
    const auto& tokens = instance.graph().node(v).tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i) all.push_back({instance.token_score(v, i), v, i});
  }
  const double raw = fraction * static_cast<double>(all.size());
  const auto drop = static_cast<std::size_t>(std::floor(raw + 1e-9 * std::max(1.0, raw)));
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score < b.score;
    return std::pair(a.node, a.index) > std::pair(b.node, b.index);
  });
  std::set<std::pair<NodeId, std::size_t>> out;
  for (std::size_t i = 0; i < drop && i < all.size(); ++i) out.insert({all[i].node, all[i].index});
  return out;
}

/// The Saliency Paragraph the generator sees, after pruning and tail masking.
inline std::string generation_paragraph(const ExplanationInstance& instance, const PromptOptions& opt) {
  BfsTree tree = build_bfs_tree(instance, opt.hop_k);
  if (opt.prune_threshold) tree = prune(tree, instance, *opt.prune_threshold);
  const auto dropped = tail_masked_tokens(tree, instance, opt.tail_mask_fraction);
  return render_with(
             tree, instance,
             [&](NodeId v, std::size_t i, const std::string& tok) -> std::optional<std::string> {
               if (dropped.count({v, i})) return std::nullopt;
               if (!opt.with_scores) return tok;
               return tok + "(" + text::fixed2(instance.token_score(v, i)) + ")";
             },
             opt.with_scores)
      .text;
}

inline std::string build_generation_prompt(const ExplanationInstance& instance, const PromptOptions& opt) {
  const auto& pred = instance.prediction();
  return prompts::generation_prompt(opt.with_scores, generation_paragraph(instance, opt), pred.label, pred.label_set);
}

inline std::string build_generation_prompt(const ExplanationInstance& instance, bool with_scores,
                                           double tail_mask_fraction) {
  PromptOptions opt;
  opt.with_scores = with_scores;
  opt.tail_mask_fraction = tail_mask_fraction;
  return build_generation_prompt(instance, opt);
}

/// Student prompt: full plain serialization, no saliency, no pruning.
inline std::string build_distillation_prompt(const ExplanationInstance& instance, std::size_t hop_k) {
  const auto& pred = instance.prediction();
  return prompts::generation_prompt(false, serialize_plain(instance, hop_k), pred.label, pred.label_set);
}

// ---------------------------------------------------------------------------
// Iteration state and checkpointing

struct ScoreMeans {
  double f_s = 0.0;
  double f_f = 0.0;
  double f_b = 0.0;

  friend bool operator==(const ScoreMeans&, const ScoreMeans&) = default;
  json to_json() const { return {{"f_s", f_s}, {"f_f", f_f}, {"f_b", f_b}}; }
  static ScoreMeans from_json(const json& j) {
    return {j.at("f_s").get<double>(), j.at("f_f").get<double>(), j.at("f_b").get<double>()};
  }
};

inline ScoreMeans mean_scores(const std::vector<ExplanationCandidate>& cands) {
  ScoreMeans m;
  if (cands.empty()) return m;
  for (const auto& c : cands) {
    m.f_s += c.scores->f_s;
    m.f_f += c.scores->f_f;
    m.f_b += c.scores->f_b;
  }
  const auto n = static_cast<double>(cands.size());
  m.f_s /= n;
  m.f_f /= n;
  m.f_b /= n;
  return m;
}

struct IterationStats {
  std::size_t iteration = 0;
  std::string generator_model;
  std::size_t pool_size = 0;
  std::size_t selected = 0;
  bool empty_selection = false;
  /// Means over every candidate generated in the iteration.
  ScoreMeans pool_mean;
  ScoreMeans selected_mean;

  friend bool operator==(const IterationStats&, const IterationStats&) = default;

  json to_json() const {
    return {{"iteration", iteration},        {"generator_model", generator_model},
            {"pool_size", pool_size},        {"selected", selected},
            {"empty_selection", empty_selection}, {"pool_mean", pool_mean.to_json()},
            {"selected_mean", selected_mean.to_json()}};
  }
  static IterationStats from_json(const json& j) {
    return {j.at("iteration").get<std::size_t>(),
            j.at("generator_model").get<std::string>(),
            j.at("pool_size").get<std::size_t>(),
            j.at("selected").get<std::size_t>(),
            j.at("empty_selection").get<bool>(),
            ScoreMeans::from_json(j.at("pool_mean")),
            ScoreMeans::from_json(j.at("selected_mean"))};
  }
};

/// Work finished up to the fine-tune call; lets a resumed run skip regeneration and rescoring.
struct PendingFinetune {
  IterationStats stats;
  std::vector<ExplanationCandidate> selected;
  std::string dataset;

  friend bool operator==(const PendingFinetune&, const PendingFinetune&) = default;
};

struct IterationState {
  std::size_t iteration = 0;
  std::string generator_model;
  std::vector<ExplanationCandidate> accumulated;
  std::vector<IterationStats> score_stats;
  std::optional<PendingFinetune> pending;

  friend bool operator==(const IterationState&, const IterationState&) = default;

  static IterationState initial(std::string base_model) {
    IterationState s;
    s.generator_model = std::move(base_model);
    return s;
  }
};

inline json state_to_json(const IterationState& s) {
  json acc = json::array();
  for (const auto& c : s.accumulated) acc.push_back(candidate_to_json(c));
  json stats = json::array();
  for (const auto& st : s.score_stats) stats.push_back(st.to_json());
  json pending = nullptr;
  if (s.pending) {
    json sel = json::array();
    for (const auto& c : s.pending->selected) sel.push_back(candidate_to_json(c));
    pending = {{"stats", s.pending->stats.to_json()}, {"selected", sel}, {"dataset", s.pending->dataset}};
  }
  return {{"iteration", s.iteration},
          {"generator_model", s.generator_model},
          {"accumulated", acc},
          {"score_stats", stats},
          {"pending", pending}};
}

inline IterationState state_from_json(const json& j) {
  try {
    IterationState s;
    s.iteration = j.at("iteration").get<std::size_t>();
    s.generator_model = j.at("generator_model").get<std::string>();
    for (const auto& c : j.at("accumulated")) s.accumulated.push_back(candidate_from_json(c));
    for (const auto& st : j.at("score_stats")) s.score_stats.push_back(IterationStats::from_json(st));
    if (!j.at("pending").is_null()) {
      PendingFinetune p;
      p.stats = IterationStats::from_json(j.at("pending").at("stats"));
      for (const auto& c : j.at("pending").at("selected")) p.selected.push_back(candidate_from_json(c));
      p.dataset = j.at("pending").at("dataset").get<std::string>();
      s.pending = std::move(p);
    }
    return s;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed iteration state: ") + e.what());
  }
}

/// {"state": ..., "hash": sha256 of the compact state}, pretty-printed.
inline std::string render_checkpoint(const IterationState& s) {
  const json state = state_to_json(s);
  const json doc = {{"state", state}, {"hash", sha256_hex(state.dump())}};
  return doc.dump(2) + "\n";
}

inline void write_checkpoint(const std::filesystem::path& path, const IterationState& s) {
  io::write_file_atomic(path, render_checkpoint(s));
}

inline IterationState read_checkpoint(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("state") || !doc.contains("hash")) {
    throw SchemaError("checkpoint " + path.string() + " lacks state/hash");
  }
  if (doc["hash"] != sha256_hex(doc["state"].dump())) {
    throw SchemaError("checkpoint " + path.string() + " failed its integrity check");
  }
  return state_from_json(doc["state"]);
}

// ---------------------------------------------------------------------------
// Fine-tune exports

enum class FinetuneStyle { generator, distillation };

inline std::vector<FinetuneRecord> finetune_records(const std::vector<ExplanationCandidate>& candidates,
                                                    const std::map<std::string, const ExplanationInstance*>& corpus,
                                                    FinetuneStyle style, const PromptOptions& prompt) {
  if (candidates.empty()) throw PreconditionError("no candidates to export");
  std::vector<FinetuneRecord> records;
  for (const auto& c : candidates) {
    const auto it = corpus.find(c.instance_id);
    if (it == corpus.end()) throw ReferenceError("candidate " + c.candidate_id + " names unknown instance " + c.instance_id);
    const std::string user = style == FinetuneStyle::generator ? build_generation_prompt(*it->second, prompt)
                                                               : build_distillation_prompt(*it->second, prompt.hop_k);
    records.push_back({{{"user", user}, {"assistant", c.text}}});
  }
  return records;
}

/// Writes one conversation per line and re-validates the rendered file.
inline std::filesystem::path export_finetune_dataset(const std::vector<ExplanationCandidate>& candidates,
                                                     const std::map<std::string, const ExplanationInstance*>& corpus,
                                                     FinetuneStyle style, const PromptOptions& prompt,
                                                     const std::filesystem::path& path) {
  const std::string content = render_finetune_text(finetune_records(candidates, corpus, style, prompt));
  parse_finetune_text(content);
  io::write_file_atomic(path, content);
  return path;
}

// ---------------------------------------------------------------------------
// The loop

struct IterationConfig {
  SelectionStrategy strategy = SelectionStrategy::balanced(0.5, 50);
  std::size_t candidates_per_instance = 4;
  std::size_t iterations = 5;
  PromptOptions prompt{true, 0.05, kDefaultHops, std::nullopt};
  double temperature = 1.0;
  std::size_t max_tokens = 512;
  /// Instances in flight at once.
  std::size_t max_concurrent = 1;
  ScoringContext scoring;
  /// Where finetune_iter<i>.jsonl files go.
  std::filesystem::path output_dir;
  /// Checkpoint file; empty disables checkpointing.
  std::filesystem::path state_file;
  std::shared_ptr<AuditLog> audit;

  void validate() const {
    strategy.validate();
    scoring.validate();
    if (candidates_per_instance < 1) throw PreconditionError("candidates_per_instance must be >= 1");
    if (max_concurrent < 1) throw PreconditionError("max_concurrent must be >= 1");
    if (!(prompt.tail_mask_fraction >= 0.0 && prompt.tail_mask_fraction < 1.0)) {
      throw PreconditionError("tail_mask_fraction must lie in [0, 1)");
    }
    if (output_dir.empty()) throw PreconditionError("iteration output_dir is not set");
  }
};

inline std::map<std::string, const ExplanationInstance*> index_corpus(const std::vector<ExplanationInstance>& dataset) {
  std::map<std::string, const ExplanationInstance*> out;
  for (const auto& inst : dataset) {
    if (!out.emplace(inst.id(), &inst).second) throw SchemaError("duplicate instance id " + inst.id());
  }
  return out;
}

/// n completions from the state's generator, all or nothing.
inline CandidateBatch generate_candidates(LanguageModelBackend& backend, const ExplanationInstance& instance,
                                          std::size_t n, const IterationState& state, const IterationConfig& config,
                                          std::size_t sequence_base = 0) {
  if (n < 1) throw PreconditionError("n must be >= 1");
  const std::string prompt = build_generation_prompt(instance, config.prompt);
  const std::string prompt_hash = short_hash(prompt);
  const auto texts = backend.generate({prompt, config.max_tokens, config.temperature, n, state.generator_model});
  if (texts.size() != n) {
    throw BackendRefusal("expected " + std::to_string(n) + " completions, got " + std::to_string(texts.size()));
  }
  CandidateBatch batch{instance.id(), {}, state.iteration, state.generator_model};
  for (std::size_t j = 0; j < n; ++j) {
    ExplanationCandidate c;
    c.candidate_id = instance.id() + "/it" + std::to_string(state.iteration) + "/" + std::to_string(j);
    c.instance_id = instance.id();
    c.text = texts[j];
    c.provenance = {state.iteration, state.generator_model, config.temperature, config.max_tokens, prompt_hash, j,
                    sequence_base + j};
    batch.candidates.push_back(std::move(c));
  }
  return batch;
}

inline std::string finetune_file_name(std::size_t iteration) {
  return "finetune_iter" + std::to_string(iteration) + ".jsonl";
}

namespace detail {

inline void checkpoint(const IterationConfig& config, const IterationState& state) {
  if (!config.state_file.empty()) write_checkpoint(config.state_file, state);
}

inline void commit(IterationState& state, const IterationStats& stats, const std::vector<ExplanationCandidate>& selected,
                   std::string new_model) {
  state.accumulated.insert(state.accumulated.end(), selected.begin(), selected.end());
  state.score_stats.push_back(stats);
  state.generator_model = std::move(new_model);
  state.iteration += 1;
  state.pending.reset();
}

inline void finish_pending(LanguageModelBackend& backend, IterationState& state, const IterationConfig& config) {
  const auto pending = *state.pending;
  const std::string model = backend.submit_finetune(config.output_dir / pending.dataset, state.generator_model);
  if (config.audit) {
    config.audit->append({{"event", "finetune"},
                          {"iteration", state.iteration},
                          {"base_model", state.generator_model},
                          {"model", model},
                          {"dataset", pending.dataset},
                          {"records", pending.selected.size()}});
  }
  commit(state, pending.stats, pending.selected, model);
  checkpoint(config, state);
}

}  // namespace detail

/// One generate / score / select / fine-tune round. The checkpoint is written
/// before the fine-tune call so a failed job resumes without rescoring.
inline IterationState run_iteration(LanguageModelBackend& backend, const std::vector<ExplanationInstance>& dataset,
                                    IterationState state, const IterationConfig& config) {
  config.validate();
  if (state.generator_model.empty()) throw PreconditionError("iteration state has no generator model");
  if (state.pending) {
    detail::finish_pending(backend, state, config);
    return state;
  }
  if (dataset.empty()) throw PreconditionError("dataset is empty");
  const auto corpus = index_corpus(dataset);
  const std::size_t n = config.candidates_per_instance;

  std::vector<CandidateBatch> batches(dataset.size());
  parallel_for(dataset.size(), config.max_concurrent, [&](std::size_t i) {
    auto batch = generate_candidates(backend, dataset[i], n, state, config, i * n);
    for (auto& c : batch.candidates) {
      c.scores = score_all(backend, dataset[i], c.text, config.scoring);
      if (config.audit) {
        config.audit->append({{"event", "score"},
                              {"iteration", state.iteration},
                              {"candidate_id", c.candidate_id},
                              {"instance_id", c.instance_id},
                              {"scores", c.scores->to_json()},
                              {"template_hash", prompts::scoring_template_hash()}});
      }
    }
    batches[i] = std::move(batch);
  });

  std::vector<ExplanationCandidate> pool;
  for (auto& b : batches) {
    for (auto& c : b.candidates) pool.push_back(std::move(c));
  }
  const auto result = select(pool, config.strategy);

  IterationStats stats;
  stats.iteration = state.iteration;
  stats.generator_model = state.generator_model;
  stats.pool_size = pool.size();
  stats.selected = result.selected.size();
  stats.empty_selection = result.empty_selection;
  stats.pool_mean = mean_scores(pool);
  stats.selected_mean = mean_scores(result.selected);
  if (config.audit) {
    json ids = json::array();
    for (const auto& c : result.selected) ids.push_back(c.candidate_id);
    config.audit->append({{"event", "select"},
                          {"iteration", state.iteration},
                          {"strategy", config.strategy.to_string()},
                          {"selected", ids},
                          {"empty_selection", result.empty_selection}});
  }

  if (result.empty_selection) {
    const std::string model = state.generator_model;
    detail::commit(state, stats, {}, model);
    detail::checkpoint(config, state);
    return state;
  }

  const std::string dataset_name = finetune_file_name(state.iteration);
  export_finetune_dataset(result.selected, corpus, FinetuneStyle::generator, config.prompt,
                          config.output_dir / dataset_name);
  state.pending = PendingFinetune{stats, result.selected, dataset_name};
  detail::checkpoint(config, state);
  detail::finish_pending(backend, state, config);
  return state;
}

/// Runs iterations until state.iteration reaches config.iterations.
inline IterationState run_loop(LanguageModelBackend& backend, const std::vector<ExplanationInstance>& dataset,
                               IterationState state, const IterationConfig& config) {
  while (state.iteration < config.iterations || state.pending) {
    state = run_iteration(backend, dataset, std::move(state), config);
  }
  return state;
}

}  // namespace narrator
