#pragma once

// A closed simulated world for exercising the pipeline without a real LM:
//   - synthesize(): random text-attributed graphs whose labels are signalled by
//     planted lexicon words carrying high saliency
//   - a generator whose explanations cite salient words with probability
//     `coverage` and pad with `filler` words; fine-tuning moves both toward the
//     averages of the training explanations
//   - a scorer that recovers masked words the explanation mentions and
//     classifies by counting lexicon words

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/finetune.hpp"
#include "narrator/hashing.hpp"
#include "narrator/io.hpp"
#include "narrator/mock_backend.hpp"
#include "narrator/prompts.hpp"
#include "narrator/tag_core.hpp"
#include "narrator/text.hpp"

namespace narrator::sim {

struct LabelLexicon {
  std::string label;
  std::vector<std::string> words;
};

inline const std::vector<LabelLexicon>& lexicons() {
  static const std::vector<LabelLexicon> all = {
      {"Case Based", {"analogy", "precedent", "retrieval", "adaptation", "exemplars", "similarity", "reuse", "episodic"}},
      {"Genetic Algorithms",
       {"crossover", "mutation", "fitness", "chromosome", "evolutionary", "population", "selection", "genome"}},
      {"Neural Networks",
       {"backpropagation", "neurons", "hidden", "perceptron", "activation", "synaptic", "layers", "connectionist"}},
      {"Probabilistic Methods",
       {"bayesian", "posterior", "likelihood", "markov", "belief", "prior", "inference", "stochastic"}},
      {"Reinforcement Learning",
       {"reward", "policy", "agent", "temporal", "exploration", "bellman", "returns", "discounted"}},
      {"Rule Learning", {"induction", "clauses", "predicates", "covering", "pruning", "horn", "literals", "foil"}},
      {"Theory", {"bounds", "complexity", "theorem", "proofs", "pac", "lemma", "vc", "sample"}},
  };
  return all;
}

inline std::vector<std::string> label_names() {
  std::vector<std::string> out;
  for (const auto& l : lexicons()) out.push_back(l.label);
  return out;
}

/// Topic-neutral words used for graph text.
inline const std::vector<std::string>& graph_filler() {
  static const std::vector<std::string> words = {
      "paper",   "study",     "method",    "approach", "results",  "problem",     "data",       "model",
      "system",  "analysis",  "experiment", "performance", "framework", "algorithm", "task",    "general",
      "novel",   "proposed",  "evaluation", "domain",  "design",   "efficient",   "large",      "simple",
      "new",     "technique", "empirical", "report",   "show",     "present"};
  return words;
}

/// Words only the generator emits; they never occur in graph text.
inline const std::vector<std::string>& explanation_filler() {
  static const std::vector<std::string> words = {
      "notably",   "overall",     "clearly",      "furthermore", "indeed",   "broadly",   "moreover",
      "evidently", "generally",   "arguably",     "substantially", "considerably", "accordingly", "essentially",
      "plainly",   "largely",     "typically",    "ultimately",  "apparently", "frankly"};
  return words;
}

// ---------------------------------------------------------------------------
// Corpus

struct SynthShape {
  std::size_t instances = 10;
  std::size_t min_nodes = 3;
  std::size_t max_nodes = 8;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 9;
  /// Share of tokens drawn from the node label's lexicon.
  double lexicon_share = 0.35;
  /// Share of tokens drawn from other labels' lexicons.
  double distractor_share = 0.10;
  double extra_edge_prob = 0.15;
};

/// Deterministic per (seed, shape). Instance ids are "syn-<seed>-<index>".
inline std::vector<ExplanationInstance> synthesize(std::uint64_t seed, const SynthShape& shape = {}) {
  if (shape.min_nodes < 1 || shape.max_nodes < shape.min_nodes || shape.max_tokens < shape.min_tokens) {
    throw PreconditionError("inconsistent synthetic shape");
  }
  std::mt19937_64 rng(seed);
  const auto& lex = lexicons();
  std::uniform_int_distribution<std::size_t> label_d(0, lex.size() - 1);
  std::uniform_int_distribution<std::size_t> node_d(shape.min_nodes, shape.max_nodes);
  std::uniform_int_distribution<std::size_t> tok_d(shape.min_tokens, shape.max_tokens);
  std::uniform_int_distribution<std::size_t> lexword_d(0, 7);
  std::uniform_int_distribution<std::size_t> filler_d(0, graph_filler().size() - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  std::vector<ExplanationInstance> out;
  for (std::size_t k = 0; k < shape.instances; ++k) {
    const std::size_t label = label_d(rng);
    const std::size_t n = node_d(rng);
    std::vector<NodeRecord> nodes;
    SaliencyAnnotation sal;
    for (NodeId v = 0; v < n; ++v) {
      NodeRecord rec{v, {}};
      std::vector<double> scores;
      const std::size_t t = tok_d(rng);
      for (std::size_t i = 0; i < t; ++i) {
        const double r = u(rng);
        const bool planted = r < shape.lexicon_share || (v == 0 && i == 0);
        if (planted) {
          rec.tokens.push_back(lex[label].words[lexword_d(rng)]);
          scores.push_back(3.0 + 6.0 * u(rng));
        } else if (r < shape.lexicon_share + shape.distractor_share) {
          std::size_t other = label_d(rng);
          if (other == label) other = (other + 1) % lex.size();
          rec.tokens.push_back(lex[other].words[lexword_d(rng)]);
          scores.push_back(0.5 + 2.0 * u(rng));
        } else {
          rec.tokens.push_back(graph_filler()[filler_d(rng)]);
          scores.push_back(1.5 * u(rng));
        }
      }
      double sum = 0.0;
      for (double s : scores) sum += s;
      sal.node_scores.push_back(sum);
      sal.token_scores.push_back(std::move(scores));
      nodes.push_back(std::move(rec));
    }
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (NodeId v = 1; v < n; ++v) edges.emplace_back(std::uniform_int_distribution<NodeId>(0, v - 1)(rng), v);
    for (NodeId a = 0; a < n; ++a) {
      for (NodeId b = a + 1; b < n; ++b) {
        const bool is_tree = std::find(edges.begin(), edges.end(), std::pair(a, b)) != edges.end();
        if (!is_tree && u(rng) < shape.extra_edge_prob) edges.emplace_back(a, b);
      }
    }
    char id[64];
    std::snprintf(id, sizeof id, "syn-%llu-%03zu", static_cast<unsigned long long>(seed), k);
    auto graph = TextAttributedGraph::create(std::move(nodes), std::move(edges), 0);
    out.push_back(ExplanationInstance::create(id, std::move(graph), std::move(sal), {lex[label].label, label_names()}));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt parsing shared by the simulated generator and scorer

/// Lower-cased words with surrounding punctuation stripped.
inline std::vector<std::string> plain_words(std::string_view text) {
  std::vector<std::string> out;
  for (auto& w : text::split_whitespace(text)) {
    std::size_t b = 0, e = w.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(w[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(w[e - 1]))) --e;
    if (e > b) out.push_back(text::to_lower(std::string_view(w).substr(b, e - b)));
  }
  return out;
}

/// Text between `open` and the next `close` after the last `open`; empty when absent.
inline std::string_view last_section(std::string_view s, std::string_view open, std::string_view close) {
  const auto start = s.rfind(open);
  if (start == std::string_view::npos) return {};
  const auto body = start + open.size();
  const auto end = s.find(close, body);
  return s.substr(body, end == std::string_view::npos ? std::string_view::npos : end - body);
}

struct ParsedGenerationPrompt {
  std::string label;
  /// Distinct words of the graph ordered by descending score (first appearance
  /// for prompts without scores).
  std::vector<std::pair<std::string, double>> words;
  bool with_scores = false;
};

inline ParsedGenerationPrompt parse_generation_prompt(std::string_view prompt) {
  ParsedGenerationPrompt out;
  const auto graph = last_section(prompt, prompts::kGraphOpen, prompts::kGraphClose);
  out.label = std::string(last_section(prompt, prompts::kLabelHeading, "\n"));
  std::map<std::string, double> best;
  std::vector<std::string> order;
  std::size_t pos = 0;
  while (pos <= graph.size()) {
    auto nl = graph.find('\n', pos);
    if (nl == std::string_view::npos) nl = graph.size();
    std::string_view line = graph.substr(pos, nl - pos);
    pos = nl + 1;
    const auto colon = line.find(": ");
    if (colon == std::string_view::npos) continue;
    for (const auto& tok : text::split_whitespace(line.substr(colon + 2))) {
      if (tok == "[See" || tok.ends_with(".]")) continue;
      std::string word = tok;
      double score = 0.0;
      const auto open = tok.rfind('(');
      if (open != std::string::npos && tok.back() == ')') {
        word = tok.substr(0, open);
        score = std::strtod(tok.c_str() + open + 1, nullptr);
        out.with_scores = true;
      }
      word = text::to_lower(word);
      if (!best.count(word)) order.push_back(word);
      best[word] = std::max(best[word], score);
    }
  }
  for (const auto& w : order) out.words.emplace_back(w, best[w]);
  std::stable_sort(out.words.begin(), out.words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

// ---------------------------------------------------------------------------
// The world

struct GeneratorProfile {
  /// Probability of citing each salient word.
  double coverage = 0.2;
  /// Expected number of filler words.
  double filler = 10.0;

  nlohmann::json to_json() const { return {{"coverage", coverage}, {"filler", filler}}; }
  static GeneratorProfile from_json(const nlohmann::json& j) {
    return {j.at("coverage").get<double>(), j.at("filler").get<double>()};
  }
};

struct WorldOptions {
  std::uint64_t seed = 0;
  std::string base_model = "sim-base";
  GeneratorProfile initial;
  /// Step toward the training-set averages on each fine-tune.
  double learning_rate = 0.5;
  double coverage_spread = 0.25;
  double filler_spread = 5.0;
  /// Graph words at or above this score count as salient for the generator.
  double salient_threshold = 2.5;
  /// log P(hidden word | explanation mentions it).
  double recall_log_prob = -0.6931471805599453;
  /// Per-lexicon-word logit weight in the simulated classifier.
  double lexicon_weight = 0.4;
  /// Logit bonus when the explanation names a label outright.
  double name_bonus = 4.0;
  /// Where the model registry is persisted after each fine-tune; empty keeps it in memory.
  std::filesystem::path registry_path;
};

namespace detail {

inline double quantize(double lp) { return std::round(lp / kMockLogProbQuantum) * kMockLogProbQuantum; }

/// Explanation-independent log-prob of a hidden word, in [ln 0.01, ln 0.1).
inline double base_log_prob(std::uint64_t seed, const std::string& token) {
  const double u = static_cast<double>(hash64(std::to_string(seed) + "\x1f" + token) % 1000000) / 1000000.0;
  return quantize(std::log(0.01) + u * (std::log(0.1) - std::log(0.01)));
}

}  // namespace detail

class SimulatedWorld {
 public:
  explicit SimulatedWorld(WorldOptions options = {}) : options_(std::move(options)) {
    registry_[options_.base_model] = options_.initial;
    if (!options_.registry_path.empty() && std::filesystem::exists(options_.registry_path)) load_registry();
  }

  const WorldOptions& options() const noexcept { return options_; }

  GeneratorProfile profile(const std::string& model) const {
    std::lock_guard lock(mu_);
    const auto it = registry_.find(model);
    if (it == registry_.end()) throw BackendRefusal(404, "unknown model " + model);
    return it->second;
  }

  std::map<std::string, GeneratorProfile> registry() const {
    std::lock_guard lock(mu_);
    return registry_;
  }

  /// n explanations; pure in (seed, model profile, prompt, temperature, completion index).
  std::vector<std::string> generate(const GenerationRequest& req) const {
    const GeneratorProfile p = profile(req.model_ref);
    const auto parsed = parse_generation_prompt(req.prompt);
    std::vector<std::string> salient;
    for (const auto& [w, s] : parsed.words) {
      if (!parsed.with_scores || s >= options_.salient_threshold) salient.push_back(w);
    }
    std::vector<std::string> out;
    for (std::size_t j = 0; j < req.n; ++j) {
      std::mt19937_64 rng(hash64(std::to_string(options_.seed) + "\x1f" + req.model_ref + "\x1f" +
                                 std::to_string(req.temperature) + "\x1f" + std::to_string(j) + "\x1f" + req.prompt));
      std::normal_distribution<double> noise(0.0, 1.0);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double t = req.temperature;
      const double coverage = std::clamp(p.coverage + options_.coverage_spread * t * noise(rng), 0.0, 1.0);
      const double filler_mean = std::max(0.0, p.filler + options_.filler_spread * t * noise(rng));
      const auto filler = static_cast<std::size_t>(std::lround(filler_mean));

      std::vector<std::string> cited;
      for (const auto& w : salient) {
        if (u(rng) < coverage) cited.push_back(w);
      }
      std::string text = "ROOT is classified as " + parsed.label;
      if (!cited.empty()) {
        text += " because it mentions ";
        for (std::size_t i = 0; i < cited.size(); ++i) {
          if (i) text += i + 1 == cited.size() ? " and " : ", ";
          text += cited[i];
        }
      }
      text += ".";
      std::uniform_int_distribution<std::size_t> fd(0, explanation_filler().size() - 1);
      for (std::size_t i = 0; i < filler; ++i) text += " " + explanation_filler()[fd(rng)];
      auto words = text::split_whitespace(text);
      if (words.size() > req.max_tokens) {
        words.resize(req.max_tokens);
        text = text::join(words, " ");
      }
      out.push_back(std::move(text));
    }
    return out;
  }

  /// Coverage and filler count of one (prompt, explanation) pair.
  GeneratorProfile measure(const std::string& prompt, const std::string& explanation) const {
    const auto parsed = parse_generation_prompt(prompt);
    std::set<std::string> salient;
    for (const auto& [w, s] : parsed.words) {
      if (!parsed.with_scores || s >= options_.salient_threshold) salient.insert(w);
    }
    const std::set<std::string> filler_vocab(explanation_filler().begin(), explanation_filler().end());
    std::set<std::string> cited;
    double filler = 0.0;
    for (const auto& w : plain_words(explanation)) {
      if (salient.count(w)) cited.insert(w);
      if (filler_vocab.count(w)) filler += 1.0;
    }
    const double coverage =
        salient.empty() ? 0.0 : static_cast<double>(cited.size()) / static_cast<double>(salient.size());
    return {coverage, filler};
  }

  void finetune(const std::string& new_model, const std::string& base_model,
                const std::vector<FinetuneRecord>& records) {
    const GeneratorProfile base = profile(base_model);
    GeneratorProfile mean{0.0, 0.0};
    for (const auto& r : records) {
      const auto* user = r.first("user");
      const auto* assistant = r.first("assistant");
      const auto m = measure(user ? *user : "", assistant ? *assistant : "");
      mean.coverage += m.coverage;
      mean.filler += m.filler;
    }
    const auto n = static_cast<double>(std::max<std::size_t>(records.size(), 1));
    mean.coverage /= n;
    mean.filler /= n;
    const double eta = options_.learning_rate;
    const GeneratorProfile next{base.coverage + eta * (mean.coverage - base.coverage),
                                base.filler + eta * (mean.filler - base.filler)};
    {
      std::lock_guard lock(mu_);
      registry_[new_model] = next;
    }
    if (!options_.registry_path.empty()) save_registry();
  }

  /// Scorer conditional: reads mask-fill and classification prompts.
  double conditional(std::string_view context, std::span<const std::string> prefix, const std::string& token) const {
    if (context.find("### Hidden words") != std::string_view::npos) {
      if (context.find(prompts::kExplanationMarker) != std::string_view::npos) {
        const auto words = explanation_words(context, "\n\n" + std::string(prompts::kDocumentMarker));
        if (words.count(text::to_lower(token))) return detail::quantize(options_.recall_log_prob);
      }
      return detail::base_log_prob(options_.seed, text::to_lower(token));
    }
    if (context.find("The label of ROOT is:") != std::string_view::npos) return label_log_prob(context, prefix, token);
    return hashed_conditional(options_.seed)(context, prefix, token);
  }

  /// Mock backend options wired to this world. The world must outlive the backend.
  MockOptions mock_options(BackendBudget budget = {}, std::shared_ptr<AuditLog> audit = nullptr) {
    MockOptions opt;
    opt.seed = options_.seed;
    opt.generator = [this](const GenerationRequest& r) { return generate(r); };
    opt.conditional = [this](std::string_view c, std::span<const std::string> p, const std::string& t) {
      return conditional(c, p, t);
    };
    opt.on_finetune = [this](const std::string& m, const std::string& b, const std::vector<FinetuneRecord>& r) {
      finetune(m, b, r);
    };
    opt.budget = std::move(budget);
    opt.audit = std::move(audit);
    return opt;
  }

  void save_registry() const {
    nlohmann::json models = nlohmann::json::object();
    for (const auto& [name, p] : registry()) models[name] = p.to_json();
    io::write_file_atomic(options_.registry_path, nlohmann::json({{"models", models}}).dump(2) + "\n");
  }

 private:
  void load_registry() {
    try {
      const auto doc = nlohmann::json::parse(io::read_file(options_.registry_path));
      for (const auto& [name, p] : doc.at("models").items()) {
        if (name != options_.base_model) registry_[name] = GeneratorProfile::from_json(p);
      }
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("model registry " + options_.registry_path.string() + ": " + e.what());
    }
  }

  static std::set<std::string> explanation_words(std::string_view context, const std::string& end_marker) {
    const auto start = context.find(prompts::kExplanationMarker) + prompts::kExplanationMarker.size();
    const auto end = context.find(end_marker, start);
    const auto words = plain_words(context.substr(start, end == std::string_view::npos ? end : end - start));
    return {words.begin(), words.end()};
  }

  double label_log_prob(std::string_view context, std::span<const std::string> prefix, const std::string& token) const {
    const auto labels_line = last_section(context, prompts::kLabelsMarker, "\n");
    std::vector<std::string> labels;
    try {
      labels = nlohmann::json::parse(labels_line).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      return kZeroMassLogProb;
    }
    std::vector<double> logits(labels.size(), 0.0);
    if (context.find(prompts::kExplanationMarker) != std::string_view::npos) {
      const auto start = context.find(prompts::kExplanationMarker) + prompts::kExplanationMarker.size();
      const auto end = context.find("\n\n### Answer", start);
      const std::string_view expl = context.substr(start, end == std::string_view::npos ? end : end - start);
      const auto words = plain_words(expl);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        for (const auto& lex : lexicons()) {
          if (lex.label != labels[i]) continue;
          for (const auto& w : words) {
            if (std::find(lex.words.begin(), lex.words.end(), w) != lex.words.end()) logits[i] += options_.lexicon_weight;
          }
        }
        if (text::icontains(expl, labels[i])) logits[i] += options_.name_bonus;
      }
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    double consistent = 0.0, extended = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto units = text::split_whitespace(labels[i]);
      if (units.size() <= prefix.size() || !std::equal(prefix.begin(), prefix.end(), units.begin())) continue;
      const double mass = std::exp(logits[i] - top);
      consistent += mass;
      if (units[prefix.size()] == token) extended += mass;
    }
    if (extended <= 0.0 || consistent <= 0.0) return kZeroMassLogProb;
    return std::log(extended / consistent);
  }

  WorldOptions options_;
  mutable std::mutex mu_;
  std::map<std::string, GeneratorProfile> registry_;
};

}  // namespace narrator::sim
