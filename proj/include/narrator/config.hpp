#pragma once

// Run configuration: one JSON document with sections paths / backend /
// verbalizer / measures / iteration / simulation. Missing keys keep their
// defaults; unknown keys are rejected.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/expert_iteration.hpp"
#include "narrator/http_backend.hpp"
#include "narrator/io.hpp"
#include "narrator/measures.hpp"

namespace narrator {

struct RunConfig {
  struct Paths {
    std::filesystem::path corpus_dir;
    std::filesystem::path output_dir = "narrator-out";
    /// Defaults to <output_dir>/state.json.
    std::filesystem::path state_file;
  } paths;

  struct Backend {
    std::string kind = "mock";
    std::string base_url = kDefaultApiBase;
    std::string generator_model = "sim-base";
    std::string scoring_model = "sim-scorer";
    std::uint64_t seed = 0;
    std::size_t max_concurrent = 4;
    std::size_t max_retries = 3;
    std::vector<std::int64_t> retry_backoff_ms{500, 2000, 8000};
    std::int64_t request_timeout_ms = 60000;
  } backend;

  struct Verbalizer {
    std::size_t hop_k = kDefaultHops;
    std::optional<double> prune_threshold;
    double tail_mask_fraction = 0.05;
    bool with_scores = true;
  } verbalizer;

  struct Measures {
    std::vector<double> tau_grid{0.05, 0.10, 0.15, 0.20, 0.25, 0.30};
    /// Empty means uniform.
    std::vector<double> tau_weights;
    std::size_t context_budget = 0;
  } measures;

  struct Iteration {
    std::string strategy = "balanced_top_fraction:0.5";
    std::size_t quota = 50;
    std::size_t candidates_per_instance = 4;
    std::size_t iterations = 5;
    double temperature = 1.0;
    std::size_t max_tokens = 512;
  } iteration;

  /// Parameters of the simulated generator behind the mock backend.
  struct Simulation {
    double coverage = 0.2;
    double filler = 10.0;
    double learning_rate = 0.5;
  } simulation;

  std::filesystem::path state_file() const {
    return paths.state_file.empty() ? paths.output_dir / "state.json" : paths.state_file;
  }

  TauDistribution tau_distribution() const {
    if (measures.tau_weights.empty()) return TauDistribution::uniform(measures.tau_grid);
    TauDistribution d{measures.tau_grid, measures.tau_weights};
    d.validate();
    return d;
  }

  ScoringContext scoring_context() const {
    ScoringContext ctx;
    ctx.scoring_model = backend.scoring_model;
    ctx.tau_dist = tau_distribution();
    ctx.hop_k = verbalizer.hop_k;
    ctx.context_budget = measures.context_budget;
    ctx.max_concurrent = backend.max_concurrent;
    ctx.validate();
    return ctx;
  }

  PromptOptions prompt_options() const {
    return {verbalizer.with_scores, verbalizer.tail_mask_fraction, verbalizer.hop_k, verbalizer.prune_threshold};
  }

  BackendBudget budget() const {
    BackendBudget b;
    b.max_concurrent = backend.max_concurrent;
    b.max_retries = backend.max_retries;
    b.retry_backoff.clear();
    for (auto ms : backend.retry_backoff_ms) b.retry_backoff.emplace_back(ms);
    b.request_timeout = std::chrono::milliseconds(backend.request_timeout_ms);
    b.validate();
    return b;
  }

  IterationConfig iteration_config() const {
    IterationConfig c;
    c.strategy = SelectionStrategy::parse(iteration.strategy, iteration.quota);
    c.candidates_per_instance = iteration.candidates_per_instance;
    c.iterations = iteration.iterations;
    c.prompt = prompt_options();
    c.temperature = iteration.temperature;
    c.max_tokens = iteration.max_tokens;
    c.max_concurrent = backend.max_concurrent;
    c.scoring = scoring_context();
    c.output_dir = paths.output_dir;
    c.state_file = state_file();
    c.validate();
    return c;
  }

  /// Range checks of every section; path existence is checked by the commands that need the paths.
  void validate() const {
    if (backend.kind != "mock" && backend.kind != "http") {
      throw PreconditionError("backend.kind must be \"mock\" or \"http\", got \"" + backend.kind + "\"");
    }
    if (backend.generator_model.empty()) throw PreconditionError("backend.generator_model is empty");
    if (backend.request_timeout_ms <= 0) throw PreconditionError("backend.request_timeout_ms must be positive");
    for (auto ms : backend.retry_backoff_ms) {
      if (ms < 0) throw PreconditionError("backend.retry_backoff_ms entries must be non-negative");
    }
    if (verbalizer.prune_threshold && !(*verbalizer.prune_threshold >= 0.0)) {
      throw PreconditionError("verbalizer.prune_threshold must be >= 0");
    }
    if (!(iteration.temperature >= 0.0)) throw PreconditionError("iteration.temperature must be >= 0");
    if (iteration.max_tokens < 1) throw PreconditionError("iteration.max_tokens must be >= 1");
    if (!(simulation.coverage >= 0.0 && simulation.coverage <= 1.0)) {
      throw PreconditionError("simulation.coverage must lie in [0, 1]");
    }
    if (!(simulation.filler >= 0.0)) throw PreconditionError("simulation.filler must be >= 0");
    budget();
    iteration_config();
  }
};

inline json config_to_json(const RunConfig& c) {
  return {
      {"paths",
       {{"corpus_dir", c.paths.corpus_dir.string()},
        {"output_dir", c.paths.output_dir.string()},
        {"state_file", c.state_file().string()}}},
      {"backend",
       {{"kind", c.backend.kind},
        {"base_url", c.backend.base_url},
        {"generator_model", c.backend.generator_model},
        {"scoring_model", c.backend.scoring_model},
        {"seed", c.backend.seed},
        {"max_concurrent", c.backend.max_concurrent},
        {"max_retries", c.backend.max_retries},
        {"retry_backoff_ms", c.backend.retry_backoff_ms},
        {"request_timeout_ms", c.backend.request_timeout_ms}}},
      {"verbalizer",
       {{"hop_k", c.verbalizer.hop_k},
        {"prune_threshold", c.verbalizer.prune_threshold ? json(*c.verbalizer.prune_threshold) : json(nullptr)},
        {"tail_mask_fraction", c.verbalizer.tail_mask_fraction},
        {"with_scores", c.verbalizer.with_scores}}},
      {"measures",
       {{"tau_grid", c.measures.tau_grid},
        {"tau_weights", c.measures.tau_weights},
        {"context_budget", c.measures.context_budget}}},
      {"iteration",
       {{"strategy", c.iteration.strategy},
        {"quota", c.iteration.quota},
        {"candidates_per_instance", c.iteration.candidates_per_instance},
        {"iterations", c.iteration.iterations},
        {"temperature", c.iteration.temperature},
        {"max_tokens", c.iteration.max_tokens}}},
      {"simulation",
       {{"coverage", c.simulation.coverage},
        {"filler", c.simulation.filler},
        {"learning_rate", c.simulation.learning_rate}}},
  };
}

namespace detail {

template <typename T>
void read_key(const json& section, const char* key, T& into) {
  if (section.contains(key)) into = section.at(key).get<T>();
}

inline void check_keys(const json& section, const std::string& name, const std::set<std::string>& allowed) {
  if (!section.is_object()) throw SchemaError("config section \"" + name + "\" must be an object");
  for (const auto& [k, _] : section.items()) {
    if (!allowed.count(k)) throw SchemaError("unknown config key \"" + name + "." + k + "\"");
  }
}

}  // namespace detail

/// Overlays `doc` on `base`.
inline RunConfig merge_config(RunConfig c, const json& doc) {
  if (!doc.is_object()) throw SchemaError("config must be a JSON object");
  try {
    for (const auto& [section, body] : doc.items()) {
      if (section == "paths") {
        detail::check_keys(body, section, {"corpus_dir", "output_dir", "state_file"});
        if (body.contains("corpus_dir")) c.paths.corpus_dir = body.at("corpus_dir").get<std::string>();
        if (body.contains("output_dir")) c.paths.output_dir = body.at("output_dir").get<std::string>();
        if (body.contains("state_file")) c.paths.state_file = body.at("state_file").get<std::string>();
      } else if (section == "backend") {
        detail::check_keys(body, section,
                           {"kind", "base_url", "generator_model", "scoring_model", "seed", "max_concurrent",
                            "max_retries", "retry_backoff_ms", "request_timeout_ms"});
        detail::read_key(body, "kind", c.backend.kind);
        detail::read_key(body, "base_url", c.backend.base_url);
        detail::read_key(body, "generator_model", c.backend.generator_model);
        detail::read_key(body, "scoring_model", c.backend.scoring_model);
        detail::read_key(body, "seed", c.backend.seed);
        detail::read_key(body, "max_concurrent", c.backend.max_concurrent);
        detail::read_key(body, "max_retries", c.backend.max_retries);
        detail::read_key(body, "retry_backoff_ms", c.backend.retry_backoff_ms);
        detail::read_key(body, "request_timeout_ms", c.backend.request_timeout_ms);
      } else if (section == "verbalizer") {
        detail::check_keys(body, section, {"hop_k", "prune_threshold", "tail_mask_fraction", "with_scores"});
        detail::read_key(body, "hop_k", c.verbalizer.hop_k);
        if (body.contains("prune_threshold")) {
          const auto& t = body.at("prune_threshold");
          c.verbalizer.prune_threshold = t.is_null() ? std::nullopt : std::optional<double>(t.get<double>());
        }
        detail::read_key(body, "tail_mask_fraction", c.verbalizer.tail_mask_fraction);
        detail::read_key(body, "with_scores", c.verbalizer.with_scores);
      } else if (section == "measures") {
        detail::check_keys(body, section, {"tau_grid", "tau_weights", "context_budget"});
        detail::read_key(body, "tau_grid", c.measures.tau_grid);
        detail::read_key(body, "tau_weights", c.measures.tau_weights);
        detail::read_key(body, "context_budget", c.measures.context_budget);
      } else if (section == "iteration") {
        detail::check_keys(body, section,
                           {"strategy", "quota", "candidates_per_instance", "iterations", "temperature", "max_tokens"});
        detail::read_key(body, "strategy", c.iteration.strategy);
        detail::read_key(body, "quota", c.iteration.quota);
        detail::read_key(body, "candidates_per_instance", c.iteration.candidates_per_instance);
        detail::read_key(body, "iterations", c.iteration.iterations);
        detail::read_key(body, "temperature", c.iteration.temperature);
        detail::read_key(body, "max_tokens", c.iteration.max_tokens);
      } else if (section == "simulation") {
        detail::check_keys(body, section, {"coverage", "filler", "learning_rate"});
        detail::read_key(body, "coverage", c.simulation.coverage);
        detail::read_key(body, "filler", c.simulation.filler);
        detail::read_key(body, "learning_rate", c.simulation.learning_rate);
      } else {
        throw SchemaError("unknown config section \"" + section + "\"");
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return merge_config(RunConfig{}, doc);
}

/// Applies "section.key=value"; the value is parsed as JSON when possible, else taken as a string.
inline RunConfig apply_override(RunConfig c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw PreconditionError("override must look like section.key=value: " + std::string(assignment));
  }
  const std::string section(assignment.substr(0, dot));
  const std::string key(assignment.substr(dot + 1, eq - dot - 1));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  return merge_config(std::move(c), {{section, {{key, value}}}});
}

}  // namespace narrator
