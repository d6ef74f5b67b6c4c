#pragma once

// Command-line front end. tools/narrator.cpp only forwards argv here so tests
// can drive every command in-process.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "narrator/config.hpp"
#include "narrator/evaluation.hpp"
#include "narrator/expert_iteration.hpp"
#include "narrator/http_backend.hpp"
#include "narrator/mock_backend.hpp"
#include "narrator/simulation.hpp"
#include "narrator/tag_core.hpp"
#include "narrator/verbalizer.hpp"

namespace narrator::app {

namespace fs = std::filesystem;

/// Bad invocation: exit status 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr const char* kRegistryFile = "mock_models.json";
inline constexpr const char* kAuditFile = "audit.jsonl";
inline constexpr const char* kResolvedConfigFile = "resolved_config.json";

struct GlobalOptions {
  std::string config_path;
  std::string backend;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  bool dry_run = false;
  std::vector<std::string> overrides;
};

inline RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  for (const auto& o : g.overrides) c = apply_override(std::move(c), o);
  if (!g.backend.empty()) c.backend.kind = g.backend;
  if (g.seed) c.backend.seed = *g.seed;
  c.validate();
  return c;
}

/// The backend plus whatever it depends on.
struct BackendBundle {
  std::unique_ptr<sim::SimulatedWorld> world;
  std::unique_ptr<LanguageModelBackend> backend;
  std::shared_ptr<AuditLog> audit;
};

inline BackendBundle make_backend(const RunConfig& c) {
  BackendBundle b;
  b.audit = std::make_shared<AuditLog>(c.paths.output_dir / kAuditFile);
  if (c.backend.kind == "mock") {
    sim::WorldOptions w;
    w.seed = c.backend.seed;
    w.base_model = c.backend.generator_model;
    w.initial = {c.simulation.coverage, c.simulation.filler};
    w.learning_rate = c.simulation.learning_rate;
    w.registry_path = c.paths.output_dir / kRegistryFile;
    b.world = std::make_unique<sim::SimulatedWorld>(w);
    b.backend = std::make_unique<MockBackend>(b.world->mock_options(c.budget(), b.audit));
  } else {
    HttpOptions h;
    h.base_url = c.backend.base_url;
    h.budget = c.budget();
    h.audit = b.audit;
    h.apply_environment();
    b.backend = std::make_unique<HttpBackend>(h);
  }
  return b;
}

/// Instances from every *.json file in `dir`, ordered by file name.
inline std::vector<ExplanationInstance> load_corpus_dir(const fs::path& dir) {
  if (dir.empty()) throw UsageError("paths.corpus_dir is not set");
  if (!fs::is_directory(dir)) throw PreconditionError("corpus directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ExplanationInstance> out;
  std::set<std::string> ids;
  for (const auto& f : files) {
    try {
      out.push_back(load_instance_file(f));
    } catch (const Error& e) {
      throw SchemaError(f.string() + ": " + e.what());
    }
    if (!ids.insert(out.back().id()).second) throw SchemaError("duplicate instance id " + out.back().id());
  }
  if (out.empty()) throw PreconditionError("corpus directory " + dir.string() + " holds no instances");
  return out;
}

inline void write_resolved_config(const RunConfig& c) {
  io::write_file_atomic(c.paths.output_dir / kResolvedConfigFile, config_to_json(c).dump(2) + "\n");
}

inline void print_plan(std::ostream& out, const std::string& command, const RunConfig& c, const json& plan) {
  out << json({{"command", command}, {"config", config_to_json(c)}, {"plan", plan}}).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Commands

struct VerbalizeArgs {
  std::vector<std::string> files;
  bool plain = false;
  std::string out_dir;
};

inline int cmd_verbalize(const GlobalOptions& g, const VerbalizeArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve_config(g);
  const fs::path dir = a.out_dir.empty() ? c.paths.output_dir / "paragraphs" : fs::path(a.out_dir);
  if (g.dry_run) {
    print_plan(out, "verbalize", c, {{"files", a.files}, {"out_dir", dir.string()}, {"with_scores", !a.plain}});
    return 0;
  }
  if (a.files.empty()) return 0;
  std::vector<std::string> failures;
  for (const auto& f : a.files) {
    try {
      const auto inst = load_instance_file(f);
      BfsTree tree = build_bfs_tree(inst, c.verbalizer.hop_k);
      if (c.verbalizer.prune_threshold) tree = prune(tree, inst, *c.verbalizer.prune_threshold);
      const auto para = render_paragraph(tree, inst, !a.plain);
      const fs::path target = dir / (inst.id() + ".txt");
      io::write_file_atomic(target, para.text + "\n");
      out << target.string() << "\n";
    } catch (const Error& e) {
      failures.push_back(f + ": " + e.what());
    }
  }
  write_resolved_config(c);
  if (!failures.empty()) {
    err << failures.size() << " of " << a.files.size() << " instance(s) failed:\n";
    for (const auto& f : failures) err << "  " << f << "\n";
    return 1;
  }
  return 0;
}

struct ScoreArgs {
  std::vector<std::string> instances;
  std::vector<std::string> explanations;
  std::string out_file;
};

inline int cmd_score(const GlobalOptions& g, const ScoreArgs& a, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(g);
  if (a.instances.size() != a.explanations.size()) {
    throw UsageError("--instance and --explanation must be given the same number of times");
  }
  for (const auto& f : a.instances) {
    if (!fs::exists(f)) throw UsageError("instance file not found: " + f);
  }
  for (const auto& f : a.explanations) {
    if (!fs::exists(f)) throw UsageError("explanation file not found: " + f);
  }
  const fs::path target = a.out_file.empty() ? c.paths.output_dir / "scores.jsonl" : fs::path(a.out_file);
  if (g.dry_run) {
    print_plan(out, "score", c, {{"pairs", a.instances.size()}, {"out_file", target.string()}});
    return 0;
  }

  std::set<std::pair<std::string, std::string>> done;
  if (g.resume && fs::exists(target)) {
    std::ifstream in(target);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      done.insert({j.at("instance_id").get<std::string>(), j.at("explanation_sha256").get<std::string>()});
    }
  } else {
    io::write_file_atomic(target, "");
  }
  write_resolved_config(c);

  auto bundle = make_backend(c);
  const auto ctx = c.scoring_context();
  std::ofstream sink(target, std::ios::app | std::ios::binary);
  std::size_t scored = 0, skipped = 0;
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    const auto inst = load_instance_file(a.instances[i]);
    std::string explanation = io::read_file(a.explanations[i]);
    while (!explanation.empty() && (explanation.back() == '\n' || explanation.back() == '\r')) explanation.pop_back();
    const std::string digest = sha256_hex(explanation);
    if (done.count({inst.id(), digest})) {
      ++skipped;
      continue;
    }
    const auto t = score_all(*bundle.backend, inst, explanation, ctx);
    const json row = {{"instance_id", inst.id()},
                      {"explanation_file", fs::path(a.explanations[i]).filename().string()},
                      {"explanation_sha256", digest},
                      {"f_s", t.f_s},
                      {"f_f", t.f_f},
                      {"f_b", t.f_b},
                      {"scoring_model", ctx.scoring_model},
                      {"template_hash", prompts::scoring_template_hash()}};
    sink << row.dump() << "\n";
    sink.flush();
    done.insert({inst.id(), digest});
    ++scored;
  }
  out << "scored " << scored << ", skipped " << skipped << " -> " << target.string() << "\n";
  return 0;
}

inline void print_stats(std::ostream& out, const IterationState& s) {
  out << "iter  model                               pool  sel   mean f_S   mean f_F   mean f_B\n";
  for (const auto& st : s.score_stats) {
    char line[256];
    std::snprintf(line, sizeof line, "%4zu  %-34s %5zu %4zu %10.4f %10.4f %10.4f\n", st.iteration,
                  st.generator_model.c_str(), st.pool_size, st.selected, st.pool_mean.f_s, st.pool_mean.f_f,
                  st.pool_mean.f_b);
    out << line;
  }
  out << "generator: " << s.generator_model << ", accumulated: " << s.accumulated.size() << "\n";
}

inline int cmd_iterate(const GlobalOptions& g, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(g);
  const auto dataset = load_corpus_dir(c.paths.corpus_dir);
  const fs::path state_path = c.state_file();
  const bool have_state = fs::exists(state_path);
  if (g.dry_run) {
    print_plan(out, "iterate", c,
               {{"instances", dataset.size()},
                {"iterations", c.iteration.iterations},
                {"resume_from", g.resume && have_state ? json(state_path.string()) : json(nullptr)}});
    return 0;
  }
  if (have_state && !g.resume) {
    throw UsageError("state file " + state_path.string() + " already exists; pass --resume to continue it");
  }
  if (!g.resume) fs::remove(c.paths.output_dir / kRegistryFile);
  write_resolved_config(c);

  auto bundle = make_backend(c);
  IterationConfig cfg = c.iteration_config();
  cfg.audit = bundle.audit;
  IterationState state = g.resume && have_state ? read_checkpoint(state_path) : IterationState::initial(c.backend.generator_model);
  state = run_loop(*bundle.backend, dataset, std::move(state), cfg);
  write_checkpoint(state_path, state);
  print_stats(out, state);
  return 0;
}

struct ExportArgs {
  std::string out_file;
};

inline int cmd_export_distill(const GlobalOptions& g, const ExportArgs& a, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(g);
  const fs::path target = a.out_file.empty() ? c.paths.output_dir / "distill.jsonl" : fs::path(a.out_file);
  if (g.dry_run) {
    print_plan(out, "export-distill", c, {{"state_file", c.state_file().string()}, {"out_file", target.string()}});
    return 0;
  }
  const auto dataset = load_corpus_dir(c.paths.corpus_dir);
  const auto state = read_checkpoint(c.state_file());
  export_finetune_dataset(state.accumulated, index_corpus(dataset), FinetuneStyle::distillation, c.prompt_options(),
                          target);
  write_resolved_config(c);
  out << "exported " << state.accumulated.size() << " records -> " << target.string() << "\n";
  return 0;
}

struct EvaluateArgs {
  std::string records;
  std::string out_dir;
};

inline int cmd_evaluate(const GlobalOptions& g, const EvaluateArgs& a, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(g);
  if (!fs::exists(a.records)) throw UsageError("records file not found: " + a.records);
  const fs::path dir = a.out_dir.empty() ? c.paths.output_dir / "report" : fs::path(a.out_dir);
  const auto records = read_eval_records(a.records);
  const auto dataset = load_corpus_dir(c.paths.corpus_dir);
  Corpus corpus;
  for (const auto& inst : dataset) corpus.emplace(inst.id(), inst);
  for (const auto& r : records) resolve(corpus, r.instance_id);
  if (g.dry_run) {
    print_plan(out, "evaluate", c, {{"records", records.size()}, {"out_dir", dir.string()}});
    return 0;
  }
  write_resolved_config(c);
  auto bundle = make_backend(c);
  const auto report = evaluate(*bundle.backend, records, corpus, c.scoring_context(), c.backend.max_concurrent);
  const auto files = emit_report(report, dir);
  out << render_report_table(report);
  out << "-> " << files.metrics_json.string() << "\n";
  return 0;
}

struct SynthArgs {
  std::size_t count = 10;
  std::string out_dir;
};

inline int cmd_synth(const GlobalOptions& g, const SynthArgs& a, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(g);
  const fs::path dir = a.out_dir.empty() ? c.paths.corpus_dir : fs::path(a.out_dir);
  if (dir.empty()) throw UsageError("synth needs --out or paths.corpus_dir");
  if (g.dry_run) {
    print_plan(out, "synth", c, {{"count", a.count}, {"out_dir", dir.string()}});
    return 0;
  }
  sim::SynthShape shape;
  shape.instances = a.count;
  for (const auto& inst : sim::synthesize(c.backend.seed, shape)) save_instance_file(inst, dir / (inst.id() + ".json"));
  out << "wrote " << a.count << " instances to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App cli("Explanations for text-attributed graph classifiers: verbalize, score, iterate, evaluate.", "narrator");
  cli.fallthrough();
  cli.require_subcommand(1);

  GlobalOptions g;
  std::uint64_t seed = 0;
  cli.add_option("--config", g.config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
  cli.add_option("--backend", g.backend, "Backend kind")->check(CLI::IsMember({"mock", "http"}));
  auto* seed_opt = cli.add_option("--seed", seed, "Seed for the mock backend and synthetic data");
  cli.add_flag("--resume", g.resume, "Continue from existing state or partial output");
  cli.add_flag("--dry-run", g.dry_run, "Validate and print the resolved plan without backend calls");
  cli.add_option("--set", g.overrides, "Config override section.key=value (repeatable)")->allow_extra_args(false);

  VerbalizeArgs va;
  auto* verbalize = cli.add_subcommand("verbalize", "Render Saliency Paragraphs for instance files");
  verbalize->add_option("files", va.files, "Instance files");
  verbalize->add_flag("--plain", va.plain, "Omit saliency scores");
  verbalize->add_option("--out", va.out_dir, "Output directory (default <output_dir>/paragraphs)");

  ScoreArgs sa;
  auto* score = cli.add_subcommand("score", "Score explanations (f_S, f_F, f_B)");
  score->add_option("--instance", sa.instances, "Instance file (repeat, paired with --explanation)");
  score->add_option("--explanation", sa.explanations, "Explanation text file (repeat)");
  score->add_option("--out", sa.out_file, "Output file (default <output_dir>/scores.jsonl)");

  auto* iterate = cli.add_subcommand("iterate", "Run the expert-iteration loop");

  EvaluateArgs ea;
  auto* evaluate_cmd = cli.add_subcommand("evaluate", "Compute PMI-k, Simulatability and Brevity for records");
  evaluate_cmd->add_option("--records", ea.records, "Records file, one {instance_id, method, explanation} per line")
      ->required();
  evaluate_cmd->add_option("--out", ea.out_dir, "Report directory (default <output_dir>/report)");

  ExportArgs xa;
  auto* export_cmd = cli.add_subcommand("export-distill", "Export accumulated explanations for student fine-tuning");
  export_cmd->add_option("--out", xa.out_file, "Output file (default <output_dir>/distill.jsonl)");

  SynthArgs ya;
  auto* synth = cli.add_subcommand("synth", "Write a synthetic corpus");
  synth->add_option("--count", ya.count, "Number of instances")->check(CLI::PositiveNumber);
  synth->add_option("--out", ya.out_dir, "Output directory (default paths.corpus_dir)");

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  if (!args.empty()) args.pop_back();  // program name
  try {
    cli.parse(args);
  } catch (const CLI::ParseError& e) {
    const int rc = cli.exit(e, out, err);
    return rc == 0 ? 0 : 2;
  }
  if (seed_opt->count()) g.seed = seed;

  try {
    if (verbalize->parsed()) return cmd_verbalize(g, va, out, err);
    if (score->parsed()) return cmd_score(g, sa, out, err);
    if (iterate->parsed()) return cmd_iterate(g, out, err);
    if (evaluate_cmd->parsed()) return cmd_evaluate(g, ea, out, err);
    if (export_cmd->parsed()) return cmd_export_distill(g, xa, out, err);
    if (synth->parsed()) return cmd_synth(g, ya, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace narrator::app
