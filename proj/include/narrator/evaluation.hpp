#pragma once

// Corpus-level metrics: PMI-10/20/30%, Simulatability, Brevity.

#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/io.hpp"
#include "narrator/lm_backend.hpp"
#include "narrator/measures.hpp"
#include "narrator/parallel.hpp"
#include "narrator/prompts.hpp"
#include "narrator/tag_core.hpp"

namespace narrator {

struct EvalRecord {
  std::string instance_id;
  std::string method;
  std::string explanation;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

inline json eval_record_to_json(const EvalRecord& r) {
  return {{"instance_id", r.instance_id}, {"method", r.method}, {"explanation", r.explanation}};
}

/// One {instance_id, method, explanation} object per non-blank line.
inline std::vector<EvalRecord> parse_eval_records(std::string_view content) {
  std::vector<EvalRecord> out;
  std::size_t line_no = 0, start = 0;
  while (start < content.size()) {
    auto end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    const auto line = content.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (text::count_whitespace_tokens(line) == 0) continue;
    try {
      const auto j = json::parse(line);
      if (!j.is_object() || j.size() != 3 || !j.contains("instance_id") || !j.contains("method") ||
          !j.contains("explanation")) {
        throw SchemaError("records line " + std::to_string(line_no) +
                          ": expected exactly instance_id, method, explanation");
      }
      out.push_back({j.at("instance_id").get<std::string>(), j.at("method").get<std::string>(),
                     j.at("explanation").get<std::string>()});
    } catch (const json::exception& e) {
      throw SchemaError("records line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path) {
  return parse_eval_records(io::read_file(path));
}

/// Single-tau input PMI with tau = k_percent / 100.
inline double pmi_at_k(LanguageModelBackend& backend, const ExplanationInstance& instance,
                       const std::string& explanation, int k_percent, const ScoringContext& ctx) {
  if (k_percent != 10 && k_percent != 20 && k_percent != 30) {
    throw PreconditionError("k_percent must be 10, 20 or 30");
  }
  ScoringContext point = ctx;
  point.tau_dist = TauDistribution::point(k_percent / 100.0);
  return score_input_faithfulness(backend, instance, explanation, point);
}

/// Index into label_set of the scorer's choice given only the explanation. Ties go to the earlier label.
inline std::size_t simulated_choice(LanguageModelBackend& backend, const ExplanationInstance& instance,
                                    const std::string& explanation, const ScoringContext& ctx) {
  const auto& labels = instance.prediction().label_set;
  if (labels.empty()) throw PreconditionError("instance " + instance.id() + " has no label_set");
  const std::string prompt = prompts::classification_prompt(labels, &explanation);
  std::size_t best = 0;
  double best_lp = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double lp = backend.log_prob({prompt, text::split_whitespace(labels[i]), ctx.scoring_model});
    if (i == 0 || lp > best_lp) {
      best = i;
      best_lp = lp;
    }
  }
  return best;
}

using Corpus = std::map<std::string, ExplanationInstance>;

inline const ExplanationInstance& resolve(const Corpus& corpus, const std::string& id) {
  const auto it = corpus.find(id);
  if (it == corpus.end()) throw ReferenceError("unknown instance id " + id);
  return it->second;
}

inline double simulatability(LanguageModelBackend& backend, const std::vector<EvalRecord>& records,
                             const Corpus& corpus, const ScoringContext& ctx, std::size_t workers = 1) {
  if (records.empty()) throw PreconditionError("simulatability of an empty record set is undefined");
  for (const auto& r : records) resolve(corpus, r.instance_id);
  std::vector<int> hit(records.size(), 0);
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto& inst = resolve(corpus, records[i].instance_id);
    const auto choice = simulated_choice(backend, inst, records[i].explanation, ctx);
    hit[i] = inst.prediction().label_set[choice] == inst.prediction().label;
  });
  double sum = 0.0;
  for (int h : hit) sum += h;
  return sum / static_cast<double>(records.size());
}

inline double brevity_corpus(const std::vector<EvalRecord>& records, const Corpus& corpus, const ScoringContext& ctx) {
  if (records.empty()) throw PreconditionError("brevity of an empty record set is undefined");
  double sum = 0.0;
  for (const auto& r : records) sum += score_brevity(resolve(corpus, r.instance_id), r.explanation, ctx);
  return sum / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Reports

struct InstanceMetrics {
  std::string instance_id;
  double pmi_10 = 0.0;
  double pmi_20 = 0.0;
  double pmi_30 = 0.0;
  bool simulated = false;
  double brevity = 0.0;

  friend bool operator==(const InstanceMetrics&, const InstanceMetrics&) = default;
};

struct MethodMetrics {
  std::size_t count = 0;
  double pmi_10 = 0.0;
  double pmi_20 = 0.0;
  double pmi_30 = 0.0;
  double simulatability = 0.0;
  double brevity = 0.0;
  /// In record order.
  std::vector<InstanceMetrics> per_instance;

  friend bool operator==(const MethodMetrics&, const MethodMetrics&) = default;
};

struct MetricReport {
  std::size_t corpus_size = 0;
  std::string scoring_model;
  std::string template_hash;
  std::map<std::string, MethodMetrics> methods;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline MetricReport evaluate(LanguageModelBackend& backend, const std::vector<EvalRecord>& records,
                             const Corpus& corpus, const ScoringContext& ctx, std::size_t workers = 1) {
  if (records.empty()) throw PreconditionError("no records to evaluate");
  for (const auto& r : records) resolve(corpus, r.instance_id);
  std::vector<InstanceMetrics> rows(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto& r = records[i];
    const auto& inst = resolve(corpus, r.instance_id);
    auto& m = rows[i];
    m.instance_id = r.instance_id;
    m.pmi_10 = pmi_at_k(backend, inst, r.explanation, 10, ctx);
    m.pmi_20 = pmi_at_k(backend, inst, r.explanation, 20, ctx);
    m.pmi_30 = pmi_at_k(backend, inst, r.explanation, 30, ctx);
    const auto choice = simulated_choice(backend, inst, r.explanation, ctx);
    m.simulated = inst.prediction().label_set[choice] == inst.prediction().label;
    m.brevity = score_brevity(inst, r.explanation, ctx);
  });

  MetricReport report;
  report.corpus_size = records.size();
  report.scoring_model = ctx.scoring_model;
  report.template_hash = prompts::scoring_template_hash();
  for (std::size_t i = 0; i < records.size(); ++i) report.methods[records[i].method].per_instance.push_back(rows[i]);
  for (auto& [_, mm] : report.methods) {
    mm.count = mm.per_instance.size();
    for (const auto& m : mm.per_instance) {
      mm.pmi_10 += m.pmi_10;
      mm.pmi_20 += m.pmi_20;
      mm.pmi_30 += m.pmi_30;
      mm.simulatability += m.simulated ? 1.0 : 0.0;
      mm.brevity += m.brevity;
    }
    const auto n = static_cast<double>(mm.count);
    mm.pmi_10 /= n;
    mm.pmi_20 /= n;
    mm.pmi_30 /= n;
    mm.simulatability /= n;
    mm.brevity /= n;
  }
  return report;
}

inline json report_to_json(const MetricReport& r) {
  json methods = json::object();
  for (const auto& [name, m] : r.methods) {
    json rows = json::array();
    for (const auto& p : m.per_instance) {
      rows.push_back({{"instance_id", p.instance_id},
                      {"pmi_10", p.pmi_10},
                      {"pmi_20", p.pmi_20},
                      {"pmi_30", p.pmi_30},
                      {"simulated", p.simulated},
                      {"brevity", p.brevity}});
    }
    methods[name] = {{"count", m.count},
                     {"pmi_10", m.pmi_10},
                     {"pmi_20", m.pmi_20},
                     {"pmi_30", m.pmi_30},
                     {"simulatability", m.simulatability},
                     {"brevity", m.brevity},
                     {"per_instance", rows}};
  }
  return {{"corpus_size", r.corpus_size},
          {"scoring_model", r.scoring_model},
          {"template_hash", r.template_hash},
          {"methods", methods}};
}

inline MetricReport report_from_json(const json& j) {
  try {
    MetricReport r;
    r.corpus_size = j.at("corpus_size").get<std::size_t>();
    r.scoring_model = j.at("scoring_model").get<std::string>();
    r.template_hash = j.at("template_hash").get<std::string>();
    for (const auto& [name, m] : j.at("methods").items()) {
      MethodMetrics mm;
      mm.count = m.at("count").get<std::size_t>();
      mm.pmi_10 = m.at("pmi_10").get<double>();
      mm.pmi_20 = m.at("pmi_20").get<double>();
      mm.pmi_30 = m.at("pmi_30").get<double>();
      mm.simulatability = m.at("simulatability").get<double>();
      mm.brevity = m.at("brevity").get<double>();
      for (const auto& p : m.at("per_instance")) {
        mm.per_instance.push_back({p.at("instance_id").get<std::string>(), p.at("pmi_10").get<double>(),
                                   p.at("pmi_20").get<double>(), p.at("pmi_30").get<double>(),
                                   p.at("simulated").get<bool>(), p.at("brevity").get<double>()});
      }
      r.methods.emplace(name, std::move(mm));
    }
    return r;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed metrics report: ") + e.what());
  }
}

/// Methods x metrics table with direction arrows.
inline std::string render_report_table(const MetricReport& r) {
  const std::vector<std::string> headers = {"Method", "N", "Simul. (↑)", "PMI-10% (↑)", "PMI-20% (↑)", "PMI-30% (↑)",
                                            "Brevity (↓)"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, m] : r.methods) {
    rows.push_back({name, std::to_string(m.count), text::fixed(m.simulatability, 3), text::fixed(m.pmi_10, 3),
                    text::fixed(m.pmi_20, 3), text::fixed(m.pmi_30, 3), text::fixed(m.brevity, 3)});
  }
  // Display width counts code points so the arrows line up.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> w(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) {
    w[c] = width(headers[c]);
    for (const auto& row : rows) w[c] = std::max(w[c], width(row[c]));
  }
  auto emit = [&](const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string pad(w[c] - width(cells[c]), ' ');
      if (c) line += "  ";
      line += c == 0 ? cells[c] + pad : pad + cells[c];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    return line + "\n";
  };
  std::string out = emit(headers);
  std::size_t total = 0;
  for (std::size_t c = 0; c < w.size(); ++c) total += w[c] + (c ? 2 : 0);
  out += std::string(total, '-') + "\n";
  for (const auto& row : rows) out += emit(row);
  return out;
}

struct ReportFiles {
  std::filesystem::path metrics_json;
  std::filesystem::path table_txt;
};

inline ReportFiles emit_report(const MetricReport& r, const std::filesystem::path& dir) {
  ReportFiles files{dir / "metrics.json", dir / "metrics.txt"};
  io::write_file_atomic(files.metrics_json, report_to_json(r).dump(2) + "\n");
  io::write_file_atomic(files.table_txt, render_report_table(r));
  return files;
}

}  // namespace narrator
