#include <gtest/gtest.h>

#include <algorithm>
#include <regex>

#include "narrator/expert_iteration.hpp"
#include "narrator/simulation.hpp"
#include "test_support.hpp"

namespace narrator {
namespace {

namespace fs = std::filesystem;

ExplanationCandidate scored(std::string id, double s, double f, double b, std::size_t seq = 0) {
  ExplanationCandidate c;
  c.candidate_id = id;
  c.instance_id = "x";
  c.text = "text of " + id;
  c.scores = ScoreTriple{s, f, b};
  c.provenance.sequence = seq;
  return c;
}

std::vector<std::string> ids(const std::vector<ExplanationCandidate>& v) {
  std::vector<std::string> out;
  for (const auto& c : v) out.push_back(c.candidate_id);
  return out;
}

std::vector<ExplanationCandidate> abcd() {
  return {scored("A", 0.4, 0.5, 0.20, 0), scored("B", 0.3, 0.4, 0.30, 1), scored("C", 0.5, 0.6, 0.25, 2),
          scored("D", 0.2, 0.3, 0.50, 3)};
}

sim::SynthShape shape(std::size_t instances) {
  sim::SynthShape s;
  s.instances = instances;
  return s;
}

sim::WorldOptions world_seed(std::uint64_t seed) {
  sim::WorldOptions w;
  w.seed = seed;
  return w;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("narrator_ei_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Independent quantile: sorts and picks the ceil(p*n)-th smallest with integer arithmetic on p = k/den.
double oracle_quantile(std::vector<double> v, std::size_t num, std::size_t den) {
  std::sort(v.begin(), v.end());
  std::size_t rank = (num * v.size() + den - 1) / den;
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

TEST(Select, BalancedExample) {
  const auto r = select(abcd(), SelectionStrategy::balanced(0.5, 50));
  EXPECT_FALSE(r.empty_selection);
  EXPECT_EQ(ids(r.selected), (std::vector<std::string>{"A", "C"}));
}

TEST(Select, SingleObjectiveBrevityPicksMinimum) {
  const auto r = select(abcd(), SelectionStrategy::single(Objective::f_B, 1));
  EXPECT_EQ(ids(r.selected), (std::vector<std::string>{"A"}));
}

TEST(Select, QuotaLargerThanPoolReturnsPassingSet) {
  auto pool = abcd();
  EXPECT_EQ(select(pool, SelectionStrategy::weighted(1, 1, 1, 100)).selected.size(), 4u);
  EXPECT_EQ(ids(select(pool, SelectionStrategy::balanced(0.5, 100)).selected), (std::vector<std::string>{"A", "C"}));
}

TEST(Select, QuotaTruncatesByWeightedSum) {
  // C dominates A on f_S and f_F; A wins on f_B by less, so C ranks first.
  EXPECT_EQ(ids(select(abcd(), SelectionStrategy::balanced(0.5, 1)).selected), (std::vector<std::string>{"C"}));
}

TEST(Select, SingleObjectiveAscendingAndDescending) {
  EXPECT_EQ(ids(select(abcd(), SelectionStrategy::single(Objective::f_S, 2)).selected),
            (std::vector<std::string>{"A", "C"}));
  EXPECT_EQ(ids(select(abcd(), SelectionStrategy::single(Objective::f_B, 2)).selected),
            (std::vector<std::string>{"A", "C"}));
  EXPECT_EQ(ids(select(abcd(), SelectionStrategy::single(Objective::f_F, 3)).selected),
            (std::vector<std::string>{"A", "B", "C"}));
}

TEST(Select, TiesBrokenByProvenance) {
  std::vector<ExplanationCandidate> pool = {scored("late", 1, 1, 1, 9), scored("early", 1, 1, 1, 2),
                                            scored("mid", 1, 1, 1, 5)};
  EXPECT_EQ(ids(select(pool, SelectionStrategy::single(Objective::f_S, 2)).selected),
            (std::vector<std::string>{"early", "mid"}));
  EXPECT_EQ(ids(select(pool, SelectionStrategy::balanced(1.0, 1)).selected), (std::vector<std::string>{"early"}));
}

TEST(Select, EmptySelectionIsReportedNotThrown) {
  // f_S and f_F anti-correlated: nobody is in the top quarter of both.
  std::vector<ExplanationCandidate> pool = {scored("a", 1, 0, 0, 0), scored("b", 0, 1, 0, 1)};
  const auto r = select(pool, SelectionStrategy::balanced(0.25, 5));
  EXPECT_TRUE(r.empty_selection);
  EXPECT_TRUE(r.selected.empty());
  EXPECT_TRUE(select({}, SelectionStrategy::balanced(0.5, 5)).empty_selection);
}

TEST(Select, UnscoredCandidateIsPrecondition) {
  auto pool = abcd();
  pool[1].scores.reset();
  EXPECT_THROW(select(pool, SelectionStrategy::balanced(0.5, 5)), PreconditionError);
}

TEST(Select, BalancedMatchesExhaustiveFilter) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> coarse(0, 6);
  std::uniform_int_distribution<std::size_t> size(1, 64);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ExplanationCandidate> pool;
    const std::size_t n = size(rng);
    for (std::size_t i = 0; i < n; ++i) {
      pool.push_back(scored("c" + std::to_string(i), coarse(rng) * 0.5, coarse(rng) * 0.25, coarse(rng) * 0.1, i));
    }
    std::vector<double> s, f, b;
    for (const auto& c : pool) {
      s.push_back(c.scores->f_s);
      f.push_back(c.scores->f_f);
      b.push_back(c.scores->f_b);
    }
    const double ts = oracle_quantile(s, 1, 2), tf = oracle_quantile(f, 1, 2), tb = oracle_quantile(b, 1, 2);
    std::vector<std::string> expected;
    for (const auto& c : pool) {
      if (c.scores->f_s >= ts && c.scores->f_f >= tf && c.scores->f_b <= tb) expected.push_back(c.candidate_id);
    }
    const auto r = select(pool, SelectionStrategy::balanced(0.5, 1000));
    ASSERT_EQ(ids(r.selected), expected) << "trial " << trial;
    ASSERT_EQ(r.empty_selection, expected.empty());
  }
}

TEST(SelectionStrategy, ParseAndValidate) {
  EXPECT_EQ(SelectionStrategy::parse("balanced", 5).fraction, 0.5);
  EXPECT_EQ(SelectionStrategy::parse("balanced_top_fraction:0.25", 5).fraction, 0.25);
  const auto w = SelectionStrategy::parse("weighted_sum:1,2,0.5", 7);
  EXPECT_EQ(w.kind, SelectionStrategy::Kind::weighted_sum);
  EXPECT_EQ(w.lambdas, (std::array<double, 3>{1.0, 2.0, 0.5}));
  EXPECT_EQ(w.quota, 7u);
  EXPECT_EQ(SelectionStrategy::parse("single_objective:f_B", 1).objective, Objective::f_B);
  EXPECT_THROW(SelectionStrategy::parse("single_objective:f_X", 1), PreconditionError);
  EXPECT_THROW(SelectionStrategy::parse("balanced:0", 1), PreconditionError);
  EXPECT_THROW(SelectionStrategy::parse("balanced:1.5", 1), PreconditionError);
  EXPECT_THROW(SelectionStrategy::parse("balanced", 0), PreconditionError);
  EXPECT_THROW(SelectionStrategy::parse("weighted_sum:1,2", 1), PreconditionError);
  EXPECT_THROW(SelectionStrategy::parse("top_k", 1), PreconditionError);
}

// ---------------------------------------------------------------------------
// Prompts

std::size_t annotated_tokens(const std::string& paragraph) {
  static const std::regex tok(R"(\S\(\d+\.\d{2}\))");
  return static_cast<std::size_t>(std::distance(std::sregex_iterator(paragraph.begin(), paragraph.end(), tok),
                                                std::sregex_iterator()));
}

TEST(GenerationPrompt, TailMaskDropsLowestScores) {
  std::mt19937_64 rng(5);
  std::vector<std::string> tokens;
  std::vector<double> scores;
  for (int i = 0; i < 100; ++i) {
    tokens.push_back("t" + std::to_string(i));
    scores.push_back(static_cast<double>(i * 37 % 100) + 0.5);
  }
  const auto inst = testing::make_instance({tokens}, {}, {scores});
  PromptOptions opt;
  opt.tail_mask_fraction = 0.05;
  const auto para = generation_paragraph(inst, opt);
  EXPECT_EQ(annotated_tokens(para), 95u);

  std::vector<std::size_t> order(100);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  for (std::size_t r = 0; r < 100; ++r) {
    const bool present = para.find(" " + tokens[order[r]] + "(") != std::string::npos ||
                         para.find(": " + tokens[order[r]] + "(") != std::string::npos;
    EXPECT_EQ(present, r >= 5) << tokens[order[r]];
  }

  opt.tail_mask_fraction = 0.0;
  EXPECT_EQ(annotated_tokens(generation_paragraph(inst, opt)), 100u);
}

TEST(GenerationPrompt, TemplatesFollowScoreFlag) {
  const auto inst = load_instance_file(testing::data_dir() / "path5.json");
  const auto with = build_generation_prompt(inst, true, 0.0);
  const auto without = build_generation_prompt(inst, false, 0.0);
  EXPECT_NE(with.find("importance (saliency) score behind each word"), std::string::npos);
  EXPECT_GT(annotated_tokens(with), 0u);
  EXPECT_EQ(annotated_tokens(without), 0u);
  EXPECT_EQ(without.find("saliency) score behind"), std::string::npos);
}

TEST(GenerateCandidates, ProvenanceAndCardinality) {
  const auto inst = load_instance_file(testing::data_dir() / "path5.json");
  IterationConfig cfg;
  cfg.output_dir = "unused";
  const auto prompt = build_generation_prompt(inst, cfg.prompt);
  MockOptions opt;
  opt.table[prompt] = {"e0", "e1", "e2", "e3", "e4", "e5", "e6", "e7"};
  MockBackend mock(opt);
  auto state = IterationState::initial("gen-0");
  state.iteration = 3;
  const auto batch = generate_candidates(mock, inst, 8, state, cfg, 16);
  ASSERT_EQ(batch.candidates.size(), 8u);
  for (std::size_t j = 0; j < 8; ++j) {
    const auto& c = batch.candidates[j];
    EXPECT_EQ(c.text, "e" + std::to_string(j));
    EXPECT_EQ(c.candidate_id, inst.id() + "/it3/" + std::to_string(j));
    EXPECT_EQ(c.provenance.iteration, 3u);
    EXPECT_EQ(c.provenance.model, "gen-0");
    EXPECT_EQ(c.provenance.prompt_hash, short_hash(prompt));
    EXPECT_EQ(c.provenance.sequence, 16 + j);
    EXPECT_FALSE(c.scores.has_value());
  }
  EXPECT_THROW(generate_candidates(mock, inst, 9, state, cfg), BackendRefusal);
  EXPECT_THROW(generate_candidates(mock, inst, 0, state, cfg), PreconditionError);
}

TEST(GenerateCandidates, PromptHashTracksTailMask) {
  std::mt19937_64 rng(8);
  const auto inst = testing::random_instance(rng, {20, 8, 0.1, false});
  MockOptions echo;
  echo.generator = [](const GenerationRequest& r) { return std::vector<std::string>(r.n, "e"); };
  MockBackend mock(echo);
  IterationConfig a, b;
  a.prompt.tail_mask_fraction = 0.0;
  b.prompt.tail_mask_fraction = 0.3;
  const auto state = IterationState::initial("m");
  const auto ha = generate_candidates(mock, inst, 1, state, a).candidates[0].provenance.prompt_hash;
  const auto hb = generate_candidates(mock, inst, 1, state, b).candidates[0].provenance.prompt_hash;
  EXPECT_EQ(ha, short_hash(build_generation_prompt(inst, true, 0.0)));
  EXPECT_EQ(hb, short_hash(build_generation_prompt(inst, true, 0.3)));
  EXPECT_NE(ha, hb);
}

// ---------------------------------------------------------------------------
// Exports

std::vector<ExplanationCandidate> three_candidates(const std::vector<ExplanationInstance>& data) {
  std::vector<ExplanationCandidate> out;
  for (std::size_t i = 0; i < 3; ++i) {
    auto c = scored("k" + std::to_string(i), 1, 1, 1, i);
    c.instance_id = data[i].id();
    c.text = "ROOT is classified as it is because of word" + std::to_string(i) + ".";
    out.push_back(c);
  }
  return out;
}

TEST(Export, DistillationHasNoScores) {
  const auto data = sim::synthesize(4, {});
  const auto dir = fresh_dir("distill");
  const auto path = export_finetune_dataset(three_candidates(data), index_corpus(data), FinetuneStyle::distillation,
                                            {}, dir / "d.jsonl");
  const auto content = io::read_file(path);
  EXPECT_EQ(std::count(content.begin(), content.end(), '\n'), 3);
  static const std::regex score(R"(\S\(\d+\.\d{2}\))");
  std::istringstream in(content);
  std::string line;
  while (std::getline(in, line)) {
    const auto user = *parse_finetune_record(json::parse(line), 1).first("user");
    EXPECT_FALSE(std::regex_search(user, score)) << user.substr(0, 200);
  }
}

TEST(Export, GeneratorHasScoresAndIsByteStable) {
  const auto data = sim::synthesize(4, {});
  const auto dir = fresh_dir("gen");
  const auto cands = three_candidates(data);
  PromptOptions opt;
  export_finetune_dataset(cands, index_corpus(data), FinetuneStyle::generator, opt, dir / "a.jsonl");
  export_finetune_dataset(cands, index_corpus(data), FinetuneStyle::generator, opt, dir / "b.jsonl");
  const auto a = io::read_file(dir / "a.jsonl");
  EXPECT_EQ(a, io::read_file(dir / "b.jsonl"));
  static const std::regex score(R"(\S\(\d+\.\d{2}\))");
  for (const auto& rec : parse_finetune_text(a)) EXPECT_TRUE(std::regex_search(*rec.first("user"), score));
}

TEST(Export, UnknownInstanceAndEmptyInput) {
  const auto data = sim::synthesize(4, {});
  auto cands = three_candidates(data);
  cands[1].instance_id = "nope";
  EXPECT_THROW(finetune_records(cands, index_corpus(data), FinetuneStyle::generator, {}), ReferenceError);
  EXPECT_THROW(finetune_records({}, index_corpus(data), FinetuneStyle::generator, {}), PreconditionError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripAndTamperDetection) {
  auto s = IterationState::initial("base");
  s.iteration = 2;
  s.generator_model = "base@ft1@ft2";
  auto c = scored("q", 0.25, -1.5, 0.125, 4);
  c.provenance.model = "base@ft1";
  c.provenance.prompt_hash = "abcd";
  s.accumulated = {c};
  IterationStats st;
  st.iteration = 1;
  st.generator_model = "base@ft1";
  st.pool_size = 8;
  st.selected = 1;
  st.pool_mean = {0.5, 0.25, 0.125};
  s.score_stats = {st};
  const auto dir = fresh_dir("ckpt");
  write_checkpoint(dir / "s.json", s);
  const auto back = read_checkpoint(dir / "s.json");
  EXPECT_EQ(state_to_json(back), state_to_json(s));
  EXPECT_EQ(render_checkpoint(back), io::read_file(dir / "s.json"));

  auto doc = json::parse(io::read_file(dir / "s.json"));
  doc["state"]["iteration"] = 7;
  io::write_file_atomic(dir / "t.json", doc.dump());
  EXPECT_THROW(read_checkpoint(dir / "t.json"), SchemaError);
  io::write_file_atomic(dir / "u.json", "{not json");
  EXPECT_THROW(read_checkpoint(dir / "u.json"), SchemaError);
}

// ---------------------------------------------------------------------------
// The loop under the simulated world

/// Forwards to an inner backend, failing the Nth fine-tune submission once.
class FlakyFinetune : public LanguageModelBackend {
 public:
  FlakyFinetune(LanguageModelBackend& inner, int fail_on) : inner_(inner), fail_on_(fail_on) {}
  std::vector<std::string> generate(const GenerationRequest& r) override { return inner_.generate(r); }
  std::vector<double> token_log_probs(const LogProbQuery& q) override { return inner_.token_log_probs(q); }
  std::string submit_finetune(const fs::path& d, const std::string& b) override {
    if (++calls_ == fail_on_) throw BackendRefusal(500, "injected fine-tune failure");
    return inner_.submit_finetune(d, b);
  }

 private:
  LanguageModelBackend& inner_;
  int fail_on_;
  int calls_ = 0;
};

IterationConfig loop_config(const fs::path& dir, std::size_t iterations, std::size_t quota) {
  IterationConfig cfg;
  cfg.strategy = SelectionStrategy::balanced(0.5, quota);
  cfg.iterations = iterations;
  cfg.output_dir = dir;
  cfg.state_file = dir / "state.json";
  cfg.scoring.scoring_model = "sim-scorer";
  cfg.max_concurrent = 4;
  return cfg;
}

TEST(RunLoop, BookkeepingOnTenInstances) {
  const auto data = sim::synthesize(21, {});
  sim::SimulatedWorld world(world_seed(21));
  MockBackend mock(world.mock_options());
  const auto dir = fresh_dir("book");
  auto cfg = loop_config(dir, 1, 5);
  const auto s = run_iteration(mock, data, IterationState::initial("sim-base"), cfg);
  EXPECT_EQ(s.iteration, 1u);
  EXPECT_LE(s.accumulated.size(), 5u);
  EXPECT_GE(s.accumulated.size(), 1u);
  EXPECT_EQ(s.generator_model, "sim-base@ft1");
  ASSERT_EQ(s.score_stats.size(), 1u);
  EXPECT_EQ(s.score_stats[0].pool_size, 40u);
  EXPECT_TRUE(fs::exists(dir / "finetune_iter0.jsonl"));
  EXPECT_EQ(parse_finetune_text(io::read_file(dir / "finetune_iter0.jsonl")).size(), s.accumulated.size());
  EXPECT_EQ(state_to_json(read_checkpoint(dir / "state.json")), state_to_json(s));
}

TEST(RunLoop, MeansMatchAuditLogAndRise) {
  const auto data = sim::synthesize(33, shape(20));
  sim::SimulatedWorld world(world_seed(33));
  MockBackend mock(world.mock_options());
  const auto dir = fresh_dir("audit");
  auto cfg = loop_config(dir, 3, 50);
  cfg.strategy = SelectionStrategy::single(Objective::f_S, 50);
  cfg.audit = std::make_shared<AuditLog>(dir / "audit.jsonl");
  const auto s = run_loop(mock, data, IterationState::initial("sim-base"), cfg);
  ASSERT_EQ(s.score_stats.size(), 3u);

  std::map<std::size_t, std::pair<double, std::size_t>> from_log;
  for (const auto& e : AuditLog::read(dir / "audit.jsonl")) {
    if (e.value("event", "") != "score") continue;
    auto& [sum, n] = from_log[e.at("iteration").get<std::size_t>()];
    sum += e.at("scores").at("f_s").get<double>();
    ++n;
  }
  for (const auto& st : s.score_stats) {
    const auto [sum, n] = from_log.at(st.iteration);
    EXPECT_EQ(n, st.pool_size);
    EXPECT_NEAR(sum / static_cast<double>(n), st.pool_mean.f_s, 1e-9);
  }
  EXPECT_LT(s.score_stats[0].pool_mean.f_s, s.score_stats[1].pool_mean.f_s);
  EXPECT_LT(s.score_stats[1].pool_mean.f_s, s.score_stats[2].pool_mean.f_s);
}

TEST(RunLoop, ResumeAfterFailedFinetuneMatchesUninterruptedRun) {
  const auto data = sim::synthesize(44, {});

  const auto clean_dir = fresh_dir("clean");
  sim::SimulatedWorld clean_world(world_seed(44));
  MockBackend clean(clean_world.mock_options());
  const auto expected = run_loop(clean, data, IterationState::initial("sim-base"), loop_config(clean_dir, 3, 10));

  const auto dir = fresh_dir("flaky");
  sim::SimulatedWorld world(world_seed(44));
  MockBackend inner(world.mock_options());
  FlakyFinetune flaky(inner, 2);
  const auto cfg = loop_config(dir, 3, 10);
  EXPECT_THROW(run_loop(flaky, data, IterationState::initial("sim-base"), cfg), BackendRefusal);
  const auto saved = read_checkpoint(cfg.state_file);
  ASSERT_TRUE(saved.pending.has_value());
  EXPECT_EQ(saved.iteration, 1u);

  // Resuming retries the submission without generating or scoring again.
  std::size_t generate_calls = 0;
  MockOptions counting = world.mock_options();
  auto gen = counting.generator;
  counting.generator = [&](const GenerationRequest& r) {
    ++generate_calls;
    return gen(r);
  };
  MockBackend resumed_backend(counting);
  auto after_pending = run_iteration(resumed_backend, data, saved, cfg);
  EXPECT_EQ(generate_calls, 0u);
  EXPECT_FALSE(after_pending.pending.has_value());
  const auto resumed = run_loop(resumed_backend, data, std::move(after_pending), cfg);

  EXPECT_EQ(state_to_json(resumed).dump(), state_to_json(expected).dump());
  EXPECT_EQ(io::read_file(cfg.state_file), io::read_file(clean_dir / "state.json"));
}

TEST(RunLoop, EmptySelectionKeepsModel) {
  // "zzalpha" helps only mask filling, "zzbeta" only classification, so no
  // candidate is in the top quarter of both f_S and f_F.
  const auto data = sim::synthesize(5, shape(2));
  MockOptions opt;
  opt.generator = [](const GenerationRequest&) { return std::vector<std::string>{"zzalpha", "zzbeta"}; };
  opt.conditional = [](std::string_view ctx, std::span<const std::string>, const std::string&) {
    if (ctx.find("### Hidden words") != std::string_view::npos) {
      return ctx.find("zzalpha") != std::string_view::npos ? -0.5 : -1.0;
    }
    return ctx.find("zzbeta") != std::string_view::npos ? -0.5 : -1.0;
  };
  MockBackend mock(opt);
  const auto dir = fresh_dir("empty");
  auto cfg = loop_config(dir, 1, 5);
  cfg.candidates_per_instance = 2;
  cfg.strategy = SelectionStrategy::balanced(0.25, 5);
  const auto s = run_iteration(mock, data, IterationState::initial("g"), cfg);
  EXPECT_EQ(s.iteration, 1u);
  EXPECT_EQ(s.generator_model, "g");
  EXPECT_TRUE(s.accumulated.empty());
  ASSERT_EQ(s.score_stats.size(), 1u);
  EXPECT_TRUE(s.score_stats[0].empty_selection);
  EXPECT_FALSE(fs::exists(dir / "finetune_iter0.jsonl"));
}

TEST(RunLoop, PreconditionsAndConfig) {
  MockBackend mock;
  IterationConfig cfg;
  EXPECT_THROW(run_iteration(mock, sim::synthesize(1, {}), IterationState::initial("g"), cfg), PreconditionError);
  cfg.output_dir = fresh_dir("pre");
  EXPECT_THROW(run_iteration(mock, {}, IterationState::initial("g"), cfg), PreconditionError);
  EXPECT_THROW(run_iteration(mock, sim::synthesize(1, {}), IterationState::initial(""), cfg), PreconditionError);
}

}  // namespace
}  // namespace narrator
