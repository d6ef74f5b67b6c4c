#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "narrator/expert_iteration.hpp"
#include "narrator/simulation.hpp"

namespace narrator {
namespace {

namespace fs = std::filesystem;
using namespace sim;

WorldOptions seeded(std::uint64_t seed) {
  WorldOptions w;
  w.seed = seed;
  return w;
}

TEST(Corpus, VocabulariesAreDisjoint) {
  std::set<std::string> lex;
  for (const auto& l : lexicons()) {
    EXPECT_EQ(l.words.size(), 8u);
    for (const auto& w : l.words) EXPECT_TRUE(lex.insert(w).second) << w;
  }
  EXPECT_EQ(label_names().size(), 7u);
  std::set<std::string> graph(graph_filler().begin(), graph_filler().end());
  for (const auto& w : explanation_filler()) {
    EXPECT_FALSE(graph.count(w)) << w;
    EXPECT_FALSE(lex.count(w)) << w;
  }
  for (const auto& w : graph) EXPECT_FALSE(lex.count(w)) << w;
}

TEST(Synthesize, DeterministicPerSeed) {
  const auto a = synthesize(7), b = synthesize(7), c = synthesize(8);
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(save_instance(a[i]), save_instance(b[i]));
  EXPECT_NE(save_instance(a[0]), save_instance(c[0]));
  EXPECT_EQ(a[3].id(), "syn-7-003");
}

TEST(Synthesize, PlantedWordsOutrankTheRest) {
  for (const auto& inst : synthesize(11, [] {
         SynthShape s;
         s.instances = 30;
         return s;
       }())) {
    const auto& label = inst.prediction().label;
    const auto& lex = *std::find_if(lexicons().begin(), lexicons().end(), [&](const auto& l) { return l.label == label; });
    EXPECT_NE(std::find(lex.words.begin(), lex.words.end(), inst.graph().node(0).tokens.at(0)), lex.words.end());
    for (NodeId v = 0; v < inst.graph().size(); ++v) {
      const auto& toks = inst.graph().node(v).tokens;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        const bool planted = std::find(lex.words.begin(), lex.words.end(), toks[i]) != lex.words.end();
        if (planted) {
          EXPECT_GE(inst.token_score(v, i), 3.0);
        } else {
          EXPECT_LT(inst.token_score(v, i), 3.0);
        }
      }
    }
  }
}

TEST(Synthesize, SingleNodeShape) {
  SynthShape s;
  s.instances = 1;
  s.min_nodes = s.max_nodes = 1;
  const auto one = synthesize(3, s);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].graph().size(), 1u);
  s.max_nodes = 0;
  EXPECT_THROW(synthesize(3, s), PreconditionError);
}

TEST(PromptParsing, RecoversGraphWordsAndLabel) {
  const auto inst = synthesize(5)[0];
  PromptOptions opt;
  const auto parsed = parse_generation_prompt(build_generation_prompt(inst, opt));
  EXPECT_TRUE(parsed.with_scores);
  EXPECT_EQ(parsed.label, inst.prediction().label);
  std::map<std::string, double> best;
  const auto tree = build_bfs_tree(inst, opt.hop_k);
  for (NodeId v : tree.visit_order) {
    const auto& toks = inst.graph().node(v).tokens;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const double s = std::round(inst.token_score(v, i) * 100.0) / 100.0;
      best[toks[i]] = std::max(best.count(toks[i]) ? best[toks[i]] : 0.0, s);
    }
  }
  ASSERT_EQ(parsed.words.size(), best.size());
  for (std::size_t i = 0; i < parsed.words.size(); ++i) {
    EXPECT_NEAR(parsed.words[i].second, best.at(parsed.words[i].first), 1e-9);
    if (i) {
      EXPECT_GE(parsed.words[i - 1].second, parsed.words[i].second);
    }
  }
  EXPECT_FALSE(parse_generation_prompt(build_generation_prompt(inst, false, 0.0)).with_scores);
}

TEST(World, GenerationIsPureAndShapedByProfile) {
  SimulatedWorld world(seeded(1));
  const auto inst = synthesize(2)[0];
  const auto prompt = build_generation_prompt(inst, PromptOptions{});
  const GenerationRequest req{prompt, 512, 1.0, 6, "sim-base"};
  const auto a = world.generate(req), b = world.generate(req);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 6u);
  for (const auto& e : a) EXPECT_EQ(e.rfind("ROOT is classified as " + inst.prediction().label, 0), 0u) << e;
  EXPECT_THROW(world.generate({prompt, 512, 1.0, 1, "nope"}), BackendRefusal);

  // A zero-temperature generator reproduces its profile exactly.
  WorldOptions full = seeded(1);
  full.initial = {1.0, 0.0};
  SimulatedWorld greedy(full);
  const auto e = greedy.generate({prompt, 512, 0.0, 1, "sim-base"})[0];
  const auto m = greedy.measure(prompt, e);
  EXPECT_EQ(m.coverage, 1.0);
  EXPECT_EQ(m.filler, 0.0);
}

TEST(World, FinetuneStepsTowardTrainingMeans) {
  SimulatedWorld world(seeded(1));
  const auto data = synthesize(6);
  std::vector<FinetuneRecord> records;
  double cov = 0.0, fill = 0.0;
  for (const auto& inst : data) {
    const auto prompt = build_generation_prompt(inst, PromptOptions{});
    const auto text = world.generate({prompt, 512, 1.0, 1, "sim-base"})[0];
    const auto m = world.measure(prompt, text);
    cov += m.coverage;
    fill += m.filler;
    records.push_back({{{"user", prompt}, {"assistant", text}}});
  }
  cov /= static_cast<double>(data.size());
  fill /= static_cast<double>(data.size());
  world.finetune("sim-base@ft1", "sim-base", records);
  const auto p = world.profile("sim-base@ft1");
  EXPECT_NEAR(p.coverage, 0.2 + 0.5 * (cov - 0.2), 1e-12);
  EXPECT_NEAR(p.filler, 10.0 + 0.5 * (fill - 10.0), 1e-12);
  EXPECT_THROW(world.finetune("x", "missing", records), BackendRefusal);
}

TEST(World, RegistryPersists) {
  const auto dir = fs::temp_directory_path() / "narrator_sim_registry";
  fs::remove_all(dir);
  WorldOptions w = seeded(2);
  w.registry_path = dir / "models.json";
  {
    SimulatedWorld world(w);
    world.finetune("sim-base@ft1", "sim-base", {{{{"user", "x"}, {"assistant", "y"}}}});
  }
  SimulatedWorld reloaded(w);
  EXPECT_NO_THROW(reloaded.profile("sim-base@ft1"));
  io::write_file_atomic(w.registry_path, "[]");
  EXPECT_THROW(SimulatedWorld{w}, SchemaError);
}

TEST(World, ScorerRecallsMentionedWords) {
  SimulatedWorld world(seeded(4));
  const std::string doc = "ROOT: <mask> bayesian";
  const std::string expl = "it mentions Markov chains";
  const auto with = prompts::mask_fill_prompt(doc, &expl, kMaskPlaceholder);
  const auto without = prompts::mask_fill_prompt(doc, nullptr, kMaskPlaceholder);
  EXPECT_NEAR(world.conditional(with, {}, "markov"), std::log(0.5), 1e-6);
  for (const auto& ctx : {with, without}) {
    const double lp = world.conditional(ctx, {}, "robotics");
    EXPECT_GE(lp, std::log(0.01) - 1e-6);
    EXPECT_LT(lp, std::log(0.1));
  }
  EXPECT_LT(world.conditional(without, {}, "markov"), std::log(0.1));
}

TEST(World, LabelDistributionNormalizes) {
  SimulatedWorld world(seeded(4));
  MockBackend mock(world.mock_options());
  const auto labels = label_names();
  for (const std::string expl : {"plain words only", "it uses neural networks and backpropagation",
                                 "Reinforcement Learning with reward"}) {
    const auto prompt = prompts::classification_prompt(labels, &expl);
    double total = 0.0;
    std::size_t best = 0;
    double best_lp = -1e300;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double lp = mock.log_prob({prompt, text::split_whitespace(labels[i]), "sim-scorer"});
      total += std::exp(lp);
      if (lp > best_lp) {
        best_lp = lp;
        best = i;
      }
    }
    EXPECT_NEAR(total, 1.0, 1e-9) << expl;
    if (expl.rfind("Reinforcement", 0) == 0) {
      EXPECT_EQ(labels[best], "Reinforcement Learning");
    }
  }
}

}  // namespace
}  // namespace narrator
