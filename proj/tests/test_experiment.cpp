// Copyright 2026 The fewshot-backdoor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <atomic>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "flba/experiment.hpp"
#include "test_support.hpp"

namespace flba {
namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 5;
  c.dataset.per_class = 16;
  c.dataset.resolution = 8;
  c.embedding.widths = {4, 6};
  c.embedding.epochs = 1;
  c.embedding.batch_size = 16;
  c.trigger.iterations = 4;
  c.perturb.iterations = 4;
  c.eval.shots = 2;
  c.eval.queries = 3;
  c.eval.episodes = 3;
  c.eval.head_iterations = 20;
  return c;
}

struct Pipeline {
  ExperimentConfig cfg = tiny_config();
  DatasetSplits data = load_dataset(cfg);
  std::shared_ptr<const EmbeddingModel<double>> model = std::make_shared<const EmbeddingModel<double>>(
      pretrain_embedding<double>(data.auxiliary, pretrain_config(cfg)).model);
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

TEST(Experiment, SameSeedSameReport) {
  const auto& p = pipeline();
  const EvalReport a = run_experiment(p.model, p.data, p.cfg);
  const EvalReport b = run_experiment(p.model, p.data, p.cfg, 3);
  EXPECT_EQ(to_csv(a), to_csv(b));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.n_episodes, 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(a.rows[i].episode, i);
    EXPECT_EQ(a.rows[i].result.seed, episode_seed(p.cfg, 0, i));
    EXPECT_EQ(a.rows[i].label_changes, 0);
    EXPECT_LE(a.rows[i].max_linf, p.cfg.perturb.epsilon + 1e-15);
    EXPECT_EQ(a.rows[i].result.attack_queries, 12);
    EXPECT_EQ(a.rows[i].result.clean_queries, 15);
  }
}

TEST(Experiment, RepeatsAndEpisodeSeedsAreDistinct) {
  auto cfg = pipeline().cfg;
  cfg.eval.repeats = 2;
  cfg.eval.episodes = 2;
  EXPECT_NE(episode_seed(cfg, 0, 1), episode_seed(cfg, 1, 0));
  const EvalReport r = run_experiment(pipeline().model, pipeline().data, cfg);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[2].repeat, 1);
  EXPECT_EQ(r.rows[2].episode, 0);
}

TEST(Experiment, ComparatorAndCleanModes) {
  const auto& p = pipeline();
  for (const std::string mode : {"badnet", "blended", "clean"}) {
    auto cfg = p.cfg;
    cfg.poison.mode = mode;
    cfg.eval.episodes = 2;
    const EvalReport r = run_experiment(p.model, p.data, cfg);
    EXPECT_EQ(r.mode, mode);
    for (const auto& row : r.rows) {
      EXPECT_EQ(row.label_changes, mode == "clean" ? 0 : 4) << mode;
      if (mode == "clean") EXPECT_EQ(row.max_linf, 0.0);
    }
  }
}

TEST(Experiment, GlobalTriggerIsSharedAcrossEpisodes) {
  const auto& p = pipeline();
  auto cfg = p.cfg;
  cfg.trigger.scope = "global";
  const TriggerResult g = global_trigger(*p.model, p.data, cfg);
  const auto a = craft_episode_attack(*p.model, p.data, cfg, episode_seed(cfg, 0, 0), &g);
  const auto b = craft_episode_attack(*p.model, p.data, cfg, episode_seed(cfg, 0, 1), &g);
  EXPECT_EQ(a.trigger, g.trigger);
  EXPECT_EQ(b.trigger, g.trigger);
  const EvalReport r = run_experiment(p.model, p.data, cfg);
  for (const auto& row : r.rows) EXPECT_EQ(row.trigger_objective, g.objective);
}

TEST(Experiment, FirstAttackOverride) {
  const auto& p = pipeline();
  auto cfg = p.cfg;
  const auto attack = craft_episode_attack(*p.model, p.data, cfg, episode_seed(cfg, 0, 0));
  const EvalReport plain = run_experiment(p.model, p.data, cfg);
  const EvalReport with = run_experiment(p.model, p.data, cfg, 1, &attack);
  EXPECT_EQ(to_csv(plain), to_csv(with));
}

TEST(Experiment, EveryParadigmRuns) {
  const auto& p = pipeline();
  for (const std::string paradigm : {"cosine-head", "prototype", "inner-loop"}) {
    auto cfg = p.cfg;
    cfg.eval.paradigm = paradigm;
    cfg.eval.episodes = 1;
    const EvalReport r = run_experiment(p.model, p.data, cfg);
    EXPECT_EQ(r.paradigm, paradigm);
    EXPECT_GE(r.ba, 0.0);
    EXPECT_LE(r.ba, 1.0);
  }
}

TEST(Experiment, EpisodeErrorsCarryTheSeed) {
  const auto& p = pipeline();
  auto cfg = p.cfg;
  cfg.eval.shots = 50;
  try {
    run_experiment(p.model, p.data, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSampling);
    EXPECT_NE(e.message().find("episode seed " + hex64(episode_seed(cfg, 0, 0))), std::string::npos);
  }
}

TEST(Experiment, TriggerSizeFollowsResolution) {
  ExperimentConfig c;
  EXPECT_EQ(trigger_size(c), 6);
  c.trigger.size = 3;
  EXPECT_EQ(trigger_size(c), 3);
  const TriggerSpec t = initial_trigger(c, 1);
  EXPECT_EQ(t.row, 29);
  EXPECT_EQ(t.col, 29);
  c.trigger.placement = "top-left";
  c.trigger.init = "mid-gray";
  const TriggerSpec u = initial_trigger(c, 1);
  EXPECT_EQ(u.row, 0);
  EXPECT_EQ(u.pattern.pixels()[0], 0.5);
}

// Report ------------------------------------------------------------------------------

EvalReport hand_report() {
  EvalReport r;
  r.mode = "flba";
  r.paradigm = "cosine-head";
  for (int i = 0; i < 4; ++i) {
    EvalRow row;
    row.episode = i;
    row.result.asr = 0.25 * i;
    row.result.ba = 1.0;
    row.result.seed = static_cast<std::uint64_t>(i);
    r.rows.push_back(row);
  }
  r.aggregate();
  return r;
}

TEST(EvalReport, AggregateUsesSampleStandardDeviation) {
  const EvalReport r = hand_report();
  EXPECT_DOUBLE_EQ(r.asr, 0.375);
  EXPECT_DOUBLE_EQ(r.ba, 1.0);
  EXPECT_NEAR(r.asr_std, std::sqrt(0.3125 / 3.0), 1e-12);
  EXPECT_EQ(r.ba_std, 0.0);
  EvalReport one;
  one.rows.push_back(EvalRow{});
  one.aggregate();
  EXPECT_EQ(one.asr_std, 0.0);
}

TEST(EvalReport, CsvAndJsonLayout) {
  const EvalReport r = hand_report();
  const std::string csv = to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kEvalCsvHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("\n0,3,0000000000000003,0.75,1,"), std::string::npos);
  const auto j = to_json(r);
  EXPECT_EQ(j["n_episodes"], 4);
  EXPECT_EQ(j["per_episode"].size(), 4u);
  EXPECT_DOUBLE_EQ(j["asr"].get<double>(), 0.375);
}

TEST(Bootstrap, IntervalBracketsTheMeanAndIsDeterministic) {
  std::vector<double> v;
  Rng rng(3);
  for (int i = 0; i < 100; ++i) v.push_back(uniform01(rng));
  double mean = 0;
  for (double x : v) mean += x / 100;
  const auto [lo, hi] = bootstrap_interval(v, 0.9, 2000, 4);
  EXPECT_LT(lo, mean);
  EXPECT_GT(hi, mean);
  EXPECT_LT(hi - lo, 0.2);
  EXPECT_EQ(bootstrap_interval(v, 0.9, 2000, 4), std::make_pair(lo, hi));
  const auto [c_lo, c_hi] = bootstrap_interval({0.5, 0.5, 0.5}, 0.9, 100, 1);
  EXPECT_EQ(c_lo, 0.5);
  EXPECT_EQ(c_hi, 0.5);
  EXPECT_THROW(bootstrap_interval({}, 0.9, 10, 1), Error);
}

TEST(ParallelMap, KeepsIndexOrder) {
  for (int workers : {1, 2, 4, 16}) {
    const auto v = parallel_map<int>(37, workers, [](int i) { return i * i; });
    ASSERT_EQ(v.size(), 37u);
    for (int i = 0; i < 37; ++i) EXPECT_EQ(v[i], i * i);
  }
  EXPECT_TRUE(parallel_map<int>(0, 4, [](int i) { return i; }).empty());
}

TEST(ParallelMap, RethrowsFirstFailureInIndexOrder) {
  std::atomic<int> calls{0};
  try {
    parallel_map<int>(20, 3, [&](int i) -> int {
      ++calls;
      if (i == 7 || i == 13) throw std::runtime_error("fail " + std::to_string(i));
      return i;
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "fail 7");
  }
  EXPECT_EQ(calls.load(), 20);
}

}  // namespace
}  // namespace flba
