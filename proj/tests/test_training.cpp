#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_support.hpp"
#include "tsg/training.hpp"

using namespace tsg;

namespace {

DatasetSplit toy_split(const std::string& name, int count, std::uint64_t seed,
                       int frames = 8) {
  Rng rng = derive_rng({seed});
  DatasetSplit split;
  split.name = name;
  for (int i = 0; i < count; ++i) {
    split.samples.push_back(
        fixtures::random_sample(name + std::to_string(i), frames, 5, 3, 6, rng));
  }
  return split;
}

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.batch_size = 2;
  c.epochs = 1;
  c.embed_dim = 6;
  c.hidden_dim = 8;
  c.mlp_hidden = 7;
  return c;
}

bool same_parameters(const nn::ParameterSet& a, const nn::ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (int i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(TrainConfig, ValidatesFields) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.selection_metric = "accuracy";
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weights.inter = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfig, KeyValueRoundTripAndOverride) {
  TrainConfig c;
  c.apply(KeyValueConfig::parse("epochs = 7\nlambda2 = 0.5\nselection_metric = R1@0.5\n"));
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.weights.inter, 0.5);
  TrainConfig back;
  back.apply(c.to_kv());
  EXPECT_EQ(back.to_kv().values(), c.to_kv().values());
  EXPECT_THROW(c.apply(KeyValueConfig::parse("epoch = 3\n")), ConfigError);
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  nn::Gradients g = {nn::Mat::Constant(2, 2, 3.0)};  // norm 6
  EXPECT_DOUBLE_EQ(clip_gradients(g, 3.0), 6.0);
  EXPECT_NEAR(std::sqrt(nn::squared_norm(g)), 3.0, 1e-12);
  nn::Gradients small = {nn::Mat::Constant(1, 1, 0.5)};
  clip_gradients(small, 3.0);
  EXPECT_EQ(small[0](0, 0), 0.5);
}

TEST(Optimizer, FirstAdamStepMovesByLearningRate) {
  nn::ParameterSet params;
  params.add("w", 1, 2);
  params[0] << 1.0, -1.0;
  AdamState state;
  TrainConfig c;
  const nn::Gradients g = {(nn::Mat(1, 2) << 0.3, -7.0).finished()};
  adam_step(params, g, state, c);
  // Bias-corrected first step is lr * sign(g) up to epsilon.
  EXPECT_NEAR(params[0](0, 0), 1.0 - c.learning_rate, 1e-9);
  EXPECT_NEAR(params[0](0, 1), -1.0 + c.learning_rate, 1e-9);
  EXPECT_EQ(state.t, 1);
}

TEST(TrainEpoch, BaselineUpdatesParametersWithoutPseudoPasses) {
  const auto split = toy_split("training", 4, 1);
  TrainConfig c = tiny_train_config();
  c.weights = {0, 0, 0};
  GroundingModel model(c.model_config(6, 5), 1);
  const nn::ParameterSet before = model.parameters();
  TrainState state = initial_state(model);
  const auto m = train_epoch(model, split, c, state);
  EXPECT_FALSE(same_parameters(before, model.parameters()));
  EXPECT_EQ(m.counters.pseudo_passes, 0);
  EXPECT_EQ(m.counters.original_passes, 4);
  EXPECT_EQ(m.batches, 2);
  EXPECT_EQ(state.step, 2);
}

TEST(TrainEpoch, FullFrameworkRunsPseudoBranch) {
  const auto split = toy_split("training", 4, 2);
  TrainConfig c = tiny_train_config();
  GroundingModel model(c.model_config(6, 5), 2);
  TrainState state = initial_state(model);
  const auto m = train_epoch(model, split, c, state);
  EXPECT_EQ(m.counters.pseudo_passes, 4);
  EXPECT_GT(m.l_intra, 0.0);
}

TEST(TrainEpoch, DeterministicAcrossRunsAndThreadCounts) {
  const auto split = toy_split("training", 6, 3);
  TrainConfig c = tiny_train_config();
  c.batch_size = 3;
  std::vector<nn::ParameterSet> finals;
  for (int threads : {1, 1, 3}) {
    c.threads = threads;
    GroundingModel model(c.model_config(6, 5), 3);
    TrainState state = initial_state(model);
    for (int e = 0; e < 2; ++e) train_epoch(model, split, c, state);
    finals.push_back(model.parameters());
  }
  EXPECT_TRUE(same_parameters(finals[0], finals[1]));
  EXPECT_TRUE(same_parameters(finals[0], finals[2]));
}

TEST(TrainEpoch, OverfitsTwoSamples) {
  const auto split = toy_split("training", 2, 4, 10);
  TrainConfig c = tiny_train_config();
  c.hidden_dim = 16;
  c.mlp_hidden = 16;
  c.learning_rate = 1e-2;
  GroundingModel model(c.model_config(6, 5), 4);
  TrainState state = initial_state(model);
  EpochMetrics last;
  for (int e = 0; e < 200; ++e) last = train_epoch(model, split, c, state);
  EXPECT_LT(last.l_g, 0.1);
}

TEST(TrainEpoch, StepLogHoldsExactlyTheEnabledTerms) {
  const std::vector<LossWeights> combos = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                           {1, 0, 1}, {1, 1, 0}, {1, 1, 1}};
  const auto split = toy_split("training", 2, 5);
  for (const auto& w : combos) {
    TrainConfig c = tiny_train_config();
    c.weights = w;
    GroundingModel model(c.model_config(6, 5), 5);
    TrainState state = initial_state(model);
    std::vector<nlohmann::ordered_json> lines;
    train_epoch(model, split, c, state, [&](const auto& j) { lines.push_back(j); });
    ASSERT_EQ(lines.size(), 1u);
    const auto& j = lines[0];
    EXPECT_TRUE(j.contains("l_g"));
    EXPECT_TRUE(j.contains("total"));
    EXPECT_EQ(j.contains("l_intra"), w.intra > 0);
    EXPECT_EQ(j.contains("l_inter"), w.inter > 0);
    EXPECT_EQ(j.contains("l_d"), w.order > 0);
    std::set<std::string> expected = {"l_g"};
    if (w.intra > 0) expected.insert("l_intra");
    if (w.inter > 0) expected.insert("l_inter");
    if (w.order > 0) expected.insert("l_d");
    const auto terms = enabled_terms(w);
    EXPECT_EQ(std::set<std::string>(terms.begin(), terms.end()), expected);
  }
}

TEST(Triplets, RegenerationFollowsUniformInsertion) {
  auto sample = fixtures::make_sample("v", FeatureMatrix::Zero(12, 2), 4, 6, {1});
  DatasetSplit split;
  split.samples.push_back(sample);
  const double candidates =
      static_cast<double>(enumerate_insertion_points(12, sample.span).size());
  const int epochs = 600;
  int changed = 0;
  int previous = -1;
  for (int e = 0; e < epochs; ++e) {
    const int offset = make_epoch_triplets(split, 11, e)[0].insertion_offset;
    if (e > 0 && offset != previous) ++changed;
    previous = offset;
  }
  const double n = epochs - 1;
  const double p = 1.0 - 1.0 / candidates;
  const double sigma = std::sqrt(n * p * (1.0 - p));
  EXPECT_NEAR(changed, n * p, 4.0 * sigma);
}

TEST(Triplets, EpochOrderIsAPermutation) {
  const auto order = epoch_order(50, 7, 3);
  std::set<int> seen(order.begin(), order.end());
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_EQ(*seen.begin(), 0);
  EXPECT_EQ(*seen.rbegin(), 49);
  EXPECT_NE(epoch_order(50, 7, 4), order);
}

TEST(Fit, ZeroEpochsReturnsInitialModel) {
  const auto training = toy_split("training", 4, 6);
  const auto val = toy_split("val", 2, 7);
  TrainConfig c = tiny_train_config();
  c.epochs = 0;
  GroundingModel model(c.model_config(6, 5), 6);
  const nn::ParameterSet before = model.parameters();
  TrainState state = initial_state(model);
  const auto result = fit(model, Vocabulary(), training, val, c, state);
  EXPECT_TRUE(result.history.empty());
  EXPECT_TRUE(same_parameters(before, model.parameters()));
}

TEST(Fit, EmptyValSplitIsAnError) {
  const auto training = toy_split("training", 4, 6);
  DatasetSplit val;
  TrainConfig c = tiny_train_config();
  GroundingModel model(c.model_config(6, 5), 6);
  TrainState state = initial_state(model);
  EXPECT_THROW(fit(model, Vocabulary(), training, val, c, state), ValidationError);
}

TEST(Fit, BestEpochIsTheEarliestMaximumOfHistory) {
  const auto training = toy_split("training", 6, 8);
  const auto val = toy_split("val", 4, 9);
  TrainConfig c = tiny_train_config();
  c.epochs = 5;
  c.learning_rate = 5e-3;
  GroundingModel model(c.model_config(6, 5), 8);
  TrainState state = initial_state(model);
  const auto result = fit(model, Vocabulary(), training, val, c, state);
  ASSERT_EQ(result.history.size(), 5u);
  int argmax = -1;
  double best = -1.0;
  for (const auto& m : result.history) {
    const double v = m.validation->miou;
    if (v > best) {
      best = v;
      argmax = m.epoch;
    }
  }
  EXPECT_EQ(result.best_epoch, argmax);
  EXPECT_EQ(result.best_metric, best);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  fixtures::TempDir dir("ckpt");
  TrainConfig c = tiny_train_config();
  c.weights = {0.5, 0, 2};
  GroundingModel model(c.model_config(6, 5), 10);
  const auto split = toy_split("training", 4, 10);
  TrainState state = initial_state(model);
  train_epoch(model, split, c, state);
  const Vocabulary vocab({"a", "b", "c", "d", "e"});
  save_checkpoint(dir / "c.bin", model, vocab, &c, &state);
  const auto ck = load_checkpoint(dir / "c.bin");
  EXPECT_TRUE(same_parameters(ck.parameters, model.parameters()));
  EXPECT_EQ(ck.vocabulary.tokens(), vocab.tokens());
  EXPECT_EQ(ck.model_config.hidden_dim, 8);
  ASSERT_TRUE(ck.train_config && ck.state);
  EXPECT_EQ(ck.train_config->to_kv().values(), c.to_kv().values());
  EXPECT_EQ(ck.state->step, state.step);
  EXPECT_EQ(ck.state->adam.t, state.adam.t);
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    EXPECT_EQ(ck.state->adam.m[i], state.adam.m[i]);
    EXPECT_EQ(ck.state->adam.v[i], state.adam.v[i]);
  }
}

TEST(Checkpoint, TruncatedFileIsAnIntegrityError) {
  fixtures::TempDir dir("ckpt_bad");
  GroundingModel model(fixtures::tiny_config(), 11);
  save_checkpoint(dir / "c.bin", model, Vocabulary());
  const auto size = std::filesystem::file_size(dir / "c.bin");
  std::filesystem::resize_file(dir / "c.bin", size - 9);
  EXPECT_THROW(load_checkpoint(dir / "c.bin"), IntegrityError);
  {
    std::ofstream out(dir / "junk.bin", std::ios::binary);
    out << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), IntegrityError);
}

TEST(Fit, ResumeReproducesUninterruptedRun) {
  const auto training = toy_split("training", 6, 12);
  const auto val = toy_split("val", 3, 13);
  TrainConfig c = tiny_train_config();
  c.epochs = 3;
  const Vocabulary vocab;

  fixtures::TempDir full_dir("full");
  GroundingModel full(c.model_config(6, 5), 12);
  TrainState full_state = initial_state(full);
  const auto full_result = fit(full, vocab, training, val, c, full_state, full_dir.path());

  fixtures::TempDir part_dir("part");
  TrainConfig first = c;
  first.epochs = 2;
  GroundingModel part(c.model_config(6, 5), 12);
  TrainState part_state = initial_state(part);
  fit(part, vocab, training, val, first, part_state, part_dir.path());

  const auto ck = load_checkpoint(part_dir / "checkpoint_last.bin");
  ASSERT_TRUE(ck.state);
  GroundingModel resumed(ck.model_config, ck.parameters);
  TrainState resumed_state = *ck.state;
  const auto resumed_result =
      fit(resumed, vocab, training, val, c, resumed_state, part_dir.path());

  EXPECT_TRUE(same_parameters(full.parameters(), resumed.parameters()));
  EXPECT_EQ(resumed_state.step, full_state.step);
  EXPECT_EQ(resumed_result.best_epoch, full_result.best_epoch);
  EXPECT_EQ(lines_of(full_dir / "train_log.jsonl"), lines_of(part_dir / "train_log.jsonl"));
}

TEST(TrainEpoch, NonFiniteLossNamesTheBatch) {
  const auto split = toy_split("training", 2, 14);
  TrainConfig c = tiny_train_config();
  GroundingModel model(c.model_config(6, 5), 14);
  auto& params = model.parameters();
  params[params.find("csmm.fc2.bias")](0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainState state = initial_state(model);
  try {
    train_epoch(model, split, c, state);
    FAIL();
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find(split.samples[0].video_id), std::string::npos) << what;
    EXPECT_NE(what.find(split.samples[1].video_id), std::string::npos) << what;
  }
}
