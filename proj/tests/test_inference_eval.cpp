#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_support.hpp"
#include "tsg/inference_eval.hpp"
#include "tsg/synthetic_benchmark.hpp"

using namespace tsg;
using nn::Vec;

namespace {

Vec one_hot(int n, int k) {
  Vec v = Vec::Zero(n);
  v(k) = 1.0;
  return v;
}

Vec random_prob(int n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v / v.sum();
}

// Exhaustive reference for the span decoder, using the same tie rule.
FrameSpan brute_force_span(const Vec& ps, const Vec& pe, int valid,
                           std::optional<int> max_len) {
  FrameSpan best{-1, -1};
  double best_score = -1.0;
  for (int s = 0; s < valid; ++s) {
    for (int e = s; e < valid; ++e) {
      if (max_len && e - s >= *max_len) continue;
      const double score = ps(s) * pe(e);
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

DatasetSplit toy_split(int count, Rng& rng) {
  DatasetSplit split;
  split.name = "test-iid";
  for (int i = 0; i < count; ++i) {
    auto s = fixtures::random_sample("v" + std::to_string(i), 10 + i % 5, 4, 3, 5, rng);
    s.query_index = 0;
    split.samples.push_back(std::move(s));
  }
  return split;
}

std::vector<Prediction> ground_truth_predictions(const DatasetSplit& split) {
  std::vector<Prediction> out;
  for (const auto& s : split.samples) {
    out.push_back({s.video_id, s.query_index, s.span.start_sec, s.span.end_sec});
  }
  return out;
}

// Reads frames only through their content: predicts the frame with the
// largest first feature, which moves when frames are shuffled.
class ArgmaxFramePredictor : public Predictor {
 public:
  Interval predict(const GroundingSample& sample,
                   const FrameFeatures& features) const override {
    Eigen::Index best = 0;
    features.data.col(0).maxCoeff(&best);
    const double step = sample.duration / features.frames();
    return {best * step, (best + 1) * step};
  }
};

}  // namespace

TEST(SelectSpan, OneHotExamples) {
  const auto a = select_span(one_hot(8, 2), one_hot(8, 5));
  EXPECT_EQ(a.start, 2);
  EXPECT_EQ(a.end, 5);
  const Vec ps = one_hot(8, 5), pe = one_hot(8, 2);
  const auto b = select_span(ps, pe);
  EXPECT_LE(b.start, b.end);
  const auto ref = brute_force_span(ps, pe, 8, std::nullopt);
  EXPECT_EQ(b.start, ref.start);
  EXPECT_EQ(b.end, ref.end);
}

TEST(SelectSpan, UniformTieBreaksToOrigin) {
  const auto s = select_span(Vec::Constant(4, 0.25), Vec::Constant(4, 0.25));
  EXPECT_EQ(s.start, 0);
  EXPECT_EQ(s.end, 0);
}

TEST(SelectSpan, AllMaskedIsAnError) {
  EXPECT_THROW(select_span(Vec::Constant(3, 1.0 / 3), Vec::Constant(3, 1.0 / 3),
                           Vec::Zero(3)),
               Error);
}

TEST(SelectSpan, MatchesExhaustiveArgmax) {
  Rng rng = derive_rng({1});
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> pick_t(1, 64);
    const int total = pick_t(rng);
    std::uniform_int_distribution<int> pick_valid(1, total);
    const int valid = pick_valid(rng);
    Vec mask = Vec::Zero(total);
    mask.head(valid).setOnes();
    Vec ps = Vec::Zero(total), pe = Vec::Zero(total);
    ps.head(valid) = random_prob(valid, rng);
    pe.head(valid) = random_prob(valid, rng);
    std::optional<int> max_len;
    if (trial % 3 == 0) max_len = 1 + trial % 7;
    const auto got = select_span(ps, pe, mask, max_len);
    const auto ref = brute_force_span(ps, pe, valid, max_len);
    ASSERT_EQ(got.start, ref.start) << "trial " << trial;
    ASSERT_EQ(got.end, ref.end) << "trial " << trial;
  }
}

TEST(FramesToInterval, InverseOfFrameMapping) {
  const auto iv = frames_to_interval({2, 4}, 10.0, 10);
  EXPECT_DOUBLE_EQ(iv.start, 2.0);
  EXPECT_DOUBLE_EQ(iv.end, 5.0);
  const auto clipped = frames_to_interval({0, 3}, 3.5, 4);
  EXPECT_LE(clipped.end, 3.5);
}

TEST(TemporalIou, Examples) {
  EXPECT_DOUBLE_EQ(temporal_iou({0, 6.6}, {0, 6.6}), 1.0);
  EXPECT_DOUBLE_EQ(temporal_iou({2, 8}, {4, 10}), 0.5);
  EXPECT_DOUBLE_EQ(temporal_iou({0, 1}, {2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(temporal_iou({3, 3}, {3, 3}), 1.0);
  EXPECT_DOUBLE_EQ(temporal_iou({3, 3}, {2, 4}), 0.0);
  EXPECT_THROW(temporal_iou({5, 4}, {0, 1}), Error);
}

TEST(TemporalIou, SymmetricBoundedAndOneOnlyWhenEqual) {
  Rng rng = derive_rng({2});
  std::uniform_real_distribution<double> u(0.0, 20.0);
  for (int trial = 0; trial < 2000; ++trial) {
    double a0 = u(rng), a1 = u(rng), b0 = u(rng), b1 = u(rng);
    if (a0 > a1) std::swap(a0, a1);
    if (b0 > b1) std::swap(b0, b1);
    const double ab = temporal_iou({a0, a1}, {b0, b1});
    ASSERT_EQ(ab, temporal_iou({b0, b1}, {a0, a1}));
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, 1.0);
    ASSERT_LT(ab, 1.0);  // continuous draws are never equal
    // Oracle: overlap / union from interval arithmetic.
    const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
    const double uni = (a1 - a0) + (b1 - b0) - inter;
    ASSERT_NEAR(ab, uni > 0 ? inter / uni : 0.0, 1e-12);
  }
}

TEST(Metrics, HandArithmetic) {
  const auto r = metrics_from_ious("x", {0.8, 0.4, 0.6}, {0.5});
  EXPECT_NEAR(r.recall(0.5), 200.0 / 3.0, 1e-9);
  EXPECT_NEAR(r.miou, 60.0, 1e-9);
  EXPECT_EQ(r.sample_count, 3);
}

TEST(Metrics, StrictInequalityAtThreshold) {
  const auto r = metrics_from_ious("x", {0.5, 0.7}, {0.5, 0.7});
  EXPECT_DOUBLE_EQ(r.recall(0.5), 50.0);
  EXPECT_DOUBLE_EQ(r.recall(0.7), 0.0);
}

TEST(Metrics, RecallNonIncreasingInThreshold) {
  Rng rng = derive_rng({3});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> ious(20);
    for (auto& v : ious) v = u(rng);
    const auto r = metrics_from_ious("x", ious);
    for (std::size_t i = 1; i < r.recall_at_1.size(); ++i) {
      ASSERT_LE(r.recall_at_1[i], r.recall_at_1[i - 1]);
    }
    ASSERT_GE(r.miou, 0.0);
    ASSERT_LE(r.miou, 100.0);
  }
}

TEST(Evaluate, PerfectPredictorScoresHundred) {
  Rng rng = derive_rng({4});
  const auto split = toy_split(12, rng);
  const PredictionTable perfect(ground_truth_predictions(split));
  const auto result = evaluate(perfect, split);
  for (double r : result.report.recall_at_1) EXPECT_DOUBLE_EQ(r, 100.0);
  EXPECT_DOUBLE_EQ(result.report.miou, 100.0);
  const auto from_file = evaluate_predictions(split, ground_truth_predictions(split));
  EXPECT_DOUBLE_EQ(from_file.miou, 100.0);
}

TEST(Evaluate, MissingPredictionIsAnError) {
  Rng rng = derive_rng({5});
  const auto split = toy_split(3, rng);
  auto preds = ground_truth_predictions(split);
  preds.pop_back();
  EXPECT_THROW(evaluate_predictions(split, preds), Error);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  Rng rng = derive_rng({6});
  const auto split = toy_split(9, rng);
  GroundingModel model(fixtures::tiny_config(5, 4), 6);
  const ModelPredictor predictor(model);
  const auto one = evaluate(predictor, split, kDefaultThresholds, 1);
  const auto three = evaluate(predictor, split, kDefaultThresholds, 3);
  EXPECT_EQ(one.report.ious, three.report.ious);
}

TEST(RandomizeSegments, PermutesWholeSegments) {
  FeatureMatrix m(10, 1);
  for (int r = 0; r < 10; ++r) m(r, 0) = static_cast<float>(r);
  const auto f = make_frame_features(m, 10);
  Rng rng = derive_rng({7});
  const auto out = randomize_segments(f, 4, rng);
  ASSERT_EQ(out.frames(), 10);
  // Each segment start must be followed by its own consecutive frames.
  std::vector<int> seen;
  for (int r = 0; r < 10; ++r) seen.push_back(static_cast<int>(out.data(r, 0)));
  std::vector<int> sorted = seen;
  std::sort(sorted.begin(), sorted.end());
  for (int r = 0; r < 10; ++r) EXPECT_EQ(sorted[r], r);
  for (int r = 0; r < 10;) {
    const int first = seen[r];
    ASSERT_EQ(first % 4, 0);
    const int len = std::min(4, 10 - first);
    for (int k = 0; k < len; ++k) ASSERT_EQ(seen[r + k], first + k);
    r += len;
  }
}

TEST(RandomizedVideoTest, LongSegmentsGiveZeroDropAndMatchEvaluate) {
  Rng rng = derive_rng({8});
  const auto split = toy_split(10, rng);
  const ArgmaxFramePredictor predictor;
  const auto result = randomized_video_test(predictor, split, 64, 3);
  const auto plain = evaluate(predictor, split);
  EXPECT_EQ(result.raw.ious, plain.report.ious);
  EXPECT_EQ(result.randomized.ious, plain.report.ious);
  EXPECT_EQ(result.miou_drop, 0.0);
  for (double d : result.recall_drop) EXPECT_EQ(d, 0.0);
}

TEST(RandomizedVideoTest, SeededAndReproducible) {
  Rng rng = derive_rng({9});
  const auto split = toy_split(10, rng);
  const ArgmaxFramePredictor predictor;
  const auto a = randomized_video_test(predictor, split, 2, 5);
  const auto b = randomized_video_test(predictor, split, 2, 5);
  EXPECT_EQ(a.randomized.ious, b.randomized.ious);
}

TEST(BiasHistogram, FullSpanMomentsFillCornerCell) {
  DatasetSplit split;
  split.name = "training";
  for (int i = 0; i < 5; ++i) {
    auto s = fixtures::make_sample("v" + std::to_string(i), FeatureMatrix::Zero(8, 2), 0,
                                   7, {1, 2});
    split.samples.push_back(std::move(s));
  }
  const auto h = bias_histogram(split, "w1", 4);
  EXPECT_EQ(h.total, 5);
  EXPECT_DOUBLE_EQ(h.probabilities(0, 3), 1.0);
  EXPECT_DOUBLE_EQ(h.probabilities.sum(), 1.0);
}

TEST(BiasHistogram, AbsentWordIsAnError) {
  Rng rng = derive_rng({10});
  const auto split = toy_split(3, rng);
  try {
    bias_histogram(split, "zebra", 4);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("word not found"), std::string::npos);
  }
}

TEST(BiasHistogram, LowerTriangleIsStructurallyZero) {
  Rng rng = derive_rng({11});
  DatasetSplit split;
  for (int i = 0; i < 200; ++i) {
    auto s = fixtures::random_sample("v" + std::to_string(i), 30, 2, 2, 3, rng);
    s.query.tokens = {"w"};
    split.samples.push_back(std::move(s));
  }
  const auto h = bias_histogram(split, "w", 10);
  EXPECT_NEAR(h.probabilities.sum(), 1.0, 1e-12);
  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < r; ++c) EXPECT_EQ(h.counts(r, c), 0.0);
  }
}

TEST(Divergence, IdenticalAndDisjoint) {
  BiasHistogram a, b;
  a.bins = b.bins = 2;
  a.probabilities = Eigen::MatrixXd::Zero(2, 2);
  b.probabilities = Eigen::MatrixXd::Zero(2, 2);
  a.probabilities(0, 0) = 0.3;
  a.probabilities(0, 1) = 0.7;
  b.probabilities(1, 1) = 1.0;
  EXPECT_NEAR(distribution_divergence(a, a), 0.0, 1e-15);
  EXPECT_NEAR(distribution_divergence(a, b), std::log(2.0), 1e-12);
  // Oracle for a partial overlap: JS from its definition.
  BiasHistogram c = b;
  c.probabilities(1, 1) = 0.5;
  c.probabilities(0, 1) = 0.5;
  auto kl_to_mid = [](double p, double q) { return p > 0 ? p * std::log(p / (0.5 * (p + q))) : 0.0; };
  const double expected = 0.5 * (kl_to_mid(0.3, 0) + kl_to_mid(0.7, 0.5) + kl_to_mid(0, 0.5)) +
                          0.5 * (kl_to_mid(0, 0.3) + kl_to_mid(0.5, 0.7) + kl_to_mid(0.5, 0));
  EXPECT_NEAR(distribution_divergence(a, c), expected, 1e-12);
}

TEST(Divergence, BiasPredictionsTrackTrainingMoreThanContent) {
  BenchConfig cfg;
  cfg.num_tokens = 4;
  cfg.train_videos = 200;
  cfg.val_videos = 8;
  cfg.test_iid_videos = 8;
  cfg.test_ood_videos = 80;
  const Benchmark bench = generate_benchmark(cfg);
  const auto& training = bench.split("training");
  const auto& ood = bench.split("test-ood");
  const BiasOnlyOracle bias(training, bench.metadata);
  const ContentOracle content(bench.metadata);
  const auto bias_preds = run_oracle(bias, ood);
  const auto content_preds = run_oracle(content, ood);
  for (const auto& word : bench.metadata.tokens) {
    const auto train_h = bias_histogram(training, word);
    const double jb = distribution_divergence(train_h, bias_histogram(ood, bias_preds, word));
    const double jc =
        distribution_divergence(train_h, bias_histogram(ood, content_preds, word));
    EXPECT_LT(jb, jc) << word;
  }
}

TEST(TopWords, SkipsFillerAndRanksByCount) {
  DatasetSplit split;
  auto add = [&](std::vector<std::string> tokens) {
    GroundingSample s;
    s.query.tokens = std::move(tokens);
    split.samples.push_back(s);
  };
  add({"a", "person", "opens", "the", "door"});
  add({"person", "opens", "a", "window"});
  add({"person", "closes", "the", "door"});
  const auto top = top_words(split, 10);
  ASSERT_GE(top.size(), 3u);
  // door and opens tie at two and break alphabetically.
  EXPECT_EQ(top[0], "door");
  EXPECT_EQ(top[1], "opens");
  EXPECT_EQ(std::find(top.begin(), top.end(), "person"), top.end());
  EXPECT_EQ(std::find(top.begin(), top.end(), "the"), top.end());
  EXPECT_EQ(std::find(top.begin(), top.end(), "a"), top.end());
}

TEST(Predictions, RoundTripThroughFile) {
  fixtures::TempDir dir("preds");
  const std::vector<Prediction> preds = {{"v1", 0, 1.25, 3.5}, {"v2", 2, 0.0, 7.125}};
  save_predictions(dir / "p.jsonl", preds);
  const auto back = load_predictions(dir / "p.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].video_id, "v2");
  EXPECT_EQ(back[1].query_index, 2);
  EXPECT_EQ(back[1].end, 7.125);
}

TEST(Predictions, MalformedLineReportsLine) {
  fixtures::TempDir dir("preds_bad");
  {
    std::ofstream out(dir / "p.jsonl");
    out << R"({"video_id":"v1","query_index":0,"start":0,"end":1})" << "\n{oops\n";
  }
  try {
    load_predictions(dir / "p.jsonl");
    FAIL();
  } catch (const tsg::ParseError& e) {
    EXPECT_EQ(e.line(), 2);
  }
}

TEST(Json, ReportsSerialize) {
  const auto r = metrics_from_ious("test-ood", {0.8, 0.4, 0.6});
  const auto j = to_json(r);
  EXPECT_EQ(j["split"], "test-ood");
  EXPECT_EQ(j["samples"], 3);
}
