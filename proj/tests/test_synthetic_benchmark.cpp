#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "tsg/synthetic_benchmark.hpp"

using namespace tsg;

namespace {

BenchConfig small_config() {
  BenchConfig c;
  c.num_tokens = 4;
  c.train_videos = 160;
  c.val_videos = 16;
  c.test_iid_videos = 64;
  c.test_ood_videos = 64;
  return c;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Expected R@1 (IoU > 0.5) of a predictor that picks any valid frame span
// uniformly, enumerated exhaustively per sample.
double uniform_span_chance(const DatasetSplit& split) {
  double hits = 0.0;
  for (const auto& s : split.samples) {
    const int frames = s.frames;
    const double step = s.duration / frames;
    int good = 0, total = 0;
    for (int a = 0; a < frames; ++a) {
      for (int b = a; b < frames; ++b) {
        ++total;
        if (temporal_iou({a * step, (b + 1) * step}, {s.span.start_sec, s.span.end_sec}) >
            0.5) {
          ++good;
        }
      }
    }
    hits += static_cast<double>(good) / total;
  }
  return 100.0 * hits / static_cast<double>(split.samples.size());
}

}  // namespace

TEST(BenchConfig, ZeroVideosIsAConfigError) {
  BenchConfig c;
  c.train_videos = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(generate_benchmark(c), ConfigError);
}

TEST(BenchConfig, OverlappingRegionsAreRejected) {
  BenchConfig c;
  c.ood_lo = 0.2;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BenchConfig, InfeasibleRegionIsRejected) {
  BenchConfig c;
  c.min_frames = 20;
  c.max_frames = 20;
  c.min_moment = 10;
  c.max_moment = 10;
  EXPECT_THROW(generate_benchmark(c), Error);
}

TEST(BenchConfig, KeyValueRoundTrip) {
  BenchConfig c = small_config();
  c.noise = 0.25;
  c.seed = 17;
  const auto back = BenchConfig::from_kv(KeyValueConfig::parse(c.to_kv().to_string()));
  EXPECT_EQ(back.to_kv().values(), c.to_kv().values());
  EXPECT_THROW(BenchConfig::from_kv(KeyValueConfig::parse("bogus = 1\n")), ConfigError);
}

TEST(GenerateBenchmark, DeterministicInSeed) {
  const auto a = generate_benchmark(small_config());
  const auto b = generate_benchmark(small_config());
  ASSERT_EQ(a.features.size(), b.features.size());
  for (std::size_t i = 0; i < a.features.size(); ++i) {
    ASSERT_EQ(a.features[i].data, b.features[i].data);
  }
  EXPECT_EQ(a.metadata.signatures, b.metadata.signatures);
  BenchConfig other = small_config();
  other.seed = 1;
  EXPECT_NE(generate_benchmark(other).metadata.signatures, a.metadata.signatures);
}

TEST(GenerateBenchmark, SpansLieInsideVideosWithConfiguredLengths) {
  const BenchConfig cfg = small_config();
  const auto bench = generate_benchmark(cfg);
  ASSERT_EQ(bench.splits.size(), 4u);
  for (const auto& split : bench.splits) {
    for (const auto& s : split.samples) {
      ASSERT_GE(s.frames, cfg.min_frames);
      ASSERT_LE(s.frames, cfg.max_frames);
      ASSERT_GE(s.span.start_frame, 0);
      ASSERT_LT(s.span.end_frame, s.frames);
      ASSERT_GE(s.span.length(), cfg.min_moment);
      ASSERT_LE(s.span.length(), cfg.max_moment);
      ASSERT_LE(s.span.end_sec, s.duration);
      ASSERT_EQ(s.features->frames(), s.frames);
      ASSERT_GE(bench.metadata.action_of(s.query), 0);
    }
  }
}

TEST(GenerateBenchmark, SignaturesAreNearlyOrthogonal) {
  const auto bench = generate_benchmark(small_config());
  const auto& sig = bench.metadata.signatures;
  const Eigen::MatrixXd gram = sig * sig.transpose();
  for (int i = 0; i < gram.rows(); ++i) {
    for (int j = 0; j < gram.cols(); ++j) {
      if (i == j) {
        EXPECT_NEAR(gram(i, j), sig.cols(), 1e-9);
      } else {
        EXPECT_NEAR(gram(i, j), 0.0, 1e-9);
      }
    }
  }
}

TEST(Oracles, NoiselessContentOracleRecoversExactSpans) {
  BenchConfig cfg = small_config();
  cfg.noise = 0.0;
  const auto bench = generate_benchmark(cfg);
  const ContentOracle oracle(bench.metadata);
  for (const auto& split : bench.splits) {
    const auto result = evaluate(oracle, split);
    // Ground-truth ends sit 0.01 s inside the last frame, so IoU >= 1 - 0.01 / 6.
    EXPECT_NEAR(result.report.miou, 100.0, 0.2) << split.name;
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
      const auto& s = split.samples[i];
      const auto& p = result.predictions[i];
      EXPECT_EQ(timestamp_to_frame(p.start, s.duration, s.frames), s.span.start_frame);
      EXPECT_NEAR(p.end, static_cast<double>(s.span.end_frame + 1), 1e-9);
    }
  }
}

TEST(Oracles, BiasOracleHighOnIidNearChanceOnOod) {
  const auto bench = generate_benchmark(small_config());
  const BiasOnlyOracle oracle(bench.split("training"), bench.metadata);
  const auto iid = evaluate(oracle, bench.split("test-iid")).report;
  const auto& ood_split = bench.split("test-ood");
  const auto ood = evaluate(oracle, ood_split).report;
  EXPECT_GE(iid.recall(0.5), 40.0);
  EXPECT_LE(ood.recall(0.5), uniform_span_chance(ood_split) + 5.0);
}

TEST(Oracles, BiasOracleIgnoresFrames) {
  const auto bench = generate_benchmark(small_config());
  const BiasOnlyOracle oracle(bench.split("training"), bench.metadata);
  const auto& s = bench.split("test-iid").samples.front();
  const auto zeros =
      make_frame_features(FeatureMatrix::Zero(s.frames, s.features->dim()), s.duration);
  const auto a = oracle.predict(s, *s.features);
  const auto b = oracle.predict(s, zeros);
  EXPECT_EQ(a.start, b.start);
  EXPECT_EQ(a.end, b.end);
}

TEST(Oracles, ShuffleDropSeparatesBiasFromContent) {
  const auto bench = generate_benchmark(small_config());
  const auto& iid = bench.split("test-iid");
  const BiasOnlyOracle bias(bench.split("training"), bench.metadata);
  const ContentOracle content(bench.metadata);
  EXPECT_LE(std::abs(randomized_video_test(bias, iid, 4, 0).drop(0.5)), 1.0);
  EXPECT_GE(randomized_video_test(content, iid, 4, 0).drop(0.5), 30.0);
}

TEST(BiasMap, TrainingStartHistogramMatchesPlantedDistribution) {
  BenchConfig cfg;
  cfg.num_tokens = 4;
  cfg.train_videos = 4 * 512;
  cfg.val_videos = 1;
  cfg.test_iid_videos = 1;
  cfg.test_ood_videos = 1;
  const auto bench = generate_benchmark(cfg);
  const int bins = 10;
  const int frame_range = cfg.max_frames - cfg.min_frames + 1;
  for (int k = 0; k < cfg.num_tokens; ++k) {
    const auto& dist = bench.metadata.bias_map[k];
    // Planted histogram of floor(start_frame / T * bins), averaged over T.
    Eigen::VectorXd expected = Eigen::VectorXd::Zero(bins);
    for (int t = cfg.min_frames; t <= cfg.max_frames; ++t) {
      for (int f = 0; f < t; ++f) {
        const int bin = std::min(bins - 1, f * bins / t);
        expected(bin) += dist.mass(static_cast<double>(f) / t,
                                   static_cast<double>(f + 1) / t) /
                         frame_range;
      }
    }
    Eigen::VectorXd observed = Eigen::VectorXd::Zero(bins);
    int count = 0;
    for (const auto& s : bench.split("training").samples) {
      if (bench.metadata.action_of(s.query) != k) continue;
      ++count;
      observed(std::min(bins - 1, s.span.start_frame * bins / s.frames)) += 1.0;
    }
    ASSERT_GT(count, 400);
    observed /= count;
    const double tv = 0.5 * (observed - expected).cwiseAbs().sum();
    EXPECT_LE(tv, 0.1) << bench.metadata.tokens[k];
  }
}

TEST(BiasMap, OodStartsAreDisjointFromTraining) {
  const auto bench = generate_benchmark(small_config());
  const int k_tokens = static_cast<int>(bench.metadata.tokens.size());
  std::vector<double> train_max(k_tokens, -1.0), ood_min(k_tokens, 2.0);
  for (const auto& s : bench.split("training").samples) {
    const int k = bench.metadata.action_of(s.query);
    train_max[k] = std::max(train_max[k], s.span.start_sec / s.duration);
  }
  for (const auto& s : bench.split("test-ood").samples) {
    const int k = bench.metadata.action_of(s.query);
    ood_min[k] = std::min(ood_min[k], s.span.start_sec / s.duration);
  }
  for (int k = 0; k < k_tokens; ++k) {
    if (train_max[k] < 0 || ood_min[k] > 1) continue;
    EXPECT_LT(train_max[k], ood_min[k]) << bench.metadata.tokens[k];
  }
}

TEST(BiasMap, MassIsNormalized) {
  const PositionDistribution d{0.2, 0.05, 0.0, 1.0 / 3.0};
  EXPECT_NEAR(d.mass(0.0, 1.0), 1.0, 1e-12);
  // Oracle: Gaussian cdf differences renormalized over [lo, hi].
  auto cdf = [](double x) { return 0.5 * std::erfc(-(x - 0.2) / (0.05 * std::sqrt(2.0))); };
  const double z = cdf(1.0 / 3.0) - cdf(0.0);
  EXPECT_NEAR(d.mass(0.15, 0.3), (cdf(0.3) - cdf(0.15)) / z, 1e-12);
  EXPECT_NEAR(d.mass(0.3, 0.9), (cdf(1.0 / 3.0) - cdf(0.3)) / z, 1e-12);
  EXPECT_EQ(d.mass(0.5, 0.9), 0.0);
}

TEST(Metadata, JsonRoundTrip) {
  const auto bench = generate_benchmark(small_config());
  const auto back = metadata_from_json(nlohmann::json::parse(to_json(bench.metadata).dump()));
  EXPECT_EQ(back.tokens, bench.metadata.tokens);
  EXPECT_EQ(back.templates, bench.metadata.templates);
  EXPECT_EQ(back.signatures, bench.metadata.signatures);
  ASSERT_EQ(back.bias_map.size(), bench.metadata.bias_map.size());
  EXPECT_EQ(back.bias_map[1].mean, bench.metadata.bias_map[1].mean);
  EXPECT_EQ(back.ood_map[2].hi, bench.metadata.ood_map[2].hi);
}

TEST(DatasetDir, WriteAndReloadPreservesSamples) {
  fixtures::TempDir dir("bench");
  const auto bench = generate_benchmark(small_config());
  write_benchmark(bench, dir.path());
  for (const char* f : {"training.jsonl", "val.jsonl", "test-iid.jsonl", "test-ood.jsonl",
                        kFeatureFile, kMetadataFile}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto splits = load_dataset_dir(dir.path());
  ASSERT_EQ(splits.size(), 4u);
  const auto& ood = find_split(splits, "test-ood");
  const auto& orig = bench.split("test-ood");
  ASSERT_EQ(ood.samples.size(), orig.samples.size());
  for (std::size_t i = 0; i < ood.samples.size(); ++i) {
    ASSERT_EQ(ood.samples[i].span.start_frame, orig.samples[i].span.start_frame);
    ASSERT_EQ(ood.samples[i].span.end_frame, orig.samples[i].span.end_frame);
    ASSERT_EQ(ood.samples[i].features->data, orig.samples[i].features->data);
  }
  EXPECT_EQ(load_metadata(dir.path()).tokens, bench.metadata.tokens);

  fixtures::TempDir again("bench2");
  write_benchmark(generate_benchmark(small_config()), again.path());
  EXPECT_EQ(read_file(dir / kFeatureFile), read_file(again / kFeatureFile));
  EXPECT_EQ(read_file(dir / "training.jsonl"), read_file(again / "training.jsonl"));
}
