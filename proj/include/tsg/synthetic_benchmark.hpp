#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsg/core_data.hpp"
#include "tsg/inference_eval.hpp"
#include "tsg/kv_config.hpp"

namespace tsg {

/// Truncated Gaussian over the normalized moment start position.
struct PositionDistribution {
  double mean = 0.0;
  double stddev = 0.1;
  double lo = 0.0;
  double hi = 1.0;

  /// Probability mass in [a, b) under the truncated density.
  double mass(double a, double b) const;
};

struct BenchConfig {
  int num_tokens = 12;
  int train_videos = 512;
  int val_videos = 64;
  int test_iid_videos = 64;
  int test_ood_videos = 256;
  int min_frames = 48;
  int max_frames = 64;
  int feature_dim = 16;
  int min_moment = 6;
  int max_moment = 12;
  double frame_rate = 1.0;
  double signature_strength = 1.0;
  double noise = 1.0;
  // Regions of normalized start position.
  double bias_lo = 0.0;
  double bias_hi = 1.0 / 3.0;
  double ood_lo = 2.0 / 3.0;
  double ood_hi = 1.0;
  double position_stddev = 0.05;
  int min_background_run = 2;
  int max_background_run = 6;
  std::uint64_t seed = 0;

  void validate() const;
  static BenchConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;
};

struct BenchmarkMetadata {
  BenchConfig config;
  std::vector<std::string> tokens;
  Eigen::MatrixXd signatures;  // K x D
  std::vector<PositionDistribution> bias_map;
  std::vector<PositionDistribution> ood_map;
  std::vector<std::string> templates;  // '{}' marks the action token

  int token_index(const std::string& token) const;  // -1 when absent
  /// Index of the first query token that is an action token, or -1.
  int action_of(const TokenSequence& query) const;
};

nlohmann::ordered_json to_json(const BenchmarkMetadata& meta);
BenchmarkMetadata metadata_from_json(const nlohmann::json& j);

struct Benchmark {
  std::vector<DatasetSplit> splits;  // training, val, test-iid, test-ood
  BenchmarkMetadata metadata;
  std::vector<FeatureEntry> features;
  std::vector<std::vector<AnnotationRecord>> records;  // aligned with splits

  const DatasetSplit& split(const std::string& name) const;
};

/// Deterministic in config.seed.
Benchmark generate_benchmark(const BenchConfig& config);

/// Writes <split>.jsonl for each split, features.bin, metadata.json and
/// bench_config.txt.
void write_benchmark(const Benchmark& bench, const std::filesystem::path& dir);

inline constexpr const char* kFeatureFile = "features.bin";
inline constexpr const char* kMetadataFile = "metadata.json";

/// Loads whichever standard splits exist in `dir` and attaches features.
std::vector<DatasetSplit> load_dataset_dir(const std::filesystem::path& dir,
                                           double frame_rate = 1.0);
const DatasetSplit& find_split(const std::vector<DatasetSplit>& splits,
                               const std::string& name);
BenchmarkMetadata load_metadata(const std::filesystem::path& dir);

// ---- oracles ---------------------------------------------------------------------

/// Predicts from memorized per-token position statistics only; never reads
/// frame features.
class BiasOnlyOracle : public Predictor {
 public:
  BiasOnlyOracle(const DatasetSplit& training, const BenchmarkMetadata& meta,
                 int bins = kDefaultHistogramBins);

  Interval predict(const GroundingSample& sample,
                   const FrameFeatures& features) const override;

 private:
  const BenchmarkMetadata& meta_;
  int bins_;
  std::vector<Interval> mode_;  // normalized, per token
  Interval fallback_;
};

/// Finds the longest run of frames whose nearest signature is the query's
/// action token; never reads position statistics.
class ContentOracle : public Predictor {
 public:
  explicit ContentOracle(const BenchmarkMetadata& meta) : meta_(meta) {}

  Interval predict(const GroundingSample& sample,
                   const FrameFeatures& features) const override;

 private:
  const BenchmarkMetadata& meta_;
};

std::vector<Prediction> run_oracle(const Predictor& oracle,
                                   const DatasetSplit& split);

}  // namespace tsg
