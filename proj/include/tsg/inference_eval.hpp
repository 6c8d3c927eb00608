#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsg/core_data.hpp"
#include "tsg/grounding_model.hpp"
#include "tsg/random.hpp"

namespace tsg {

inline const std::vector<double> kDefaultThresholds = {0.3, 0.5, 0.7};

struct Interval {
  double start = 0.0;
  double end = 0.0;
};

/// |a ∩ b| / |a ∪ b|. Two identical zero-length intervals give 1.
double temporal_iou(const Interval& a, const Interval& b);

struct FrameSpan {
  int start = 0;
  int end = 0;
};

/// Argmax of P_start(s) * P_end(e) over s <= e (and e - s < max_len when
/// given) on valid frames. Ties go to the smallest s, then the smallest e.
FrameSpan select_span(const nn::Vec& start_prob, const nn::Vec& end_prob,
                      const nn::Vec& mask = {},
                      std::optional<int> max_len = std::nullopt);

/// Frame span back to seconds, clipped to [0, duration].
Interval frames_to_interval(const FrameSpan& span, double duration, int frames);

struct Prediction {
  std::string video_id;
  int query_index = 0;
  double start = 0.0;
  double end = 0.0;
};

std::vector<Prediction> load_predictions(const std::filesystem::path& path);
void save_predictions(const std::filesystem::path& path,
                      const std::vector<Prediction>& predictions);

/// Anything that localizes a query in a (possibly altered) video.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Interval predict(const GroundingSample& sample,
                           const FrameFeatures& features) const = 0;
};

class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(const GroundingModel& model,
                          std::optional<int> max_len = std::nullopt)
      : model_(model), max_len_(max_len) {}

  Interval predict(const GroundingSample& sample,
                   const FrameFeatures& features) const override;

 private:
  const GroundingModel& model_;
  std::optional<int> max_len_;
};

/// Replays a predictions file keyed by (video_id, query_index).
class PredictionTable : public Predictor {
 public:
  explicit PredictionTable(const std::vector<Prediction>& predictions);
  Interval predict(const GroundingSample& sample,
                   const FrameFeatures& features) const override;

 private:
  std::map<std::pair<std::string, int>, Interval> table_;
};

struct MetricsReport {
  std::string split;
  int sample_count = 0;
  std::vector<double> thresholds;
  std::vector<double> recall_at_1;  // percentages, aligned with thresholds
  double miou = 0.0;                // percentage
  std::vector<double> ious;         // per sample

  double recall(double threshold) const;
};

/// R@1(θ) = 100 * mean[IoU > θ], mIoU = 100 * mean IoU.
MetricsReport metrics_from_ious(const std::string& split,
                                const std::vector<double>& ious,
                                const std::vector<double>& thresholds =
                                    kDefaultThresholds);

struct EvaluationResult {
  MetricsReport report;
  std::vector<Prediction> predictions;
};

EvaluationResult evaluate(const Predictor& predictor, const DatasetSplit& split,
                          const std::vector<double>& thresholds =
                              kDefaultThresholds,
                          int threads = 1);

/// Scores an external predictions file against a split. Every sample must
/// have a prediction.
MetricsReport evaluate_predictions(const DatasetSplit& split,
                                   const std::vector<Prediction>& predictions,
                                   const std::vector<double>& thresholds =
                                       kDefaultThresholds);

// ---- randomized-video sanity check ---------------------------------------------

/// Splits rows into consecutive segments of `segment_len` (last may be
/// shorter) and permutes the segments uniformly.
FrameFeatures randomize_segments(const FrameFeatures& features, int segment_len,
                                 Rng& rng);

struct SanityCheckResult {
  MetricsReport raw;
  MetricsReport randomized;
  std::vector<double> recall_drop;  // raw - randomized, per threshold
  double miou_drop = 0.0;

  double drop(double threshold) const;
};

inline constexpr int kDefaultSegmentLength = 4;

/// Each video gets its own permutation stream derived from `seed` and the
/// sample index.
SanityCheckResult randomized_video_test(const Predictor& predictor,
                                        const DatasetSplit& split,
                                        int segment_len, std::uint64_t seed,
                                        const std::vector<double>& thresholds =
                                            kDefaultThresholds);

// ---- temporal-bias histograms --------------------------------------------------

inline constexpr int kDefaultHistogramBins = 20;

struct BiasHistogram {
  std::string word;
  int bins = kDefaultHistogramBins;
  Eigen::MatrixXd counts;         // bins x bins, row = start bin, col = end bin
  Eigen::MatrixXd probabilities;  // counts / total
  int total = 0;
};

/// Histogram of normalized (start, end) over samples whose query contains
/// `word`. Throws ValidationError "word not found" when none does.
BiasHistogram bias_histogram(const DatasetSplit& split, const std::string& word,
                             int bins = kDefaultHistogramBins);

/// Same, over predicted intervals for the split's samples.
BiasHistogram bias_histogram(const DatasetSplit& split,
                             const std::vector<Prediction>& predictions,
                             const std::string& word,
                             int bins = kDefaultHistogramBins);

/// Jensen-Shannon divergence (nats) between two normalized grids.
double distribution_divergence(const BiasHistogram& a, const BiasHistogram& b);

/// Most frequent content words, skipping a short list of function and
/// filler words. Ties break alphabetically.
std::vector<std::string> top_words(const DatasetSplit& split, int k);

// ---- JSON ----------------------------------------------------------------------

nlohmann::ordered_json to_json(const MetricsReport& report);
nlohmann::ordered_json to_json(const SanityCheckResult& result);
nlohmann::ordered_json to_json(const BiasHistogram& histogram);

}  // namespace tsg
