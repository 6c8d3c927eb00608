#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsg/core_data.hpp"
#include "tsg/grounding_model.hpp"
#include "tsg/inference_eval.hpp"
#include "tsg/kv_config.hpp"
#include "tsg/losses.hpp"
#include "tsg/pseudo_video.hpp"

namespace tsg {

/// Names accepted for model selection on the validation split.
inline const std::vector<std::string> kSelectionMetrics = {"mIoU", "R1@0.3",
                                                           "R1@0.5", "R1@0.7"};

struct TrainConfig {
  int batch_size = 32;
  int epochs = 30;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  LossWeights weights;  // lambda1..3
  std::uint64_t seed = 0;
  int embed_dim = 64;
  int hidden_dim = 64;
  int mlp_hidden = 64;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::string selection_metric = "mIoU";
  int threads = 1;

  void validate() const;
  /// Applies the keys present in `kv` on top of the current values.
  void apply(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;

  /// Model dimensions for the given vocabulary and feature sizes.
  ModelConfig model_config(int vocab_size, int feature_dim) const;
};

/// Value of `metric` (one of kSelectionMetrics) in a report.
double selection_value(const MetricsReport& report, const std::string& metric);

// ---- optimizer --------------------------------------------------------------------

struct AdamState {
  std::vector<nn::Mat> m;
  std::vector<nn::Mat> v;
  long long t = 0;
};

/// One bias-corrected Adam update in place.
void adam_step(nn::ParameterSet& params, const nn::Gradients& grads,
               AdamState& state, const TrainConfig& config);

/// Scales grads so their global L2 norm is at most max_norm. Returns the norm
/// before clipping.
double clip_gradients(nn::Gradients& grads, double max_norm);

// ---- state ------------------------------------------------------------------------

/// Everything needed to continue a run. Triplets and batch order are derived
/// from (seed, epoch, index), so no generator state is stored.
struct TrainState {
  int epoch = 0;  // completed epochs
  long long step = 0;
  AdamState adam;
  double best_metric = -1.0;
  int best_epoch = -1;  // -1 until a validation pass has run
};

TrainState initial_state(const GroundingModel& model);

// ---- one triplet -----------------------------------------------------------------

struct StepCounters {
  long long original_passes = 0;
  long long pseudo_passes = 0;  // pseudo videos run in gradient mode
};

/// Forward and backward of the total loss for one triplet. Gradients are added
/// into `grads`. The pseudo video is only run when some auxiliary weight is
/// positive.
LossBundle triplet_step(const GroundingModel& model,
                        const TrainingTriplet& triplet,
                        const LossWeights& weights, nn::Gradients& grads,
                        StepCounters* counters = nullptr);

/// Loss only, without gradients; same evaluation path as triplet_step.
LossBundle triplet_loss(const GroundingModel& model,
                        const TrainingTriplet& triplet,
                        const LossWeights& weights);

// ---- epochs ---------------------------------------------------------------------

/// Loss-term names logged for the given weights, in log order.
std::vector<std::string> enabled_terms(const LossWeights& weights);

struct EpochMetrics {
  int epoch = 0;
  int batches = 0;
  double l_g = 0.0;  // means over batches
  double l_intra = 0.0;
  double l_inter = 0.0;
  double l_d = 0.0;
  double total = 0.0;
  StepCounters counters;
  std::optional<MetricsReport> validation;
};

nlohmann::ordered_json to_json(const EpochMetrics& metrics,
                               const LossWeights& weights);

/// Receives one JSON object per optimizer step.
using StepLogger = std::function<void(const nlohmann::ordered_json&)>;

/// Triplets for epoch `epoch`: one fresh shuffle per sample.
std::vector<TrainingTriplet> make_epoch_triplets(const DatasetSplit& split,
                                                 std::uint64_t seed, int epoch);

/// Sample order for epoch `epoch`.
std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch);

/// One pass over the split. Advances state.epoch by one.
EpochMetrics train_epoch(GroundingModel& model, const DatasetSplit& split,
                         const TrainConfig& config, TrainState& state,
                         const StepLogger& log = {});

// ---- checkpoints ------------------------------------------------------------------

struct Checkpoint {
  ModelConfig model_config;
  Vocabulary vocabulary;
  nn::ParameterSet parameters;
  std::optional<TrainConfig> train_config;
  std::optional<TrainState> state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path,
                     const GroundingModel& model, const Vocabulary& vocab,
                     const TrainConfig* config = nullptr,
                     const TrainState* state = nullptr);

/// Throws IntegrityError on a truncated or malformed file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- fit --------------------------------------------------------------------------

struct FitResult {
  std::vector<EpochMetrics> history;
  int best_epoch = -1;  // 1-based epoch of the selected parameters
  double best_metric = -1.0;
  nn::ParameterSet best_parameters;
};

/// Trains from `state` to config.epochs, evaluating on `val` after each epoch.
/// When `run_dir` is given, writes train_log.jsonl, history.json,
/// checkpoint_last.bin and checkpoint_best.bin there. Selection keeps the
/// earliest epoch among ties.
FitResult fit(GroundingModel& model, const Vocabulary& vocab,
              const DatasetSplit& training, const DatasetSplit& val,
              const TrainConfig& config, TrainState& state,
              const std::optional<std::filesystem::path>& run_dir = {});

/// Maps every split's tokens through a vocabulary built from `training`.
Vocabulary prepare_vocabulary(DatasetSplit& training,
                              std::vector<DatasetSplit*> others);

}  // namespace tsg
