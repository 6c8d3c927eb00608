#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tsg/core_data.hpp"
#include "tsg/nn.hpp"

namespace tsg {

struct ModelConfig {
  int vocab_size = 1;
  int feature_dim = 16;
  int embed_dim = 64;
  int hidden_dim = 64;  // d, even: each recurrent direction gets d / 2
  int mlp_hidden = 64;  // width of the CSMM, span-predictor and discriminator MLPs
  int order_classes = 2;

  void validate() const;
};

struct EncodedQuery {
  nn::Mat words;     // d x N
  nn::Vec sentence;  // d
};

struct EncodedVideo {
  nn::Mat frames;  // d x T, query-guided frame features
};

/// Per-video outputs. Vectors have one entry per (padded) frame.
struct ModelOutputs {
  nn::Vec relevance_logits;
  nn::Vec relevance;  // sigmoid(relevance_logits), strictly inside (0, 1)
  nn::Vec start_scores;
  nn::Vec end_scores;
  nn::Vec start_prob;
  nn::Vec end_prob;
  nn::Vec order_logits;  // empty unless a moment span was supplied
};

struct PooledMoments {
  nn::Vec before;  // m1, zero when the span touches the first frame
  nn::Vec target;  // m2
  nn::Vec after;   // m3, zero when the span touches the last frame
};

// ---- forward state kept for the backward pass --------------------------------

struct QueryPass {
  std::vector<int> ids;
  nn::Mat embedded;  // e x N
  nn::BiLstmCache layer1;
  nn::Mat layer1_out;
  nn::BiLstmCache layer2;
  nn::Mat words;       // d x N
  nn::Vec final_state; // [h_fwd(N-1); h_bwd(0)]
  nn::Vec sentence;    // d
};

struct VideoPass {
  nn::Mat features;   // D x T
  nn::Mat projected;  // d x T
  nn::Mat attention;  // T x N
  nn::Mat context;    // d x T
  nn::Mat fuse_in;    // 2d x T
  nn::Mat fused;      // d x T (tanh)
  nn::BiLstmCache recurrent;
  nn::Mat encoded;    // d x T

  nn::Mat joint;       // 2d x T, [encoded; s]
  nn::Mat csmm_pre;    // hidden pre-activation
  nn::Vec relevance_logits;
  nn::Vec relevance;
  nn::Mat gated;       // joint scaled by relevance per column
  nn::Mat start_pre;
  nn::Mat end_pre;
  nn::Vec start_scores;
  nn::Vec end_scores;
  nn::Vec start_prob;
  nn::Vec end_prob;

  std::optional<MomentSpan> order_span;
  PooledMoments pooled;
  nn::Vec order_pre1;
  nn::Vec order_pre2;
  nn::Vec order_h1;
  nn::Vec order_h2;
  nn::Vec order_logits;
};

/// Loss gradients with respect to one video's outputs.
struct OutputGradients {
  nn::Vec start_scores;      // empty means zero
  nn::Vec end_scores;
  nn::Vec relevance_logits;
  nn::Vec order_logits;
};

/// Gradient flowing back into the query encoder from one or more videos.
struct QueryGradients {
  nn::Mat words;
  nn::Vec sentence;
};

// ---- padded batches ----------------------------------------------------------

struct PaddedBatch {
  std::vector<nn::Mat> features;          // D x T_max each, zero padded
  std::vector<std::vector<int>> token_ids;  // padded with the unknown id
  Eigen::MatrixXd frame_mask;             // B x T_max, 1 = valid
  Eigen::MatrixXd word_mask;              // B x N_max
  int max_frames = 0;
  int max_words = 0;

  int size() const { return static_cast<int>(features.size()); }
};

/// Pads each item to the batch maxima. Feature matrices are T x D rows.
PaddedBatch collate(const std::vector<const FrameFeatures*>& videos,
                    const std::vector<const std::vector<int>*>& queries);

/// Number of leading ones; throws if the mask is not a prefix mask or empty.
int valid_length(const Eigen::Ref<const Eigen::RowVectorXd>& mask);

/// T x D float rows to the model's D x T double layout.
nn::Mat to_model_layout(const FeatureMatrix& rows);

class GroundingModel {
 public:
  GroundingModel() = default;
  GroundingModel(const ModelConfig& config, std::uint64_t seed);
  GroundingModel(const ModelConfig& config, nn::ParameterSet params);

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  /// Overwrites embedding columns for the given vocabulary from a pretrained
  /// table. Returns the number of rows copied.
  int load_embeddings(const Vocabulary& vocab,
                      const std::map<std::string, std::vector<float>>& table);

  // ---- module-level operations -------------------------------------------------

  EncodedQuery encode_query(const std::vector<int>& ids) const;

  /// features: D x T. mask: T entries, prefix of ones; empty means all valid.
  /// Padded columns of the result are zero.
  EncodedVideo encode_video(const nn::Mat& features, const nn::Mat& words,
                            const nn::Vec& mask = {}) const;

  /// Relevance logits for each frame: MLP over [v_t; s] with shared weights.
  nn::Vec csmm_logits(const nn::Mat& encoded, const nn::Vec& sentence) const;
  nn::Vec csmm(const nn::Mat& encoded, const nn::Vec& sentence) const;

  struct Boundaries {
    nn::Vec start_scores, end_scores, start_prob, end_prob;
  };
  /// Span heads on the relevance-gated [v_t; s]. Masked frames get score
  /// -inf and probability 0.
  Boundaries predict_boundaries(const nn::Mat& encoded, const nn::Vec& sentence,
                                const nn::Vec& relevance,
                                const nn::Vec& mask = {}) const;

  static PooledMoments pool_moments(const nn::Mat& encoded,
                                    const MomentSpan& span);

  nn::Vec order_logits(const PooledMoments& m) const;

  /// Full pass for one unpadded video. Order logits are produced only when
  /// `order_span` is given.
  ModelOutputs forward(const nn::Mat& features, const std::vector<int>& ids,
                       const std::optional<MomentSpan>& order_span = {}) const;

  /// Per-item outputs padded to the batch's T_max.
  std::vector<ModelOutputs> forward(const PaddedBatch& batch) const;

  // ---- training path -------------------------------------------------------------

  QueryPass run_query(const std::vector<int>& ids) const;
  VideoPass run_video(const nn::Mat& features, const QueryPass& query,
                      const std::optional<MomentSpan>& order_span) const;
  static ModelOutputs outputs_of(const VideoPass& pass);

  /// Accumulates parameter gradients of one video's heads and encoder and adds
  /// the query-side gradient into `query_grad`.
  void backward_video(const VideoPass& pass, const QueryPass& query,
                      const OutputGradients& grad, QueryGradients& query_grad,
                      nn::Gradients& grads) const;
  void backward_query(const QueryPass& query, const QueryGradients& grad,
                      nn::Gradients& grads) const;

 private:
  void build();

  ModelConfig config_;
  nn::ParameterSet params_;

  int embedding_ = -1;  // e x V
  nn::BiLstm query_layer1_;
  nn::BiLstm query_layer2_;
  nn::Linear sentence_proj_;
  nn::Linear frame_proj_;
  nn::Linear fuse_;
  nn::BiLstm video_rnn_;
  nn::Linear csmm_fc1_;
  nn::Linear csmm_fc2_;
  nn::Linear start_fc1_;
  nn::Linear start_fc2_;
  nn::Linear end_fc1_;
  nn::Linear end_fc2_;
  nn::Linear order_fc1_;  // shared between (m1, m2) and (m2, m3)
  nn::Linear order_fc2_;
};

}  // namespace tsg
