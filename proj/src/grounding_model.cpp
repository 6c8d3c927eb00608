#include "tsg/grounding_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tsg {

using nn::Mat;
using nn::Vec;

void ModelConfig::validate() const {
  if (vocab_size < 1 || feature_dim < 1 || embed_dim < 1 || hidden_dim < 2 ||
      mlp_hidden < 1 || order_classes < 2) {
    throw ConfigError("model dimensions must be positive");
  }
  if (hidden_dim % 2 != 0) throw ConfigError("hidden_dim must be even");
}

// ---- batching -------------------------------------------------------------------

int valid_length(const Eigen::Ref<const Eigen::RowVectorXd>& mask) {
  int n = 0;
  while (n < mask.size() && mask(n) > 0.5) ++n;
  for (Eigen::Index t = n; t < mask.size(); ++t) {
    if (mask(t) > 0.5) throw ValidationError("mask is not a prefix mask");
  }
  if (n == 0) throw ValidationError("all-masked input");
  return n;
}

Mat to_model_layout(const FeatureMatrix& rows) {
  return rows.cast<double>().transpose();
}

PaddedBatch collate(const std::vector<const FrameFeatures*>& videos,
                    const std::vector<const std::vector<int>*>& queries) {
  if (videos.size() != queries.size() || videos.empty()) {
    throw ValidationError("batch needs matching, non-empty video/query lists");
  }
  PaddedBatch b;
  const int dim = videos.front()->dim();
  for (std::size_t i = 0; i < videos.size(); ++i) {
    if (videos[i]->dim() != dim) throw ValidationError("feature dim mismatch");
    b.max_frames = std::max(b.max_frames, videos[i]->frames());
    b.max_words = std::max(b.max_words, static_cast<int>(queries[i]->size()));
  }
  const int n = static_cast<int>(videos.size());
  b.frame_mask = Eigen::MatrixXd::Zero(n, b.max_frames);
  b.word_mask = Eigen::MatrixXd::Zero(n, b.max_words);
  for (int i = 0; i < n; ++i) {
    const int frames = videos[i]->frames();
    Mat f = Mat::Zero(dim, b.max_frames);
    f.leftCols(frames) = to_model_layout(videos[i]->data);
    b.features.push_back(std::move(f));
    b.frame_mask.row(i).head(frames).setOnes();

    std::vector<int> ids = *queries[i];
    b.word_mask.row(i).head(static_cast<Eigen::Index>(ids.size())).setOnes();
    ids.resize(b.max_words, Vocabulary::kUnknownId);
    b.token_ids.push_back(std::move(ids));
  }
  return b;
}

// ---- construction ----------------------------------------------------------------

GroundingModel::GroundingModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  build();
  Rng rng = derive_rng({seed, 0x1417});
  nn::initialize(params_, rng);
  // Embedding rows behave like word vectors rather than a fan-in layer.
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat& emb = params_[embedding_];
  for (Eigen::Index k = 0; k < emb.size(); ++k) emb.data()[k] = normal(rng);
}

GroundingModel::GroundingModel(const ModelConfig& config,
                               nn::ParameterSet params)
    : config_(config) {
  config_.validate();
  build();
  if (params.size() != params_.size()) {
    throw ValidationError("parameter count does not match model config");
  }
  for (int i = 0; i < params_.size(); ++i) {
    const int j = params.find(params_.name(i));
    if (j < 0) throw ValidationError("missing parameter " + params_.name(i));
    if (params[j].rows() != params_[i].rows() ||
        params[j].cols() != params_[i].cols()) {
      throw ValidationError("shape mismatch for " + params_.name(i));
    }
    if (!params[j].allFinite()) {
      throw ValidationError("non-finite values in " + params_.name(i));
    }
    params_[i] = params[j];
  }
}

void GroundingModel::build() {
  const int d = config_.hidden_dim;
  const int half = d / 2;
  const int e = config_.embed_dim;
  const int m = config_.mlp_hidden;
  embedding_ = params_.add("query.embedding", e, config_.vocab_size);
  query_layer1_ = nn::BiLstm::create(params_, "query.rnn1", e, half);
  query_layer2_ = nn::BiLstm::create(params_, "query.rnn2", d, half);
  sentence_proj_ = nn::Linear::create(params_, "query.sentence", d, d);
  frame_proj_ = nn::Linear::create(params_, "video.proj", config_.feature_dim, d);
  fuse_ = nn::Linear::create(params_, "video.fuse", 2 * d, d);
  video_rnn_ = nn::BiLstm::create(params_, "video.rnn", d, half);
  csmm_fc1_ = nn::Linear::create(params_, "csmm.fc1", 2 * d, m);
  csmm_fc2_ = nn::Linear::create(params_, "csmm.fc2", m, 1);
  start_fc1_ = nn::Linear::create(params_, "span.start.fc1", 2 * d, m);
  start_fc2_ = nn::Linear::create(params_, "span.start.fc2", m, 1);
  end_fc1_ = nn::Linear::create(params_, "span.end.fc1", 2 * d, m);
  end_fc2_ = nn::Linear::create(params_, "span.end.fc2", m, 1);
  order_fc1_ = nn::Linear::create(params_, "order.fc1", 2 * d, m);
  order_fc2_ = nn::Linear::create(params_, "order.fc2", d + 2 * m,
                                  config_.order_classes);
}

int GroundingModel::load_embeddings(
    const Vocabulary& vocab,
    const std::map<std::string, std::vector<float>>& table) {
  Mat& emb = params_[embedding_];
  int copied = 0;
  for (int id = 0; id < vocab.size() && id < emb.cols(); ++id) {
    auto it = table.find(vocab.token(id));
    if (it == table.end()) continue;
    if (static_cast<int>(it->second.size()) != config_.embed_dim) {
      throw ConfigError("embedding file dimension " +
                        std::to_string(it->second.size()) +
                        " does not match embed_dim " +
                        std::to_string(config_.embed_dim));
    }
    for (int k = 0; k < config_.embed_dim; ++k) emb(k, id) = it->second[k];
    ++copied;
  }
  return copied;
}

// ---- forward ------------------------------------------------------------------------

QueryPass GroundingModel::run_query(const std::vector<int>& ids) const {
  if (ids.empty()) throw ValidationError("empty token list");
  QueryPass q;
  q.ids = ids;
  const Mat& emb = params_[embedding_];
  q.embedded.resize(emb.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const int id = (ids[n] >= 0 && ids[n] < emb.cols()) ? ids[n]
                                                         : Vocabulary::kUnknownId;
    q.ids[n] = id;
    q.embedded.col(static_cast<Eigen::Index>(n)) = emb.col(id);
  }
  q.layer1_out = query_layer1_.forward(params_, q.embedded, q.layer1);
  q.words = query_layer2_.forward(params_, q.layer1_out, q.layer2);
  const int half = config_.hidden_dim / 2;
  const Eigen::Index last = q.words.cols() - 1;
  q.final_state.resize(config_.hidden_dim);
  q.final_state.head(half) = q.words.col(last).head(half);
  q.final_state.tail(half) = q.words.col(0).tail(half);
  q.sentence = sentence_proj_.forward(params_, q.final_state);
  return q;
}

EncodedQuery GroundingModel::encode_query(const std::vector<int>& ids) const {
  auto q = run_query(ids);
  return EncodedQuery{std::move(q.words), std::move(q.sentence)};
}

namespace {

struct EncoderState {
  Mat projected, attention, context, fuse_in, fused, encoded;
  nn::BiLstmCache recurrent;
};

}  // namespace

VideoPass GroundingModel::run_video(
    const Mat& features, const QueryPass& query,
    const std::optional<MomentSpan>& order_span) const {
  if (features.rows() != config_.feature_dim) {
    throw ValidationError("feature dim " + std::to_string(features.rows()) +
                          " != model feature dim " +
                          std::to_string(config_.feature_dim));
  }
  if (features.cols() < 1) throw ValidationError("video has no frames");
  const int d = config_.hidden_dim;
  const Eigen::Index frames = features.cols();
  VideoPass v;
  v.features = features;

  // Query-guided encoder.
  v.projected = frame_proj_.forward(params_, features);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  v.attention = nn::softmax_rows((v.projected.transpose() * query.words) * scale);
  v.context = query.words * v.attention.transpose();
  v.fuse_in.resize(2 * d, frames);
  v.fuse_in.topRows(d) = v.projected;
  v.fuse_in.bottomRows(d) = v.context;
  v.fused = fuse_.forward(params_, v.fuse_in).array().tanh().matrix();
  v.encoded = video_rnn_.forward(params_, v.fused, v.recurrent);

  // Relevance and span heads.
  v.joint.resize(2 * d, frames);
  v.joint.topRows(d) = v.encoded;
  v.joint.bottomRows(d) = query.sentence.replicate(1, frames);
  v.csmm_pre = csmm_fc1_.forward(params_, v.joint);
  v.relevance_logits =
      csmm_fc2_.forward(params_, nn::relu(v.csmm_pre)).row(0).transpose();
  v.relevance = nn::sigmoid(v.relevance_logits);
  v.gated = v.joint * v.relevance.asDiagonal();
  v.start_pre = start_fc1_.forward(params_, v.gated);
  v.end_pre = end_fc1_.forward(params_, v.gated);
  v.start_scores =
      start_fc2_.forward(params_, nn::relu(v.start_pre)).row(0).transpose();
  v.end_scores = end_fc2_.forward(params_, nn::relu(v.end_pre)).row(0).transpose();
  v.start_prob = nn::softmax(v.start_scores);
  v.end_prob = nn::softmax(v.end_scores);

  if (order_span) {
    v.order_span = order_span;
    v.pooled = pool_moments(v.encoded, *order_span);
    Vec pair(2 * d);
    pair << v.pooled.before, v.pooled.target;
    v.order_pre1 = order_fc1_.forward(params_, pair);
    pair << v.pooled.target, v.pooled.after;
    v.order_pre2 = order_fc1_.forward(params_, pair);
    v.order_h1 = nn::relu(v.order_pre1);
    v.order_h2 = nn::relu(v.order_pre2);
    Vec cat(d + 2 * config_.mlp_hidden);
    cat << v.pooled.target, v.order_h1, v.order_h2;
    v.order_logits = order_fc2_.forward(params_, cat);
  }
  return v;
}

ModelOutputs GroundingModel::outputs_of(const VideoPass& pass) {
  ModelOutputs o;
  o.relevance_logits = pass.relevance_logits;
  o.relevance = pass.relevance;
  o.start_scores = pass.start_scores;
  o.end_scores = pass.end_scores;
  o.start_prob = pass.start_prob;
  o.end_prob = pass.end_prob;
  o.order_logits = pass.order_logits;
  return o;
}

ModelOutputs GroundingModel::forward(
    const Mat& features, const std::vector<int>& ids,
    const std::optional<MomentSpan>& order_span) const {
  const auto q = run_query(ids);
  return outputs_of(run_video(features, q, order_span));
}

std::vector<ModelOutputs> GroundingModel::forward(
    const PaddedBatch& batch) const {
  std::vector<ModelOutputs> out;
  out.reserve(batch.size());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < batch.size(); ++i) {
    const int frames = valid_length(batch.frame_mask.row(i));
    const int words = valid_length(batch.word_mask.row(i));
    std::vector<int> ids(batch.token_ids[i].begin(),
                         batch.token_ids[i].begin() + words);
    ModelOutputs o = forward(batch.features[i].leftCols(frames), ids);
    auto pad = [&](Vec& v, double fill) {
      Vec p = Vec::Constant(batch.max_frames, fill);
      p.head(frames) = v;
      v = std::move(p);
    };
    pad(o.relevance_logits, 0.0);
    pad(o.relevance, 0.0);
    pad(o.start_scores, neg_inf);
    pad(o.end_scores, neg_inf);
    pad(o.start_prob, 0.0);
    pad(o.end_prob, 0.0);
    out.push_back(std::move(o));
  }
  return out;
}

// ---- module-level operations ------------------------------------------------------

EncodedVideo GroundingModel::encode_video(const Mat& features, const Mat& words,
                                          const Vec& mask) const {
  Eigen::Index frames = features.cols();
  if (mask.size() > 0) {
    if (mask.size() != features.cols()) {
      throw ValidationError("mask length does not match frame count");
    }
    frames = valid_length(mask.transpose());
  }
  QueryPass q;
  q.words = words;
  q.sentence = Vec::Zero(config_.hidden_dim);
  const auto pass = run_video(features.leftCols(frames), q, std::nullopt);
  EncodedVideo out;
  out.frames = Mat::Zero(config_.hidden_dim, features.cols());
  out.frames.leftCols(frames) = pass.encoded;
  return out;
}

Vec GroundingModel::csmm_logits(const Mat& encoded, const Vec& sentence) const {
  const int d = config_.hidden_dim;
  Mat joint(2 * d, encoded.cols());
  joint.topRows(d) = encoded;
  joint.bottomRows(d) = sentence.replicate(1, encoded.cols());
  return csmm_fc2_
      .forward(params_, nn::relu(csmm_fc1_.forward(params_, joint)))
      .row(0)
      .transpose();
}

Vec GroundingModel::csmm(const Mat& encoded, const Vec& sentence) const {
  return nn::sigmoid(csmm_logits(encoded, sentence));
}

GroundingModel::Boundaries GroundingModel::predict_boundaries(
    const Mat& encoded, const Vec& sentence, const Vec& relevance,
    const Vec& mask) const {
  const int d = config_.hidden_dim;
  const Eigen::Index total = encoded.cols();
  Eigen::Index frames = total;
  if (mask.size() > 0) frames = valid_length(mask.transpose());
  Mat gated(2 * d, total);
  gated.topRows(d) = encoded;
  gated.bottomRows(d) = sentence.replicate(1, total);
  gated = gated * relevance.asDiagonal();

  Boundaries b;
  b.start_scores =
      start_fc2_.forward(params_, nn::relu(start_fc1_.forward(params_, gated)))
          .row(0)
          .transpose();
  b.end_scores =
      end_fc2_.forward(params_, nn::relu(end_fc1_.forward(params_, gated)))
          .row(0)
          .transpose();
  const double neg_inf = -std::numeric_limits<double>::infinity();
  b.start_prob = Vec::Zero(total);
  b.end_prob = Vec::Zero(total);
  b.start_prob.head(frames) = nn::softmax(b.start_scores.head(frames));
  b.end_prob.head(frames) = nn::softmax(b.end_scores.head(frames));
  b.start_scores.tail(total - frames).setConstant(neg_inf);
  b.end_scores.tail(total - frames).setConstant(neg_inf);
  return b;
}

PooledMoments GroundingModel::pool_moments(const Mat& encoded,
                                           const MomentSpan& span) {
  const Eigen::Index frames = encoded.cols();
  if (span.start_frame < 0 || span.end_frame >= frames ||
      span.end_frame < span.start_frame) {
    throw ValidationError("moment span outside encoded video");
  }
  // Sorted summation makes each mean independent of frame order bit for bit.
  auto mean_of = [&](Eigen::Index from, Eigen::Index count) -> Vec {
    Vec out = Vec::Zero(encoded.rows());
    if (count <= 0) return out;
    std::vector<double> values(count);
    for (Eigen::Index r = 0; r < encoded.rows(); ++r) {
      for (Eigen::Index k = 0; k < count; ++k) values[k] = encoded(r, from + k);
      std::sort(values.begin(), values.end());
      double sum = 0.0;
      for (double v : values) sum += v;
      out(r) = sum / static_cast<double>(count);
    }
    return out;
  };
  PooledMoments m;
  m.before = mean_of(0, span.start_frame);
  m.target = mean_of(span.start_frame, span.length());
  m.after = mean_of(span.end_frame + 1, frames - span.end_frame - 1);
  return m;
}

Vec GroundingModel::order_logits(const PooledMoments& m) const {
  const int d = config_.hidden_dim;
  Vec pair(2 * d);
  pair << m.before, m.target;
  const Vec h1 = nn::relu(order_fc1_.forward(params_, pair));
  pair << m.target, m.after;
  const Vec h2 = nn::relu(order_fc1_.forward(params_, pair));
  Vec cat(d + 2 * config_.mlp_hidden);
  cat << m.target, h1, h2;
  return order_fc2_.forward(params_, cat);
}

// ---- backward ------------------------------------------------------------------------

void GroundingModel::backward_video(const VideoPass& v, const QueryPass& query,
                                    const OutputGradients& grad,
                                    QueryGradients& query_grad,
                                    nn::Gradients& g) const {
  const int d = config_.hidden_dim;
  const Eigen::Index frames = v.encoded.cols();
  if (query_grad.words.size() == 0) {
    query_grad.words = Mat::Zero(query.words.rows(), query.words.cols());
  }
  if (query_grad.sentence.size() == 0) {
    query_grad.sentence = Vec::Zero(d);
  }

  // Span heads.
  Mat d_gated = Mat::Zero(2 * d, frames);
  auto head_backward = [&](const nn::Linear& fc1, const nn::Linear& fc2,
                           const Mat& pre, const Vec& d_scores) {
    if (d_scores.size() == 0) return;
    const Mat hidden = nn::relu(pre);
    Mat d_hidden = fc2.backward(params_, hidden, d_scores.transpose(), g);
    d_hidden.array() *= nn::relu_mask(pre).array();
    d_gated += fc1.backward(params_, v.gated, d_hidden, g);
  };
  head_backward(start_fc1_, start_fc2_, v.start_pre, grad.start_scores);
  head_backward(end_fc1_, end_fc2_, v.end_pre, grad.end_scores);

  // Gating: gated = joint * diag(c).
  Mat d_joint = d_gated * v.relevance.asDiagonal();
  const Vec d_relevance =
      (d_gated.array() * v.joint.array()).colwise().sum().transpose();
  Vec d_logits = (d_relevance.array() * v.relevance.array() *
                  (1.0 - v.relevance.array()))
                     .matrix();
  if (grad.relevance_logits.size() > 0) d_logits += grad.relevance_logits;

  {
    const Mat hidden = nn::relu(v.csmm_pre);
    Mat d_hidden = csmm_fc2_.backward(params_, hidden, d_logits.transpose(), g);
    d_hidden.array() *= nn::relu_mask(v.csmm_pre).array();
    d_joint += csmm_fc1_.backward(params_, v.joint, d_hidden, g);
  }

  Mat d_encoded = d_joint.topRows(d);
  query_grad.sentence += d_joint.bottomRows(d).rowwise().sum();

  // Order discriminator.
  if (grad.order_logits.size() > 0 && v.order_span) {
    const int m = config_.mlp_hidden;
    Vec cat(d + 2 * m);
    cat << v.pooled.target, v.order_h1, v.order_h2;
    const Vec d_cat = order_fc2_.backward(params_, cat, grad.order_logits, g);
    Vec d_before = Vec::Zero(d);
    Vec d_target = d_cat.head(d);
    Vec d_after = Vec::Zero(d);

    const Vec d_pre1 =
        (d_cat.segment(d, m).array() * nn::relu_mask(v.order_pre1).array())
            .matrix();
    const Vec d_pre2 =
        (d_cat.tail(m).array() * nn::relu_mask(v.order_pre2).array()).matrix();
    Vec pair(2 * d);
    pair << v.pooled.before, v.pooled.target;
    Vec d_pair = order_fc1_.backward(params_, pair, d_pre1, g);
    d_before += d_pair.head(d);
    d_target += d_pair.tail(d);
    pair << v.pooled.target, v.pooled.after;
    d_pair = order_fc1_.backward(params_, pair, d_pre2, g);
    d_target += d_pair.head(d);
    d_after += d_pair.tail(d);

    const MomentSpan& s = *v.order_span;
    auto spread = [&](const Vec& dm, Eigen::Index from, Eigen::Index count) {
      if (count <= 0) return;
      d_encoded.middleCols(from, count).colwise() +=
          dm / static_cast<double>(count);
    };
    spread(d_before, 0, s.start_frame);
    spread(d_target, s.start_frame, s.length());
    spread(d_after, s.end_frame + 1, frames - s.end_frame - 1);
  }

  // Encoder.
  const Mat d_fused = video_rnn_.backward(params_, v.recurrent, d_encoded, g);
  const Mat d_fuse_pre =
      (d_fused.array() * (1.0 - v.fused.array().square())).matrix();
  const Mat d_fuse_in = fuse_.backward(params_, v.fuse_in, d_fuse_pre, g);
  Mat d_projected = d_fuse_in.topRows(d);
  const Mat d_context = d_fuse_in.bottomRows(d);

  // context = W A^T with A = softmax_rows(P^T W * scale).
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  query_grad.words.noalias() += d_context * v.attention;
  const Mat d_attention = d_context.transpose() * query.words;  // T x N
  const Eigen::VectorXd row_dot =
      (d_attention.array() * v.attention.array()).rowwise().sum();
  const Mat d_scores =
      (v.attention.array() *
       (d_attention.colwise() - row_dot).array())
          .matrix() *
      scale;
  d_projected.noalias() += query.words * d_scores.transpose();
  query_grad.words.noalias() += v.projected * d_scores;

  frame_proj_.backward(params_, v.features, d_projected, g);
}

void GroundingModel::backward_query(const QueryPass& q,
                                    const QueryGradients& grad,
                                    nn::Gradients& g) const {
  const int half = config_.hidden_dim / 2;
  Mat d_words = grad.words.size() > 0
                    ? grad.words
                    : Mat::Zero(q.words.rows(), q.words.cols());
  if (grad.sentence.size() > 0) {
    const Vec d_final =
        sentence_proj_.backward(params_, q.final_state, grad.sentence, g);
    d_words.col(d_words.cols() - 1).head(half) += d_final.head(half);
    d_words.col(0).tail(half) += d_final.tail(half);
  }
  const Mat d_layer1 = query_layer2_.backward(params_, q.layer2, d_words, g);
  const Mat d_embedded = query_layer1_.backward(params_, q.layer1, d_layer1, g);
  Mat& d_emb = g[embedding_];
  for (std::size_t n = 0; n < q.ids.size(); ++n) {
    d_emb.col(q.ids[n]) += d_embedded.col(static_cast<Eigen::Index>(n));
  }
}

}  // namespace tsg
