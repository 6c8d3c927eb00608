#include "tsg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "tsg/parallel.hpp"
#include "tsg/random.hpp"

namespace tsg {

using nn::Mat;
using nn::Vec;

// ---- config -----------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (!(weights.intra >= 0.0) || !(weights.inter >= 0.0) ||
      !(weights.order >= 0.0)) {
    throw ConfigError("loss weights lambda1..3 must be >= 0");
  }
  if (embed_dim < 1 || mlp_hidden < 1) {
    throw ConfigError("embed_dim and mlp_hidden must be >= 1");
  }
  if (hidden_dim < 2 || hidden_dim % 2 != 0) {
    throw ConfigError("hidden_dim must be even and >= 2");
  }
  if (!std::isfinite(clip_norm)) throw ConfigError("clip_norm must be finite");
  if (std::find(kSelectionMetrics.begin(), kSelectionMetrics.end(),
                selection_metric) == kSelectionMetrics.end()) {
    throw ConfigError("unknown selection_metric '" + selection_metric + "'");
  }
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

void TrainConfig::apply(const KeyValueConfig& kv) {
  static const std::set<std::string> known = {
      "batch_size", "epochs",     "learning_rate", "beta1",
      "beta2",      "adam_epsilon", "lambda1",     "lambda2",
      "lambda3",    "seed",       "embed_dim",     "hidden_dim",
      "mlp_hidden", "clip_norm",  "selection_metric", "threads"};
  for (const auto& [key, value] : kv.values()) {
    if (!known.contains(key)) {
      throw ConfigError("line " + std::to_string(kv.line_of(key)) +
                        ": unknown training config key '" + key + "'");
    }
  }
  auto get_int = [&](const char* key, int& field) {
    if (kv.contains(key)) field = static_cast<int>(kv.get_int(key));
  };
  auto get_double = [&](const char* key, double& field) {
    if (kv.contains(key)) field = kv.get_double(key);
  };
  get_int("batch_size", batch_size);
  get_int("epochs", epochs);
  get_double("learning_rate", learning_rate);
  get_double("beta1", beta1);
  get_double("beta2", beta2);
  get_double("adam_epsilon", adam_epsilon);
  get_double("lambda1", weights.intra);
  get_double("lambda2", weights.inter);
  get_double("lambda3", weights.order);
  if (kv.contains("seed")) seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  get_int("embed_dim", embed_dim);
  get_int("hidden_dim", hidden_dim);
  get_int("mlp_hidden", mlp_hidden);
  get_double("clip_norm", clip_norm);
  if (kv.contains("selection_metric")) selection_metric = kv.get("selection_metric");
  get_int("threads", threads);
}

KeyValueConfig TrainConfig::to_kv() const {
  KeyValueConfig kv;
  auto fmt = [](auto v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  };
  kv.set("batch_size", fmt(batch_size));
  kv.set("epochs", fmt(epochs));
  kv.set("learning_rate", fmt(learning_rate));
  kv.set("beta1", fmt(beta1));
  kv.set("beta2", fmt(beta2));
  kv.set("adam_epsilon", fmt(adam_epsilon));
  kv.set("lambda1", fmt(weights.intra));
  kv.set("lambda2", fmt(weights.inter));
  kv.set("lambda3", fmt(weights.order));
  kv.set("seed", fmt(seed));
  kv.set("embed_dim", fmt(embed_dim));
  kv.set("hidden_dim", fmt(hidden_dim));
  kv.set("mlp_hidden", fmt(mlp_hidden));
  kv.set("clip_norm", fmt(clip_norm));
  kv.set("selection_metric", selection_metric);
  kv.set("threads", fmt(threads));
  return kv;
}

ModelConfig TrainConfig::model_config(int vocab_size, int feature_dim) const {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.feature_dim = feature_dim;
  m.embed_dim = embed_dim;
  m.hidden_dim = hidden_dim;
  m.mlp_hidden = mlp_hidden;
  return m;
}

double selection_value(const MetricsReport& report, const std::string& metric) {
  if (metric == "mIoU") return report.miou;
  if (metric.rfind("R1@", 0) == 0) return report.recall(std::stod(metric.substr(3)));
  throw ConfigError("unknown selection_metric '" + metric + "'");
}

// ---- optimizer --------------------------------------------------------------------

void adam_step(nn::ParameterSet& params, const nn::Gradients& grads,
               AdamState& state, const TrainConfig& config) {
  if (state.m.empty()) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  ++state.t;
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (int i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i].cwiseAbs2();
    params[i].array() -= config.learning_rate * (state.m[i].array() / c1) /
                         ((state.v[i].array() / c2).sqrt() + config.adam_epsilon);
  }
}

double clip_gradients(nn::Gradients& grads, double max_norm) {
  const double norm = std::sqrt(nn::squared_norm(grads));
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

TrainState initial_state(const GroundingModel& model) {
  TrainState s;
  s.adam.m = model.parameters().zeros_like();
  s.adam.v = model.parameters().zeros_like();
  return s;
}

// ---- one triplet -----------------------------------------------------------------

namespace {

void add_scaled(Vec& dst, const Vec& src, double w) {
  if (src.size() == 0 || w == 0.0) return;
  if (dst.size() == 0) {
    dst = w * src;
  } else {
    dst += w * src;
  }
}

LossBundle run_triplet(const GroundingModel& model, const TrainingTriplet& triplet,
                       const LossWeights& weights, nn::Gradients* grads,
                       StepCounters* counters) {
  const GroundingSample& sample = *triplet.sample;
  if (sample.query.ids.size() != sample.query.tokens.size()) {
    throw ValidationError("query of " + sample.video_id +
                          " is not mapped through a vocabulary");
  }
  const bool with_order = weights.order > 0.0;
  const MomentSpan& span = sample.span;

  const QueryPass query = model.run_query(sample.query.ids);
  const VideoPass orig = model.run_video(
      to_model_layout(sample.features->data), query,
      with_order ? std::optional<MomentSpan>(span) : std::nullopt);
  if (counters) ++counters->original_passes;

  OutputGradients g_orig;
  OutputGradients g_pseudo;
  const LossTerm ground = grounding_loss_term(orig.start_scores, orig.end_scores,
                                              span.start_frame, span.end_frame);
  g_orig.start_scores = ground.grad_a;
  g_orig.end_scores = ground.grad_b;

  double l_intra = 0.0, l_inter = 0.0, l_d = 0.0;
  std::optional<VideoPass> pseudo;
  if (weights.any()) {
    const MomentSpan& pspan = triplet.pseudo_span;
    pseudo = model.run_video(
        to_model_layout(triplet.pseudo_features->data), query,
        with_order ? std::optional<MomentSpan>(pspan) : std::nullopt);
    if (counters) ++counters->pseudo_passes;

    if (weights.intra > 0.0) {
      const LossTerm t = intra_loss_term(
          orig.relevance_logits, frame_labels(sample.frames, span),
          pseudo->relevance_logits,
          frame_labels(triplet.pseudo_features->frames(), pspan));
      l_intra = t.value;
      add_scaled(g_orig.relevance_logits, t.grad_a, weights.intra);
      add_scaled(g_pseudo.relevance_logits, t.grad_b, weights.intra);
    }
    if (weights.inter > 0.0) {
      const LossTerm t = inter_loss_term(orig.relevance_logits, span,
                                         pseudo->relevance_logits, pspan);
      l_inter = t.value;
      add_scaled(g_orig.relevance_logits, t.grad_a, weights.inter);
      add_scaled(g_pseudo.relevance_logits, t.grad_b, weights.inter);
    }
    if (with_order) {
      const LossTerm t = order_loss_term(orig.order_logits, pseudo->order_logits,
                                         triplet.degenerate);
      l_d = t.value;
      add_scaled(g_orig.order_logits, t.grad_a, weights.order);
      add_scaled(g_pseudo.order_logits, t.grad_b, weights.order);
    }
  }

  const LossBundle bundle = total_loss(ground.value, l_intra, l_inter, l_d, weights);
  if (grads) {
    QueryGradients q_grad;
    model.backward_video(orig, query, g_orig, q_grad, *grads);
    if (pseudo) model.backward_video(*pseudo, query, g_pseudo, q_grad, *grads);
    model.backward_query(query, q_grad, *grads);
  }
  return bundle;
}

}  // namespace

LossBundle triplet_step(const GroundingModel& model,
                        const TrainingTriplet& triplet,
                        const LossWeights& weights, nn::Gradients& grads,
                        StepCounters* counters) {
  return run_triplet(model, triplet, weights, &grads, counters);
}

LossBundle triplet_loss(const GroundingModel& model,
                        const TrainingTriplet& triplet,
                        const LossWeights& weights) {
  return run_triplet(model, triplet, weights, nullptr, nullptr);
}

// ---- epochs ---------------------------------------------------------------------

std::vector<std::string> enabled_terms(const LossWeights& weights) {
  std::vector<std::string> terms = {"l_g"};
  if (weights.intra > 0.0) terms.push_back("l_intra");
  if (weights.inter > 0.0) terms.push_back("l_inter");
  if (weights.order > 0.0) terms.push_back("l_d");
  return terms;
}

namespace {

void put_terms(nlohmann::ordered_json& j, const LossWeights& w, double l_g,
               double l_intra, double l_inter, double l_d, double total) {
  j["l_g"] = l_g;
  if (w.intra > 0.0) j["l_intra"] = l_intra;
  if (w.inter > 0.0) j["l_inter"] = l_inter;
  if (w.order > 0.0) j["l_d"] = l_d;
  j["total"] = total;
}

}  // namespace

nlohmann::ordered_json to_json(const EpochMetrics& m, const LossWeights& weights) {
  nlohmann::ordered_json j;
  j["event"] = "epoch";
  j["epoch"] = m.epoch;
  j["batches"] = m.batches;
  put_terms(j, weights, m.l_g, m.l_intra, m.l_inter, m.l_d, m.total);
  j["pseudo_passes"] = m.counters.pseudo_passes;
  if (m.validation) j["val"] = to_json(*m.validation);
  return j;
}

std::vector<TrainingTriplet> make_epoch_triplets(const DatasetSplit& split,
                                                 std::uint64_t seed, int epoch) {
  std::vector<TrainingTriplet> out;
  out.reserve(split.samples.size());
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    Rng rng = derive_rng({seed, 0x54524950ULL, static_cast<std::uint64_t>(epoch),
                          static_cast<std::uint64_t>(i)});
    out.push_back(make_triplet(split.samples[i], rng));
  }
  return out;
}

std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch) {
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng({seed, 0x4f524445ULL, static_cast<std::uint64_t>(epoch)});
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle.
  for (int i = count - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[i], order[j]);
  }
  return order;
}

EpochMetrics train_epoch(GroundingModel& model, const DatasetSplit& split,
                         const TrainConfig& config, TrainState& state,
                         const StepLogger& log) {
  config.validate();
  if (split.samples.empty()) throw ValidationError("empty training split");
  const int n = static_cast<int>(split.samples.size());
  const auto triplets = make_epoch_triplets(split, config.seed, state.epoch);
  const auto order = epoch_order(n, config.seed, state.epoch);
  nn::ParameterSet& params = model.parameters();
  if (state.adam.m.empty()) {
    state.adam.m = params.zeros_like();
    state.adam.v = params.zeros_like();
  }

  EpochMetrics metrics;
  metrics.epoch = state.epoch + 1;
  const int max_batch = std::min(config.batch_size, n);
  std::vector<nn::Gradients> item_grads(max_batch, params.zeros_like());
  std::vector<LossBundle> bundles(max_batch);
  std::vector<StepCounters> counters(max_batch);
  nn::Gradients batch_grad = params.zeros_like();

  for (int begin = 0; begin < n; begin += config.batch_size) {
    const int b = std::min(config.batch_size, n - begin);
    try {
      parallel_for(b, config.threads, [&](int k) {
        nn::set_zero(item_grads[k]);
        counters[k] = StepCounters{};
        bundles[k] = triplet_step(model, triplets[order[begin + k]],
                                  config.weights, item_grads[k], &counters[k]);
      });
    } catch (const NumericalError& e) {
      std::string ids;
      for (int k = 0; k < b; ++k) {
        if (k) ids += ", ";
        ids += split.samples[order[begin + k]].video_id;
      }
      throw NumericalError(std::string(e.what()) + " in batch [" + ids + "]");
    }

    // Reduce in item order so the result does not depend on thread count.
    nn::set_zero(batch_grad);
    LossBundle mean;
    for (int k = 0; k < b; ++k) {
      nn::add_into(batch_grad, item_grads[k]);
      mean.l_g += bundles[k].l_g / b;
      mean.l_intra += bundles[k].l_intra / b;
      mean.l_inter += bundles[k].l_inter / b;
      mean.l_d += bundles[k].l_d / b;
      mean.total += bundles[k].total / b;
      metrics.counters.original_passes += counters[k].original_passes;
      metrics.counters.pseudo_passes += counters[k].pseudo_passes;
    }
    for (auto& g : batch_grad) g /= static_cast<double>(b);
    const double norm = clip_gradients(batch_grad, config.clip_norm);
    if (!std::isfinite(norm)) {
      throw NumericalError("non-finite gradient norm at step " +
                           std::to_string(state.step + 1));
    }
    adam_step(params, batch_grad, state.adam, config);
    ++state.step;

    metrics.batches += 1;
    metrics.l_g += mean.l_g;
    metrics.l_intra += mean.l_intra;
    metrics.l_inter += mean.l_inter;
    metrics.l_d += mean.l_d;
    metrics.total += mean.total;

    if (log) {
      nlohmann::ordered_json j;
      j["event"] = "step";
      j["epoch"] = metrics.epoch;
      j["step"] = state.step;
      j["batch_size"] = b;
      put_terms(j, config.weights, mean.l_g, mean.l_intra, mean.l_inter, mean.l_d,
                mean.total);
      j["grad_norm"] = norm;
      log(j);
    }
  }
  const double nb = metrics.batches;
  metrics.l_g /= nb;
  metrics.l_intra /= nb;
  metrics.l_inter /= nb;
  metrics.l_d /= nb;
  metrics.total /= nb;
  state.epoch += 1;
  return metrics;
}

// ---- checkpoints ------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'T', 'S', 'G', 'C', 'K', 'P', 'T', '\0'};

nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"feature_dim", c.feature_dim},
          {"embed_dim", c.embed_dim},   {"hidden_dim", c.hidden_dim},
          {"mlp_hidden", c.mlp_hidden}, {"order_classes", c.order_classes}};
}

ModelConfig model_config_from(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.order_classes = j.at("order_classes").get<int>();
  return c;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IntegrityError(std::string("checkpoint truncated while reading ") + what);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const GroundingModel& model, const Vocabulary& vocab,
                     const TrainConfig* config, const TrainState* state) {
  const nn::ParameterSet& params = model.parameters();
  std::vector<std::pair<std::string, const Mat*>> tensors;
  for (int i = 0; i < params.size(); ++i) {
    tensors.emplace_back(params.name(i), &params[i]);
  }
  nlohmann::ordered_json header;
  header["format"] = "tsg-checkpoint";
  header["model"] = model_config_json(model.config());
  header["vocabulary"] = vocab.tokens();
  if (config) {
    const KeyValueConfig kv = config->to_kv();
    nlohmann::ordered_json j;
    for (const auto& [k, v] : kv.values()) j[k] = v;
    header["train_config"] = j;
  }
  if (state) {
    header["state"] = {{"epoch", state->epoch},
                       {"step", state->step},
                       {"adam_t", state->adam.t},
                       {"best_metric", state->best_metric},
                       {"best_epoch", state->best_epoch}};
    const bool has_moments = !state->adam.m.empty();
    header["state"]["has_moments"] = has_moments;
    if (has_moments) {
      for (int i = 0; i < params.size(); ++i) {
        tensors.emplace_back("adam.m/" + params.name(i), &state->adam.m[i]);
      }
      for (int i = 0; i < params.size(); ++i) {
        tensors.emplace_back("adam.v/" + params.name(i), &state->adam.v[i]);
      }
    }
  }
  auto list = nlohmann::ordered_json::array();
  for (const auto& [name, m] : tensors) {
    list.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : tensors) {
      out.write(reinterpret_cast<const char*>(m->data()),
                static_cast<std::streamsize>(m->size() * sizeof(double)));
    }
    if (!out) throw Error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IntegrityError(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto length = read_pod<std::uint64_t>(in, "header length");
  if (length > (1ULL << 30)) throw IntegrityError("implausible checkpoint header");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw IntegrityError("checkpoint truncated in header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model_config = model_config_from(header.at("model"));
    ck.vocabulary = Vocabulary(header.at("vocabulary").get<std::vector<std::string>>());
    if (header.contains("train_config")) {
      KeyValueConfig kv;
      for (const auto& [k, v] : header["train_config"].items()) {
        kv.set(k, v.get<std::string>());
      }
      TrainConfig tc;
      tc.apply(kv);
      ck.train_config = tc;
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed checkpoint header: ") + e.what());
  }

  std::vector<std::pair<std::string, Mat>> tensors;
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) throw IntegrityError("negative tensor shape");
    Mat m(rows, cols);
    const auto bytes = static_cast<std::streamsize>(m.size() * sizeof(double));
    if (!in.read(reinterpret_cast<char*>(m.data()), bytes)) {
      throw IntegrityError("checkpoint truncated in tensor " +
                           t.at("name").get<std::string>());
    }
    tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IntegrityError("trailing bytes after checkpoint tensors");
  }

  std::vector<Mat> adam_m, adam_v;
  for (auto& [name, m] : tensors) {
    if (name.rfind("adam.m/", 0) == 0) {
      adam_m.push_back(std::move(m));
    } else if (name.rfind("adam.v/", 0) == 0) {
      adam_v.push_back(std::move(m));
    } else {
      const int i = ck.parameters.add(name, static_cast<int>(m.rows()),
                                      static_cast<int>(m.cols()));
      ck.parameters[i] = std::move(m);
    }
  }
  if (header.contains("state")) {
    const auto& s = header["state"];
    TrainState st;
    st.epoch = s.at("epoch").get<int>();
    st.step = s.at("step").get<long long>();
    st.adam.t = s.at("adam_t").get<long long>();
    st.best_metric = s.at("best_metric").get<double>();
    st.best_epoch = s.at("best_epoch").get<int>();
    if (s.value("has_moments", false)) {
      if (static_cast<int>(adam_m.size()) != ck.parameters.size() ||
          adam_v.size() != adam_m.size()) {
        throw IntegrityError("optimizer moments do not match parameters");
      }
      st.adam.m = std::move(adam_m);
      st.adam.v = std::move(adam_v);
    }
    ck.state = std::move(st);
  }
  return ck;
}

// ---- fit --------------------------------------------------------------------------

FitResult fit(GroundingModel& model, const Vocabulary& vocab,
              const DatasetSplit& training, const DatasetSplit& val,
              const TrainConfig& config, TrainState& state,
              const std::optional<std::filesystem::path>& run_dir) {
  config.validate();
  if (training.samples.empty()) throw ValidationError("empty training split");
  if (val.samples.empty()) throw ValidationError("empty val split");

  FitResult result;
  result.best_parameters = model.parameters();
  result.best_epoch = state.best_epoch;
  result.best_metric = state.best_metric;

  std::ofstream log_file;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    std::ofstream snapshot(*run_dir / "train_config.txt");
    snapshot << config.to_kv().to_string();
    const auto mode = state.epoch > 0 ? std::ios::app : std::ios::trunc;
    log_file.open(*run_dir / "train_log.jsonl", std::ios::out | mode);
    const auto best_path = *run_dir / "checkpoint_best.bin";
    if (state.best_epoch > 0 && std::filesystem::exists(best_path)) {
      result.best_parameters = load_checkpoint(best_path).parameters;
    }
  }
  StepLogger logger;
  if (log_file.is_open()) {
    logger = [&](const nlohmann::ordered_json& j) { log_file << j.dump() << '\n'; };
  }

  while (state.epoch < config.epochs) {
    EpochMetrics m = train_epoch(model, training, config, state, logger);
    ModelPredictor predictor(model);
    m.validation = evaluate(predictor, val, kDefaultThresholds, config.threads).report;
    const double value = selection_value(*m.validation, config.selection_metric);
    if (value > state.best_metric) {
      state.best_metric = value;
      state.best_epoch = m.epoch;
      result.best_parameters = model.parameters();
      if (run_dir) {
        save_checkpoint(*run_dir / "checkpoint_best.bin", model, vocab, &config);
      }
    }
    if (logger) logger(to_json(m, config.weights));
    if (run_dir) {
      log_file.flush();
      save_checkpoint(*run_dir / "checkpoint_last.bin", model, vocab, &config, &state);
    }
    result.history.push_back(std::move(m));
  }
  result.best_epoch = state.best_epoch;
  result.best_metric = state.best_metric;

  if (run_dir) {
    auto hist = nlohmann::ordered_json::array();
    for (const auto& m : result.history) hist.push_back(to_json(m, config.weights));
    nlohmann::ordered_json j;
    j["best_epoch"] = result.best_epoch;
    j["best_metric"] = result.best_metric;
    j["selection_metric"] = config.selection_metric;
    j["history"] = hist;
    std::ofstream(*run_dir / "history.json") << j.dump(2) << '\n';
  }
  return result;
}

Vocabulary prepare_vocabulary(DatasetSplit& training,
                              std::vector<DatasetSplit*> others) {
  Vocabulary vocab = Vocabulary::build({&training});
  vocab.map(training);
  for (auto* s : others) vocab.map(*s);
  return vocab;
}

}  // namespace tsg
