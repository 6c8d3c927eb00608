#include "tsg/synthetic_benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "tsg/random.hpp"

namespace tsg {

namespace {

const char* const kActionWords[] = {
    "awaken", "undress", "open",  "close",  "sit",    "eat",
    "drink",  "laugh",   "run",   "read",   "wash",   "cook",
    "pour",   "throw",   "sneeze", "dress", "sweep",  "climb",
    "lie",    "smile",   "stand", "hold",   "watch",  "tidy"};

const char* const kTemplates[] = {"person {} something", "a person {} the object",
                                  "someone {} it", "person {} the thing",
                                  "the person {} something"};

const char* const kSplitOrder[] = {"training", "val", "test-iid", "test-ood"};

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

std::string fill_template(const std::string& tmpl, const std::string& token) {
  const auto pos = tmpl.find("{}");
  return tmpl.substr(0, pos) + token + tmpl.substr(pos + 2);
}

double sample_truncated(const PositionDistribution& d, double upper, Rng& rng) {
  const double lo = d.lo;
  const double hi = std::min(d.hi, upper);
  std::normal_distribution<double> normal(d.mean, d.stddev);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double x = normal(rng);
    if (x >= lo && x <= hi) return x;
  }
  std::uniform_real_distribution<double> u(lo, hi);
  return u(rng);
}

}  // namespace

double PositionDistribution::mass(double a, double b) const {
  a = std::max(a, lo);
  b = std::min(b, hi);
  if (b <= a) return 0.0;
  const double z = normal_cdf((hi - mean) / stddev) - normal_cdf((lo - mean) / stddev);
  return (normal_cdf((b - mean) / stddev) - normal_cdf((a - mean) / stddev)) / z;
}

// ---- config ---------------------------------------------------------------------

void BenchConfig::validate() const {
  if (num_tokens < 2) throw ConfigError("num_tokens must be >= 2");
  if (train_videos < 1 || val_videos < 1 || test_iid_videos < 1 ||
      test_ood_videos < 1) {
    throw ConfigError("every split needs at least one video");
  }
  if (min_frames < 1 || max_frames < min_frames) {
    throw ConfigError("invalid frame range");
  }
  if (min_moment < 1 || max_moment < min_moment || max_moment > min_frames) {
    throw ConfigError("invalid moment length range");
  }
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (!(frame_rate > 0.0)) throw ConfigError("frame_rate must be positive");
  if (signature_strength < 0.0 || noise < 0.0) {
    throw ConfigError("signature_strength and noise must be non-negative");
  }
  if (!(0.0 <= bias_lo && bias_lo < bias_hi && bias_hi <= 1.0) ||
      !(0.0 <= ood_lo && ood_lo < ood_hi && ood_hi <= 1.0)) {
    throw ConfigError("position regions must be non-empty sub-intervals of [0,1]");
  }
  if (!(bias_hi <= ood_lo || ood_hi <= bias_lo)) {
    throw ConfigError("bias and ood position regions must be disjoint");
  }
  if (!(position_stddev > 0.0)) throw ConfigError("position_stddev must be positive");
  if (min_background_run < 1 || max_background_run < min_background_run) {
    throw ConfigError("invalid background run range");
  }
  // Every video length must admit a moment start inside both regions.
  for (const auto& [lo, name] : {std::pair{bias_lo, "bias"}, std::pair{ood_lo, "ood"}}) {
    const double upper = static_cast<double>(min_frames - max_moment) / min_frames;
    if (lo > upper + 1e-12) {
      throw ConfigError(std::string("infeasible ") + name +
                        " position region for the shortest video");
    }
  }
}

namespace {

template <typename T>
void assign_from(const KeyValueConfig& kv, const std::string& key, T& field) {
  if (!kv.contains(key)) return;
  if constexpr (std::is_floating_point_v<T>) {
    field = kv.get_double(key);
  } else {
    field = static_cast<T>(kv.get_int(key));
  }
}

}  // namespace

#define TSG_BENCH_FIELDS(X)                                              \
  X(num_tokens) X(train_videos) X(val_videos) X(test_iid_videos)         \
  X(test_ood_videos) X(min_frames) X(max_frames) X(feature_dim)          \
  X(min_moment) X(max_moment) X(frame_rate) X(signature_strength)        \
  X(noise) X(bias_lo) X(bias_hi) X(ood_lo) X(ood_hi) X(position_stddev)  \
  X(min_background_run) X(max_background_run) X(seed)

BenchConfig BenchConfig::from_kv(const KeyValueConfig& kv) {
  static const std::set<std::string> known = {
#define X(name) #name,
      TSG_BENCH_FIELDS(X)
#undef X
  };
  for (const auto& [key, value] : kv.values()) {
    if (!known.contains(key)) {
      throw ConfigError("line " + std::to_string(kv.line_of(key)) +
                        ": unknown benchmark config key '" + key + "'");
    }
  }
  BenchConfig c;
#define X(name) assign_from(kv, #name, c.name);
  TSG_BENCH_FIELDS(X)
#undef X
  c.validate();
  return c;
}

KeyValueConfig BenchConfig::to_kv() const {
  KeyValueConfig kv;
  auto fmt = [](auto v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  };
#define X(name) kv.set(#name, fmt(name));
  TSG_BENCH_FIELDS(X)
#undef X
  return kv;
}

#undef TSG_BENCH_FIELDS

// ---- metadata ------------------------------------------------------------------

int BenchmarkMetadata::token_index(const std::string& token) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == token) return static_cast<int>(i);
  }
  return -1;
}

int BenchmarkMetadata::action_of(const TokenSequence& query) const {
  for (const auto& t : query.tokens) {
    if (int k = token_index(t); k >= 0) return k;
  }
  return -1;
}

namespace {

nlohmann::ordered_json to_json(const PositionDistribution& d) {
  return {{"mean", d.mean}, {"stddev", d.stddev}, {"lo", d.lo}, {"hi", d.hi}};
}

PositionDistribution position_from_json(const nlohmann::json& j) {
  return {j.at("mean").get<double>(), j.at("stddev").get<double>(),
          j.at("lo").get<double>(), j.at("hi").get<double>()};
}

}  // namespace

nlohmann::ordered_json to_json(const BenchmarkMetadata& meta) {
  nlohmann::ordered_json j;
  j["format"] = "tsg-bench-metadata-1";
  nlohmann::ordered_json cfg;
  const KeyValueConfig kv = meta.config.to_kv();
  for (const auto& [k, v] : kv.values()) cfg[k] = v;
  j["config"] = cfg;
  j["tokens"] = meta.tokens;
  j["templates"] = meta.templates;
  auto sigs = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < meta.signatures.rows(); ++r) {
    std::vector<double> row(meta.signatures.cols());
    for (Eigen::Index c = 0; c < meta.signatures.cols(); ++c) {
      row[c] = meta.signatures(r, c);
    }
    sigs.push_back(row);
  }
  j["signatures"] = sigs;
  auto bias = nlohmann::ordered_json::array();
  auto ood = nlohmann::ordered_json::array();
  for (const auto& d : meta.bias_map) bias.push_back(to_json(d));
  for (const auto& d : meta.ood_map) ood.push_back(to_json(d));
  j["bias_map"] = bias;
  j["ood_map"] = ood;
  return j;
}

BenchmarkMetadata metadata_from_json(const nlohmann::json& j) {
  BenchmarkMetadata meta;
  KeyValueConfig kv;
  for (const auto& [k, v] : j.at("config").items()) kv.set(k, v.get<std::string>());
  meta.config = BenchConfig::from_kv(kv);
  meta.tokens = j.at("tokens").get<std::vector<std::string>>();
  meta.templates = j.at("templates").get<std::vector<std::string>>();
  const auto& sigs = j.at("signatures");
  const auto rows = static_cast<Eigen::Index>(sigs.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(sigs[0].size()) : 0;
  meta.signatures.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      meta.signatures(r, c) = sigs[r][c].get<double>();
    }
  }
  for (const auto& d : j.at("bias_map")) meta.bias_map.push_back(position_from_json(d));
  for (const auto& d : j.at("ood_map")) meta.ood_map.push_back(position_from_json(d));
  return meta;
}

// ---- generation -----------------------------------------------------------------

const DatasetSplit& Benchmark::split(const std::string& name) const {
  return find_split(splits, name);
}

Benchmark generate_benchmark(const BenchConfig& config) {
  config.validate();
  Benchmark bench;
  BenchmarkMetadata& meta = bench.metadata;
  meta.config = config;
  const int k_tokens = config.num_tokens;
  const int dim = config.feature_dim;

  constexpr int kNamed = static_cast<int>(std::size(kActionWords));
  for (int k = 0; k < k_tokens; ++k) {
    meta.tokens.push_back(k < kNamed ? kActionWords[k]
                                     : "action" + std::to_string(k));
  }
  meta.templates.assign(std::begin(kTemplates), std::end(kTemplates));

  Rng meta_rng = derive_rng({config.seed, 0x4d455441});
  // Orthogonal signatures when K <= D (Gram-Schmidt), unit directions
  // otherwise; scaled to norm sqrt(D) so entries are O(1).
  std::normal_distribution<double> normal(0.0, 1.0);
  meta.signatures.resize(k_tokens, dim);
  for (int k = 0; k < k_tokens; ++k) {
    Eigen::VectorXd v(dim);
    for (int c = 0; c < dim; ++c) v(c) = normal(meta_rng);
    if (k < dim) {
      for (int j = 0; j < k; ++j) {
        const Eigen::VectorXd u = meta.signatures.row(j).transpose().normalized();
        v -= u.dot(v) * u;
      }
    }
    meta.signatures.row(k) = v.normalized().transpose() * std::sqrt(double(dim));
  }

  auto region_means = [&](double lo, double hi) {
    std::uniform_real_distribution<double> u(lo + 0.25 * (hi - lo),
                                             hi - 0.25 * (hi - lo));
    return u(meta_rng);
  };
  for (int k = 0; k < k_tokens; ++k) {
    meta.bias_map.push_back({region_means(config.bias_lo, config.bias_hi),
                             config.position_stddev, config.bias_lo,
                             config.bias_hi});
  }
  for (int k = 0; k < k_tokens; ++k) {
    meta.ood_map.push_back({region_means(config.ood_lo, config.ood_hi),
                            config.position_stddev, config.ood_lo, config.ood_hi});
  }

  const int counts[] = {config.train_videos, config.val_videos,
                        config.test_iid_videos, config.test_ood_videos};
  for (int split_idx = 0; split_idx < 4; ++split_idx) {
    const std::string name = kSplitOrder[split_idx];
    const bool ood = name == "test-ood";
    DatasetSplit split;
    split.name = name;
    std::vector<AnnotationRecord> records;
    for (int i = 0; i < counts[split_idx]; ++i) {
      Rng rng = derive_rng({config.seed, static_cast<std::uint64_t>(split_idx),
                            static_cast<std::uint64_t>(i)});
      std::uniform_int_distribution<int> pick_token(0, k_tokens - 1);
      std::uniform_int_distribution<int> pick_template(
          0, static_cast<int>(meta.templates.size()) - 1);
      std::uniform_int_distribution<int> pick_frames(config.min_frames,
                                                     config.max_frames);
      std::uniform_int_distribution<int> pick_len(config.min_moment,
                                                  config.max_moment);
      const int token = pick_token(rng);
      const std::string query =
          fill_template(meta.templates[pick_template(rng)], meta.tokens[token]);
      const int frames = pick_frames(rng);
      const int len = pick_len(rng);
      const double duration = frames / config.frame_rate;

      const auto& dist = ood ? meta.ood_map[token] : meta.bias_map[token];
      const double upper = static_cast<double>(frames - len) / frames;
      if (dist.lo > upper) {
        throw ValidationError("infeasible position distribution for a video of " +
                              std::to_string(frames) + " frames");
      }
      const double start_norm = sample_truncated(dist, upper, rng);
      const int start = std::clamp(static_cast<int>(std::floor(start_norm * frames)),
                                   0, frames - len);
      const int end = start + len - 1;

      FeatureMatrix m(frames, dim);
      std::uniform_int_distribution<int> pick_run(config.min_background_run,
                                                  config.max_background_run);
      std::uniform_int_distribution<int> pick_other(0, k_tokens - 2);
      int t = 0;
      auto fill = [&](int row, int tok) {
        for (int c = 0; c < dim; ++c) {
          m(row, c) = static_cast<float>(config.signature_strength *
                                             meta.signatures(tok, c) +
                                         config.noise * normal(rng));
        }
      };
      while (t < frames) {
        if (t == start) {
          for (; t <= end; ++t) fill(t, token);
          continue;
        }
        int other = pick_other(rng);
        if (other >= token) ++other;
        const int stop = std::min(t + pick_run(rng), t < start ? start : frames);
        for (; t < stop; ++t) fill(t, other);
      }

      char id[64];
      std::snprintf(id, sizeof(id), "%s_%05d", name.c_str(), i);
      // The end timestamp sits just inside the last moment frame so that the
      // floor mapping with inclusive end recovers frame `end`.
      const double start_sec = start / config.frame_rate;
      const double end_sec = (end + 1 - 0.01) / config.frame_rate;
      records.push_back({id, duration, query, start_sec, end_sec});

      GroundingSample s;
      s.video_id = id;
      s.query_text = query;
      s.query = tokenize(query);
      s.duration = duration;
      s.frames = frames;
      s.span = make_span(start_sec, end_sec, duration, frames);
      s.features = std::make_shared<const FrameFeatures>(
          make_frame_features(m, duration));
      bench.features.push_back({id, std::move(m)});
      split.samples.push_back(std::move(s));
    }
    bench.splits.push_back(std::move(split));
    bench.records.push_back(std::move(records));
  }
  return bench;
}

void write_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < bench.splits.size(); ++i) {
    save_annotations(dir / (bench.splits[i].name + ".jsonl"), bench.records[i]);
  }
  save_features(dir / kFeatureFile, bench.features);
  std::ofstream meta(dir / kMetadataFile);
  meta << to_json(bench.metadata).dump(2) << '\n';
  std::ofstream cfg(dir / "bench_config.txt");
  cfg << bench.metadata.config.to_kv().to_string();
}

std::vector<DatasetSplit> load_dataset_dir(const std::filesystem::path& dir,
                                           double frame_rate) {
  const auto store = load_feature_store(dir / kFeatureFile, frame_rate);
  std::vector<DatasetSplit> splits;
  for (const char* name : kSplitNames) {
    const auto path = dir / (std::string(name) + ".jsonl");
    if (!std::filesystem::exists(path)) continue;
    auto split = load_annotations(path, frame_rate, name);
    attach_features(split, store, frame_rate);
    splits.push_back(std::move(split));
  }
  if (splits.empty()) {
    throw ValidationError("no annotation files in " + dir.string());
  }
  return splits;
}

const DatasetSplit& find_split(const std::vector<DatasetSplit>& splits,
                               const std::string& name) {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  throw ValidationError("unknown split '" + name + "'");
}

BenchmarkMetadata load_metadata(const std::filesystem::path& dir) {
  std::ifstream in(dir / kMetadataFile);
  if (!in) throw Error("no " + std::string(kMetadataFile) + " in " + dir.string());
  return metadata_from_json(nlohmann::json::parse(in));
}

// ---- oracles ------------------------------------------------------------------------

BiasOnlyOracle::BiasOnlyOracle(const DatasetSplit& training,
                               const BenchmarkMetadata& meta, int bins)
    : meta_(meta), bins_(bins) {
  const int k_tokens = static_cast<int>(meta.tokens.size());
  std::vector<Eigen::MatrixXd> hist(k_tokens, Eigen::MatrixXd::Zero(bins, bins));
  Eigen::MatrixXd all = Eigen::MatrixXd::Zero(bins, bins);
  auto bin_of = [&](double x) {
    return std::clamp(static_cast<int>(std::floor(x * bins)), 0, bins - 1);
  };
  for (const auto& s : training.samples) {
    const int sb = bin_of(s.span.start_sec / s.duration);
    const int eb = std::max(sb, bin_of(s.span.end_sec / s.duration));
    all(sb, eb) += 1;
    if (int k = meta.action_of(s.query); k >= 0) hist[k](sb, eb) += 1;
  }
  auto mode_of = [&](const Eigen::MatrixXd& h) {
    Eigen::Index r = 0, c = 0;
    h.maxCoeff(&r, &c);
    return Interval{(r + 0.5) / bins, (c + 0.5) / bins};
  };
  fallback_ = mode_of(all);
  for (int k = 0; k < k_tokens; ++k) {
    mode_.push_back(hist[k].sum() > 0 ? mode_of(hist[k]) : fallback_);
  }
}

Interval BiasOnlyOracle::predict(const GroundingSample& sample,
                                 const FrameFeatures&) const {
  const int k = meta_.action_of(sample.query);
  const Interval norm = k >= 0 ? mode_[k] : fallback_;
  return {norm.start * sample.duration, norm.end * sample.duration};
}

Interval ContentOracle::predict(const GroundingSample& sample,
                                const FrameFeatures& features) const {
  const int k = meta_.action_of(sample.query);
  const int frames = features.frames();
  if (k < 0) return {0.0, sample.duration};
  const Eigen::MatrixXd x = features.data.cast<double>();
  const Eigen::MatrixXd templates =
      meta_.config.signature_strength * meta_.signatures;  // K x D

  std::vector<bool> hit(frames, false);
  for (int t = 0; t < frames; ++t) {
    Eigen::Index best = 0;
    (templates.rowwise() - x.row(t)).rowwise().squaredNorm().minCoeff(&best);
    hit[t] = best == k;
  }
  int best_start = -1, best_len = 0;
  for (int t = 0; t < frames;) {
    if (!hit[t]) {
      ++t;
      continue;
    }
    int u = t;
    while (u < frames && hit[u]) ++u;
    if (u - t > best_len) {
      best_len = u - t;
      best_start = t;
    }
    t = u;
  }
  if (best_start < 0) {
    Eigen::Index t = 0;
    (x * meta_.signatures.row(k).transpose()).maxCoeff(&t);
    best_start = static_cast<int>(t);
    best_len = 1;
  }
  return frames_to_interval({best_start, best_start + best_len - 1},
                            sample.duration, frames);
}

std::vector<Prediction> run_oracle(const Predictor& oracle,
                                   const DatasetSplit& split) {
  std::vector<Prediction> out;
  for (const auto& s : split.samples) {
    const Interval iv = oracle.predict(s, *s.features);
    out.push_back({s.video_id, s.query_index, iv.start, iv.end});
  }
  return out;
}

}  // namespace tsg
