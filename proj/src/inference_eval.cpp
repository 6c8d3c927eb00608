#include "tsg/inference_eval.hpp"

#include "tsg/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

namespace tsg {

using nn::Vec;

double temporal_iou(const Interval& a, const Interval& b) {
  if (a.end < a.start || b.end < b.start) {
    throw InputDomainError("reversed interval");
  }
  const double a_len = a.end - a.start;
  const double b_len = b.end - b.start;
  if (a_len == 0.0 && b_len == 0.0) {
    return (a.start == b.start) ? 1.0 : 0.0;
  }
  const double inter =
      std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a_len + b_len - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

FrameSpan select_span(const Vec& start_prob, const Vec& end_prob,
                      const Vec& mask, std::optional<int> max_len) {
  if (start_prob.size() != end_prob.size()) {
    throw ValidationError("select_span: length mismatch");
  }
  const auto frames = static_cast<int>(start_prob.size());
  if (frames == 0) throw ValidationError("all-masked input");
  int valid = frames;
  if (mask.size() > 0) valid = valid_length(mask.transpose());
  if (max_len && *max_len < 1) throw ValidationError("max_len must be >= 1");

  FrameSpan best{0, 0};
  double best_score = -1.0;
  for (int s = 0; s < valid; ++s) {
    const int last = max_len ? std::min(valid - 1, s + *max_len - 1) : valid - 1;
    for (int e = s; e <= last; ++e) {
      const double score = start_prob(s) * end_prob(e);
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

Interval frames_to_interval(const FrameSpan& span, double duration,
                            int frames) {
  Interval iv;
  iv.start = std::clamp(frame_start_time(span.start, duration, frames), 0.0,
                        duration);
  iv.end = std::clamp(frame_end_time(span.end, duration, frames), iv.start,
                      duration);
  return iv;
}

// ---- predictions ----------------------------------------------------------------

std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open predictions file " + path.string());
  std::vector<Prediction> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Prediction p;
      p.video_id = j.at("video_id").get<std::string>();
      p.query_index = j.value("query_index", 0);
      p.start = j.at("start").get<double>();
      p.end = j.at("end").get<double>();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": malformed prediction: " + e.what(),
                       line_no);
    }
  }
  return out;
}

void save_predictions(const std::filesystem::path& path,
                      const std::vector<Prediction>& predictions) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& p : predictions) {
    nlohmann::ordered_json j;
    j["video_id"] = p.video_id;
    j["query_index"] = p.query_index;
    j["start"] = p.start;
    j["end"] = p.end;
    out << j.dump() << '\n';
  }
}

Interval ModelPredictor::predict(const GroundingSample& sample,
                                 const FrameFeatures& features) const {
  const auto out =
      model_.forward(to_model_layout(features.data), sample.query.ids);
  const auto span = select_span(out.start_prob, out.end_prob, {}, max_len_);
  return frames_to_interval(span, sample.duration, features.frames());
}

PredictionTable::PredictionTable(const std::vector<Prediction>& predictions) {
  for (const auto& p : predictions) {
    table_[{p.video_id, p.query_index}] = Interval{p.start, p.end};
  }
}

Interval PredictionTable::predict(const GroundingSample& sample,
                                  const FrameFeatures&) const {
  auto it = table_.find({sample.video_id, sample.query_index});
  if (it == table_.end()) {
    throw ValidationError("no prediction for video " + sample.video_id +
                          " query " + std::to_string(sample.query_index));
  }
  return it->second;
}

// ---- metrics ----------------------------------------------------------------------

double MetricsReport::recall(double threshold) const {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (std::abs(thresholds[i] - threshold) < 1e-12) return recall_at_1[i];
  }
  throw std::out_of_range("threshold not in report");
}

MetricsReport metrics_from_ious(const std::string& split,
                                const std::vector<double>& ious,
                                const std::vector<double>& thresholds) {
  MetricsReport r;
  r.split = split;
  r.sample_count = static_cast<int>(ious.size());
  r.thresholds = thresholds;
  r.ious = ious;
  if (ious.empty()) throw ValidationError("no samples to score");
  const double n = static_cast<double>(ious.size());
  for (double theta : thresholds) {
    const auto hits = std::count_if(ious.begin(), ious.end(),
                                    [&](double v) { return v > theta; });
    r.recall_at_1.push_back(100.0 * static_cast<double>(hits) / n);
  }
  r.miou = 100.0 * std::accumulate(ious.begin(), ious.end(), 0.0) / n;
  return r;
}

namespace {

Interval clip_to_video(Interval iv, double duration) {
  iv.start = std::clamp(iv.start, 0.0, duration);
  iv.end = std::clamp(iv.end, iv.start, duration);
  return iv;
}

}  // namespace

EvaluationResult evaluate(const Predictor& predictor, const DatasetSplit& split,
                          const std::vector<double>& thresholds, int threads) {
  if (split.samples.empty()) throw ValidationError("empty split " + split.name);
  const int n = static_cast<int>(split.samples.size());
  std::vector<double> ious(n);
  std::vector<Prediction> preds(n);
  parallel_for(n, threads, [&](int i) {
    const auto& s = split.samples[i];
    if (!s.features) throw ValidationError("sample without features");
    const Interval iv = clip_to_video(predictor.predict(s, *s.features), s.duration);
    ious[i] = temporal_iou(iv, Interval{s.span.start_sec, s.span.end_sec});
    preds[i] = Prediction{s.video_id, s.query_index, iv.start, iv.end};
  });
  EvaluationResult r;
  r.report = metrics_from_ious(split.name, ious, thresholds);
  r.predictions = std::move(preds);
  return r;
}

MetricsReport evaluate_predictions(const DatasetSplit& split,
                                   const std::vector<Prediction>& predictions,
                                   const std::vector<double>& thresholds) {
  PredictionTable table(predictions);
  std::vector<double> ious;
  ious.reserve(split.samples.size());
  for (const auto& s : split.samples) {
    const Interval iv =
        clip_to_video(table.predict(s, FrameFeatures{}), s.duration);
    ious.push_back(temporal_iou(iv, Interval{s.span.start_sec, s.span.end_sec}));
  }
  return metrics_from_ious(split.name, ious, thresholds);
}

// ---- sanity check ------------------------------------------------------------------

FrameFeatures randomize_segments(const FrameFeatures& features,
                                 int segment_len, Rng& rng) {
  if (segment_len < 1) throw ValidationError("segment_len must be >= 1");
  const int frames = features.frames();
  const int segments = (frames + segment_len - 1) / segment_len;
  std::vector<int> order(segments);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  FrameFeatures out{FeatureMatrix(features.data.rows(), features.data.cols()),
                    features.duration};
  int row = 0;
  for (int seg : order) {
    const int from = seg * segment_len;
    const int len = std::min(segment_len, frames - from);
    out.data.middleRows(row, len) = features.data.middleRows(from, len);
    row += len;
  }
  return out;
}

double SanityCheckResult::drop(double threshold) const {
  for (std::size_t i = 0; i < raw.thresholds.size(); ++i) {
    if (std::abs(raw.thresholds[i] - threshold) < 1e-12) return recall_drop[i];
  }
  throw std::out_of_range("threshold not in report");
}

SanityCheckResult randomized_video_test(const Predictor& predictor,
                                        const DatasetSplit& split,
                                        int segment_len, std::uint64_t seed,
                                        const std::vector<double>& thresholds) {
  if (segment_len < 1) throw ValidationError("segment_len must be >= 1");
  SanityCheckResult result;
  result.raw = evaluate(predictor, split, thresholds).report;

  std::vector<double> ious;
  ious.reserve(split.samples.size());
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const auto& s = split.samples[i];
    Rng rng = derive_rng({seed, 0x5348, i});
    const FrameFeatures shuffled = randomize_segments(*s.features, segment_len, rng);
    const Interval iv = clip_to_video(predictor.predict(s, shuffled), s.duration);
    ious.push_back(temporal_iou(iv, Interval{s.span.start_sec, s.span.end_sec}));
  }
  result.randomized = metrics_from_ious(split.name, ious, thresholds);
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    result.recall_drop.push_back(result.raw.recall_at_1[k] -
                                 result.randomized.recall_at_1[k]);
  }
  result.miou_drop = result.raw.miou - result.randomized.miou;
  return result;
}

// ---- histograms -----------------------------------------------------------------------

namespace {

bool query_has(const GroundingSample& s, const std::string& word) {
  return std::find(s.query.tokens.begin(), s.query.tokens.end(), word) !=
         s.query.tokens.end();
}

int bin_of(double x, int bins) {
  return std::clamp(static_cast<int>(std::floor(x * bins)), 0, bins - 1);
}

template <typename IntervalOf>
BiasHistogram build_histogram(const DatasetSplit& split, const std::string& word,
                              int bins, IntervalOf interval_of) {
  if (bins < 1) throw ValidationError("bins must be >= 1");
  BiasHistogram h;
  h.word = word;
  h.bins = bins;
  h.counts = Eigen::MatrixXd::Zero(bins, bins);
  for (const auto& s : split.samples) {
    if (!query_has(s, word)) continue;
    const Interval iv = interval_of(s);
    const int sb = bin_of(iv.start / s.duration, bins);
    const int eb = std::max(sb, bin_of(iv.end / s.duration, bins));
    h.counts(sb, eb) += 1.0;
    ++h.total;
  }
  if (h.total == 0) throw ValidationError("word not found: " + word);
  h.probabilities = h.counts / static_cast<double>(h.total);
  return h;
}

}  // namespace

BiasHistogram bias_histogram(const DatasetSplit& split, const std::string& word,
                             int bins) {
  return build_histogram(split, word, bins, [](const GroundingSample& s) {
    return Interval{s.span.start_sec, s.span.end_sec};
  });
}

BiasHistogram bias_histogram(const DatasetSplit& split,
                             const std::vector<Prediction>& predictions,
                             const std::string& word, int bins) {
  PredictionTable table(predictions);
  return build_histogram(split, word, bins, [&](const GroundingSample& s) {
    return clip_to_video(table.predict(s, FrameFeatures{}), s.duration);
  });
}

double distribution_divergence(const BiasHistogram& a, const BiasHistogram& b) {
  if (a.bins != b.bins) throw ValidationError("histogram binning differs");
  double js = 0.0;
  for (Eigen::Index i = 0; i < a.probabilities.size(); ++i) {
    const double p = a.probabilities.data()[i];
    const double q = b.probabilities.data()[i];
    const double m = 0.5 * (p + q);
    if (p > 0.0) js += 0.5 * p * std::log(p / m);
    if (q > 0.0) js += 0.5 * q * std::log(q / m);
  }
  return std::clamp(js, 0.0, std::log(2.0));
}

std::vector<std::string> top_words(const DatasetSplit& split, int k) {
  static const std::set<std::string> kSkip = {
      "a",    "an",   "the",  "person", "someone", "something", "it",
      "is",   "and",  "then", "of",     "to",      "with",      "his",
      "her",  "their", "in",  "on",     "at",      "object",    "some"};
  std::map<std::string, int> freq;
  for (const auto& s : split.samples) {
    std::set<std::string> seen(s.query.tokens.begin(), s.query.tokens.end());
    for (const auto& t : seen) {
      if (!kSkip.contains(t)) ++freq[t];
    }
  }
  std::vector<std::pair<std::string, int>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  std::vector<std::string> out;
  for (int i = 0; i < k && i < static_cast<int>(items.size()); ++i) {
    out.push_back(items[i].first);
  }
  return out;
}

// ---- JSON ---------------------------------------------------------------------------

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["split"] = r.split;
  j["samples"] = r.sample_count;
  nlohmann::ordered_json recall = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof(key), "R@1,IoU=%.1f", r.thresholds[i]);
    recall[key] = r.recall_at_1[i];
  }
  j["recall"] = recall;
  j["mIoU"] = r.miou;
  return j;
}

nlohmann::ordered_json to_json(const SanityCheckResult& s) {
  nlohmann::ordered_json j;
  j["raw"] = to_json(s.raw);
  j["randomized"] = to_json(s.randomized);
  nlohmann::ordered_json drop = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < s.raw.thresholds.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof(key), "R@1,IoU=%.1f", s.raw.thresholds[i]);
    drop[key] = s.recall_drop[i];
  }
  drop["mIoU"] = s.miou_drop;
  j["drop"] = drop;
  return j;
}

nlohmann::ordered_json to_json(const BiasHistogram& h) {
  nlohmann::ordered_json j;
  j["word"] = h.word;
  j["bins"] = h.bins;
  j["total"] = h.total;
  auto grid = nlohmann::ordered_json::array();
  for (int r = 0; r < h.bins; ++r) {
    auto row = nlohmann::ordered_json::array();
    for (int c = 0; c < h.bins; ++c) row.push_back(static_cast<int>(h.counts(r, c)));
    grid.push_back(row);
  }
  j["counts"] = grid;
  return j;
}

}  // namespace tsg
