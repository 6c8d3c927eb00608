#include "tsg/core_data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tsg {

namespace {

constexpr char kFeatureMagic[4] = {'T', 'G', 'F', '1'};

static_assert(std::endian::native == std::endian::little,
              "feature container I/O assumes a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

bool read_u32(std::istream& in, std::uint32_t& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return static_cast<bool>(in);
}

int provisional_frames(double duration, double frame_rate) {
  return std::max(1, static_cast<int>(std::ceil(duration * frame_rate - 1e-9)));
}

void check_finite(const FeatureMatrix& m, const std::string& what) {
  if (!m.allFinite()) {
    throw ValidationError("non-finite feature values in " + what);
  }
}

}  // namespace

FrameFeatures make_frame_features(FeatureMatrix data, double duration) {
  if (data.rows() < 1) throw ValidationError("feature matrix has T = 0");
  if (data.cols() < 1) throw ValidationError("feature matrix has D = 0");
  if (!(duration > 0.0) || !std::isfinite(duration)) {
    throw ValidationError("video duration must be positive");
  }
  check_finite(data, "feature matrix");
  return FrameFeatures{std::move(data), duration};
}

TokenSequence tokenize(std::string_view text) {
  TokenSequence seq;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) seq.tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) seq.tokens.push_back(std::move(current));
  if (seq.tokens.empty()) throw ValidationError("empty query");
  return seq;
}

int timestamp_to_frame(double tau, double duration, int frames) {
  if (frames < 1) throw InputDomainError("frame count must be >= 1");
  if (!(duration > 0.0)) throw InputDomainError("duration must be positive");
  if (!(tau >= 0.0 && tau <= duration)) {
    throw InputDomainError("timestamp outside [0, duration]");
  }
  // A timestamp on a frame boundary must land on that frame even when the
  // quotient rounds just below the integer.
  const double x = tau * frames / duration;
  const auto idx = static_cast<long long>(std::floor(x + 1e-9));
  return static_cast<int>(std::clamp<long long>(idx, 0, frames - 1));
}

double frame_start_time(int frame, double duration, int frames) {
  return static_cast<double>(frame) / frames * duration;
}

double frame_end_time(int frame, double duration, int frames) {
  return std::min(duration, static_cast<double>(frame + 1) / frames * duration);
}

MomentSpan make_span(double start_sec, double end_sec, double duration,
                     int frames) {
  if (!(start_sec >= 0.0) || !(end_sec >= start_sec) ||
      !(end_sec <= duration)) {
    throw ValidationError("span must satisfy 0 <= start <= end <= duration");
  }
  MomentSpan span;
  span.start_sec = start_sec;
  span.end_sec = end_sec;
  span.start_frame = timestamp_to_frame(start_sec, duration, frames);
  span.end_frame = timestamp_to_frame(end_sec, duration, frames);
  return span;
}

MomentSpan span_from_frames(int start_frame, int end_frame, double duration,
                            int frames) {
  if (start_frame < 0 || end_frame < start_frame || end_frame >= frames) {
    throw ValidationError("frame span outside [0, T-1]");
  }
  MomentSpan span;
  span.start_frame = start_frame;
  span.end_frame = end_frame;
  span.start_sec = frame_start_time(start_frame, duration, frames);
  span.end_sec = frame_end_time(end_frame, duration, frames);
  return span;
}

bool is_known_split_name(std::string_view name) {
  return std::ranges::any_of(kSplitNames,
                             [&](const char* n) { return name == n; });
}

// ---- annotations ------------------------------------------------------------

DatasetSplit load_annotations(const std::filesystem::path& path,
                              double frame_rate, std::string split_name) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open annotation file " + path.string());

  DatasetSplit split;
  split.name = split_name.empty() ? path.stem().string() : std::move(split_name);

  std::unordered_map<std::string, int> queries_per_video;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(),
                    [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    AnnotationRecord rec;
    try {
      const auto j = nlohmann::json::parse(line);
      rec.video_id = j.at("video_id").get<std::string>();
      rec.duration = j.at("duration").get<double>();
      rec.query = j.at("query").get<std::string>();
      rec.start = j.at("start").get<double>();
      rec.end = j.at("end").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": malformed annotation: " + e.what(),
                       line_no);
    }

    GroundingSample s;
    s.video_id = rec.video_id;
    s.query_text = rec.query;
    s.duration = rec.duration;
    try {
      if (!(rec.duration > 0.0)) {
        throw ValidationError("duration must be positive");
      }
      s.query = tokenize(rec.query);
      s.frames = provisional_frames(rec.duration, frame_rate);
      s.span = make_span(rec.start, rec.end, rec.duration, s.frames);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": video " + rec.video_id + ": " + e.what());
    }
    s.query_index = queries_per_video[rec.video_id]++;
    split.samples.push_back(std::move(s));
  }
  if (split.samples.empty()) {
    throw ValidationError("empty split: " + path.string());
  }
  return split;
}

void save_annotations(const std::filesystem::path& path,
                      const std::vector<AnnotationRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["video_id"] = r.video_id;
    j["duration"] = r.duration;
    j["query"] = r.query;
    j["start"] = r.start;
    j["end"] = r.end;
    out << j.dump() << '\n';
  }
}

// ---- features -----------------------------------------------------------------

void save_features(const std::filesystem::path& path,
                   const std::vector<FeatureEntry>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kFeatureMagic, 4);
  for (const auto& e : entries) {
    write_u32(out, static_cast<std::uint32_t>(e.video_id.size()));
    out.write(e.video_id.data(), static_cast<std::streamsize>(e.video_id.size()));
    write_u32(out, static_cast<std::uint32_t>(e.data.rows()));
    write_u32(out, static_cast<std::uint32_t>(e.data.cols()));
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
}

namespace {

// Walks the container; the visitor returns false to stop early.
template <typename Visitor>
void scan_features(const std::filesystem::path& path, Visitor&& visit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature container " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw IntegrityError("bad feature container magic in " + path.string());
  }
  while (true) {
    std::uint32_t id_len = 0;
    if (!read_u32(in, id_len)) {
      if (in.eof() && in.gcount() == 0) return;
      throw IntegrityError("truncated entry header in " + path.string());
    }
    std::string id(id_len, '\0');
    in.read(id.data(), id_len);
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    if (!in || !read_u32(in, rows) || !read_u32(in, cols)) {
      throw IntegrityError("truncated entry header in " + path.string());
    }
    if (rows == 0 || cols == 0) {
      throw ValidationError("feature entry " + id + " has T = 0 or D = 0");
    }
    FeatureMatrix m(rows, cols);
    const auto bytes = static_cast<std::streamsize>(m.size() * sizeof(float));
    in.read(reinterpret_cast<char*>(m.data()), bytes);
    if (in.gcount() != bytes) {
      throw IntegrityError("truncated payload for " + id + " in " +
                           path.string());
    }
    if (!visit(id, std::move(m))) return;
  }
}

}  // namespace

FrameFeatures load_features(const std::filesystem::path& path,
                            const std::string& video_id, double frame_rate) {
  std::optional<FeatureMatrix> found;
  scan_features(path, [&](const std::string& id, FeatureMatrix m) {
    if (id != video_id) return true;
    found = std::move(m);
    return false;
  });
  if (!found) throw ValidationError("video id not in container: " + video_id);
  check_finite(*found, video_id);
  const double duration = found->rows() / frame_rate;
  return make_frame_features(std::move(*found), duration);
}

FeatureStore load_feature_store(const std::filesystem::path& path,
                                double frame_rate) {
  FeatureStore store;
  scan_features(path, [&](const std::string& id, FeatureMatrix m) {
    check_finite(m, id);
    const double duration = m.rows() / frame_rate;
    store[id] = std::make_shared<const FrameFeatures>(
        make_frame_features(std::move(m), duration));
    return true;
  });
  return store;
}

void attach_features(DatasetSplit& split, const FeatureStore& store,
                     double frame_rate) {
  for (auto& s : split.samples) {
    auto it = store.find(s.video_id);
    if (it == store.end()) {
      throw ValidationError("no features for video " + s.video_id);
    }
    const int frames = it->second->frames();
    const int expected = provisional_frames(s.duration, frame_rate);
    if (std::abs(frames - expected) > 1) {
      throw ValidationError("video " + s.video_id + ": feature length " +
                            std::to_string(frames) + " inconsistent with " +
                            "duration (expected " + std::to_string(expected) +
                            ")");
    }
    auto features = std::make_shared<FrameFeatures>(*it->second);
    features->duration = s.duration;
    s.features = std::move(features);
    s.frames = frames;
    s.span = make_span(s.span.start_sec, s.span.end_sec, s.duration, frames);
  }
}

// ---- vocabulary -----------------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens_in_order) {
  tokens_.push_back(kUnknownToken);
  index_[kUnknownToken] = kUnknownId;
  for (const auto& t : tokens_in_order) {
    if (index_.contains(t)) continue;
    index_[t] = static_cast<int>(tokens_.size());
    tokens_.push_back(t);
  }
}

Vocabulary Vocabulary::build(const std::vector<const DatasetSplit*>& splits) {
  std::vector<std::string> order;
  std::set<std::string> seen;
  for (const auto* split : splits) {
    for (const auto& s : split->samples) {
      for (const auto& t : s.query.tokens) {
        if (seen.insert(t).second) order.push_back(t);
      }
    }
  }
  return Vocabulary(order);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknownId : it->second;
}

void Vocabulary::map(TokenSequence& seq) const {
  seq.ids.clear();
  seq.ids.reserve(seq.tokens.size());
  for (const auto& t : seq.tokens) seq.ids.push_back(id(t));
}

void Vocabulary::map(DatasetSplit& split) const {
  for (auto& s : split.samples) map(s.query);
}

std::map<std::string, std::vector<float>> load_word_embeddings(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embedding file " + path.string());
  std::map<std::string, std::vector<float>> table;
  std::string line;
  int line_no = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string word;
    if (!(ss >> word)) continue;
    std::vector<float> values;
    float v;
    while (ss >> v) values.push_back(v);
    if (!ss.eof() || values.empty()) {
      throw ParseError("bad embedding line " + std::to_string(line_no),
                       line_no);
    }
    if (dim == 0) dim = values.size();
    if (values.size() != dim) {
      throw ParseError("embedding dimension mismatch at line " +
                           std::to_string(line_no),
                       line_no);
    }
    table[word] = std::move(values);
  }
  return table;
}

// ---- statistics -----------------------------------------------------------------

std::vector<SplitStatistics> split_statistics(
    const std::vector<DatasetSplit>& splits) {
  if (splits.empty()) throw ValidationError("no splits to audit");
  std::vector<SplitStatistics> out;
  for (const auto& split : splits) {
    SplitStatistics st;
    st.name = split.name;
    st.pairs = static_cast<int>(split.samples.size());
    std::map<std::string, double> durations;
    double moment_sum = 0.0;
    for (const auto& s : split.samples) {
      durations[s.video_id] = s.duration;
      moment_sum += s.span.end_sec - s.span.start_sec;
    }
    st.videos = static_cast<int>(durations.size());
    if (st.pairs > 0) st.mean_moment_sec = moment_sum / st.pairs;
    double dur_sum = 0.0;
    for (const auto& [id, d] : durations) dur_sum += d;
    if (st.videos > 0) st.mean_duration_sec = dur_sum / st.videos;
    out.push_back(st);
  }
  return out;
}

}  // namespace tsg
