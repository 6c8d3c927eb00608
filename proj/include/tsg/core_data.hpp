#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace tsg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Value outside the domain an operation is defined on.
class InputDomainError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error(what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Binary container is shorter or otherwise inconsistent with its header.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

using FeatureMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-frame visual features of one video, one row per frame.
struct FrameFeatures {
  FeatureMatrix data;  // T x D_v
  double duration = 0.0;

  int frames() const { return static_cast<int>(data.rows()); }
  int dim() const { return static_cast<int>(data.cols()); }
};

/// Builds features after checking T >= 1, finiteness and duration > 0.
FrameFeatures make_frame_features(FeatureMatrix data, double duration);

struct TokenSequence {
  std::vector<std::string> tokens;
  std::vector<int> ids;  // empty until mapped through a vocabulary

  std::size_t size() const { return tokens.size(); }
};

/// Lowercases and splits on whitespace. Throws ValidationError when no token
/// remains.
TokenSequence tokenize(std::string_view text);

/// Target moment. Frame indices are inclusive on both ends.
struct MomentSpan {
  double start_sec = 0.0;
  double end_sec = 0.0;
  int start_frame = 0;
  int end_frame = 0;

  int length() const { return end_frame - start_frame + 1; }
};

/// clamp(floor(tau / duration * T), 0, T - 1).
int timestamp_to_frame(double tau, double duration, int frames);

/// Inverse mapping used by decoding: frame start time and frame end time.
double frame_start_time(int frame, double duration, int frames);
double frame_end_time(int frame, double duration, int frames);

/// Validates 0 <= start <= end <= duration and derives the frame indices.
MomentSpan make_span(double start_sec, double end_sec, double duration,
                     int frames);

/// Span given directly in frames; seconds follow the frame boundaries.
MomentSpan span_from_frames(int start_frame, int end_frame, double duration,
                            int frames);

struct GroundingSample {
  std::string video_id;
  int query_index = 0;  // ordinal of this query among the video's queries
  std::string query_text;
  TokenSequence query;
  double duration = 0.0;
  int frames = 0;  // T; from features when attached, else ceil(duration*fps)
  MomentSpan span;
  std::shared_ptr<const FrameFeatures> features;
};

inline constexpr const char* kSplitNames[] = {"training", "val", "test-iid",
                                              "test-ood"};

bool is_known_split_name(std::string_view name);

struct DatasetSplit {
  std::string name;
  std::vector<GroundingSample> samples;
};

// ---- annotation I/O -------------------------------------------------------

struct AnnotationRecord {
  std::string video_id;
  double duration = 0.0;
  std::string query;
  double start = 0.0;
  double end = 0.0;
};

/// Reads a JSON-lines annotation file. The split name defaults to the file
/// stem. Frame indices use T = ceil(duration * frame_rate) until features
/// are attached.
DatasetSplit load_annotations(const std::filesystem::path& path,
                              double frame_rate = 1.0,
                              std::string split_name = {});

void save_annotations(const std::filesystem::path& path,
                      const std::vector<AnnotationRecord>& records);

// ---- feature container ----------------------------------------------------

using FeatureStore =
    std::unordered_map<std::string, std::shared_ptr<const FrameFeatures>>;

struct FeatureEntry {
  std::string video_id;
  FeatureMatrix data;
};

void save_features(const std::filesystem::path& path,
                   const std::vector<FeatureEntry>& entries);

/// Reads one video's matrix. Duration is set to T / frame_rate.
FrameFeatures load_features(const std::filesystem::path& path,
                            const std::string& video_id,
                            double frame_rate = 1.0);

FeatureStore load_feature_store(const std::filesystem::path& path,
                                double frame_rate = 1.0);

/// Attaches features to every sample, replacing the provisional frame count
/// and recomputing frame indices against the real T.
void attach_features(DatasetSplit& split, const FeatureStore& store,
                     double frame_rate = 1.0);

// ---- vocabulary and embeddings -------------------------------------------

class Vocabulary {
 public:
  static constexpr int kUnknownId = 0;
  static constexpr const char* kUnknownToken = "<unk>";

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens_in_order);

  /// Collects the tokens of the given splits in first-seen order.
  static Vocabulary build(const std::vector<const DatasetSplit*>& splits);

  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(id); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void map(TokenSequence& seq) const;
  void map(DatasetSplit& split) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Text embedding dump: token followed by D_w floats per line.
std::map<std::string, std::vector<float>> load_word_embeddings(
    const std::filesystem::path& path);

// ---- split audit ------------------------------------------------------------

struct SplitStatistics {
  std::string name;
  int videos = 0;
  int pairs = 0;
  double mean_moment_sec = 0.0;
  double mean_duration_sec = 0.0;  // over unique videos
};

std::vector<SplitStatistics> split_statistics(
    const std::vector<DatasetSplit>& splits);

}  // namespace tsg
