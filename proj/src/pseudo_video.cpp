#include "tsg/pseudo_video.hpp"

namespace tsg {

std::vector<int> enumerate_insertion_points(int frames,
                                            const MomentSpan& span) {
  const int len = span.length();
  if (span.start_frame < 0 || span.end_frame >= frames || len < 1) {
    throw InputDomainError("span outside video");
  }
  std::vector<int> offsets;
  for (int k = 0; k <= frames - len; ++k) {
    if (k != span.start_frame) offsets.push_back(k);
  }
  if (offsets.empty()) offsets.push_back(span.start_frame);
  return offsets;
}

PseudoVideo reinsert_moment(const FrameFeatures& features,
                            const MomentSpan& span, int offset) {
  const int frames = features.frames();
  const int len = span.length();
  if (offset < 0 || offset > frames - len) {
    throw InputDomainError("insertion offset outside [0, T-L]");
  }
  const auto& src = features.data;
  FeatureMatrix out(src.rows(), src.cols());

  // Remainder rows in original order, with the moment spliced in at `offset`.
  int row = 0;
  std::vector<int> remainder;
  remainder.reserve(frames - len);
  for (int t = 0; t < frames; ++t) {
    if (t < span.start_frame || t > span.end_frame) remainder.push_back(t);
  }
  for (int i = 0; i < offset; ++i) out.row(row++) = src.row(remainder[i]);
  for (int t = span.start_frame; t <= span.end_frame; ++t) {
    out.row(row++) = src.row(t);
  }
  for (std::size_t i = offset; i < remainder.size(); ++i) {
    out.row(row++) = src.row(remainder[i]);
  }

  PseudoVideo pv;
  pv.features = FrameFeatures{std::move(out), features.duration};
  pv.span = span_from_frames(offset, offset + len - 1, features.duration,
                             frames);
  pv.insertion_offset = offset;
  pv.degenerate = offset == span.start_frame;
  return pv;
}

PseudoVideo generate_pseudo_video(const FrameFeatures& features,
                                  const MomentSpan& span, Rng& rng) {
  const auto offsets = enumerate_insertion_points(features.frames(), span);
  std::uniform_int_distribution<std::size_t> pick(0, offsets.size() - 1);
  return reinsert_moment(features, span, offsets[pick(rng)]);
}

TrainingTriplet make_triplet(const GroundingSample& sample, Rng& rng) {
  if (!sample.features) throw ValidationError("sample has no features");
  auto pv = generate_pseudo_video(*sample.features, sample.span, rng);
  TrainingTriplet t;
  t.sample = &sample;
  t.pseudo_features = std::make_shared<const FrameFeatures>(std::move(pv.features));
  t.pseudo_span = pv.span;
  t.insertion_offset = pv.insertion_offset;
  t.degenerate = pv.degenerate;
  return t;
}

}  // namespace tsg
