#pragma once

#include <vector>

#include "tsg/core_data.hpp"
#include "tsg/random.hpp"

namespace tsg {

/// Original video, its shuffled counterpart, and the shared query.
struct TrainingTriplet {
  const GroundingSample* sample = nullptr;  // the original, never mutated
  std::shared_ptr<const FrameFeatures> pseudo_features;
  MomentSpan pseudo_span;
  int insertion_offset = 0;
  bool degenerate = false;  // no shuffle other than the identity was possible

  const FrameFeatures& original_features() const { return *sample->features; }
  const MomentSpan& original_span() const { return sample->span; }
  const TokenSequence& query() const { return sample->query; }
};

/// Offsets k in [0, T-L] at which the cut moment can be reinserted into the
/// remainder. k == span.start_frame reproduces the original and is dropped
/// whenever another offset exists.
std::vector<int> enumerate_insertion_points(int frames, const MomentSpan& span);

struct PseudoVideo {
  FrameFeatures features;
  MomentSpan span;
  int insertion_offset = 0;
  bool degenerate = false;
};

/// Cuts the moment rows out and reinserts them at `offset`:
/// remainder[0..k) ++ moment ++ remainder[k..).
PseudoVideo reinsert_moment(const FrameFeatures& features,
                            const MomentSpan& span, int offset);

/// Draws the offset uniformly from enumerate_insertion_points.
PseudoVideo generate_pseudo_video(const FrameFeatures& features,
                                  const MomentSpan& span, Rng& rng);

TrainingTriplet make_triplet(const GroundingSample& sample, Rng& rng);

}  // namespace tsg
