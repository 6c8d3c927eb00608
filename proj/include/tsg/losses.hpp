#pragma once

#include "tsg/core_data.hpp"
#include "tsg/nn.hpp"

namespace tsg {

inline constexpr double kLogEpsilon = 1e-12;

/// p(v_t): ones inside the moment, zeros elsewhere.
nn::Vec frame_labels(int frames, const MomentSpan& span);

struct LossWeights {
  double intra = 1.0;  // lambda1
  double inter = 1.0;  // lambda2
  double order = 1.0;  // lambda3

  bool any() const { return intra > 0.0 || inter > 0.0 || order > 0.0; }
};

struct LossBundle {
  double l_g = 0.0;
  double l_intra = 0.0;
  double l_inter = 0.0;
  double l_d = 0.0;
  double total = 0.0;
  LossWeights weights;
};

/// A loss value with its gradient(s) with respect to the raw inputs.
struct LossTerm {
  double value = 0.0;
  nn::Vec grad_a;
  nn::Vec grad_b;
  nn::Vec grad_c;
  nn::Vec grad_d;
};

// ---- relevance (BCE) ----------------------------------------------------------

/// -sum over valid frames of p log c + (1 - p) log(1 - c), logs clamped at
/// kLogEpsilon. An empty mask means all frames are valid.
double bce_relevance(const nn::Vec& relevance, const nn::Vec& labels,
                     const nn::Vec& mask = {});

/// Same loss evaluated from relevance logits; grad_a is d/d logits.
LossTerm bce_relevance_term(const nn::Vec& logits, const nn::Vec& labels,
                            const nn::Vec& mask = {});

/// Mean of the two videos' BCE terms.
double intra_loss(const nn::Vec& relevance_orig, const nn::Vec& labels_orig,
                  const nn::Vec& relevance_pseudo,
                  const nn::Vec& labels_pseudo);

/// grad_a: d/d logits of the original, grad_b: of the pseudo video.
LossTerm intra_loss_term(const nn::Vec& logits_orig, const nn::Vec& labels_orig,
                         const nn::Vec& logits_pseudo,
                         const nn::Vec& labels_pseudo);

// ---- inter-video consistency (KL) ---------------------------------------------

/// sum_i p_i log(p_i / q_i) with clamped logs.
double kl_divergence(const nn::Vec& p, const nn::Vec& q);

/// Slices both relevance-logit vectors to their spans, softmaxes each, and
/// returns KL(orig || pseudo). Throws std::logic_error on span-length mismatch.
double inter_loss(const nn::Vec& logits_orig, const MomentSpan& span_orig,
                  const nn::Vec& logits_pseudo, const MomentSpan& span_pseudo);

/// grad_a / grad_b: full-length gradients for the original / pseudo logits.
LossTerm inter_loss_term(const nn::Vec& logits_orig, const MomentSpan& span_orig,
                         const nn::Vec& logits_pseudo,
                         const MomentSpan& span_pseudo);

// ---- temporal order ------------------------------------------------------------

inline constexpr int kOriginalOrder = 0;
inline constexpr int kShuffledOrder = 1;

/// CE(original logits, original) + CE(pseudo logits, shuffled). For a
/// degenerate triplet only the original term is kept, at half weight.
double order_loss(const nn::Vec& logits_orig, const nn::Vec& logits_pseudo,
                  bool degenerate);

LossTerm order_loss_term(const nn::Vec& logits_orig,
                         const nn::Vec& logits_pseudo, bool degenerate);

// ---- grounding ----------------------------------------------------------------

/// -log P_start(t_s) - log P_end(t_e), clamped.
double grounding_loss(const nn::Vec& start_prob, const nn::Vec& end_prob,
                      int start_frame, int end_frame);

/// From unnormalized scores; grad_a / grad_b are d/d start / end scores.
LossTerm grounding_loss_term(const nn::Vec& start_scores,
                             const nn::Vec& end_scores, int start_frame,
                             int end_frame);

// ---- total ---------------------------------------------------------------------

/// l_g + lambda1 l_intra + lambda2 l_inter + lambda3 l_d. Throws
/// NumericalError naming the first non-finite component.
LossBundle total_loss(double l_g, double l_intra, double l_inter, double l_d,
                      const LossWeights& weights);

}  // namespace tsg
