#include "tsg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace tsg {

using nn::Vec;

namespace {

double clamped_log(double x) { return std::log(std::max(x, kLogEpsilon)); }

bool valid_frame(const Vec& mask, Eigen::Index t) {
  return mask.size() == 0 || mask(t) > 0.5;
}

// log softmax(x)[k] computed with the usual max shift.
double log_softmax_at(const Vec& x, int k) {
  const double m = x.maxCoeff();
  return x(k) - m - std::log((x.array() - m).exp().sum());
}

}  // namespace

Vec frame_labels(int frames, const MomentSpan& span) {
  Vec p = Vec::Zero(frames);
  if (span.start_frame < 0 || span.end_frame >= frames) {
    throw ValidationError("span outside video for frame labels");
  }
  p.segment(span.start_frame, span.length()).setOnes();
  return p;
}

double bce_relevance(const Vec& relevance, const Vec& labels, const Vec& mask) {
  if (relevance.size() != labels.size()) {
    throw std::logic_error("bce_relevance: size mismatch");
  }
  double loss = 0.0;
  for (Eigen::Index t = 0; t < relevance.size(); ++t) {
    if (!valid_frame(mask, t)) continue;
    const double c = relevance(t);
    const double p = labels(t);
    loss -= p * clamped_log(c) + (1.0 - p) * clamped_log(1.0 - c);
  }
  return loss;
}

LossTerm bce_relevance_term(const Vec& logits, const Vec& labels,
                            const Vec& mask) {
  const Vec c = nn::sigmoid(logits);
  LossTerm term;
  term.value = bce_relevance(c, labels, mask);
  term.grad_a = Vec::Zero(logits.size());
  for (Eigen::Index t = 0; t < logits.size(); ++t) {
    if (!valid_frame(mask, t)) continue;
    const double ct = c(t);
    const double p = labels(t);
    // d/dz of -p log c - (1-p) log(1-c); a clamped log contributes nothing.
    double g = 0.0;
    if (ct > kLogEpsilon) g -= p * (1.0 - ct);
    if (1.0 - ct > kLogEpsilon) g += (1.0 - p) * ct;
    term.grad_a(t) = g;
  }
  return term;
}

double intra_loss(const Vec& relevance_orig, const Vec& labels_orig,
                  const Vec& relevance_pseudo, const Vec& labels_pseudo) {
  return 0.5 * (bce_relevance(relevance_orig, labels_orig) +
                bce_relevance(relevance_pseudo, labels_pseudo));
}

LossTerm intra_loss_term(const Vec& logits_orig, const Vec& labels_orig,
                         const Vec& logits_pseudo, const Vec& labels_pseudo) {
  const auto a = bce_relevance_term(logits_orig, labels_orig);
  const auto b = bce_relevance_term(logits_pseudo, labels_pseudo);
  LossTerm term;
  term.value = 0.5 * (a.value + b.value);
  term.grad_a = 0.5 * a.grad_a;
  term.grad_b = 0.5 * b.grad_a;
  return term;
}

double kl_divergence(const Vec& p, const Vec& q) {
  if (p.size() != q.size()) throw std::logic_error("kl_divergence: size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    kl += p(i) * (clamped_log(p(i)) - clamped_log(q(i)));
  }
  return std::max(0.0, kl);
}

LossTerm inter_loss_term(const Vec& logits_orig, const MomentSpan& span_orig,
                         const Vec& logits_pseudo,
                         const MomentSpan& span_pseudo) {
  const int len = span_orig.length();
  if (len != span_pseudo.length()) {
    throw std::logic_error("inter_loss: span lengths differ (" +
                           std::to_string(len) + " vs " +
                           std::to_string(span_pseudo.length()) + ")");
  }
  const Vec c = nn::softmax(logits_orig.segment(span_orig.start_frame, len));
  const Vec c_bar =
      nn::softmax(logits_pseudo.segment(span_pseudo.start_frame, len));

  LossTerm term;
  double kl = 0.0;
  Vec log_ratio(len);
  for (int i = 0; i < len; ++i) {
    log_ratio(i) = clamped_log(c(i)) - clamped_log(c_bar(i));
    kl += c(i) * log_ratio(i);
  }
  term.value = std::max(0.0, kl);

  // d KL / d x = c * (g - <c, g>) with g = log c - log c_bar + 1; the +1
  // cancels under the softmax Jacobian.
  const Vec g_orig = (c.array() * (log_ratio.array() - c.dot(log_ratio))).matrix();
  // d KL / d y = c_bar - c.
  const Vec g_pseudo = c_bar - c;

  term.grad_a = Vec::Zero(logits_orig.size());
  term.grad_b = Vec::Zero(logits_pseudo.size());
  term.grad_a.segment(span_orig.start_frame, len) = g_orig;
  term.grad_b.segment(span_pseudo.start_frame, len) = g_pseudo;
  return term;
}

double inter_loss(const Vec& logits_orig, const MomentSpan& span_orig,
                  const Vec& logits_pseudo, const MomentSpan& span_pseudo) {
  return inter_loss_term(logits_orig, span_orig, logits_pseudo, span_pseudo)
      .value;
}

LossTerm order_loss_term(const Vec& logits_orig, const Vec& logits_pseudo,
                         bool degenerate) {
  LossTerm term;
  auto ce = [](const Vec& logits, int label, double weight, Vec& grad) {
    grad = weight * nn::softmax(logits);
    grad(label) -= weight;
    return -weight * log_softmax_at(logits, label);
  };
  if (degenerate) {
    term.value = ce(logits_orig, kOriginalOrder, 0.5, term.grad_a);
    term.grad_b = Vec::Zero(logits_pseudo.size());
  } else {
    term.value = ce(logits_orig, kOriginalOrder, 1.0, term.grad_a) +
                 ce(logits_pseudo, kShuffledOrder, 1.0, term.grad_b);
  }
  return term;
}

double order_loss(const Vec& logits_orig, const Vec& logits_pseudo,
                  bool degenerate) {
  return order_loss_term(logits_orig, logits_pseudo, degenerate).value;
}

double grounding_loss(const Vec& start_prob, const Vec& end_prob,
                      int start_frame, int end_frame) {
  if (start_frame < 0 || start_frame >= start_prob.size() || end_frame < 0 ||
      end_frame >= end_prob.size()) {
    throw std::logic_error("grounding_loss: index out of range");
  }
  return -clamped_log(start_prob(start_frame)) - clamped_log(end_prob(end_frame));
}

LossTerm grounding_loss_term(const Vec& start_scores, const Vec& end_scores,
                             int start_frame, int end_frame) {
  LossTerm term;
  term.grad_a = nn::softmax(start_scores);
  term.grad_b = nn::softmax(end_scores);
  term.value = grounding_loss(term.grad_a, term.grad_b, start_frame, end_frame);
  term.grad_a(start_frame) -= 1.0;
  term.grad_b(end_frame) -= 1.0;
  return term;
}

LossBundle total_loss(double l_g, double l_intra, double l_inter, double l_d,
                      const LossWeights& w) {
  if (w.intra < 0.0 || w.inter < 0.0 || w.order < 0.0) {
    throw ConfigError("loss weights must be non-negative");
  }
  const std::pair<const char*, double> parts[] = {
      {"l_g", l_g}, {"l_intra", l_intra}, {"l_inter", l_inter}, {"l_d", l_d}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw NumericalError(std::string("non-finite loss component ") + name +
                           " = " + std::to_string(value));
    }
  }
  LossBundle b;
  b.l_g = l_g;
  b.l_intra = l_intra;
  b.l_inter = l_inter;
  b.l_d = l_d;
  b.weights = w;
  b.total = l_g + w.intra * l_intra + w.inter * l_inter + w.order * l_d;
  return b;
}

}  // namespace tsg
