#include "ctxtrack/losses.hpp"

#include <algorithm>
#include <cmath>

#include "ctxtrack/kernels.hpp"

namespace ctxtrack {

std::size_t GroundTruthTrack::first_appearance() const {
  for (std::size_t t = 0; t < masks.size(); ++t)
    if (masks[t]) return t;
  throw ConfigError("track " + std::to_string(identity) + " never appears");
}

Tensor FramePrediction::mask(std::size_t n) const {
  const std::size_t hw = masks.size() / masks.dim(0);
  std::vector<double> d(masks.storage().begin() + static_cast<std::ptrdiff_t>(n * hw),
                        masks.storage().begin() + static_cast<std::ptrdiff_t>((n + 1) * hw));
  return Tensor({masks.dim(1), masks.dim(2)}, std::move(d));
}

Tensor FramePrediction::logits(std::size_t n) const {
  auto r = class_logits.row(n);
  return Tensor({r.size()}, std::vector<double>(r.begin(), r.end()));
}

namespace {

constexpr double kProbClamp = 1e-12;

double bce_mean(const Tensor& p, const Tensor& g) {
  if (p.size() != g.size()) throw ConfigError("mask size mismatch in BCE");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    if (g[i] != 0.0) s -= g[i] * std::log(q);
    if (g[i] != 1.0) s -= (1.0 - g[i]) * std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

double dice_loss(const Tensor& p, const Tensor& g) {
  if (p.size() != g.size()) throw ConfigError("mask size mismatch in Dice");
  double inter = 0.0, ps = 0.0, gs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    ps += p[i];
    gs += g[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
}

void check_label(const Tensor& logits, std::size_t label) {
  if (label >= logits.size())
    throw ConfigError("class label " + std::to_string(label) + " out of range for " +
                      std::to_string(logits.size()) + " classes");
}

}  // namespace

double matching_cost(const Tensor& pred_mask, const Tensor& pred_logits, const Tensor& gt_mask,
                     std::size_t gt_label, const LossWeights& w) {
  check_label(pred_logits, gt_label);
  const double lse = log_sum_exp(pred_logits.data());
  const double prob = std::exp(pred_logits[gt_label] - lse);
  return -w.cls * prob + w.bce * bce_mean(pred_mask, gt_mask) + w.dice * dice_loss(pred_mask, gt_mask);
}

Tensor matching_cost_matrix(const FramePrediction& pred, const VideoGroundTruth& gt, std::size_t t,
                            const LossWeights& w, std::vector<std::size_t>* rows) {
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < gt.tracks.size(); ++k)
    if (gt.tracks[k].present(t)) present.push_back(k);
  const std::size_t n = pred.slots();
  Tensor cost({present.size(), n});
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor m = pred.mask(j);
    const Tensor z = pred.logits(j);
    for (std::size_t r = 0; r < present.size(); ++r) {
      const auto& track = gt.tracks[present[r]];
      cost.at(r, j) = matching_cost(m, z, *track.masks[t], track.label, w);
    }
  }
  if (rows) *rows = std::move(present);
  return cost;
}

Assignment match_frame(const FramePrediction& pred, const VideoGroundTruth& gt, std::size_t t,
                       const LossWeights& w) {
  std::vector<std::size_t> rows;
  const Tensor cost = matching_cost_matrix(pred, gt, t, w, &rows);
  const Assignment sub = hungarian(cost);
  Assignment out;
  out.num_targets = pred.slots();
  out.target_of.assign(gt.tracks.size(), Assignment::npos);
  for (std::size_t r = 0; r < rows.size(); ++r) out.target_of[rows[r]] = sub.target_of[r];
  return out;
}

double instance_loss(const Tensor& pred_mask, const Tensor& pred_logits, const Tensor& gt_mask,
                     std::size_t gt_label, const LossWeights& w) {
  check_label(pred_logits, gt_label);
  const double ce = log_sum_exp(pred_logits.data()) - pred_logits[gt_label];
  return w.cls * ce + w.bce * bce_mean(pred_mask, gt_mask) + w.dice * dice_loss(pred_mask, gt_mask);
}

Var instance_loss(Var pred_mask, Var pred_logits, const Tensor& gt_mask, std::size_t gt_label,
                  const LossWeights& w) {
  Var ce = ops::scale(ops::cross_entropy(pred_logits, gt_label), w.cls);
  Var bce = ops::scale(ops::bce_mean(pred_mask, gt_mask), w.bce);
  Var dc = ops::scale(ops::dice(pred_mask, gt_mask), w.dice);
  return ops::add(ops::add(ce, bce), dc);
}

double vis_loss(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                const LossWeights& w) {
  double total = 0.0;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const Assignment sigma = match_frame(preds[t], gt, t, w);
    for (std::size_t k = 0; k < gt.tracks.size(); ++k) {
      const std::size_t j = sigma.target_of[k];
      if (j == Assignment::npos) continue;
      const auto& track = gt.tracks[k];
      total += instance_loss(preds[t].mask(j), preds[t].logits(j), *track.masks[t], track.label, w);
    }
  }
  return total;
}

namespace {

Tensor normalized(const Tensor& v) {
  double s = 0.0;
  for (double x : v.storage()) s += x * x;
  s = std::sqrt(s);
  Tensor out = v;
  if (s > 0.0)
    for (auto& x : out.storage()) x /= s;
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ConfigError("embedding width mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Layout {
  std::vector<std::size_t> frame, track, slot;
  std::vector<ops::ContrastiveTerm> terms;
  std::size_t skipped = 0;
};

Layout contrastive_layout(const std::vector<Assignment>& matches, const ContrastiveOptions& options) {
  Layout l;
  for (std::size_t t = 0; t < matches.size(); ++t)
    for (std::size_t k = 0; k < matches[t].target_of.size(); ++k)
      if (matches[t].target_of[k] != Assignment::npos) {
        l.frame.push_back(t);
        l.track.push_back(k);
        l.slot.push_back(matches[t].target_of[k]);
      }
  const std::size_t r = l.frame.size();
  for (std::size_t a = 0; a < r; ++a) {
    ops::ContrastiveTerm term;
    term.anchor = a;
    for (std::size_t b = 0; b < r; ++b) {
      if (b == a) continue;
      const bool other_frame = l.frame[b] != l.frame[a];
      if (l.track[b] == l.track[a]) {
        if (other_frame) term.positives.push_back(b);
      } else if (other_frame || options.same_frame_negatives) {
        term.negatives.push_back(b);
      }
    }
    if (term.positives.empty()) ++l.skipped;
    l.terms.push_back(std::move(term));
  }
  return l;
}

}  // namespace

double contrastive_emb_loss(const Tensor& v, const std::vector<Tensor>& positives,
                            const std::vector<Tensor>& negatives, ContrastiveDiagnostics* diag,
                            const ContrastiveOptions& options) {
  if (diag) ++diag->anchors;
  if (positives.empty()) {
    if (diag) ++diag->skipped_no_positive;
    return 0.0;
  }
  if (negatives.empty()) return 0.0;
  auto prep = [&](const Tensor& x) { return options.cosine ? normalized(x) : x; };
  const Tensor a = prep(v);
  std::vector<double> neg, pos;
  for (const auto& k : negatives) neg.push_back(dot(a, prep(k)));
  for (const auto& k : positives) pos.push_back(-dot(a, prep(k)));
  const double x = log_sum_exp(neg) + log_sum_exp(pos);
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Var contrastive_emb_loss(Var v, Var positives, Var negatives, const ContrastiveOptions& options) {
  const std::size_t p = positives.value().rows(), q = negatives.value().rows();
  Var rows = ops::concat_rows({v, positives, negatives});
  if (options.cosine) rows = ops::normalize_rows(rows);
  Var anchor = ops::gather_rows(rows, {0});
  Var sim = ops::matmul_nt(anchor, rows);
  ops::ContrastiveTerm term;
  for (std::size_t i = 0; i < p; ++i) term.positives.push_back(1 + i);
  for (std::size_t i = 0; i < q; ++i) term.negatives.push_back(1 + p + i);
  return ops::contrastive_sum(sim, {term});
}

Var cross_frame_contrastive(const std::vector<Var>& embeddings, const std::vector<Assignment>& matches,
                            const ContrastiveOptions& options) {
  if (embeddings.size() != matches.size())
    throw ConfigError("one matching per frame of embeddings is required");
  if (embeddings.empty()) throw ConfigError("cross_frame_contrastive needs at least one frame");
  Tape& tape = *embeddings.front().tape;
  const Layout l = contrastive_layout(matches, options);
  if (l.frame.empty()) return tape.constant(Tensor::scalar(0.0));
  std::vector<Var> parts;
  for (std::size_t t = 0; t < embeddings.size(); ++t) {
    std::vector<std::size_t> idx;
    for (std::size_t r = 0; r < l.frame.size(); ++r)
      if (l.frame[r] == t) idx.push_back(l.slot[r]);
    if (!idx.empty()) parts.push_back(ops::gather_rows(embeddings[t], idx));
  }
  Var e = ops::concat_rows(parts);
  if (options.cosine) e = ops::normalize_rows(e);
  return ops::contrastive_sum(ops::matmul_nt(e, e), l.terms);
}

double cross_frame_contrastive(const std::vector<Tensor>& embeddings,
                               const std::vector<Assignment>& matches, const ContrastiveOptions& options,
                               ContrastiveDiagnostics* diag) {
  if (diag) {
    const Layout l = contrastive_layout(matches, options);
    diag->anchors += l.terms.size();
    diag->skipped_no_positive += l.skipped;
  }
  Tape tape;
  std::vector<Var> vars;
  for (const auto& e : embeddings) vars.push_back(tape.constant(e));
  return cross_frame_contrastive(vars, matches, options).value()[0];
}

namespace {

Tensor prototype_weights(const Tensor& masks, double threshold) {
  if (masks.rank() != 3) throw ConfigError("prototype masks must be N x H x W");
  const std::size_t n = masks.dim(0), hw = masks.dim(1) * masks.dim(2);
  Tensor w({n, hw}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t p = 0; p < hw; ++p) count += masks[i * hw + p] >= threshold;
    if (count == 0) continue;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t p = 0; p < hw; ++p)
      if (masks[i * hw + p] >= threshold) w[i * hw + p] = inv;
  }
  return w;
}

}  // namespace

Tensor pcc_prototypes(const Tensor& features, const Tensor& masks, double threshold) {
  if (features.rank() != 3) throw ConfigError("features must be H x W x C");
  const Tensor flat = features.reshaped({features.dim(0) * features.dim(1), features.dim(2)});
  return matmul(prototype_weights(masks, threshold), flat);
}

Var pcc_prototypes(Var features, const Tensor& masks, double threshold) {
  const Shape s = features.value().shape();
  Var flat = ops::reshape(features, {s[0] * s[1], s[2]});
  return ops::matmul(features.tape->constant(prototype_weights(masks, threshold)), flat);
}

SegmenterLoss segmenter_objective(const SegmenterBatch& batch, const LossWeights& w,
                                  const ContrastiveOptions& options) {
  SegmenterLoss out;
  out.vis = vis_loss(batch.predictions, batch.gt, w);
  std::vector<Assignment> matches;
  std::vector<Tensor> prototypes;
  for (std::size_t t = 0; t < batch.predictions.size(); ++t) {
    matches.push_back(match_frame(batch.predictions[t], batch.gt, t, w));
    prototypes.push_back(pcc_prototypes(batch.features.at(t), batch.predictions[t].masks));
  }
  out.ctx = ctx_loss(batch.fused, matches, options);
  out.pcc = pcc_loss(prototypes, matches, options);
  out.total = out.vis + w.ctx * out.ctx + w.pcc * out.pcc;
  return out;
}

Assignment first_appearance_match(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                                  const LossWeights& w) {
  if (preds.empty()) throw ConfigError("first_appearance_match needs at least one frame");
  const std::size_t n = preds.front().slots();
  Tensor cost({gt.tracks.size(), n});
  for (std::size_t k = 0; k < gt.tracks.size(); ++k) {
    const auto& track = gt.tracks[k];
    const std::size_t f = track.first_appearance();
    if (f >= preds.size()) throw ConfigError("track first appears after the last predicted frame");
    for (std::size_t j = 0; j < n; ++j)
      cost.at(k, j) = matching_cost(preds[f].mask(j), preds[f].logits(j), *track.masks[f], track.label, w);
  }
  return hungarian(cost);
}

double tracker_objective(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                         const Assignment& sigma, const LossWeights& w) {
  double total = 0.0;
  for (std::size_t t = 0; t < preds.size(); ++t)
    for (std::size_t k = 0; k < gt.tracks.size(); ++k) {
      const auto& track = gt.tracks[k];
      const std::size_t j = sigma.target_of.at(k);
      if (!track.present(t) || j == Assignment::npos) continue;
      total += instance_loss(preds[t].mask(j), preds[t].logits(j), *track.masks[t], track.label, w);
    }
  return total;
}

double tracker_objective(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                         const LossWeights& w) {
  return tracker_objective(preds, gt, first_appearance_match(preds, gt, w), w);
}

Var tracker_objective(const std::vector<Var>& masks, const std::vector<Var>& logits,
                      const VideoGroundTruth& gt, const Assignment& sigma, const LossWeights& w) {
  if (masks.empty() || masks.size() != logits.size())
    throw ConfigError("tracker_objective needs matching per-frame masks and logits");
  Tape& tape = *masks.front().tape;
  std::vector<Var> terms;
  for (std::size_t t = 0; t < masks.size(); ++t)
    for (std::size_t k = 0; k < gt.tracks.size(); ++k) {
      const auto& track = gt.tracks[k];
      const std::size_t j = sigma.target_of.at(k);
      if (!track.present(t) || j == Assignment::npos) continue;
      terms.push_back(instance_loss(ops::gather_rows(masks[t], {j}), ops::gather_rows(logits[t], {j}),
                                    *track.masks[t], track.label, w));
    }
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  return ops::sum(ops::concat_rows(terms));
}

}  // namespace ctxtrack
