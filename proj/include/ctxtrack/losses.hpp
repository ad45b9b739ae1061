#pragma once

#include <optional>
#include <vector>

#include "ctxtrack/hungarian.hpp"
#include "ctxtrack/tape.hpp"
#include "ctxtrack/tensor.hpp"

namespace ctxtrack {

struct LossWeights {
  double cls = 2.0;
  double bce = 5.0;
  double dice = 5.0;
  double ctx = 2.0;
  double pcc = 2.0;
};

/// One ground-truth identity across a video.
struct GroundTruthTrack {
  std::size_t identity = 0;
  std::size_t label = 0;
  std::vector<std::optional<Tensor>> masks;  // per frame, H x W binary; nullopt when absent

  bool present(std::size_t t) const { return t < masks.size() && masks[t].has_value(); }
  /// First frame with a mask; throws if the track never appears.
  std::size_t first_appearance() const;

  friend bool operator==(const GroundTruthTrack&, const GroundTruthTrack&) = default;
};

struct VideoGroundTruth {
  std::size_t frames = 0;
  std::vector<GroundTruthTrack> tracks;

  friend bool operator==(const VideoGroundTruth&, const VideoGroundTruth&) = default;
};

/// Per-frame predictions: soft masks and class logits, one row per slot.
struct FramePrediction {
  Tensor masks;         // N x H x W
  Tensor class_logits;  // N x K

  std::size_t slots() const { return masks.dim(0); }
  Tensor mask(std::size_t n) const;
  Tensor logits(std::size_t n) const;
};

/// lambda_cls * (-p[label]) + lambda_bce * BCE + lambda_dice * Dice over the full mask.
double matching_cost(const Tensor& pred_mask, const Tensor& pred_logits, const Tensor& gt_mask,
                     std::size_t gt_label, const LossWeights& w);

/// Cost of matching each present track (rows, in track order) to each slot at frame t.
/// `rows` receives the track index of each row.
Tensor matching_cost_matrix(const FramePrediction& pred, const VideoGroundTruth& gt, std::size_t t,
                            const LossWeights& w, std::vector<std::size_t>* rows = nullptr);

/// Per-frame Hungarian matching. Result maps track index -> slot (npos when absent).
Assignment match_frame(const FramePrediction& pred, const VideoGroundTruth& gt, std::size_t t,
                       const LossWeights& w);

/// lambda_cls * CE + lambda_bce * BCE + lambda_dice * Dice.
double instance_loss(const Tensor& pred_mask, const Tensor& pred_logits, const Tensor& gt_mask,
                     std::size_t gt_label, const LossWeights& w);
Var instance_loss(Var pred_mask, Var pred_logits, const Tensor& gt_mask, std::size_t gt_label,
                  const LossWeights& w);

/// Sum over frames of instance losses under independent per-frame matchings.
double vis_loss(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                const LossWeights& w);

struct ContrastiveOptions {
  bool cosine = false;                // L2-normalise embeddings before the dot products
  bool same_frame_negatives = false;  // also draw negatives from the anchor's frame
};

struct ContrastiveDiagnostics {
  std::size_t anchors = 0;
  std::size_t skipped_no_positive = 0;
};

/// log(1 + sum_{k+} sum_{k-} exp(v.k- - v.k+)). Returns 0 and flags the
/// diagnostics when there are no positives.
double contrastive_emb_loss(const Tensor& v, const std::vector<Tensor>& positives,
                            const std::vector<Tensor>& negatives, ContrastiveDiagnostics* diag = nullptr,
                            const ContrastiveOptions& options = {});
Var contrastive_emb_loss(Var v, Var positives, Var negatives, const ContrastiveOptions& options = {});

/// Cross-frame contrastive loss over matched embeddings. `embeddings[t]` is N x C;
/// `matches[t]` maps track -> row. Anchors are (t, track); positives are the same
/// track in other frames; negatives are other tracks in other frames.
double cross_frame_contrastive(const std::vector<Tensor>& embeddings,
                               const std::vector<Assignment>& matches,
                               const ContrastiveOptions& options = {},
                               ContrastiveDiagnostics* diag = nullptr);
Var cross_frame_contrastive(const std::vector<Var>& embeddings, const std::vector<Assignment>& matches,
                            const ContrastiveOptions& options = {});

/// L_CTX over fused context-aware embeddings.
inline double ctx_loss(const std::vector<Tensor>& fused, const std::vector<Assignment>& matches,
                       const ContrastiveOptions& options = {}) {
  return cross_frame_contrastive(fused, matches, options);
}

/// Mean feature over each mask's pixels with value 1 after binarisation at 0.5;
/// zero rows for empty masks. features: H x W x C, masks: N x H x W.
Tensor pcc_prototypes(const Tensor& features, const Tensor& masks, double threshold = 0.5);
Var pcc_prototypes(Var features, const Tensor& masks, double threshold = 0.5);

/// L_PCC: the cross-frame contrastive loss over prototypes.
inline double pcc_loss(const std::vector<Tensor>& prototypes, const std::vector<Assignment>& matches,
                       const ContrastiveOptions& options = {}) {
  return cross_frame_contrastive(prototypes, matches, options);
}

struct SegmenterBatch {
  std::vector<FramePrediction> predictions;
  std::vector<Tensor> fused;     // per frame N x C
  std::vector<Tensor> features;  // per frame H x W x C
  VideoGroundTruth gt;
};

struct SegmenterLoss {
  double vis = 0.0;
  double ctx = 0.0;
  double pcc = 0.0;
  double total = 0.0;
};

/// L_S = L_VIS + lambda_ctx L_CTX + lambda_pcc L_PCC.
SegmenterLoss segmenter_objective(const SegmenterBatch& batch, const LossWeights& w,
                                  const ContrastiveOptions& options = {});

/// Video-level assignment: each track is matched at its first visible frame.
Assignment first_appearance_match(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                                  const LossWeights& w);

/// L_T: instance losses over all frames under one video-level assignment.
double tracker_objective(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                         const LossWeights& w);
double tracker_objective(const std::vector<FramePrediction>& preds, const VideoGroundTruth& gt,
                         const Assignment& sigma, const LossWeights& w);

/// Tape form: per-frame slot masks (N x HW) and logits (N x K) as Vars.
Var tracker_objective(const std::vector<Var>& masks, const std::vector<Var>& logits,
                      const VideoGroundTruth& gt, const Assignment& sigma, const LossWeights& w);

}  // namespace ctxtrack
