#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emf/event_io.hpp"
#include "emf/tensor.hpp"

namespace emf {

/// Axis-aligned box, center + extent, in input pixels.
struct BBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;
};

struct Detection {
    BBox box;
    int class_id = 0;
    double score = 0.0;
};

/// Raw per-level head outputs (logits, no activation applied).
struct LevelPrediction {
    int stride = 0;
    Tensor cls;  // (num_classes, H_l, W_l)
    Tensor obj;  // (1, H_l, W_l)
    Tensor reg;  // (4, H_l, W_l): tx, ty, tw, th
};

struct RawPrediction {
    std::vector<LevelPrediction> levels;  // ordered fine to coarse
};

/// Head hyperparameters shared by construction and inference.
struct HeadConfig {
    int num_classes = 2;
    int width = 192;
    std::vector<int> strides = {8, 16, 32};  // one per consumed pyramid level
};

/// FPN + decoupled-head weights. The head itself is shared across levels;
/// only the lateral/smoothing convs are per level.
struct HeadParams {
    std::vector<ConvParams> lateral;  // 1x1, per level
    std::vector<ConvParams> smooth;   // 3x3, per level
    ConvParams stem;                  // 1x1 width -> width
    ConvParams cls1, cls2;            // 3x3
    ConvParams cls_out;               // 1x1 -> num_classes
    ConvParams reg1, reg2;            // 3x3
    ConvParams reg_out;               // 1x1 -> 4
    ConvParams obj_out;               // 1x1 -> 1
};

/// Top-down feature pyramid: lateral 1x1 to a common width, nearest 2x
/// upsample + add (upsampled maps cropped to the lateral shape on odd
/// geometries), then a 3x3 smoothing conv per level.
/// `features` are backbone outputs ordered fine to coarse.
std::vector<Tensor> fpn_forward(const std::vector<Tensor>& features,
                                const HeadParams& params);

/// Shared-weight decoupled head over uniform-width features; returns raw
/// logit maps per level.
RawPrediction head_forward(const std::vector<Tensor>& features, const HeadConfig& cfg,
                           const HeadParams& params);

/// Anchor-free decoding at cell (gx, gy) of a stride-s level:
///   cx = (gx+tx)*s, cy = (gy+ty)*s, w = exp(tw)*s, h = exp(th)*s,
///   score = sigmoid(obj) * sigmoid(cls_c).
/// Emits every (cell, class) pair whose score exceeds `score_floor`.
std::vector<Detection> decode(const RawPrediction& raw, double score_floor);

/// Intersection over union of two axis-aligned boxes, in [0, 1].
double iou(const BBox& a, const BBox& b);

/// Per-class greedy NMS. Detections below `score_thr` are dropped; among the
/// rest the highest-scored box is kept and same-class boxes with IoU >
/// `iou_thr` are suppressed. Ordering ties break by (score desc, cx, cy,
/// class_id); the returned sequence is sorted the same way.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr,
                           double score_thr);

/// Shape of one prediction level as seen by target assignment.
struct LevelGeometry {
    int stride = 0;
    int height = 0;
    int width = 0;
};

/// Per-cell assignment result: matched ground-truth index or -1.
struct Assignment {
    std::vector<std::vector<int>> match;  // [level][cell] -> gt index or -1
    int positive_count = 0;
};

/// A cell is positive iff its center (gx*s, gy*s) lies inside a ground-truth
/// box and within Euclidean radius 1.5*stride of that box's center; positives
/// match their nearest-center gt (ties to the smaller box, then lower index).
Assignment assign_targets(const std::vector<LabeledBox>& gts,
                          const std::vector<LevelGeometry>& levels);

/// Loss components; total = cls + lambda * reg by construction.
struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;
    double reg = 0.0;
    double lambda = 0.0;
    bool no_positives = false;
};

/// Detection loss: objectness BCE averaged over every cell plus per-class BCE
/// averaged over positive cells, and an IoU regression term
/// mean(1 - IoU(decoded box, matched gt)) over positives.
LossBreakdown compute_loss(const RawPrediction& raw, const std::vector<LabeledBox>& gts,
                           double lambda);

/// Center-form view of a ground-truth box.
BBox to_center_box(const LabeledBox& b);

}  // namespace emf
