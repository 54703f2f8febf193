#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emf/detection.hpp"
#include "emf/event_io.hpp"

namespace emf {

/// Dataset evaluation protocol: boxes below the size thresholds are removed
/// from both ground truth and detections before matching.
struct EvalProtocol {
    std::string name = "none";
    double min_side = 0.0;
    double min_diag = 0.0;
    int spatial_divisor = 1;

    static EvalProtocol none() { return EvalProtocol{"none", 0.0, 0.0, 1}; }
    static EvalProtocol gen1() { return EvalProtocol{"gen1", 10.0, 30.0, 1}; }
    static EvalProtocol onempx() { return EvalProtocol{"1mpx", 20.0, 60.0, 2}; }
    /// Accepts "none", "gen1", "1mpx" (alias "onempx").
    static EvalProtocol from_name(const std::string& name);
};

/// Detection tagged with the frame (window start time) it belongs to.
struct EvalDetection {
    std::int64_t frame = 0;
    int class_id = 0;
    BBox box;
    double score = 0.0;
};

/// Ground truth in center form, tagged with its frame.
struct EvalGroundTruth {
    std::int64_t frame = 0;
    int class_id = 0;
    BBox box;
};

/// Greedy matching for a single (class, frame) cell: detections descend by
/// score (ties by cx, cy, w, h), each taking the unmatched gt of highest
/// IoU >= threshold. Returns per-detection TP flags in that order.
std::vector<bool> match_detections(const std::vector<EvalDetection>& dets,
                                   const std::vector<EvalGroundTruth>& gts,
                                   double iou_threshold);

/// One pooled, score-ranked (TP/FP) entry of a precision-recall curve.
struct ScoredMatch {
    double score = 0.0;
    BBox box;
    bool tp = false;
};

/// 101-point interpolated average precision over a pooled match list
/// (COCO convention: precision at recall r is the max precision at any
/// recall >= r, sampled at r = 0.00, 0.01, ..., 1.00).
double average_precision(std::vector<ScoredMatch> matches, std::size_t gt_count);

struct EvalResult {
    struct PerClass {
        int class_id = 0;
        std::vector<double> ap_per_threshold;
        double ap_50_95 = 0.0;
        std::size_t gts = 0;
        std::size_t dets = 0;
        bool included = false;  // classes without gts are excluded from the mean
    };
    std::vector<double> iou_thresholds;
    std::vector<PerClass> classes;
    double map_50_95 = 0.0;
    std::size_t gts_used = 0;
    std::size_t dets_used = 0;
    std::vector<std::string> warnings;
};

/// Applies the size protocol to both sides, computes AP per class at IoU
/// thresholds 0.50..0.95 step 0.05, averages over thresholds and then over
/// classes that have ground truth.
EvalResult map_50_95(std::vector<EvalDetection> dets, std::vector<EvalGroundTruth> gts,
                     const EvalProtocol& protocol);

/// Protocol size filter: drops boxes with min(w,h) < min_side or
/// sqrt(w^2+h^2) < min_diag. Idempotent.
std::vector<EvalDetection> filter_protocol(std::vector<EvalDetection> dets,
                                           const EvalProtocol& protocol);
std::vector<EvalGroundTruth> filter_protocol(std::vector<EvalGroundTruth> gts,
                                             const EvalProtocol& protocol);

/// Frame key of a label under the windowing rule: the window start t0 with
/// t0 < t <= t0 + dt.
std::int64_t label_window_start(std::int64_t t, std::int64_t dt);

/// Detections JSONL: one {"window_t0", "cx", "cy", "w", "h", "class_id",
/// "score"} object per line.
std::vector<EvalDetection> read_detections_jsonl(const std::string& path);
void write_detections_jsonl(const std::string& path,
                            const std::vector<EvalDetection>& dets);

std::string eval_result_to_json(const EvalResult& r, const EvalProtocol& protocol);
std::string format_eval_table(const EvalResult& r);

}  // namespace emf
