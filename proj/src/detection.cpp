#include "emf/detection.hpp"

#include <algorithm>
#include <cmath>

namespace emf {

namespace {

Tensor crop_to(const Tensor& t, int height, int width) {
    if (t.dim(1) < height || t.dim(2) < width || t.dim(1) > height + 1 ||
        t.dim(2) > width + 1)
        throw ShapeError("fpn: upsampled map " + t.shape_str() +
                         " does not cover lateral (" + std::to_string(height) + "," +
                         std::to_string(width) + "); pyramid is not exact-doubling");
    if (t.dim(1) == height && t.dim(2) == width) return t;
    Tensor out({t.dim(0), height, width});
    for (int c = 0; c < t.dim(0); ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) out.at(c, y, x) = t.at(c, y, x);
    return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Deterministic detection ordering: score desc, then cx, cy, class_id
// ascending, refined by w and h so equal-score distinct boxes still have a
// total order.
bool det_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
    if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    return a.box.h < b.box.h;
}

// Numerically stable BCE with logits: max(z,0) - z*y + log1p(exp(-|z|)).
double bce_with_logits(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

std::vector<Tensor> fpn_forward(const std::vector<Tensor>& features,
                                const HeadParams& params) {
    if (features.empty()) throw ArgumentError("fpn_forward: no input levels");
    if (features.size() != params.lateral.size() || features.size() != params.smooth.size())
        throw ShapeError("fpn_forward: got " + std::to_string(features.size()) +
                         " levels, params built for " + std::to_string(params.lateral.size()));

    const int n = static_cast<int>(features.size());
    std::vector<Tensor> merged(n);
    merged[n - 1] = conv2d(features[n - 1], params.lateral[n - 1]);
    for (int i = n - 2; i >= 0; --i) {
        merged[i] = conv2d(features[i], params.lateral[i]);
        Tensor up = crop_to(nearest_upsample2x(merged[i + 1]), merged[i].dim(1),
                            merged[i].dim(2));
        add_inplace(merged[i], up);
    }
    std::vector<Tensor> out(n);
    for (int i = 0; i < n; ++i) out[i] = conv2d(merged[i], params.smooth[i]);
    return out;
}

RawPrediction head_forward(const std::vector<Tensor>& features, const HeadConfig& cfg,
                           const HeadParams& params) {
    if (features.size() != cfg.strides.size())
        throw ShapeError("head_forward: " + std::to_string(features.size()) +
                         " feature levels for " + std::to_string(cfg.strides.size()) +
                         " strides");
    RawPrediction raw;
    raw.levels.reserve(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) {
        const Tensor stem = gelu(conv2d(features[i], params.stem));
        Tensor c = gelu(conv2d(stem, params.cls1));
        c = gelu(conv2d(c, params.cls2));
        Tensor r = gelu(conv2d(stem, params.reg1));
        r = gelu(conv2d(r, params.reg2));
        LevelPrediction lp;
        lp.stride = cfg.strides[i];
        lp.cls = conv2d(c, params.cls_out);
        lp.reg = conv2d(r, params.reg_out);
        lp.obj = conv2d(r, params.obj_out);
        raw.levels.push_back(std::move(lp));
    }
    return raw;
}

std::vector<Detection> decode(const RawPrediction& raw, double score_floor) {
    std::vector<Detection> dets;
    for (const LevelPrediction& lp : raw.levels) {
        const int classes = lp.cls.dim(0);
        const int h = lp.cls.dim(1), w = lp.cls.dim(2);
        const double s = lp.stride;
        for (int gy = 0; gy < h; ++gy) {
            for (int gx = 0; gx < w; ++gx) {
                const float tx = lp.reg.at(0, gy, gx);
                const float ty = lp.reg.at(1, gy, gx);
                const float tw = lp.reg.at(2, gy, gx);
                const float th = lp.reg.at(3, gy, gx);
                if (!std::isfinite(tx) || !std::isfinite(ty) || !std::isfinite(tw) ||
                    !std::isfinite(th))
                    throw ValueError("decode: non-finite regression at stride " +
                                     std::to_string(lp.stride) + " cell (" +
                                     std::to_string(gx) + "," + std::to_string(gy) + ")");
                const double obj = sigmoidf(lp.obj.at(0, gy, gx));
                BBox box;
                box.cx = (gx + static_cast<double>(tx)) * s;
                box.cy = (gy + static_cast<double>(ty)) * s;
                box.w = std::exp(static_cast<double>(tw)) * s;
                box.h = std::exp(static_cast<double>(th)) * s;
                for (int c = 0; c < classes; ++c) {
                    const double score = obj * sigmoidf(lp.cls.at(c, gy, gx));
                    if (score > score_floor) dets.push_back(Detection{box, c, score});
                }
            }
        }
    }
    return dets;
}

double iou(const BBox& a, const BBox& b) {
    const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
    const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
    const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
    const double ih = std::min(ay1, by1) - std::max(ay0, by0);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    // Sum the areas in value order so iou(a, b) == iou(b, a) bitwise even
    // under FMA contraction.
    const double area_a = a.w * a.h;
    const double area_b = b.w * b.h;
    const double uni = std::max(area_a, area_b) + std::min(area_a, area_b) - inter;
    return inter / uni;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr,
                           double score_thr) {
    dets.erase(std::remove_if(dets.begin(), dets.end(),
                              [&](const Detection& d) { return d.score < score_thr; }),
               dets.end());
    std::sort(dets.begin(), dets.end(), det_before);

    std::vector<Detection> kept;
    std::vector<char> suppressed(dets.size(), 0);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (suppressed[i]) continue;
        kept.push_back(dets[i]);
        for (std::size_t j = i + 1; j < dets.size(); ++j) {
            if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
            if (iou(dets[i].box, dets[j].box) > iou_thr) suppressed[j] = 1;
        }
    }
    return kept;
}

BBox to_center_box(const LabeledBox& b) {
    return BBox{b.x + b.w / 2, b.y + b.h / 2, b.w, b.h};
}

Assignment assign_targets(const std::vector<LabeledBox>& gts,
                          const std::vector<LevelGeometry>& levels) {
    Assignment out;
    out.match.resize(levels.size());
    for (std::size_t li = 0; li < levels.size(); ++li) {
        const LevelGeometry& lg = levels[li];
        out.match[li].assign(static_cast<std::size_t>(lg.height) * lg.width, -1);
        const double radius = 1.5 * lg.stride;
        for (int gy = 0; gy < lg.height; ++gy) {
            for (int gx = 0; gx < lg.width; ++gx) {
                const double px = static_cast<double>(gx) * lg.stride;
                const double py = static_cast<double>(gy) * lg.stride;
                int best = -1;
                double best_dist = 0.0, best_area = 0.0;
                for (std::size_t k = 0; k < gts.size(); ++k) {
                    const LabeledBox& b = gts[k];
                    if (px < b.x || px > b.x + b.w || py < b.y || py > b.y + b.h) continue;
                    const double dcx = px - (b.x + b.w / 2);
                    const double dcy = py - (b.y + b.h / 2);
                    const double dist = std::sqrt(dcx * dcx + dcy * dcy);
                    if (dist > radius) continue;
                    const double area = b.w * b.h;
                    if (best < 0 || dist < best_dist ||
                        (dist == best_dist && area < best_area)) {
                        best = static_cast<int>(k);
                        best_dist = dist;
                        best_area = area;
                    }
                }
                if (best >= 0) {
                    out.match[li][static_cast<std::size_t>(gy) * lg.width + gx] = best;
                    ++out.positive_count;
                }
            }
        }
    }
    return out;
}

LossBreakdown compute_loss(const RawPrediction& raw, const std::vector<LabeledBox>& gts,
                           double lambda) {
    std::vector<LevelGeometry> geom;
    geom.reserve(raw.levels.size());
    for (const LevelPrediction& lp : raw.levels)
        geom.push_back(LevelGeometry{lp.stride, lp.obj.dim(1), lp.obj.dim(2)});
    const Assignment assign = assign_targets(gts, geom);

    double obj_sum = 0.0;
    std::size_t total_cells = 0;
    double cls_sum = 0.0;
    double reg_sum = 0.0;

    for (std::size_t li = 0; li < raw.levels.size(); ++li) {
        const LevelPrediction& lp = raw.levels[li];
        const int classes = lp.cls.dim(0);
        const int h = lp.obj.dim(1), w = lp.obj.dim(2);
        const double s = lp.stride;
        total_cells += static_cast<std::size_t>(h) * w;
        for (int gy = 0; gy < h; ++gy) {
            for (int gx = 0; gx < w; ++gx) {
                const int m = assign.match[li][static_cast<std::size_t>(gy) * w + gx];
                const bool pos = m >= 0;
                obj_sum += bce_with_logits(lp.obj.at(0, gy, gx), pos ? 1.0 : 0.0);
                if (!pos) continue;
                double cell_cls = 0.0;
                for (int c = 0; c < classes; ++c)
                    cell_cls += bce_with_logits(lp.cls.at(c, gy, gx),
                                                c == gts[m].class_id ? 1.0 : 0.0);
                cls_sum += cell_cls / classes;
                BBox pred;
                pred.cx = (gx + static_cast<double>(lp.reg.at(0, gy, gx))) * s;
                pred.cy = (gy + static_cast<double>(lp.reg.at(1, gy, gx))) * s;
                pred.w = std::exp(static_cast<double>(lp.reg.at(2, gy, gx))) * s;
                pred.h = std::exp(static_cast<double>(lp.reg.at(3, gy, gx))) * s;
                reg_sum += 1.0 - iou(pred, to_center_box(gts[m]));
            }
        }
    }

    LossBreakdown out;
    out.lambda = lambda;
    out.no_positives = assign.positive_count == 0;
    const double obj_loss = total_cells ? obj_sum / static_cast<double>(total_cells) : 0.0;
    const double cls_loss =
        assign.positive_count ? cls_sum / assign.positive_count : 0.0;
    out.cls = obj_loss + cls_loss;
    out.reg = assign.positive_count ? reg_sum / assign.positive_count : 0.0;
    out.total = out.cls + lambda * out.reg;
    return out;
}

}  // namespace emf
