#include "emf/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "emf/io_util.hpp"

namespace emf {

namespace {

bool box_passes(double w, double h, const EvalProtocol& p) {
    if (std::min(w, h) < p.min_side) return false;
    if (std::sqrt(w * w + h * h) < p.min_diag) return false;
    return true;
}

// score desc, then box coordinates ascending: fully deterministic ranking.
bool ranked_before(double sa, const BBox& a, double sb, const BBox& b) {
    if (sa != sb) return sa > sb;
    if (a.cx != b.cx) return a.cx < b.cx;
    if (a.cy != b.cy) return a.cy < b.cy;
    if (a.w != b.w) return a.w < b.w;
    return a.h < b.h;
}

}  // namespace

EvalProtocol EvalProtocol::from_name(const std::string& name) {
    if (name == "none") return none();
    if (name == "gen1") return gen1();
    if (name == "1mpx" || name == "onempx") return onempx();
    throw ArgumentError("unknown protocol \"" + name + "\" (expected gen1, 1mpx or none)");
}

std::vector<EvalDetection> filter_protocol(std::vector<EvalDetection> dets,
                                           const EvalProtocol& protocol) {
    dets.erase(std::remove_if(dets.begin(), dets.end(),
                              [&](const EvalDetection& d) {
                                  return !box_passes(d.box.w, d.box.h, protocol);
                              }),
               dets.end());
    return dets;
}

std::vector<EvalGroundTruth> filter_protocol(std::vector<EvalGroundTruth> gts,
                                             const EvalProtocol& protocol) {
    gts.erase(std::remove_if(gts.begin(), gts.end(),
                             [&](const EvalGroundTruth& g) {
                                 return !box_passes(g.box.w, g.box.h, protocol);
                             }),
              gts.end());
    return gts;
}

std::vector<bool> match_detections(const std::vector<EvalDetection>& dets,
                                   const std::vector<EvalGroundTruth>& gts,
                                   double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        return ranked_before(dets[i].score, dets[i].box, dets[j].score, dets[j].box);
    });

    std::vector<bool> tp(dets.size(), false);
    std::vector<bool> taken(gts.size(), false);
    for (std::size_t oi : order) {
        double best_iou = 0.0;
        int best = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double v = iou(dets[oi].box, gts[g].box);
            if (v >= iou_threshold && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            taken[static_cast<std::size_t>(best)] = true;
            tp[oi] = true;
        }
    }
    return tp;
}

double average_precision(std::vector<ScoredMatch> matches, std::size_t gt_count) {
    if (gt_count == 0)
        throw ArgumentError("average_precision: undefined without ground truth");
    std::stable_sort(matches.begin(), matches.end(), [](const ScoredMatch& a,
                                                        const ScoredMatch& b) {
        return ranked_before(a.score, a.box, b.score, b.box);
    });

    std::vector<double> recall(matches.size()), precision(matches.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < matches.size(); ++i) {
        if (matches[i].tp) ++tp;
        recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    // Monotone precision envelope from the right.
    for (std::size_t i = matches.size(); i-- > 1;)
        precision[i - 1] = std::max(precision[i - 1], precision[i]);

    double ap = 0.0;
    std::size_t idx = 0;
    for (int j = 0; j <= 100; ++j) {
        const double r = static_cast<double>(j) / 100.0;
        while (idx < matches.size() && recall[idx] < r) ++idx;
        if (idx < matches.size()) ap += precision[idx];
    }
    return ap / 101.0;
}

EvalResult map_50_95(std::vector<EvalDetection> dets, std::vector<EvalGroundTruth> gts,
                     const EvalProtocol& protocol) {
    dets = filter_protocol(std::move(dets), protocol);
    gts = filter_protocol(std::move(gts), protocol);

    EvalResult result;
    for (int i = 0; i < 10; ++i)
        result.iou_thresholds.push_back(static_cast<double>(50 + 5 * i) / 100.0);
    result.gts_used = gts.size();
    result.dets_used = dets.size();

    std::set<int> class_ids;
    for (const EvalGroundTruth& g : gts) class_ids.insert(g.class_id);
    std::set<int> det_only;
    for (const EvalDetection& d : dets)
        if (!class_ids.count(d.class_id)) det_only.insert(d.class_id);
    for (int c : det_only)
        result.warnings.push_back("class " + std::to_string(c) +
                                  " has detections but no ground truth; excluded from mAP");
    class_ids.insert(det_only.begin(), det_only.end());

    double ap_sum = 0.0;
    std::size_t included = 0;
    for (int c : class_ids) {
        EvalResult::PerClass pc;
        pc.class_id = c;

        std::map<std::int64_t, std::vector<EvalDetection>> dets_by_frame;
        std::map<std::int64_t, std::vector<EvalGroundTruth>> gts_by_frame;
        for (const EvalDetection& d : dets)
            if (d.class_id == c) dets_by_frame[d.frame].push_back(d);
        for (const EvalGroundTruth& g : gts)
            if (g.class_id == c) gts_by_frame[g.frame].push_back(g);
        for (const auto& [frame, v] : dets_by_frame) pc.dets += v.size();
        for (const auto& [frame, v] : gts_by_frame) pc.gts += v.size();

        if (pc.gts == 0) {
            pc.ap_per_threshold.assign(result.iou_thresholds.size(), 0.0);
            result.classes.push_back(pc);
            continue;
        }
        pc.included = true;

        for (double thr : result.iou_thresholds) {
            std::vector<ScoredMatch> pooled;
            for (const auto& [frame, frame_dets] : dets_by_frame) {
                static const std::vector<EvalGroundTruth> kNoGts;
                auto git = gts_by_frame.find(frame);
                const std::vector<EvalGroundTruth>& frame_gts =
                    git == gts_by_frame.end() ? kNoGts : git->second;
                const std::vector<bool> tp = match_detections(frame_dets, frame_gts, thr);
                for (std::size_t i = 0; i < frame_dets.size(); ++i)
                    pooled.push_back(
                        ScoredMatch{frame_dets[i].score, frame_dets[i].box, tp[i]});
            }
            pc.ap_per_threshold.push_back(
                pooled.empty() ? 0.0 : average_precision(std::move(pooled), pc.gts));
        }
        double s = 0.0;
        for (double v : pc.ap_per_threshold) s += v;
        pc.ap_50_95 = s / static_cast<double>(pc.ap_per_threshold.size());
        ap_sum += pc.ap_50_95;
        ++included;
        result.classes.push_back(pc);
    }
    if (included == 0 && !gts.empty())
        result.warnings.push_back("no class had ground truth after filtering");
    result.map_50_95 = included ? ap_sum / static_cast<double>(included) : 0.0;
    return result;
}

std::int64_t label_window_start(std::int64_t t, std::int64_t dt) {
    if (dt <= 0) throw ArgumentError("label_window_start: dt must be positive");
    const std::int64_t shifted = t - 1;
    std::int64_t idx = shifted / dt;
    if (shifted < 0 && shifted % dt != 0) --idx;
    return idx * dt;
}

std::vector<EvalDetection> read_detections_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<EvalDetection> dets;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": line " + std::to_string(line_no) + ": " + e.what());
        }
        for (const char* key : {"window_t0", "cx", "cy", "w", "h", "class_id", "score"})
            if (!j.contains(key))
                throw FormatError(path + ": line " + std::to_string(line_no) +
                                  ": missing required key \"" + key + "\"");
        EvalDetection d;
        d.frame = j.at("window_t0").get<std::int64_t>();
        d.box.cx = j.at("cx").get<double>();
        d.box.cy = j.at("cy").get<double>();
        d.box.w = j.at("w").get<double>();
        d.box.h = j.at("h").get<double>();
        d.class_id = j.at("class_id").get<int>();
        d.score = j.at("score").get<double>();
        dets.push_back(d);
    }
    return dets;
}

void write_detections_jsonl(const std::string& path,
                            const std::vector<EvalDetection>& dets) {
    AtomicFileWriter out(path);
    for (const EvalDetection& d : dets) {
        nlohmann::json j{{"window_t0", d.frame}, {"cx", d.box.cx}, {"cy", d.box.cy},
                         {"w", d.box.w},         {"h", d.box.h},   {"class_id", d.class_id},
                         {"score", d.score}};
        const std::string line = j.dump() + "\n";
        out.write(line);
    }
    out.commit();
}

std::string eval_result_to_json(const EvalResult& r, const EvalProtocol& protocol) {
    nlohmann::json classes = nlohmann::json::array();
    for (const EvalResult::PerClass& c : r.classes) {
        classes.push_back({{"class_id", c.class_id},
                           {"ap_50_95", c.ap_50_95},
                           {"ap_per_threshold", c.ap_per_threshold},
                           {"gts", c.gts},
                           {"dets", c.dets},
                           {"included", c.included}});
    }
    nlohmann::json j{{"protocol", protocol.name},
                     {"iou_thresholds", r.iou_thresholds},
                     {"classes", classes},
                     {"map_50_95", r.map_50_95},
                     {"gts_used", r.gts_used},
                     {"dets_used", r.dets_used},
                     {"warnings", r.warnings}};
    return j.dump(2);
}

std::string format_eval_table(const EvalResult& r) {
    std::ostringstream os;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-8s %8s %8s %12s %8s %8s\n", "class", "AP50",
                  "AP75", "AP[50-95]", "gts", "dets");
    os << buf;
    for (const EvalResult::PerClass& c : r.classes) {
        const double ap50 = c.ap_per_threshold.empty() ? 0.0 : c.ap_per_threshold.front();
        const double ap75 = c.ap_per_threshold.size() > 5 ? c.ap_per_threshold[5] : 0.0;
        std::snprintf(buf, sizeof(buf), "%-8d %8.4f %8.4f %12.4f %8zu %8zu%s\n",
                      c.class_id, ap50, ap75, c.ap_50_95, c.gts, c.dets,
                      c.included ? "" : "  (excluded: no gts)");
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "mAP[50-95] = %.4f\n", r.map_50_95);
    os << buf;
    return os.str();
}

}  // namespace emf
