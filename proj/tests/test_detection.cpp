#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "emf/backbone.hpp"
#include "emf/detection.hpp"
#include "emf/reparam.hpp"
#include "support/reference.hpp"

using namespace emf;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.input_channels = 4;
    cfg.epe_channels = 4;
    cfg.stage_channels = {8, 12, 16, 24};
    cfg.head_width = 16;
    return cfg;
}

// One-level prediction with obj/cls forced negative everywhere.
LevelPrediction quiet_level(int stride, int classes, int h, int w) {
    LevelPrediction lp;
    lp.stride = stride;
    lp.cls = Tensor::full({classes, h, w}, -40.0f);
    lp.obj = Tensor::full({1, h, w}, -40.0f);
    lp.reg = Tensor({4, h, w});
    return lp;
}

std::vector<Detection> random_boxes(ref::Rng& rng, int n, int classes) {
    std::vector<Detection> dets;
    for (int i = 0; i < n; ++i) {
        Detection d;
        // Quantized coordinates and scores generate plenty of exact ties.
        d.box.cx = rng.uniform_int(0, 60) * 4.0;
        d.box.cy = rng.uniform_int(0, 48) * 4.0;
        d.box.w = 8.0 * rng.uniform_int(1, 6);
        d.box.h = 8.0 * rng.uniform_int(1, 6);
        d.class_id = rng.uniform_int(0, classes - 1);
        d.score = rng.uniform_int(1, 9) / 10.0;
        dets.push_back(d);
    }
    return dets;
}

bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].score != b[i].score || a[i].class_id != b[i].class_id ||
            a[i].box.cx != b[i].box.cx || a[i].box.cy != b[i].box.cy ||
            a[i].box.w != b[i].box.w || a[i].box.h != b[i].box.h)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("fpn produces uniform head width and exact level shapes") {
    ModelConfig cfg;  // default: stages (64,128,256,512), head width 192
    const Model m = build_model_skeleton(cfg, ModelForm::train);
    std::vector<Tensor> features = {Tensor({128, 30, 38}), Tensor({256, 15, 19}),
                                    Tensor({512, 8, 10})};
    const std::vector<Tensor> out = fpn_forward(features, m.head);
    REQUIRE(out.size() == 3);
    CHECK(out[0].shape() == std::vector<int>{192, 30, 38});
    CHECK(out[1].shape() == std::vector<int>{192, 15, 19});
    CHECK(out[2].shape() == std::vector<int>{192, 8, 10});
}

TEST_CASE("single-level fpn is lateral plus smoothing only") {
    ModelConfig cfg = small_config();
    cfg.detection_levels = {4};
    const Model m = init_model(cfg, 3);
    ref::Rng rng(1);
    Tensor f({24, 6, 7});
    ref::fill_uniform(f, rng, -1.0f, 1.0f);
    const std::vector<Tensor> out = fpn_forward({f}, m.head);
    const Tensor want = conv2d(conv2d(f, m.head.lateral[0]), m.head.smooth[0]);
    CHECK(ref::max_abs_diff(out[0], want) == 0.0);
}

TEST_CASE("fpn rejects non-doubling pyramids") {
    ModelConfig cfg = small_config();
    const Model m = init_model(cfg, 5);
    std::vector<Tensor> features = {Tensor({12, 30, 38}), Tensor({16, 15, 19}),
                                    Tensor({24, 6, 10})};  // 6 cannot upsample to 15
    CHECK_THROWS_AS(fpn_forward(features, m.head), ShapeError);
}

TEST_CASE("head emits per-level cls/reg/obj maps of the right shape") {
    ModelConfig cfg;
    const Model m = init_model(cfg, 7);
    const HeadConfig hc = cfg.head_config();
    std::vector<Tensor> features = {Tensor({192, 30, 38}), Tensor({192, 15, 19}),
                                    Tensor({192, 8, 10})};
    const RawPrediction raw = head_forward(features, hc, m.head);
    REQUIRE(raw.levels.size() == 3);
    CHECK(raw.levels[0].stride == 8);
    CHECK(raw.levels[0].cls.shape() == std::vector<int>{2, 30, 38});
    CHECK(raw.levels[0].reg.shape() == std::vector<int>{4, 30, 38});
    CHECK(raw.levels[0].obj.shape() == std::vector<int>{1, 30, 38});
    CHECK(raw.levels[2].stride == 32);
}

TEST_CASE("head weights are shared across levels") {
    ModelConfig cfg = small_config();
    const Model m = init_model(cfg, 9);
    ref::Rng rng(2);
    Tensor f({16, 6, 6});
    ref::fill_uniform(f, rng, -1.0f, 1.0f);
    const HeadConfig hc = cfg.head_config();
    const RawPrediction raw = head_forward({f, f, f}, hc, m.head);
    CHECK(ref::max_abs_diff(raw.levels[0].cls, raw.levels[1].cls) == 0.0);
    CHECK(ref::max_abs_diff(raw.levels[1].obj, raw.levels[2].obj) == 0.0);
}

TEST_CASE("decode applies the anchor-free formulas") {
    RawPrediction raw;
    raw.levels.push_back(quiet_level(8, 2, 4, 5));
    LevelPrediction& lp = raw.levels[0];
    lp.obj.at(0, 2, 3) = 40.0f;  // cell (gx=3, gy=2)
    lp.cls.at(0, 2, 3) = 40.0f;
    const std::vector<Detection> dets = decode(raw, 0.5);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].box.cx == doctest::Approx(24.0));
    CHECK(dets[0].box.cy == doctest::Approx(16.0));
    CHECK(dets[0].box.w == doctest::Approx(8.0));
    CHECK(dets[0].box.h == doctest::Approx(8.0));
    CHECK(dets[0].class_id == 0);
    CHECK(dets[0].score == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("saturated negative objectness falls below any positive floor") {
    RawPrediction raw;
    raw.levels.push_back(quiet_level(8, 2, 4, 4));
    CHECK(decode(raw, 0.01).empty());
}

TEST_CASE("tw = ln 2 doubles the stride-sized box") {
    RawPrediction raw;
    raw.levels.push_back(quiet_level(16, 1, 2, 2));
    LevelPrediction& lp = raw.levels[0];
    lp.obj.at(0, 0, 0) = 40.0f;
    lp.cls.at(0, 0, 0) = 40.0f;
    lp.reg.at(2, 0, 0) = std::log(2.0f);
    const std::vector<Detection> dets = decode(raw, 0.5);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].box.w == doctest::Approx(32.0));
    CHECK(dets[0].box.h == doctest::Approx(16.0));
}

TEST_CASE("decode flags non-finite regression with the cell") {
    RawPrediction raw;
    raw.levels.push_back(quiet_level(8, 1, 3, 3));
    raw.levels[0].reg.at(2, 1, 2) = std::numeric_limits<float>::quiet_NaN();
    try {
        decode(raw, 0.01);
        FAIL("expected ValueError");
    } catch (const ValueError& e) {
        CHECK(std::string(e.what()).find("(2,1)") != std::string::npos);
    }
}

TEST_CASE("iou basics") {
    const BBox a{10, 10, 4, 4};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, BBox{100, 100, 4, 4}) == 0.0);
    CHECK(iou(BBox{0, 0, 1, 1}, BBox{0.5, 0, 1, 1}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iou is symmetric and bounded") {
    ref::Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        BBox a{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 20), rng.uniform(0.5, 20)};
        BBox b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 20), rng.uniform(0.5, 20)};
        const double ab = iou(a, b);
        CHECK(ab == iou(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("greedy nms keeps the higher-scored overlap") {
    std::vector<Detection> dets = {
        Detection{BBox{10, 10, 10, 10}, 0, 0.9},
        Detection{BBox{12, 10, 10, 10}, 0, 0.8},  // IoU = 8/12 = 0.667
    };
    const std::vector<Detection> kept = nms(dets, 0.45, 0.0);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
}

TEST_CASE("nms is per class") {
    std::vector<Detection> dets = {Detection{BBox{10, 10, 10, 10}, 0, 0.9},
                                   Detection{BBox{10, 10, 10, 10}, 1, 0.8}};
    CHECK(nms(dets, 0.45, 0.0).size() == 2);
    CHECK(nms({}, 0.45, 0.0).empty());
}

TEST_CASE("nms drops detections below the score threshold") {
    std::vector<Detection> dets = {Detection{BBox{10, 10, 10, 10}, 0, 0.05},
                                   Detection{BBox{40, 10, 10, 10}, 0, 0.5}};
    const std::vector<Detection> kept = nms(dets, 0.45, 0.1);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.5);
}

TEST_CASE("nms matches the quadratic reference on random boxes") {
    ref::Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::vector<Detection> dets = random_boxes(rng, 200, 3);
        const std::vector<Detection> fast = nms(dets, 0.45, 0.15);
        const std::vector<Detection> slow = ref::nms_brute_force(dets, 0.45, 0.15);
        CHECK(same_detections(fast, slow));
        // survivors never overlap within a class
        for (std::size_t i = 0; i < fast.size(); ++i)
            for (std::size_t j = i + 1; j < fast.size(); ++j)
                if (fast[i].class_id == fast[j].class_id)
                    CHECK(iou(fast[i].box, fast[j].box) <= 0.45);
    }
}

TEST_CASE("assignment marks cells inside the box within the center radius") {
    std::vector<LevelGeometry> levels = {{8, 10, 10}};
    SUBCASE("frame-covering gt") {
        std::vector<LabeledBox> gts = {LabeledBox{0, 0, 0, 80, 80, 0, std::nullopt}};
        const Assignment a = assign_targets(gts, levels);
        // center (40,40); radius 12 covers cell centers within Euclid 12
        int expected = 0;
        for (int gy = 0; gy < 10; ++gy)
            for (int gx = 0; gx < 10; ++gx) {
                const double d = std::hypot(gx * 8.0 - 40.0, gy * 8.0 - 40.0);
                if (d <= 12.0) ++expected;
            }
        CHECK(a.positive_count == expected);
        CHECK(expected > 0);
    }
    SUBCASE("no gts, no positives") {
        const Assignment a = assign_targets({}, levels);
        CHECK(a.positive_count == 0);
        for (int v : a.match[0]) CHECK(v == -1);
    }
    SUBCASE("contested cell goes to the nearer center, ties to smaller area") {
        std::vector<LabeledBox> gts = {
            LabeledBox{0, 0, 0, 48, 48, 0, std::nullopt},   // center (24,24)
            LabeledBox{0, 16, 16, 32, 32, 1, std::nullopt}  // center (32,32), smaller
        };
        const Assignment a = assign_targets(gts, levels);
        // cell (3,3) center (24,24): dist 0 to gt0, ~11.3 to gt1 -> gt0
        CHECK(a.match[0][3 * 10 + 3] == 0);
        // cell (4,4) center (32,32): dist ~11.3 to gt0, 0 to gt1 -> gt1
        CHECK(a.match[0][4 * 10 + 4] == 1);
        // equidistant cell (3.5,3.5) does not exist on the grid; force a tie:
        std::vector<LabeledBox> tie = {
            LabeledBox{0, 0, 0, 32, 32, 0, std::nullopt},   // center (16,16), area 1024
            LabeledBox{0, 4, 4, 24, 24, 1, std::nullopt}};  // center (16,16), area 576
        const Assignment b = assign_targets(tie, levels);
        CHECK(b.match[0][2 * 10 + 2] == 1);  // cell (2,2) center (16,16)
    }
}

TEST_CASE("loss identity holds bit-exactly and lambda scales the reg term") {
    const Model m = init_model(small_config(), 11);
    LstmStateSet states;
    const RawPrediction raw =
        model_forward(standardized_random_input(4, 64, 64, 5), states, m);
    std::vector<LabeledBox> gts = {LabeledBox{0, 10, 10, 24, 24, 0, std::nullopt},
                                   LabeledBox{0, 30, 20, 20, 16, 1, std::nullopt}};
    const LossBreakdown l5 = compute_loss(raw, gts, 5.0);
    CHECK(l5.total == l5.cls + 5.0 * l5.reg);
    CHECK(!l5.no_positives);

    const LossBreakdown l0 = compute_loss(raw, gts, 0.0);
    CHECK(l0.total == l0.cls);
    CHECK(l0.cls == l5.cls);
    CHECK(l0.reg == l5.reg);
}

TEST_CASE("perfect predictions drive the loss toward zero") {
    // One level, stride 8, 6x6 grid: gt of size 8 centered on cell (3,2).
    const int stride = 8, h = 6, w = 6, classes = 2;
    std::vector<LabeledBox> gts = {
        LabeledBox{0, 3 * 8 - 4, 2 * 8 - 4, 8, 8, 1, std::nullopt}};

    RawPrediction raw;
    raw.levels.push_back(quiet_level(stride, classes, h, w));
    LevelPrediction& lp = raw.levels[0];
    const std::vector<LevelGeometry> geom = {{stride, h, w}};
    const Assignment assign = assign_targets(gts, geom);
    REQUIRE(assign.positive_count == 1);
    REQUIRE(assign.match[0][2 * w + 3] == 0);
    lp.obj.at(0, 2, 3) = 40.0f;
    lp.cls.at(1, 2, 3) = 40.0f;
    // exact box: tx = ty = 0 (center on the cell), tw = th = ln(8/8) = 0.
    const LossBreakdown l = compute_loss(raw, gts, 5.0);
    CHECK(l.total < 1e-3);
}

TEST_CASE("a single positive with IoU 0.5 yields reg loss 0.5") {
    const int stride = 8, h = 6, w = 6;
    std::vector<LabeledBox> gts = {
        LabeledBox{0, 3 * 8 - 4, 2 * 8 - 4, 8, 8, 0, std::nullopt}};
    RawPrediction raw;
    raw.levels.push_back(quiet_level(stride, 1, h, w));
    LevelPrediction& lp = raw.levels[0];
    // predicted box same center, w=8, h=4: IoU = 32 / 64 = 0.5
    lp.reg.at(3, 2, 3) = std::log(0.5f);
    const LossBreakdown l = compute_loss(raw, gts, 1.0);
    CHECK(!l.no_positives);
    CHECK(l.reg == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("no positive cells flags the reg term as zero") {
    RawPrediction raw;
    raw.levels.push_back(quiet_level(8, 1, 4, 4));
    const LossBreakdown l = compute_loss(raw, {}, 5.0);
    CHECK(l.no_positives);
    CHECK(l.reg == 0.0);
    CHECK(l.total == l.cls);
}

TEST_CASE("inverted decode targets reproduce boxes on cell centers") {
    ref::Rng rng(7);
    const int stride = 16, h = 8, w = 8;
    for (int trial = 0; trial < 50; ++trial) {
        const int gx = rng.uniform_int(0, w - 1), gy = rng.uniform_int(0, h - 1);
        const double bw = rng.uniform(4.0, 60.0), bh = rng.uniform(4.0, 60.0);
        RawPrediction raw;
        raw.levels.push_back(quiet_level(stride, 1, h, w));
        LevelPrediction& lp = raw.levels[0];
        lp.obj.at(0, gy, gx) = 40.0f;
        lp.cls.at(0, gy, gx) = 40.0f;
        // regression targets by inverting the decode formulas
        lp.reg.at(0, gy, gx) = 0.0f;
        lp.reg.at(1, gy, gx) = 0.0f;
        lp.reg.at(2, gy, gx) = static_cast<float>(std::log(bw / stride));
        lp.reg.at(3, gy, gx) = static_cast<float>(std::log(bh / stride));
        const std::vector<Detection> dets = decode(raw, 0.5);
        REQUIRE(dets.size() == 1);
        CHECK(dets[0].box.cx == doctest::Approx(gx * stride));
        CHECK(dets[0].box.cy == doctest::Approx(gy * stride));
        CHECK(dets[0].box.w == doctest::Approx(bw).epsilon(1e-5));
        CHECK(dets[0].box.h == doctest::Approx(bh).epsilon(1e-5));
    }
}
