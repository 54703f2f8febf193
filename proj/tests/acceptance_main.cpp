// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. The end-to-end smoke criterion drives the emf CLI binary, whose
// path arrives as argv[1].

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emf/backbone.hpp"
#include "emf/bench.hpp"
#include "emf/detection.hpp"
#include "emf/encoder.hpp"
#include "emf/evaluation.hpp"
#include "emf/event_io.hpp"
#include "emf/reparam.hpp"
#include "emf/weights_io.hpp"
#include "support/reference.hpp"

using namespace emf;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Fan-in-scaled weights and moderate bn statistics keep activations O(1),
// where the 1e-6 absolute equivalence bound is meaningful for float32.
ConvParams random_conv(ref::Rng& rng, int c_out, int c_in, int k, int stride, int groups) {
    ConvParams p;
    p.weight = Tensor({c_out, c_in / groups, k, k});
    p.bias.assign(static_cast<std::size_t>(c_out), 0.0f);
    p.stride = stride;
    p.pad = k / 2;
    p.groups = groups;
    const float bound = 1.0f / std::sqrt(static_cast<float>((c_in / groups) * k * k));
    ref::fill_uniform(p.weight, rng, -bound, bound);
    ref::fill_uniform(p.bias, rng, -0.1f, 0.1f);
    return p;
}

BnParams random_bn(ref::Rng& rng, int c) {
    BnParams bn = BnParams::identity(c);
    ref::fill_uniform(bn.gamma, rng, 0.7f, 1.3f);
    ref::fill_uniform(bn.beta, rng, -0.2f, 0.2f);
    ref::fill_uniform(bn.mean, rng, -0.2f, 0.2f);
    ref::fill_uniform(bn.var, rng, 0.8f, 1.5f);
    return bn;
}

bool raw_identical(const RawPrediction& a, const RawPrediction& b) {
    if (a.levels.size() != b.levels.size()) return false;
    for (std::size_t i = 0; i < a.levels.size(); ++i) {
        if (ref::max_abs_diff(a.levels[i].cls, b.levels[i].cls) != 0.0) return false;
        if (ref::max_abs_diff(a.levels[i].reg, b.levels[i].reg) != 0.0) return false;
        if (ref::max_abs_diff(a.levels[i].obj, b.levels[i].obj) != 0.0) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------

bool criterion_fusion_equivalence(std::string& detail) {
    const auto t0 = std::chrono::steady_clock::now();
    const Model train = init_model(ModelConfig{}, 42);
    const Model fused = fuse_model(train);
    const FusionReport rep = verify_fusion(train, fused, 10, 1e-4, 64, 64);
    const double elapsed = seconds_since(t0);
    std::ostringstream os;
    os << "max dev " << rep.global_max_abs << " vs tol 1e-4 over " << rep.inputs_tested
       << " inputs, " << elapsed << " s";
    detail = os.str();
    return rep.pass && elapsed <= 60.0;
}

bool criterion_primitive_oracles(std::string& detail) {
    ref::Rng rng(404);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int c = rng.uniform_int(2, 6);
        Tensor x({c, 16, 16});
        ref::fill_uniform(x, rng, -1.0f, 1.0f);

        // fold_bn
        {
            const int groups = trial % 2 == 0 ? 1 : c;
            const ConvParams conv = random_conv(rng, c, c, trial % 3 == 0 ? 1 : 3, 1, groups);
            const BnParams bn = random_bn(rng, c);
            worst = std::max(worst, ref::max_abs_diff(batchnorm_infer(conv2d(x, conv), bn),
                                                      conv2d(x, fold_bn(conv, bn))));
        }
        // pad_kernel
        {
            const int k = 1 + 2 * rng.uniform_int(0, 2);
            const int target = k + 2 * rng.uniform_int(0, (7 - k) / 2);
            const ConvParams conv = random_conv(rng, c, c, k, 1, 1);
            worst = std::max(worst, ref::max_abs_diff(conv2d(x, conv),
                                                      conv2d(x, pad_kernel(conv, target))));
        }
        // identity_kernel
        {
            const int groups = trial % 2 == 0 ? 1 : c;
            const ConvParams id = identity_kernel(c, 3, groups);
            worst = std::max(worst, ref::max_abs_diff(conv2d(x, id), x));
            const BnParams bn = random_bn(rng, c);
            worst = std::max(worst, ref::max_abs_diff(conv2d(x, fold_bn(id, bn)),
                                                      batchnorm_infer(x, bn)));
        }
        // merge_branches
        {
            std::vector<ConvParams> branches;
            const int n = rng.uniform_int(2, 4);
            for (int b = 0; b < n; ++b) branches.push_back(random_conv(rng, c, c, 3, 1, 1));
            Tensor want = conv2d(x, branches[0]);
            for (int b = 1; b < n; ++b) {
                const Tensor t = conv2d(x, branches[static_cast<std::size_t>(b)]);
                for (std::size_t i = 0; i < want.size(); ++i) want[i] += t[i];
            }
            worst = std::max(worst, ref::max_abs_diff(conv2d(x, merge_branches(branches)), want));
        }
    }
    std::ostringstream os;
    os << "100 cases per primitive, worst deviation " << worst << " vs tol 1e-6";
    detail = os.str();
    return worst <= 1e-6;
}

bool criterion_conv_oracle(std::string& detail) {
    ref::Rng rng(405);
    const int c = 8;
    double worst = 0.0;
    int cases = 0;
    for (int k : {1, 3, 7}) {
        for (int stride : {1, 2}) {
            for (int groups : {1, c}) {
                for (int trial = 0; trial < 20; ++trial) {
                    Tensor x({c, 16, 16});
                    ref::fill_uniform(x, rng, -1.0f, 1.0f);
                    const ConvParams p = random_conv(rng, c, c, k, stride, groups);
                    worst = std::max(worst,
                                     ref::max_abs_diff(conv2d(x, p), ref::conv2d_naive(x, p)));
                    ++cases;
                }
            }
        }
    }
    std::ostringstream os;
    os << cases << " cases, worst deviation " << worst << " vs tol 1e-6";
    detail = os.str();
    return worst <= 1e-6;
}

bool criterion_encoder_oracle(std::string& detail) {
    EncoderConfig defaults;
    if (defaults.bins != 10 || defaults.dt_us != 50000) {
        detail = "defaults drifted from T=10, dt=50 ms";
        return false;
    }
    ref::Rng rng(406);
    for (int trial = 0; trial < 1000; ++trial) {
        const bool onempx = trial % 2 == 1;
        const int width = onempx ? 1280 : 304;
        const int height = onempx ? 720 : 240;
        EncoderConfig cfg;
        cfg.spatial_divisor = onempx ? 2 : 1;
        cfg.saturation = trial % 5 == 0 ? 2 : 255;
        EventWindow w;
        w.t0 = rng.uniform_int(0, 50) * cfg.dt_us;
        w.dt = cfg.dt_us;
        const int count = rng.uniform_int(0, 1500);
        for (int i = 0; i < count; ++i) {
            w.events.push_back(Event{
                w.t0 + static_cast<std::int64_t>(rng.uniform() * cfg.dt_us),
                rng.uniform_int(0, width - 1), rng.uniform_int(0, height - 1),
                rng.uniform_int(0, 1) ? 1 : -1});
        }
        const EventVolume got = encode_stacked_histogram(w, width, height, cfg);
        const EventVolume want = ref::encode_brute_force(w, width, height, cfg);
        if (got.counts != want.counts || got.width != want.width ||
            got.height != want.height) {
            detail = "mismatch at trial " + std::to_string(trial);
            return false;
        }
    }
    detail = "1000 windows, integer-exact including saturation and divisor 2";
    return true;
}

bool criterion_shape_chain(std::string& detail) {
    const Model m = init_model(ModelConfig{}, 1);
    const auto run = [&](int h, int w) {
        LstmStateSet states;
        return backbone_forward(Tensor({20, h, w}), states, m);
    };
    const std::vector<Tensor> gen1 = run(240, 304);
    const std::vector<Tensor> onempx = run(360, 640);
    const std::vector<std::vector<int>> want_gen1 = {
        {64, 60, 76}, {128, 30, 38}, {256, 15, 19}, {512, 8, 10}};
    const std::vector<std::vector<int>> want_1mpx = {
        {64, 90, 160}, {128, 45, 80}, {256, 23, 40}, {512, 12, 20}};
    for (int i = 0; i < 4; ++i) {
        if (gen1[static_cast<std::size_t>(i)].shape() != want_gen1[static_cast<std::size_t>(i)]) {
            detail = "gen1 stage " + std::to_string(i + 1) + " shape " +
                     gen1[static_cast<std::size_t>(i)].shape_str();
            return false;
        }
        if (onempx[static_cast<std::size_t>(i)].shape() != want_1mpx[static_cast<std::size_t>(i)]) {
            detail = "1mpx stage " + std::to_string(i + 1) + " shape " +
                     onempx[static_cast<std::size_t>(i)].shape_str();
            return false;
        }
    }
    detail = "gen1 (60,76)/(30,38)/(15,19)/(8,10); 1mpx (90,160)/(45,80)/(23,40)/(12,20)";
    return true;
}

bool criterion_recurrence(std::string& detail) {
    const Model m = init_model(ModelConfig{}, 3);
    const int steps = 21;
    std::vector<Tensor> inputs;
    for (int k = 0; k < steps; ++k)
        inputs.push_back(standardized_random_input(20, 64, 64, 1000 + static_cast<std::uint64_t>(k)));

    // Uninterrupted run.
    std::vector<RawPrediction> baseline;
    LstmStateSet states;
    for (const Tensor& x : inputs) baseline.push_back(model_forward(x, states, m));

    // Interrupt at every boundary: serialize, destroy, restore, continue.
    LstmStateSet live;
    for (int k = 0; k < steps; ++k) {
        const RawPrediction out = model_forward(inputs[static_cast<std::size_t>(k)], live, m);
        if (!raw_identical(out, baseline[static_cast<std::size_t>(k)])) {
            detail = "restore mismatch at step " + std::to_string(k + 1);
            return false;
        }
        const std::vector<std::uint8_t> bytes = live.serialize();
        live = LstmStateSet();  // drop the processor state entirely
        live = LstmStateSet::deserialize(bytes);
    }

    // Reset reproduces step 1 bit-exactly.
    live.reset();
    const RawPrediction again = model_forward(inputs[0], live, m);
    if (!raw_identical(again, baseline[0])) {
        detail = "reset did not reproduce step 1";
        return false;
    }
    detail = "21 steps, save/restore at every boundary bit-identical; reset reproduces step 1";
    return true;
}

bool criterion_nms_oracle(std::string& detail) {
    ref::Rng rng(407);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Detection> dets;
        for (int i = 0; i < 1000; ++i) {
            Detection d;
            d.box.cx = rng.uniform_int(0, 60) * 4.0;
            d.box.cy = rng.uniform_int(0, 48) * 4.0;
            d.box.w = 8.0 * rng.uniform_int(1, 6);
            d.box.h = 8.0 * rng.uniform_int(1, 6);
            d.class_id = rng.uniform_int(0, 2);
            d.score = rng.uniform_int(1, 9) / 10.0;
            dets.push_back(d);
        }
        const std::vector<Detection> fast = nms(dets, 0.45, 0.2);
        const std::vector<Detection> slow = ref::nms_brute_force(dets, 0.45, 0.2);
        if (fast.size() != slow.size()) {
            detail = "size mismatch at trial " + std::to_string(trial);
            return false;
        }
        for (std::size_t i = 0; i < fast.size(); ++i) {
            if (fast[i].score != slow[i].score || fast[i].class_id != slow[i].class_id ||
                fast[i].box.cx != slow[i].box.cx || fast[i].box.cy != slow[i].box.cy ||
                fast[i].box.w != slow[i].box.w || fast[i].box.h != slow[i].box.h) {
                detail = "element mismatch at trial " + std::to_string(trial);
                return false;
            }
        }
    }
    detail = "100 trials x 1000 boxes, exact agreement with the quadratic reference";
    return true;
}

bool criterion_map_correctness(std::string& detail) {
    // Worked 2-gt example: one exact TP above one disjoint FP.
    std::vector<EvalGroundTruth> gts = {
        EvalGroundTruth{0, 0, BBox{50, 50, 20, 20}},
        EvalGroundTruth{0, 0, BBox{150, 50, 20, 20}},
    };
    std::vector<EvalDetection> dets = {
        EvalDetection{0, 0, BBox{50, 50, 20, 20}, 0.9},
        EvalDetection{0, 0, BBox{250, 150, 20, 20}, 0.8},
    };
    const EvalResult worked = map_50_95(dets, gts, EvalProtocol::none());
    const double expect = 51.0 / 101.0;
    if (std::abs(worked.map_50_95 - expect) > 1e-6) {
        detail = "worked example AP " + std::to_string(worked.map_50_95);
        return false;
    }

    std::vector<EvalDetection> perfect;
    for (const auto& g : gts)
        perfect.push_back(EvalDetection{g.frame, g.class_id, g.box, 1.0});
    if (map_50_95(perfect, gts, EvalProtocol::none()).map_50_95 != 1.0) {
        detail = "perfect detections did not reach 1.0";
        return false;
    }
    if (map_50_95({}, gts, EvalProtocol::none()).map_50_95 != 0.0) {
        detail = "empty detections did not score 0.0";
        return false;
    }

    // Protocol thresholds, exactly as documented.
    std::vector<EvalGroundTruth> sized = {
        EvalGroundTruth{0, 0, BBox{0, 0, 9, 50}},    // side 9: gen1 and 1mpx remove
        EvalGroundTruth{0, 0, BBox{0, 0, 12, 20}},   // diag 23.3: both remove
        EvalGroundTruth{0, 0, BBox{0, 0, 30, 30}},   // gen1 keeps; 1mpx diag 42.4 < 60
        EvalGroundTruth{0, 0, BBox{0, 0, 19, 100}},  // gen1 keeps; 1mpx side 19 < 20
        EvalGroundTruth{0, 0, BBox{0, 0, 25, 50}},   // gen1 keeps; 1mpx diag 55.9 < 60
        EvalGroundTruth{0, 0, BBox{0, 0, 20, 60}},   // gen1 keeps; 1mpx boundary kept
        EvalGroundTruth{0, 0, BBox{0, 0, 60, 60}},   // kept everywhere
    };
    if (filter_protocol(sized, EvalProtocol::gen1()).size() != 5) {
        detail = "gen1 filter kept the wrong set";
        return false;
    }
    if (filter_protocol(sized, EvalProtocol::onempx()).size() != 2) {
        detail = "1mpx filter kept the wrong set";
        return false;
    }
    std::ostringstream os;
    os << "worked example AP " << worked.map_50_95 << " (51/101), endpoints and size filters exact";
    detail = os.str();
    return true;
}

bool criterion_efficiency_direction(std::string& detail) {
    const Model train = init_model(ModelConfig{}, 42);
    const Model fused = fuse_model(train);
    const BenchReport rt = run_benchmark(train, 240, 304, 200, 50);
    const BenchReport rf = run_benchmark(fused, 240, 304, 200, 50);
    std::ostringstream os;
    os << "train " << rt.mean_ms << " ms vs fused " << rf.mean_ms << " ms (200 iters, 50 warmup)";
    detail = os.str();
    return rf.mean_ms < rt.mean_ms;
}

bool criterion_loss_identity(std::string& detail) {
    // Identity on a random-weight forward.
    ModelConfig cfg;
    cfg.input_channels = 4;
    cfg.epe_channels = 4;
    cfg.stage_channels = {8, 12, 16, 24};
    cfg.head_width = 16;
    const Model m = init_model(cfg, 5);
    LstmStateSet states;
    const RawPrediction raw = model_forward(standardized_random_input(4, 64, 64, 9), states, m);
    std::vector<LabeledBox> gts = {LabeledBox{0, 10, 10, 24, 24, 0, std::nullopt},
                                   LabeledBox{0, 36, 20, 20, 16, 1, std::nullopt}};
    const LossBreakdown l = compute_loss(raw, gts, 5.0);
    if (l.total != l.cls + 5.0 * l.reg) {
        detail = "identity violated";
        return false;
    }
    const LossBreakdown l0 = compute_loss(raw, gts, 0.0);
    if (l0.total != l0.cls) {
        detail = "lambda = 0 did not reduce to L_cls";
        return false;
    }

    // Constructed perfect predictions.
    const int stride = 8, h = 6, w = 6;
    std::vector<LabeledBox> single = {LabeledBox{0, 3 * 8 - 4, 2 * 8 - 4, 8, 8, 1, std::nullopt}};
    RawPrediction perfect;
    LevelPrediction lp;
    lp.stride = stride;
    lp.cls = Tensor::full({2, h, w}, -40.0f);
    lp.obj = Tensor::full({1, h, w}, -40.0f);
    lp.reg = Tensor({4, h, w});
    lp.obj.at(0, 2, 3) = 40.0f;
    lp.cls.at(1, 2, 3) = 40.0f;
    perfect.levels.push_back(std::move(lp));
    const LossBreakdown lperf = compute_loss(perfect, single, 5.0);
    std::ostringstream os;
    os << "identity bit-exact; perfect-prediction loss " << lperf.total << " < 1e-3";
    detail = os.str();
    return lperf.total < 1e-3;
}

// --- end-to-end smoke -------------------------------------------------------

int run_cmd(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return status;
}

bool criterion_smoke(const std::string& emf_binary, std::string& detail) {
    if (emf_binary.empty()) {
        detail = "no CLI binary path supplied";
        return false;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::filesystem::path dir =
        std::filesystem::temp_directory_path() / "emf_smoke";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    // Synthetic 1-second stream: a 24x24 object drifting right over noise.
    EventStream stream;
    stream.width = 304;
    stream.height = 240;
    ref::Rng rng(408);
    std::vector<LabeledBox> labels;
    for (std::int64_t t = 0; t < 1'000'000; t += 500) {
        const double tsec = static_cast<double>(t) / 1e6;
        const double ox = 60.0 + 120.0 * tsec;
        const double oy = 120.0;
        for (int i = 0; i < 2; ++i) {  // object events
            stream.events.push_back(Event{
                t, std::clamp(static_cast<int>(ox + rng.uniform(-12, 12)), 0, 303),
                std::clamp(static_cast<int>(oy + rng.uniform(-12, 12)), 0, 239),
                rng.uniform_int(0, 1) ? 1 : -1});
        }
        stream.events.push_back(Event{t, rng.uniform_int(0, 303), rng.uniform_int(0, 239),
                                      rng.uniform_int(0, 1) ? 1 : -1});  // noise
    }
    for (std::int64_t t = 50000; t <= 1'000'000; t += 50000) {
        const double tsec = static_cast<double>(t) / 1e6;
        labels.push_back(LabeledBox{t, 60.0 + 120.0 * tsec - 12.0, 108.0, 24.0, 24.0, 0,
                                    std::nullopt});
    }
    const std::string events_path = (dir / "events.evt").string();
    const std::string labels_path = (dir / "labels.jsonl").string();
    write_events(events_path, stream, EventFileFormat::binary);
    write_labels(labels_path, labels);

    const std::string log = (dir / "smoke.log").string();
    const std::string weights = (dir / "weights.emfw").string();
    const std::string tensors = (dir / "tensors").string();
    const std::string dets = (dir / "dets.jsonl").string();
    const std::string report = (dir / "report.json").string();

    struct Step {
        const char* name;
        std::string cmd;
    };
    const std::vector<Step> steps = {
        {"init", emf_binary + " init --seed 42 --out " + weights},
        {"encode", emf_binary + " encode --events " + events_path + " --out-dir " + tensors},
        {"infer", emf_binary + " infer --weights " + weights + " --events " + events_path +
                      " --out " + dets},
        {"eval", emf_binary + " eval --dets " + dets + " --labels " + labels_path +
                     " --protocol none --out " + report},
    };
    for (const Step& s : steps) {
        if (run_cmd(s.cmd + " >> " + log + " 2>&1") != 0) {
            detail = std::string(s.name) + " exited nonzero (see " + log + ")";
            return false;
        }
    }

    // Schema checks on every produced artifact.
    try {
        std::ifstream idx(tensors + "/index.json");
        nlohmann::json j;
        idx >> j;
        if (j.at("windows").size() != 20) {
            detail = "expected 20 encoded windows, got " +
                     std::to_string(j.at("windows").size());
            return false;
        }
        const Tensor t0_tensor = read_tensor_file(
            tensors + "/" + j.at("windows")[0].at("file").get<std::string>());
        if (t0_tensor.shape() != std::vector<int>{20, 240, 304}) {
            detail = "tensor file has shape " + t0_tensor.shape_str();
            return false;
        }
        const std::vector<EvalDetection> parsed = read_detections_jsonl(dets);
        (void)parsed;  // schema-valid (possibly empty) detections
        std::ifstream rep(report);
        nlohmann::json r;
        rep >> r;
        const double map = r.at("map_50_95").get<double>();
        if (!(map >= 0.0 && map <= 1.0)) {
            detail = "mAP out of range";
            return false;
        }
        const double elapsed = seconds_since(t0);
        std::ostringstream os;
        os << "init/encode/infer/eval all exit 0, outputs schema-valid, " << elapsed
           << " s (mAP " << map << " on random weights)";
        detail = os.str();
        return elapsed <= 120.0;
    } catch (const std::exception& e) {
        detail = std::string("output validation failed: ") + e.what();
        return false;
    }
}

}  // namespace

int main(int argc, char** argv) {
    const std::string emf_binary = argc > 1 ? argv[1] : "";

    struct Criterion {
        int id;
        const char* title;
        std::function<bool(std::string&)> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "fusion equivalence (train vs fused <= 1e-4, 10 inputs, <= 60 s)",
         criterion_fusion_equivalence},
        {2, "primitive fusion oracles (fold/pad/identity/merge <= 1e-6)",
         criterion_primitive_oracles},
        {3, "convolution oracle (kernels x strides x groups vs naive <= 1e-6)",
         criterion_conv_oracle},
        {4, "encoder oracle (1000 windows, integer-exact)", criterion_encoder_oracle},
        {5, "shape chain (gen1 and 1mpx geometries, exact)", criterion_shape_chain},
        {6, "recurrence (21-step save/restore bit-identical)", criterion_recurrence},
        {7, "nms oracle (100 x 1000 boxes, exact set equality)", criterion_nms_oracle},
        {8, "mAP correctness (worked example, endpoints, protocol filters)",
         criterion_map_correctness},
        {9, "efficiency direction (fused mean < train mean, 200 iters)",
         criterion_efficiency_direction},
        {10, "loss identity and limits", criterion_loss_identity},
        {11, "end-to-end smoke (init/encode/infer/eval <= 120 s)",
         [&](std::string& d) { return criterion_smoke(emf_binary, d); }},
    };

    int failures = 0;
    for (const Criterion& c : criteria) {
        std::string detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        std::printf("[%s] criterion %2d: %s%s%s\n", ok ? "PASS" : "FAIL", c.id, c.title,
                    detail.empty() ? "" : " — ", detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    std::printf("%d/11 criteria passed\n", 11 - failures);
    return failures == 0 ? 0 : 1;
}
