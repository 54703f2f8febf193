// emf — event-camera object-detection runtime.
//
// Subcommands: init | encode | infer | fuse | eval | bench.
// Exit codes: 0 success, 1 validation/format error, 2 verification failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "emf/bench.hpp"
#include "emf/config.hpp"
#include "emf/detection.hpp"
#include "emf/encoder.hpp"
#include "emf/evaluation.hpp"
#include "emf/event_io.hpp"
#include "emf/io_util.hpp"
#include "emf/reparam.hpp"
#include "emf/weights_io.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitVerifyFailed = 2;

emf::EventFileFormat detect_format(const std::string& path, const std::string& flag) {
    if (flag == "binary") return emf::EventFileFormat::binary;
    if (flag == "csv") return emf::EventFileFormat::csv;
    if (flag == "auto") {
        const std::string ext = std::filesystem::path(path).extension().string();
        return ext == ".csv" ? emf::EventFileFormat::csv : emf::EventFileFormat::binary;
    }
    throw emf::ArgumentError("unknown --format \"" + flag + "\" (binary, csv or auto)");
}

void echo_config(const emf::RunConfig& cfg) {
    std::cout << "effective config: " << cfg.to_json().dump() << "\n";
}

// Loads weights honoring the execution-form flag: --fused converts train-form
// weights in memory; fused weights without --fused are refused.
emf::Model load_for_execution(const std::string& path, bool fused_flag) {
    emf::Model m = emf::load_model(path);
    if (fused_flag && m.form == emf::ModelForm::train) {
        std::cout << "weights are train-form; fusing in memory\n";
        return emf::fuse_model(m);
    }
    if (!fused_flag && m.form == emf::ModelForm::fused)
        throw emf::ArgumentError(path + " holds fused weights; pass --fused");
    return m;
}

struct EncoderFlags {
    int bins = 10;
    std::int64_t dt_us = 50000;
    std::int64_t dt_ms = 0;
    int divisor = 1;
    int saturation = 255;

    void attach(CLI::App* cmd) {
        cmd->add_option("--bins", bins, "Time bins per window (default 10)");
        auto* ms = cmd->add_option("--dt-ms", dt_ms, "Window duration in ms (default 50)");
        cmd->add_option("--dt-us", dt_us, "Window duration in microseconds (default 50000)")
            ->excludes(ms);
        cmd->add_option("--divisor", divisor, "Spatial coordinate divisor (default 1)");
        cmd->add_option("--saturation", saturation, "Per-cell count cap (default 255)");
    }
    emf::EncoderConfig to_config() const {
        emf::EncoderConfig c;
        c.bins = bins;
        c.dt_us = dt_ms > 0 ? dt_ms * 1000 : dt_us;
        c.spatial_divisor = divisor;
        c.saturation = saturation;
        c.validate();
        return c;
    }
};

int cmd_init(const std::string& config_path, std::uint64_t seed, bool seed_given,
             const std::string& out) {
    emf::RunConfig cfg;
    if (!config_path.empty()) cfg = emf::RunConfig::load_file(config_path);
    if (seed_given) cfg.seed = seed;
    cfg.validate();

    emf::Model model = emf::init_model(cfg.model, cfg.seed);
    emf::save_model(out, model);
    echo_config(cfg);
    std::printf("wrote %s (form train, %zu parameters, checksum %016llx)\n", out.c_str(),
                emf::parameter_count(model),
                static_cast<unsigned long long>(emf::parameter_checksum(model)));
    return kExitOk;
}

int cmd_encode(const std::string& events_path, const std::string& format_flag, int width,
               int height, const EncoderFlags& enc_flags, const std::string& out_dir) {
    const emf::EncoderConfig enc = enc_flags.to_config();
    const emf::EventStream stream =
        emf::read_events(events_path, detect_format(events_path, format_flag), width, height);
    const std::vector<emf::EventWindow> windows = emf::window_events(stream, enc.dt_us);

    std::filesystem::create_directories(out_dir);
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t i = 0; i < windows.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "win_%06zu.emft", i);
        const emf::Tensor t = emf::flatten_volume(
            emf::encode_stacked_histogram(windows[i], stream.width, stream.height, enc));
        emf::write_tensor_file((std::filesystem::path(out_dir) / name).string(), t);
        files.push_back({{"file", name},
                         {"t0", windows[i].t0},
                         {"events", windows[i].events.size()}});
    }
    nlohmann::json index{{"events", events_path},
                         {"width", stream.width},
                         {"height", stream.height},
                         {"encoder",
                          {{"bins", enc.bins},
                           {"dt_us", enc.dt_us},
                           {"spatial_divisor", enc.spatial_divisor},
                           {"saturation", enc.saturation}}},
                         {"windows", files}};
    {
        emf::AtomicFileWriter w((std::filesystem::path(out_dir) / "index.json").string());
        w.write(index.dump(2) + "\n");
        w.commit();
    }
    if (windows.empty())
        std::cout << "warning: empty event stream, no tensor files written\n";
    std::printf("encoded %zu windows into %s\n", windows.size(), out_dir.c_str());
    return kExitOk;
}

int cmd_infer(const std::string& weights_path, const std::string& events_path,
              const std::string& format_flag, int width, int height, bool fused,
              const EncoderFlags& enc_flags, double score_thr, double iou_thr,
              const std::string& out) {
    const emf::Model model = load_for_execution(weights_path, fused);
    const emf::EncoderConfig enc = enc_flags.to_config();
    if (enc.polarities * enc.bins != model.config.input_channels)
        throw emf::ConfigError("encoder produces " +
                               std::to_string(enc.polarities * enc.bins) +
                               " channels but the weights expect " +
                               std::to_string(model.config.input_channels));

    const emf::EventStream stream =
        emf::read_events(events_path, detect_format(events_path, format_flag), width, height);
    const std::vector<emf::EventWindow> windows = emf::window_events(stream, enc.dt_us);

    emf::LstmStateSet states;  // fresh at sequence start
    std::vector<emf::EvalDetection> all;
    for (const emf::EventWindow& win : windows) {
        const emf::Tensor x = emf::flatten_volume(
            emf::encode_stacked_histogram(win, stream.width, stream.height, enc));
        const emf::RawPrediction raw = emf::model_forward(x, states, model);
        const std::vector<emf::Detection> dets =
            emf::nms(emf::decode(raw, score_thr), iou_thr, score_thr);
        for (const emf::Detection& d : dets)
            all.push_back(emf::EvalDetection{win.t0, d.class_id, d.box, d.score});
    }
    emf::write_detections_jsonl(out, all);
    std::printf("processed %zu windows, wrote %zu detections to %s (form %s)\n",
                windows.size(), all.size(), out.c_str(), emf::form_name(model.form));
    return kExitOk;
}

int cmd_fuse(const std::string& in_path, const std::string& out_path, bool verify,
             double tol, int inputs, int geom) {
    const emf::Model train = emf::load_model(in_path);
    if (train.form == emf::ModelForm::fused)
        throw emf::StateError(in_path + " is already fused");
    const emf::Model fused = emf::fuse_model(train);

    if (verify) {
        const emf::FusionReport rep =
            emf::verify_fusion(train, fused, inputs, tol, geom, geom);
        nlohmann::json blocks = nlohmann::json::array();
        for (const auto& b : rep.blocks)
            blocks.push_back({{"name", b.name}, {"max_abs", b.max_abs}});
        nlohmann::json j{{"pass", rep.pass},
                         {"global_max_abs", rep.global_max_abs},
                         {"tolerance", rep.tolerance},
                         {"inputs_tested", rep.inputs_tested},
                         {"first_offender", rep.first_offender},
                         {"blocks", blocks}};
        std::cout << j.dump(2) << "\n";
        if (!rep.pass) {
            std::fprintf(stderr, "fusion verification FAILED (max %.3e > tol %.3e at %s)\n",
                         rep.global_max_abs, rep.tolerance, rep.first_offender.c_str());
            return kExitVerifyFailed;  // no output file written
        }
    }
    emf::save_model(out_path, fused);
    std::printf("wrote %s (form fused, %zu parameters)\n", out_path.c_str(),
                emf::parameter_count(fused));
    return kExitOk;
}

int cmd_eval(const std::string& dets_path, const std::string& labels_path,
             const std::string& protocol_name, std::int64_t dt_us,
             const std::string& out) {
    const emf::EvalProtocol protocol = emf::EvalProtocol::from_name(protocol_name);
    const std::vector<emf::EvalDetection> dets = emf::read_detections_jsonl(dets_path);
    std::vector<emf::EvalGroundTruth> gts;
    for (const emf::LabeledBox& b : emf::read_labels(labels_path))
        gts.push_back(emf::EvalGroundTruth{emf::label_window_start(b.t, dt_us), b.class_id,
                                           emf::to_center_box(b)});

    const emf::EvalResult result = emf::map_50_95(dets, gts, protocol);
    for (const std::string& w : result.warnings)
        std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::cout << emf::format_eval_table(result);
    if (!out.empty()) {
        emf::AtomicFileWriter w(out);
        w.write(emf::eval_result_to_json(result, protocol) + "\n");
        w.commit();
    }
    return kExitOk;
}

int cmd_bench(const std::string& weights_path, int width, int height, int iters,
              int warmup, bool fused, bool end_to_end, const std::string& out) {
    const emf::Model model = load_for_execution(weights_path, fused);
    emf::BenchReport rep;
    if (end_to_end) {
        emf::EncoderConfig enc;
        emf::PostConfig post;
        rep = emf::run_benchmark_end_to_end(model, width, height, enc, post, iters, warmup);
    } else {
        rep = emf::run_benchmark(model, height, width, iters, warmup);
    }
    const nlohmann::json j = emf::bench_report_to_json(rep);
    std::cout << j.dump(2) << "\n";
    if (!out.empty()) {
        emf::AtomicFileWriter w(out);
        w.write(j.dump(2) + "\n");
        w.commit();
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"event-camera object detection runtime"};
    app.require_subcommand(1);

    // init
    auto* init = app.add_subcommand("init", "Write seeded train-form weights");
    std::string init_config, init_out;
    std::uint64_t init_seed = 42;
    init->add_option("--config", init_config, "Run-config JSON file");
    auto* seed_opt = init->add_option("--seed", init_seed, "Initialization seed");
    init->add_option("--out", init_out, "Output weights file (EMFW)")->required();

    // encode
    auto* encode = app.add_subcommand("encode", "Encode an event file into tensor files");
    std::string enc_events, enc_format = "auto", enc_out;
    int enc_width = 0, enc_height = 0;
    EncoderFlags enc_flags;
    encode->add_option("--events", enc_events, "Input event file")->required();
    encode->add_option("--format", enc_format, "binary | csv | auto (default auto)");
    encode->add_option("--width", enc_width, "Sensor width (CSV input only)");
    encode->add_option("--height", enc_height, "Sensor height (CSV input only)");
    enc_flags.attach(encode);
    encode->add_option("--out-dir", enc_out, "Output directory")->required();

    // infer
    auto* infer = app.add_subcommand("infer", "Run detection over an event file");
    std::string inf_weights, inf_events, inf_format = "auto", inf_out;
    int inf_width = 0, inf_height = 0;
    bool inf_fused = false;
    EncoderFlags inf_flags;
    double inf_score = 0.01, inf_iou = 0.45;
    infer->add_option("--weights", inf_weights, "EMFW weights file")->required();
    infer->add_option("--events", inf_events, "Input event file")->required();
    infer->add_option("--format", inf_format, "binary | csv | auto (default auto)");
    infer->add_option("--width", inf_width, "Sensor width (CSV input only)");
    infer->add_option("--height", inf_height, "Sensor height (CSV input only)");
    infer->add_flag("--fused", inf_fused, "Run the fused form (converts train weights)");
    inf_flags.attach(infer);
    infer->add_option("--score-thr", inf_score, "Score floor (default 0.01)");
    infer->add_option("--iou-thr", inf_iou, "NMS IoU threshold (default 0.45)");
    infer->add_option("--out", inf_out, "Output detections JSONL")->required();

    // fuse
    auto* fuse = app.add_subcommand("fuse", "Reparameterize train-form weights");
    std::string fuse_in, fuse_out;
    bool fuse_verify = false;
    double fuse_tol = 1e-4;
    int fuse_inputs = 10, fuse_geom = 64;
    fuse->add_option("--in", fuse_in, "Train-form EMFW input")->required();
    fuse->add_option("--out", fuse_out, "Fused EMFW output")->required();
    fuse->add_flag("--verify", fuse_verify, "Check train/fused equivalence first");
    fuse->add_option("--tol", fuse_tol, "Verification tolerance (default 1e-4)");
    fuse->add_option("--inputs", fuse_inputs, "Verification inputs (default 10)");
    fuse->add_option("--size", fuse_geom, "Verification input height=width (default 64)");

    // eval
    auto* eval = app.add_subcommand("eval", "Score detections against labels");
    std::string eval_dets, eval_labels, eval_protocol = "none", eval_out;
    std::int64_t eval_dt = 50000;
    eval->add_option("--dets", eval_dets, "Detections JSONL")->required();
    eval->add_option("--labels", eval_labels, "Labels JSONL")->required();
    eval->add_option("--protocol", eval_protocol, "gen1 | 1mpx | none (default none)");
    eval->add_option("--dt-us", eval_dt,
                     "Window duration used to group labels into frames (default 50000)");
    eval->add_option("--out", eval_out, "Write the JSON report here");

    // bench
    auto* bench = app.add_subcommand("bench", "Measure forward latency");
    std::string bench_weights, bench_out;
    int bench_width = 304, bench_height = 240, bench_iters = 200, bench_warmup = 50;
    bool bench_fused = false, bench_e2e = false;
    bench->add_option("--weights", bench_weights, "EMFW weights file")->required();
    bench->add_option("--width", bench_width, "Input width (default 304)");
    bench->add_option("--height", bench_height, "Input height (default 240)");
    bench->add_option("--iters", bench_iters, "Timed iterations (default 200)");
    bench->add_option("--warmup", bench_warmup, "Warmup iterations (default 50)");
    bench->add_flag("--fused", bench_fused, "Run the fused form (converts train weights)");
    bench->add_flag("--end-to-end", bench_e2e,
                    "Time encode + forward + decode + NMS instead of forward only");
    bench->add_option("--out", bench_out, "Write the JSON report here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed())
            return cmd_init(init_config, init_seed, seed_opt->count() > 0, init_out);
        if (encode->parsed())
            return cmd_encode(enc_events, enc_format, enc_width, enc_height, enc_flags,
                              enc_out);
        if (infer->parsed())
            return cmd_infer(inf_weights, inf_events, inf_format, inf_width, inf_height,
                             inf_fused, inf_flags, inf_score, inf_iou, inf_out);
        if (fuse->parsed())
            return cmd_fuse(fuse_in, fuse_out, fuse_verify, fuse_tol, fuse_inputs,
                            fuse_geom);
        if (eval->parsed())
            return cmd_eval(eval_dets, eval_labels, eval_protocol, eval_dt, eval_out);
        if (bench->parsed())
            return cmd_bench(bench_weights, bench_width, bench_height, bench_iters,
                             bench_warmup, bench_fused, bench_e2e, bench_out);
    } catch (const emf::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return kExitError;
    }
    return kExitError;
}
