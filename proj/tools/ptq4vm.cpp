// Pipeline driver: dataset generation, float pretraining, quantization
// calibration, evaluation, and run comparison. One command per process;
// every artifact lands in a per-run directory.
//
// Exit codes: 0 success, 1 user error, 2 ordering verdict failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ptq4vm/calib.hpp"
#include "ptq4vm/checkpoint.hpp"
#include "ptq4vm/config.hpp"
#include "ptq4vm/flow.hpp"
#include "ptq4vm/metrics.hpp"
#include "ptq4vm/refnet.hpp"
#include "ptq4vm/synthvid.hpp"

namespace fs = std::filesystem;
using namespace ptq4vm;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot write ", path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    require(f.good(), "write failed for ", path);
}

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot read ", path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Per-subcommand plumbing for the shared options. Precedence is built-in
// defaults, then the config file, then explicitly passed flags.
struct Common {
    std::string config_path, data_dir, out_dir;
    std::uint64_t seed = 0;
    CLI::Option *o_data = nullptr, *o_out = nullptr, *o_seed = nullptr;

    void add(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file")
            ->check(CLI::ExistingFile);
        o_data = cmd->add_option("--data-dir", data_dir, "dataset directory");
        o_out = cmd->add_option("--out", out_dir, "output directory for run artifacts");
        o_seed = cmd->add_option("--seed", seed, "master seed (drives every stage)");
    }

    RunConfig resolve() const {
        RunConfig rc;
        if (!config_path.empty()) apply_config_file(rc, config_path);
        if (o_data->count()) rc.data_dir = data_dir;
        if (o_out->count()) rc.out_dir = out_dir;
        if (o_seed->count()) rc.seed = seed;
        return rc;
    }
};

std::vector<ClipData> load_calib_or_die(const RunConfig& rc) {
    if (!fs::exists(fs::path(rc.data_dir) / "manifest.txt") && !fs::exists(rc.data_dir))
        throw std::invalid_argument("dataset missing: run gen-data first (looked in " +
                                    rc.data_dir + ")");
    return load_calib_clips(rc.data_dir);
}

// run.txt: provenance sidecar next to each quantized checkpoint.
std::map<std::string, std::string> read_run_info(const std::string& path) {
    std::map<std::string, std::string> kv;
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

// Clip-parallel evaluation: per-clip metrics are independent, so clips are
// scored on worker copies of the net and merged in clip order, which keeps
// the report identical to the single-threaded one.
MetricsReport evaluate_parallel(const RefNet& net, const std::vector<ClipData>& clips,
                                RunMode mode, const std::string& method, int w_bits, int a_bits,
                                int threads) {
    const int n = static_cast<int>(clips.size());
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        RefNet local = net;
        return evaluate(local, clips, mode, method, w_bits, a_bits);
    }
    std::vector<MetricsReport> per_clip(static_cast<std::size_t>(n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            RefNet local = net;
            for (int i = t; i < n; i += threads) {
                const std::vector<ClipData> one{clips[static_cast<std::size_t>(i)]};
                per_clip[static_cast<std::size_t>(i)] =
                    evaluate(local, one, mode, method, w_bits, a_bits);
            }
        });
    }
    for (auto& th : pool) th.join();

    MetricsReport rep;
    rep.method = method;
    rep.w_bits = w_bits;
    rep.a_bits = a_bits;
    int dt_clips = 0;
    for (const MetricsReport& pc : per_clip) {
        rep.clips.push_back(pc.clips[0]);
        rep.frame_errors.insert(rep.frame_errors.end(), pc.frame_errors.begin(),
                                pc.frame_errors.end());
        rep.total_frames += pc.total_frames;
        const ClipMetrics& cm = pc.clips[0];
        rep.aggregate.mad += cm.mad;
        rep.aggregate.mse += cm.mse;
        rep.aggregate.grad += cm.grad;
        rep.aggregate.conn += cm.conn;
        if (cm.has_dtssd) {
            rep.aggregate.dtssd += cm.dtssd;
            ++dt_clips;
        }
    }
    const double nc = static_cast<double>(n);
    rep.aggregate.mad /= nc;
    rep.aggregate.mse /= nc;
    rep.aggregate.grad /= nc;
    rep.aggregate.conn /= nc;
    if (dt_clips > 0) {
        rep.aggregate.dtssd /= dt_clips;
        rep.aggregate.has_dtssd = true;
    }
    return rep;
}

void print_aggregate(const MetricsReport& rep) {
    std::printf("%s W%dA%d aggregate: MAD %.6f  MSE %.6f  Grad %.6f  Conn %.6f  DTSSD %.6f\n",
                rep.method.c_str(), rep.w_bits, rep.a_bits, rep.aggregate.mad, rep.aggregate.mse,
                rep.aggregate.grad, rep.aggregate.conn, rep.aggregate.dtssd);
    std::printf("(%s)\n", MetricsReport::kScaleNote);
}

// ---- gen-data ----

int cmd_gen_data(const RunConfig& rc, bool force) {
    const fs::path dir(rc.data_dir);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw std::invalid_argument("output directory " + rc.data_dir +
                                    " is not empty (use --force to overwrite)");
    generate_dataset(dataset_config(rc));
    std::printf("dataset written to %s\n", rc.data_dir.c_str());
    std::printf("calibration clips: %d x %d frames\n", rc.calib_clips, rc.calib_frames);
    std::printf("evaluation clips: %d x %d frames\n", rc.eval_clips, rc.eval_frames);
    std::printf("calibration images: %d\n", rc.calib_clips * rc.calib_frames);
    return 0;
}

// ---- pretrain ----

int cmd_pretrain(const RunConfig& rc) {
    const auto calib = load_calib_or_die(rc);
    const auto eval_clips = load_eval_clips(rc.data_dir);
    RefNet net(net_config(rc));
    const PretrainConfig pc = pretrain_config(rc);
    std::printf("pretraining: %d epochs, lr %g, target eval MAD %g\n", pc.epochs, pc.lr,
                pc.target_mad);
    const PretrainResult res = pretrain_fp(net, calib, eval_clips, pc);

    fs::create_directories(rc.out_dir);
    const std::string ck = rc.out_dir + "/fp.ckpt";
    save_checkpoint(ck, net, config_hash(rc), rc.seed);
    write_text(rc.out_dir + "/pretrain_curve.csv", loss_log_csv(res.run));
    write_text(rc.out_dir + "/config.txt", config_text(rc));
    std::printf("eval MAD %.6f (best epoch %d)\n", res.best_eval_mad, res.best_epoch);
    std::printf("checkpoint: %s\n", ck.c_str());
    if (!res.reached_target) {
        std::fprintf(stderr, "warning: target eval MAD %g not reached; best checkpoint kept\n",
                     pc.target_mad);
        return 1;
    }
    return 0;
}

// ---- quantize ----

struct QuantizeArgs {
    std::string method;
    int wbits = 8;
    int abits = 8;
    std::string fp_path;
};

int cmd_quantize(const RunConfig& rc, const QuantizeArgs& qa) {
    require(qa.wbits >= 2 && qa.wbits <= 8 && qa.abits >= 2 && qa.abits <= 8,
            "supported bit range is 2..8, got W", qa.wbits, "A", qa.abits);
    if (qa.wbits < 4 || qa.abits < 4)
        std::fprintf(stderr, "warning: W%dA%d is below the validated 4..8 range; "
                             "expect severe degradation\n", qa.wbits, qa.abits);

    const std::string fp_path = qa.fp_path.empty() ? rc.out_dir + "/fp.ckpt" : qa.fp_path;
    LoadedCheckpoint lc = load_checkpoint(fp_path, config_hash(rc));
    RefNet& net = lc.net;
    const auto calib = load_calib_or_die(rc);

    const std::string run_dir = rc.out_dir + "/" + qa.method + "_W" + std::to_string(qa.wbits) +
                                "A" + std::to_string(qa.abits);
    fs::create_directories(run_dir);

    const BIQConfig bc = biq_config(rc);
    CalibrationRun stage1;
    std::string loss_csv;
    std::string method_tag;
    bool diverged = false;
    bool has_dev = false;
    DeviationTable dev;

    if (qa.method == "mse") {
        stage1 = run_mse_baseline(net, calib, qa.wbits, qa.abits);
        method_tag = stage1.method;
        loss_csv = loss_log_csv(stage1);
    } else if (qa.method == "naive-full") {
        stage1 = run_naive_full(net, calib, bc, qa.wbits, qa.abits);
        method_tag = stage1.method;
        loss_csv = loss_log_csv(stage1);
    } else if (qa.method == "biq" || qa.method == "biq-gac" || qa.method == "biq-gac-ofa") {
        stage1 = run_biq(net, calib, bc, qa.wbits, qa.abits);
        method_tag = stage1.method;
        loss_csv = loss_log_csv(stage1);
        if (qa.method != "biq") {
            const bool ofa = qa.method == "biq-gac-ofa";
            FlowCache flows;
            if (ofa) {
                std::vector<std::uint32_t> ids;
                for (const ClipData& c : calib) ids.push_back(c.clip_id);
                if (fs::exists(flow_cache_path(rc.data_dir, ids.front()))) {
                    flows = load_flow_cache(rc.data_dir, ids);
                } else {
                    std::printf("flow cache missing; building %s flow for %zu clips\n",
                                flow_source_name(flow_source(rc)), ids.size());
                    flows = build_flow_cache(calib, flow_source(rc));
                    save_flow_cache(rc.data_dir, flows);
                }
            }
            GACConfig gc = gac_config(rc);
            gc.ofa = ofa;
            CalibrationRun stage2 = run_gac(net, calib, gc, ofa ? &flows : nullptr, qa.wbits,
                                            qa.abits);
            method_tag = stage2.method;
            diverged = stage2.diverged;
            dev = record_param_deviations(net);
            has_dev = true;
            const std::string s2 = loss_log_csv(stage2);
            loss_csv += s2.substr(s2.find('\n') + 1);  // drop the repeated header
        }
    } else {
        throw std::invalid_argument("unknown method: " + qa.method);
    }
    diverged = diverged || stage1.diverged;

    save_checkpoint(run_dir + "/checkpoint.ckpt", net, config_hash(rc), rc.seed);
    write_text(run_dir + "/loss_log.csv", loss_csv);
    if (has_dev) write_text(run_dir + "/deviations.csv", deviations_csv(dev));
    write_text(run_dir + "/config.txt", config_text(rc));
    char info[256];
    std::snprintf(info, sizeof info,
                  "method=%s\nw_bits=%d\na_bits=%d\nseed=%llu\nconfig_hash=%016llx\ndiverged=%d\n",
                  method_tag.c_str(), qa.wbits, qa.abits,
                  static_cast<unsigned long long>(rc.seed),
                  static_cast<unsigned long long>(config_hash(rc)), diverged ? 1 : 0);
    write_text(run_dir + "/run.txt", info);

    std::printf("%s W%dA%d calibrated: %lld backward passes, %.1fs\n", method_tag.c_str(),
                qa.wbits, qa.abits, stage1.backward_passes, stage1.wall_ms / 1000.0);
    if (diverged)
        std::fprintf(stderr, "warning: optimization diverged and was rolled back mid-run\n");
    std::printf("run directory: %s\n", run_dir.c_str());
    return 0;
}

// ---- evaluate ----

int cmd_evaluate(const RunConfig& rc, const std::string& ck_path, const std::string& out_override) {
    LoadedCheckpoint lc = load_checkpoint(ck_path, config_hash(rc));
    const auto eval_clips = load_eval_clips(rc.data_dir);
    require(!eval_clips.empty(), "evaluation split is empty");
    require(eval_clips[0].height == lc.net.cfg.height && eval_clips[0].width == lc.net.cfg.width,
            "resolution mismatch: dataset is ", eval_clips[0].width, "x", eval_clips[0].height,
            ", checkpoint expects ", lc.net.cfg.width, "x", lc.net.cfg.height);

    std::string method = "fp";
    int w_bits = 32, a_bits = 32;
    const fs::path run_dir = fs::path(ck_path).parent_path();
    const fs::path info_path = run_dir / "run.txt";
    if (fs::exists(info_path)) {
        auto kv = read_run_info(info_path.string());
        if (kv.count("method")) method = kv["method"];
        if (kv.count("w_bits")) w_bits = std::stoi(kv["w_bits"]);
        if (kv.count("a_bits")) a_bits = std::stoi(kv["a_bits"]);
    }
    bool quantized = false;
    for (const ConvLayer& l : lc.net.layers)
        if (l.wmode != WeightMode::Float) quantized = true;

    const MetricsReport rep =
        evaluate_parallel(lc.net, eval_clips, quantized ? RunMode::Quantized : RunMode::Float,
                          method, w_bits, a_bits, resolve_threads(rc));

    const std::string out = out_override.empty() ? run_dir.string() : out_override;
    fs::create_directories(out);
    write_text(out + "/metrics.csv", metrics_csv(rep));
    write_text(out + "/per_frame.csv", frame_errors_csv(rep));
    print_aggregate(rep);
    std::printf("metrics: %s/metrics.csv\n", out.c_str());
    return 0;
}

// ---- compare ----

struct RunSummary {
    std::string dir;
    std::string method;
    int w_bits = 0;
    int a_bits = 0;
    double mad = 0, mse = 0, grad = 0, conn = 0, dtssd = 0;
    double tail_err = -1.0;  // mean per-frame alpha error, frames >= 2
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

RunSummary read_run_summary(const std::string& dir) {
    const std::string mpath = dir + "/metrics.csv";
    if (!fs::exists(mpath))
        throw std::invalid_argument("no metrics.csv in " + dir + " (run evaluate first)");
    RunSummary rs;
    rs.dir = dir;
    std::istringstream in(read_text(mpath));
    std::string line;
    std::getline(in, line);  // header
    bool found = false;
    while (std::getline(in, line)) {
        const auto cells = split_csv_line(line);
        if (cells.size() < 9 || cells[3] != "aggregate") continue;
        rs.method = cells[0];
        rs.w_bits = std::stoi(cells[1]);
        rs.a_bits = std::stoi(cells[2]);
        rs.mad = std::stod(cells[4]);
        rs.mse = std::stod(cells[5]);
        rs.grad = std::stod(cells[6]);
        rs.conn = std::stod(cells[7]);
        if (!cells[8].empty()) rs.dtssd = std::stod(cells[8]);
        found = true;
    }
    require(found, "no aggregate row in ", mpath);

    const std::string fpath = dir + "/per_frame.csv";
    if (fs::exists(fpath)) {
        std::istringstream fin(read_text(fpath));
        std::getline(fin, line);
        double sum = 0.0;
        int count = 0;
        while (std::getline(fin, line)) {
            const auto cells = split_csv_line(line);
            if (cells.size() < 6) continue;
            if (std::stoi(cells[4]) >= 2) {
                sum += std::stod(cells[5]);
                ++count;
            }
        }
        if (count > 0) rs.tail_err = sum / count;
    }
    return rs;
}

int cmd_compare(const std::vector<std::string>& dirs) {
    require(dirs.size() >= 2, "compare needs at least two run directories");
    std::vector<RunSummary> runs;
    for (const std::string& d : dirs) runs.push_back(read_run_summary(d));
    for (const RunSummary& r : runs)
        require(r.w_bits == runs[0].w_bits && r.a_bits == runs[0].a_bits,
                "refusing to compare runs at different bit widths: ", r.dir, " is W", r.w_bits,
                "A", r.a_bits, ", first run is W", runs[0].w_bits, "A", runs[0].a_bits);

    std::printf("W%dA%d comparison (%s)\n", runs[0].w_bits, runs[0].a_bits,
                MetricsReport::kScaleNote);
    std::printf("%-14s %10s %10s %10s %10s %10s %10s\n", "method", "MAD", "MSE", "Grad", "Conn",
                "DTSSD", "dMAD");
    for (const RunSummary& r : runs)
        std::printf("%-14s %10.4f %10.4f %10.4f %10.4f %10.4f %+10.4f\n", r.method.c_str(), r.mad,
                    r.mse, r.grad, r.conn, r.dtssd, r.mad - runs[0].mad);

    auto find = [&](const std::string& m) -> const RunSummary* {
        for (const RunSummary& r : runs)
            if (r.method == m) return &r;
        return nullptr;
    };
    bool all_pass = true;
    int verdicts = 0;
    auto verdict = [&](bool pass, const std::string& text) {
        std::printf("%s: %s\n", pass ? "PASS" : "FAIL", text.c_str());
        all_pass = all_pass && pass;
        ++verdicts;
    };

    const RunSummary* naive = find("naive-full");
    const RunSummary* biq = find("biq");
    const RunSummary* gac = find("biq+gac");
    const RunSummary* ofa = find("biq+gac+ofa");
    char buf[160];
    if (biq && naive) {
        std::snprintf(buf, sizeof buf, "block-wise beats whole-net calibration (MAD %.4f < %.4f)",
                      biq->mad, naive->mad);
        verdict(biq->mad < naive->mad, buf);
    }
    if (gac && biq) {
        std::snprintf(buf, sizeof buf, "affine correction improves MAD (%.4f < %.4f)", gac->mad,
                      biq->mad);
        verdict(gac->mad < biq->mad, buf);
    }
    if (ofa && gac) {
        require(ofa->tail_err >= 0 && gac->tail_err >= 0,
                "per_frame.csv required for the temporal verdict");
        std::snprintf(buf, sizeof buf,
                      "flow term lowers frame >= 2 alpha error (%.6f < %.6f)", ofa->tail_err,
                      gac->tail_err);
        verdict(ofa->tail_err < gac->tail_err, buf);
    }
    if (verdicts == 0) std::printf("no registered orderings apply to these methods\n");
    return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale quantization lab for a recurrent matting model"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "render the synthetic clip dataset");
    Common gen_c;
    gen_c.add(gen);
    int gen_clips = 0;
    bool gen_force = false;
    auto* o_clips = gen->add_option("--clips", gen_clips,
                                    "calibration clip count (evaluation split scales with it)");
    gen->add_flag("--force", gen_force, "overwrite a non-empty dataset directory");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train the float reference model");
    Common pre_c;
    pre_c.add(pre);
    int pre_epochs = 0;
    double pre_lr = 0, pre_target = -1;
    auto* o_epochs = pre->add_option("--epochs", pre_epochs, "training epochs");
    auto* o_lr = pre->add_option("--lr", pre_lr, "peak learning rate");
    auto* o_target = pre->add_option("--target", pre_target, "early-stop eval MAD");

    // quantize
    auto* qz = app.add_subcommand("quantize", "calibrate a quantized model from the FP checkpoint");
    Common qz_c;
    qz_c.add(qz);
    QuantizeArgs qa;
    qz->add_option("--method", qa.method, "mse | naive-full | biq | biq-gac | biq-gac-ofa")
        ->required()
        ->check(CLI::IsMember({"mse", "naive-full", "biq", "biq-gac", "biq-gac-ofa"}));
    qz->add_option("--wbits", qa.wbits, "weight bit-width")->required();
    qz->add_option("--abits", qa.abits, "activation bit-width")->required();
    qz->add_option("--fp-checkpoint", qa.fp_path, "FP checkpoint (default <out>/fp.ckpt)");
    int qz_iters = 0, qz_gac_epochs = 0;
    double qz_biq_lr = 0, qz_gac_lr = 0, qz_lambda = -1;
    auto* o_iters = qz->add_option("--biq-iterations", qz_iters, "stage-1 steps per block");
    auto* o_biq_lr = qz->add_option("--biq-lr", qz_biq_lr, "stage-1 learning rate");
    auto* o_gac_epochs = qz->add_option("--gac-epochs", qz_gac_epochs, "stage-2 epochs");
    auto* o_gac_lr = qz->add_option("--gac-lr", qz_gac_lr, "stage-2 learning rate");
    auto* o_lambda = qz->add_option("--gac-lambda", qz_lambda, "temporal-consistency weight");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on the evaluation split");
    Common ev_c;
    ev_c.add(ev);
    std::string ev_ck, ev_out;
    ev->add_option("--checkpoint", ev_ck, "checkpoint to evaluate")->required();
    ev->add_option("--metrics-out", ev_out, "directory for CSVs (default: checkpoint's)");

    // compare
    auto* cp = app.add_subcommand("compare", "side-by-side metrics and ordering verdicts");
    std::vector<std::string> cp_dirs;
    cp->add_option("dirs", cp_dirs, "evaluated run directories")->expected(-2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) {
            RunConfig rc = gen_c.resolve();
            if (o_clips->count()) {
                rc.calib_clips = gen_clips;
                rc.eval_clips = std::max(1, (gen_clips + 2) / 4);
            }
            return cmd_gen_data(rc, gen_force);
        }
        if (pre->parsed()) {
            RunConfig rc = pre_c.resolve();
            if (o_epochs->count()) rc.pretrain_epochs = pre_epochs;
            if (o_lr->count()) rc.pretrain_lr = pre_lr;
            if (o_target->count()) rc.pretrain_target_mad = pre_target;
            return cmd_pretrain(rc);
        }
        if (qz->parsed()) {
            RunConfig rc = qz_c.resolve();
            if (o_iters->count()) rc.biq_iterations = qz_iters;
            if (o_biq_lr->count()) rc.biq_lr = qz_biq_lr;
            if (o_gac_epochs->count()) rc.gac_epochs = qz_gac_epochs;
            if (o_gac_lr->count()) rc.gac_lr = qz_gac_lr;
            if (o_lambda->count()) rc.gac_lambda = qz_lambda;
            return cmd_quantize(rc, qa);
        }
        if (ev->parsed()) return cmd_evaluate(ev_c.resolve(), ev_ck, ev_out);
        if (cp->parsed()) return cmd_compare(cp_dirs);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
