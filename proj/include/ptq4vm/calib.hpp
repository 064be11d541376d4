#pragma once

// Post-training calibration pipeline for RefNet.
//
// Stage 0  pretrain_fp        float training of the reference model on
//                             synthetic clips until it tracks ground truth
// Stage 1  run_biq            block-wise reconstruction: per-block rounding
//                             masks + activation scales against cached float
//                             block outputs, blocks frozen in topological
//                             order
//          run_naive_full     whole-network baseline with the same step
//                             budget, optimizing every mask and scale at once
//          run_mse_baseline   no optimization at all: MSE-grid weight
//                             quantizers plus range-searched activation scales
// Stage 2  run_gac            global affine calibration: per-layer scalar
//                             gamma/beta on the frozen integer weights plus
//                             activation scales, trained on two-frame windows
//                             against ground-truth mattes, optionally with a
//                             flow-warp temporal consistency term
//
// Every routine draws randomness only from seeds carried in its config, so a
// rerun with the same inputs reproduces the same log and the same parameters.
//
// Logged losses for run_biq and run_naive_full are the reconstruction or
// regression term alone; the soft-round regularizer joins the optimized
// objective but never the log, so a no-quantization-error configuration logs
// losses near zero.
//
// Both stage-1 optimizers also log a convergence curve under phase "alpha":
// the calibration-set matte error of the network as it would deploy at that
// point, with still-soft blocks measured at nearest rounding. Both curves
// start from the same uncalibrated state, so they are directly comparable.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "ptq4vm/common.hpp"
#include "ptq4vm/flow.hpp"
#include "ptq4vm/nn.hpp"
#include "ptq4vm/quant.hpp"
#include "ptq4vm/refnet.hpp"
#include "ptq4vm/synthvid.hpp"
#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

inline constexpr double kPi = 3.14159265358979323846;

struct PretrainConfig {
    int epochs = 60;
    double lr = 1e-3;
    double target_mad = 0.05;  // raw mean |alpha - gt| on the eval split
    std::uint64_t seed = 7;
};

struct BIQConfig {
    int iterations = 2000;  // optimizer steps per block
    double lr = 4e-5;
    int batch = 8;  // cached frames per step (naive-full: two-frame windows per step)
    double reg_weight = 0.01;
    double b_start = 20.0;  // soft-round regularizer anneal, start -> end
    double b_end = 2.0;
    std::uint64_t seed = 7;
};

struct GACConfig {
    int epochs = 50;
    double lr = 1e-4;
    double lambda_ofa = 0.05;
    bool ofa = false;        // add the flow-warp consistency term
    bool fp_target = false;  // regress the float model's mattes instead of ground truth
    std::uint64_t seed = 7;
};

struct LossRow {
    std::string phase;           // "pretrain" | "pretrain-eval" | "biq" | "naive-full" | "gac"
    std::string block_or_epoch;  // block name, or epoch index as text
    int iteration = 0;
    double loss = 0.0;
    long long wall_ms = 0;
};

struct ParamDeviation {
    std::string layer;
    double gamma = 1.0;
    double beta = 0.0;
};

struct CalibrationRun {
    std::string method;
    int w_bits = 0;
    int a_bits = 0;
    std::vector<LossRow> log;
    long long wall_ms = 0;
    long long backward_passes = 0;
    bool diverged = false;
    std::vector<ParamDeviation> deviations;  // filled by run_gac
};

inline std::string bits_tag(int w_bits, int a_bits) { return cat("W", w_bits, "A", a_bits); }

// Loss log as CSV. wall_ms is wall-clock and is not expected to reproduce
// across reruns; every other column is deterministic for a fixed seed.
inline std::string loss_log_csv(const CalibrationRun& run) {
    std::string out = "method,bits,phase,block_or_epoch,iteration,loss,wall_ms\n";
    const std::string tag = bits_tag(run.w_bits, run.a_bits);
    char buf[64];
    for (const LossRow& r : run.log) {
        out += run.method;
        out += ',';
        out += tag;
        out += ',';
        out += r.phase;
        out += ',';
        out += r.block_or_epoch;
        out += ',';
        out += std::to_string(r.iteration);
        out += ',';
        std::snprintf(buf, sizeof(buf), "%.9e", r.loss);
        out += buf;
        out += ',';
        out += std::to_string(r.wall_ms);
        out += '\n';
    }
    return out;
}

namespace calib_detail {

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    long long ms() const {
        auto d = std::chrono::steady_clock::now() - start_;
        return std::chrono::duration_cast<std::chrono::milliseconds>(d).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

inline std::vector<float> snapshot_params(const std::vector<Tensor>& ps) {
    std::vector<float> s;
    for (const Tensor& p : ps) s.insert(s.end(), p.data().begin(), p.data().end());
    return s;
}

inline void restore_params(std::vector<Tensor>& ps, const std::vector<float>& s) {
    std::size_t off = 0;
    for (Tensor& p : ps) {
        auto d = p.mutable_data();
        check(off + d.size() <= s.size(), "parameter snapshot size mismatch");
        std::copy(s.begin() + static_cast<std::ptrdiff_t>(off),
                  s.begin() + static_cast<std::ptrdiff_t>(off + d.size()), d.begin());
        off += d.size();
    }
    check(off == s.size(), "parameter snapshot size mismatch");
}

inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
}

// Raw mean |alpha - gt| over all frames of all clips, no metric scaling.
inline double eval_mad_raw(RefNet& net, const std::vector<ClipData>& clips, RunMode mode) {
    require(!clips.empty(), "eval_mad_raw needs at least one clip");
    ForwardCtx ctx{mode, nullptr};
    double total = 0.0;
    std::int64_t count = 0;
    for (const ClipData& c : clips) {
        RecurrentState st;
        for (int t = 0; t < c.frames; ++t) {
            Tensor a = net.forward_frame(clip_frame(c, t), st, ctx);
            Tensor gt = clip_alpha(c, t);
            auto av = a.data();
            auto gv = gt.data();
            double s = 0.0;
            for (std::size_t i = 0; i < av.size(); ++i)
                s += std::abs(static_cast<double>(av[i]) - static_cast<double>(gv[i]));
            total += s / static_cast<double>(av.size());
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// Two-frame training window: ground-truth flow exists for every t >= 1, so
// any consecutive pair (t0, t0+1) inside a clip is usable.
struct Window {
    int clip = 0;
    int t0 = 0;
};

inline std::vector<Window> make_windows(const std::vector<ClipData>& clips) {
    std::vector<Window> ws;
    for (int ci = 0; ci < static_cast<int>(clips.size()); ++ci)
        for (int t0 = 0; t0 + 1 < clips[static_cast<std::size_t>(ci)].frames; ++t0)
            ws.push_back({ci, t0});
    require(!ws.empty(), "calibration clips must have at least two frames");
    return ws;
}

}  // namespace calib_detail

// ---- stage 0: float pretraining ----

struct PretrainResult {
    CalibrationRun run;
    double best_eval_mad = 1.0;
    int best_epoch = -1;
    bool reached_target = false;
};

// Trains the float model with Adam under a cosine learning-rate schedule
// until the eval-split MAD reaches the target or the epoch budget runs out.
// The best checkpoint seen is restored before returning.
inline PretrainResult pretrain_fp(RefNet& net, const std::vector<ClipData>& train,
                                  const std::vector<ClipData>& eval_clips,
                                  const PretrainConfig& cfg) {
    require(!train.empty() && !eval_clips.empty(), "pretrain needs train and eval clips");
    require(cfg.epochs >= 1, "pretrain needs at least one epoch");

    calib_detail::Timer timer;
    PretrainResult res;
    res.run.method = "fp-pretrain";
    res.run.w_bits = 32;
    res.run.a_bits = 32;

    std::vector<Tensor> params = net.trainable_params();
    for (Tensor& p : params) p.set_requires_grad(true);
    AdamState opt;
    opt.init(params);
    Rng rng(mix_seed(cfg.seed, fnv1a64("pretrain")));

    std::vector<int> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::vector<float> best;
    int gstep = 0;

    for (int e = 0; e < cfg.epochs; ++e) {
        const double lr = cfg.lr * 0.5 * (1.0 + std::cos(kPi * e / cfg.epochs));
        calib_detail::shuffle_indices(order, rng);
        ForwardCtx ctx;
        for (int ci : order) {
            const ClipData& c = train[static_cast<std::size_t>(ci)];
            Tape tape;
            RecurrentState st;
            Tensor loss;
            for (int t = 0; t < c.frames; ++t) {
                Tensor a = net.forward_frame(clip_frame(c, t), st, ctx);
                Tensor gt = clip_alpha(c, t);
                Tensor term = add(mse_loss(a, gt), l1_loss(a, gt));
                loss = t == 0 ? term : add(loss, term);
            }
            loss = mul_scalar(loss, 1.0f / static_cast<float>(c.frames));
            const double lv = loss.item();
            check(std::isfinite(lv), "pretrain loss diverged at epoch ", e);
            tape.backward(loss);
            ++res.run.backward_passes;
            adam_step(params, opt, static_cast<float>(lr));
            for (Tensor& p : params) p.zero_grad();
            res.run.log.push_back({"pretrain", std::to_string(e), gstep++, lv, timer.ms()});
        }
        const double em = calib_detail::eval_mad_raw(net, eval_clips, RunMode::Float);
        res.run.log.push_back({"pretrain-eval", std::to_string(e), e, em, timer.ms()});
        if (em < res.best_eval_mad) {
            res.best_eval_mad = em;
            res.best_epoch = e;
            best = calib_detail::snapshot_params(params);
        }
        if (res.best_eval_mad <= cfg.target_mad) break;
    }

    if (!best.empty()) calib_detail::restore_params(params, best);
    for (Tensor& p : params) p.set_requires_grad(false);
    res.reached_target = res.best_eval_mad <= cfg.target_mad;
    res.run.wall_ms = timer.ms();
    return res;
}

// ---- quantizer initialization shared by every stage-1 method ----

// Folds BN, fits per-channel MSE-grid weight quantizers, then runs the whole
// calibration set through the float model once to collect activation ranges.
// Weights stay in float mode during observation so the ranges describe the
// full-precision network.
inline ObserverMap init_quantizers(RefNet& net, const std::vector<ClipData>& calib, int w_bits,
                                   int a_bits) {
    require(!calib.empty(), "quantizer initialization needs calibration clips");
    net.fold_all_bn();
    net.init_weight_quantizers(w_bits);
    ObserverMap obs;
    ForwardCtx octx{RunMode::Observe, &obs};
    for (const ClipData& c : calib) {
        RecurrentState st;
        for (int t = 0; t < c.frames; ++t) (void)net.forward_frame(clip_frame(c, t), st, octx);
    }
    net.init_act_quantizers(a_bits, obs);
    return obs;
}

// ---- stage-1 baseline: pure range search, zero optimization ----

// Nearest rounding everywhere; activation ranges refined by the same
// symmetric shrink grid used for weights, scored on the observer's samples.
inline CalibrationRun run_mse_baseline(RefNet& net, const std::vector<ClipData>& calib, int w_bits,
                                       int a_bits) {
    calib_detail::Timer timer;
    CalibrationRun run;
    run.method = "mse-baseline";
    run.w_bits = w_bits;
    run.a_bits = a_bits;

    ObserverMap obs = init_quantizers(net, calib, w_bits, a_bits);
    for (auto& q : net.qpoints) {
        const ActObserver& o = obs.at(q.name);
        QuantParams best = q.qp;
        double best_mse = quant_mse(o.samples, best);
        constexpr int kCandidates = 100;
        for (int k = 0; k < kCandidates; ++k) {
            const double f = 0.5 + 0.5 * k / (kCandidates - 1);
            if (f >= 1.0) continue;  // full span is the starting point
            QuantParams cand = init_qparams_from_range(f * o.mn, f * o.mx, a_bits);
            const double m = quant_mse(o.samples, cand);
            if (m < best_mse) {
                best_mse = m;
                best = cand;
            }
        }
        q.qp = best;
        q.scale = Tensor::from_data({1}, {static_cast<float>(best.scale)});
    }
    net.freeze_round_nearest();
    run.wall_ms = timer.ms();
    return run;
}

// ---- stage 1: block-wise reconstruction ----

namespace calib_detail {

// One cached training example for a block: its input tensors under the
// current quantized prefix and the float model's output at the same boundary.
struct BlockSample {
    std::vector<Tensor> ins;
    Tensor target;
    bool h_init = false;  // GRU at t=0: rebuild the initial state live so the
                          // state quantizer trains through it
};

inline Tensor trace_field(const FrameTrace& tr, const std::string& block) {
    if (block == "enc0") return tr.s0;
    if (block == "enc1") return tr.s1;
    if (block == "enc2") return tr.s2;
    if (block == "lraspp") return tr.aspp;
    if (block == "gru") return tr.h;
    if (block == "up1") return tr.u1;
    if (block == "up2") return tr.u2;
    if (block == "up3") return tr.u3;
    if (block == "outblk") return tr.outb;
    if (block == "proj") return tr.alpha;
    check(false, "unknown block ", block);
    return Tensor();
}

inline std::vector<Tensor> block_inputs(const FrameTrace& tr, const Tensor& frame,
                                        const Tensor& h_prev, const std::string& block) {
    if (block == "enc0") return {frame};  // raw frame; the input quantizer is applied live
    if (block == "enc1") return {tr.s0};
    if (block == "enc2") return {tr.s1};
    if (block == "lraspp") return {tr.s2};
    if (block == "gru") return {tr.aspp, h_prev};
    if (block == "up1") return {tr.h, tr.s1};
    if (block == "up2") return {tr.u1, tr.s0};
    if (block == "up3") return {tr.u2, tr.frame_q};
    if (block == "outblk") return {tr.u3};
    if (block == "proj") return {tr.outb};
    check(false, "unknown block ", block);
    return {};
}

// Replays the calibration clips through the current partially-quantized
// network and pairs each frame's block inputs with the float targets.
inline std::vector<BlockSample> gather_block_samples(
    RefNet& net, const BlockDef& bd, const std::vector<ClipData>& calib,
    const std::vector<std::vector<FrameTrace>>& fp_traces) {
    std::vector<BlockSample> out;
    ForwardCtx qctx{RunMode::Quantized, nullptr};
    for (std::size_t ci = 0; ci < calib.size(); ++ci) {
        const ClipData& c = calib[ci];
        RecurrentState st;
        Tensor h_prev = net.initial_state(1, qctx);
        for (int t = 0; t < c.frames; ++t) {
            Tensor frame = clip_frame(c, t);
            FrameTrace tr = net.forward_frame_trace(frame, st, qctx);
            BlockSample s;
            s.ins = block_inputs(tr, frame, h_prev, bd.name);
            s.target = trace_field(fp_traces[ci][static_cast<std::size_t>(t)], bd.name);
            s.h_init = bd.name == "gru" && t == 0;
            out.push_back(std::move(s));
            h_prev = tr.h;
        }
    }
    return out;
}

inline double anneal_b(double b_start, double b_end, int it, int total) {
    if (total <= 1) return b_end;
    return b_start + (b_end - b_start) * it / (total - 1.0);
}

// Alpha error of the network as it would deploy right now: blocks still under
// soft-round optimization are measured with nearest rounding, frozen blocks
// as frozen. The trajectory of this quantity across a calibration run is the
// convergence curve the stage-1 methods are compared on.
inline double deployable_alpha_mad(RefNet& net, const std::vector<ClipData>& clips) {
    std::vector<int> softened;
    for (int li = 0; li < static_cast<int>(net.layers.size()); ++li) {
        if (net.layers[static_cast<std::size_t>(li)].wmode == WeightMode::SoftRound) {
            net.set_weight_mode(net.layers[static_cast<std::size_t>(li)], WeightMode::FakeRound);
            softened.push_back(li);
        }
    }
    const double mad = eval_mad_raw(net, clips, RunMode::Quantized);
    for (int li : softened)
        net.set_weight_mode(net.layers[static_cast<std::size_t>(li)], WeightMode::SoftRound);
    return mad;
}

}  // namespace calib_detail

// Calibrates one block in topological order after its predecessors froze:
// optimizes the block's rounding masks and activation scales against the
// float model's output at the block boundary, on inputs produced by the
// already-quantized prefix. A non-finite loss aborts the block and restores
// its pre-optimization parameters; the pipeline then continues.
inline CalibrationRun run_biq(RefNet& net, const std::vector<ClipData>& calib,
                              const BIQConfig& cfg, int w_bits, int a_bits) {
    require(cfg.iterations >= 1 && cfg.batch >= 1, "BIQ needs positive iterations and batch");
    require(cfg.lr > 0.0, "BIQ learning rate must be positive");
    calib_detail::Timer timer;
    CalibrationRun run;
    run.method = "biq";
    run.w_bits = w_bits;
    run.a_bits = a_bits;

    init_quantizers(net, calib, w_bits, a_bits);

    // Float reference traces, captured before any weight leaves float mode.
    std::vector<std::vector<FrameTrace>> fp_traces(calib.size());
    {
        ForwardCtx fctx;
        for (std::size_t ci = 0; ci < calib.size(); ++ci) {
            RecurrentState st;
            for (int t = 0; t < calib[ci].frames; ++t)
                fp_traces[ci].push_back(net.forward_frame_trace(clip_frame(calib[ci], t), st, fctx));
        }
    }

    net.init_round_masks();
    net.set_weight_mode(WeightMode::SoftRound);
    Rng root(mix_seed(cfg.seed, fnv1a64("biq")));

    // Convergence curve: matte error of the deployable network, one row for
    // the uncalibrated nearest-rounding start and one after each block.
    run.log.push_back({"alpha", "init", 0,
                       calib_detail::deployable_alpha_mad(net, calib), timer.ms()});

    ForwardCtx qctx{RunMode::Quantized, nullptr};
    int blocks_done = 0;
    for (const BlockDef& bd : net.blocks()) {
        const int bid = net.block_id(bd.name);
        auto samples = calib_detail::gather_block_samples(net, bd, calib, fp_traces);

        std::vector<Tensor> params;
        for (int li : bd.layer_ids) params.push_back(net.layers[static_cast<std::size_t>(li)].round_mask);
        for (const std::string& qn : bd.qpoint_names) params.push_back(net.qpoint(qn).scale);
        for (Tensor& p : params) p.set_requires_grad(true);
        AdamState opt;
        opt.init(params);
        const std::vector<float> before = calib_detail::snapshot_params(params);
        Rng rng = root.fork(fnv1a64(bd.name));

        for (int it = 0; it < cfg.iterations; ++it) {
            const double b = calib_detail::anneal_b(cfg.b_start, cfg.b_end, it, cfg.iterations);
            Tape tape;
            Tensor loss;
            for (int k = 0; k < cfg.batch; ++k) {
                const auto& s = samples[static_cast<std::size_t>(
                    rng.uniform_int(static_cast<int>(samples.size())))];
                std::vector<Tensor> ins = s.ins;
                if (bd.name == "enc0") ins[0] = net.fq("qp_in", ins[0], qctx);
                if (s.h_init) ins[1] = net.initial_state(1, qctx);
                Tensor term = mse_loss(net.run_block(bid, ins, qctx), s.target);
                loss = k == 0 ? term : add(loss, term);
            }
            loss = mul_scalar(loss, 1.0f / static_cast<float>(cfg.batch));
            const double lv = loss.item();  // logged loss is the reconstruction term
            for (int li : bd.layer_ids) {
                Tensor reg = soft_round_reg(net.layers[static_cast<std::size_t>(li)].round_mask, b);
                loss = add(loss, mul_scalar(reg, static_cast<float>(cfg.reg_weight)));
            }
            if (!std::isfinite(loss.item())) {
                calib_detail::restore_params(params, before);
                run.diverged = true;
                break;
            }
            tape.backward(loss);
            ++run.backward_passes;
            adam_step(params, opt, static_cast<float>(cfg.lr));
            for (Tensor& p : params) p.zero_grad();
            run.log.push_back({"biq", bd.name, it, lv, timer.ms()});
        }

        for (Tensor& p : params) p.set_requires_grad(false);
        for (int li : bd.layer_ids) {
            ConvLayer& l = net.layers[static_cast<std::size_t>(li)];
            l.frozen = binarize_round_mask(l.w, l.round_mask, l.wq);
            net.set_weight_mode(l, WeightMode::Frozen);
        }
        run.log.push_back({"alpha", bd.name, ++blocks_done,
                           calib_detail::deployable_alpha_mad(net, calib), timer.ms()});
    }

    net.sync_act_scales();
    run.wall_ms = timer.ms();
    return run;
}

// Whole-network ablation with the same per-step budget as run_biq times the
// block count: every rounding mask and activation scale optimized jointly
// against the float model's mattes on two-frame windows.
inline CalibrationRun run_naive_full(RefNet& net, const std::vector<ClipData>& calib,
                                     const BIQConfig& cfg, int w_bits, int a_bits) {
    require(cfg.iterations >= 1 && cfg.batch >= 1, "naive-full needs positive iterations and batch");
    require(cfg.lr > 0.0, "naive-full learning rate must be positive");
    calib_detail::Timer timer;
    CalibrationRun run;
    run.method = "naive-full";
    run.w_bits = w_bits;
    run.a_bits = a_bits;

    init_quantizers(net, calib, w_bits, a_bits);

    // Float mattes as regression targets, captured while weights are float.
    std::vector<std::vector<Tensor>> fp_alpha(calib.size());
    {
        ForwardCtx fctx;
        for (std::size_t ci = 0; ci < calib.size(); ++ci) {
            RecurrentState st;
            for (int t = 0; t < calib[ci].frames; ++t)
                fp_alpha[ci].push_back(net.forward_frame(clip_frame(calib[ci], t), st, fctx));
        }
    }

    net.init_round_masks();
    net.set_weight_mode(WeightMode::SoftRound);

    // Same convergence-curve sampling as run_biq: one row at the start, one
    // per block-sized slice of the step budget, so the curves line up.
    run.log.push_back({"alpha", "init", 0,
                       calib_detail::deployable_alpha_mad(net, calib), timer.ms()});

    std::vector<Tensor> params;
    for (auto& l : net.layers) params.push_back(l.round_mask);
    for (Tensor& t : net.act_scale_params()) params.push_back(t);
    for (Tensor& p : params) p.set_requires_grad(true);
    AdamState opt;
    opt.init(params);
    const std::vector<float> before = calib_detail::snapshot_params(params);

    const auto windows = calib_detail::make_windows(calib);
    const int total = cfg.iterations * static_cast<int>(net.blocks().size());
    Rng rng(mix_seed(cfg.seed, fnv1a64("naive-full")));
    ForwardCtx qctx{RunMode::Quantized, nullptr};

    for (int it = 0; it < total; ++it) {
        const double b = calib_detail::anneal_b(cfg.b_start, cfg.b_end, it, total);

        // Warm the recurrent state up to each window start outside the tape;
        // gradients flow only through the two taped frames.
        std::vector<calib_detail::Window> ws(static_cast<std::size_t>(cfg.batch));
        std::vector<RecurrentState> sts(static_cast<std::size_t>(cfg.batch));
        for (int k = 0; k < cfg.batch; ++k) {
            const auto& w = windows[static_cast<std::size_t>(
                rng.uniform_int(static_cast<int>(windows.size())))];
            ws[static_cast<std::size_t>(k)] = w;
            RecurrentState st;
            for (int t = 0; t < w.t0; ++t)
                (void)net.forward_frame(clip_frame(calib[static_cast<std::size_t>(w.clip)], t), st, qctx);
            sts[static_cast<std::size_t>(k)] = st;
        }

        Tape tape;
        Tensor loss;
        for (int k = 0; k < cfg.batch; ++k) {
            const auto& w = ws[static_cast<std::size_t>(k)];
            const ClipData& c = calib[static_cast<std::size_t>(w.clip)];
            RecurrentState& st = sts[static_cast<std::size_t>(k)];
            Tensor a0 = net.forward_frame(clip_frame(c, w.t0), st, qctx);
            Tensor a1 = net.forward_frame(clip_frame(c, w.t0 + 1), st, qctx);
            Tensor term = mul_scalar(
                add(mse_loss(a0, fp_alpha[static_cast<std::size_t>(w.clip)][static_cast<std::size_t>(w.t0)]),
                    mse_loss(a1, fp_alpha[static_cast<std::size_t>(w.clip)][static_cast<std::size_t>(w.t0 + 1)])),
                0.5f);
            loss = k == 0 ? term : add(loss, term);
        }
        loss = mul_scalar(loss, 1.0f / static_cast<float>(cfg.batch));
        const double lv = loss.item();  // logged loss is the matte regression term
        for (auto& l : net.layers)
            loss = add(loss, mul_scalar(soft_round_reg(l.round_mask, b),
                                        static_cast<float>(cfg.reg_weight)));
        if (!std::isfinite(loss.item())) {
            calib_detail::restore_params(params, before);
            run.diverged = true;
            break;
        }
        tape.backward(loss);
        ++run.backward_passes;
        adam_step(params, opt, static_cast<float>(cfg.lr));
        for (Tensor& p : params) p.zero_grad();
        run.log.push_back({"naive-full", "all", it, lv, timer.ms()});
        if ((it + 1) % cfg.iterations == 0)
            run.log.push_back({"alpha", "all", (it + 1) / cfg.iterations,
                               calib_detail::deployable_alpha_mad(net, calib), timer.ms()});
    }

    for (Tensor& p : params) p.set_requires_grad(false);
    net.freeze_from_masks();
    net.sync_act_scales();
    run.wall_ms = timer.ms();
    return run;
}

// ---- stage 2: global affine calibration ----

namespace calib_detail {

struct GACTargets {
    // [clip][frame] regression target for the predicted matte
    std::vector<std::vector<Tensor>> alpha;
};

inline GACTargets gac_targets(RefNet& net, const std::vector<ClipData>& calib, bool fp_target) {
    GACTargets tg;
    tg.alpha.resize(calib.size());
    if (!fp_target) {
        for (std::size_t ci = 0; ci < calib.size(); ++ci)
            for (int t = 0; t < calib[ci].frames; ++t) tg.alpha[ci].push_back(clip_alpha(calib[ci], t));
        return tg;
    }
    // Experimental: regress the float model instead of ground truth. The
    // frozen weights are temporarily bypassed for the target pass.
    for (auto& l : net.layers) net.set_weight_mode(l, WeightMode::Float);
    ForwardCtx fctx;
    for (std::size_t ci = 0; ci < calib.size(); ++ci) {
        RecurrentState st;
        for (int t = 0; t < calib[ci].frames; ++t)
            tg.alpha[ci].push_back(net.forward_frame(clip_frame(calib[ci], t), st, fctx));
    }
    for (auto& l : net.layers) net.set_weight_mode(l, WeightMode::Frozen);
    return tg;
}

}  // namespace calib_detail

// Learns per-layer scalar gamma/beta on the frozen integer weights, jointly
// with the activation scales, on shuffled two-frame windows. Epoch 0 is an
// evaluation pass at the identity correction, so its logged loss is exactly
// the stage-1 model's loss. The best epoch by mean loss is kept, scales are
// synced back, recorded deviations snapshot gamma/beta, and the corrections
// are absorbed into the weight quantizers.
inline CalibrationRun run_gac(RefNet& net, const std::vector<ClipData>& calib, const GACConfig& cfg,
                              const FlowCache* flows, int w_bits, int a_bits) {
    require(cfg.epochs >= 1, "GAC needs at least one epoch");
    require(cfg.lambda_ofa >= 0.0, "lambda_ofa must be non-negative");
    require(!cfg.ofa || flows != nullptr, "OFA needs a flow cache");
    for (const auto& l : net.layers)
        require(l.wmode == WeightMode::Frozen, "GAC needs a stage-1 quantized model (layer ",
                l.name, " not frozen)");

    calib_detail::Timer timer;
    CalibrationRun run;
    run.method = cfg.ofa ? "biq+gac+ofa" : "biq+gac";
    run.w_bits = w_bits;
    run.a_bits = a_bits;

    const calib_detail::GACTargets targets = calib_detail::gac_targets(net, calib, cfg.fp_target);

    net.enable_affine_correction();
    std::vector<Tensor> params = net.affine_correction_params();
    for (Tensor& t : net.act_scale_params()) params.push_back(t);
    for (Tensor& p : params) p.set_requires_grad(true);
    AdamState opt;
    opt.init(params);

    auto windows = calib_detail::make_windows(calib);
    Rng rng(mix_seed(cfg.seed, fnv1a64("gac")));
    ForwardCtx qctx{RunMode::Quantized, nullptr};

    // Window loss: mean matte MSE over the pair, plus the optional flow-warp
    // consistency term on the second frame.
    auto window_terms = [&](const calib_detail::Window& w, Tensor& loss_out) -> bool {
        const ClipData& c = calib[static_cast<std::size_t>(w.clip)];
        RecurrentState st;
        for (int t = 0; t < w.t0; ++t) (void)net.forward_frame(clip_frame(c, t), st, qctx);
        Tensor a0 = net.forward_frame(clip_frame(c, w.t0), st, qctx);
        Tensor a1 = net.forward_frame(clip_frame(c, w.t0 + 1), st, qctx);
        const auto& tg = targets.alpha[static_cast<std::size_t>(w.clip)];
        Tensor loss = mul_scalar(add(mse_loss(a0, tg[static_cast<std::size_t>(w.t0)]),
                                     mse_loss(a1, tg[static_cast<std::size_t>(w.t0 + 1)])),
                                 0.5f);
        if (cfg.ofa) {
            Tensor fl = flows->flow(c.clip_id, w.t0 + 1);
            Tensor warped = warp_bilinear(a0, fl);
            loss = add(loss, mul_scalar(ofa_loss(a1, warped), static_cast<float>(cfg.lambda_ofa)));
        }
        loss_out = loss;
        return std::isfinite(loss_out.item());
    };

    auto epoch_mean_loss = [&]() -> double {
        double sum = 0.0;
        for (const auto& w : windows) {
            Tensor loss;
            check(window_terms(w, loss), "GAC evaluation loss is not finite");
            sum += loss.item();
        }
        return sum / static_cast<double>(windows.size());
    };

    // Epoch 0: identity correction, evaluation only.
    const double identity_loss = epoch_mean_loss();
    double best_loss = identity_loss;
    run.log.push_back({"gac", "0", 0, identity_loss, timer.ms()});
    const std::vector<float> identity = calib_detail::snapshot_params(params);
    std::vector<float> best = identity;

    std::vector<int> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int e = 1; e <= cfg.epochs && !run.diverged; ++e) {
        calib_detail::shuffle_indices(order, rng);
        double esum = 0.0;
        for (int wi : order) {
            const auto& w = windows[static_cast<std::size_t>(wi)];
            const ClipData& c = calib[static_cast<std::size_t>(w.clip)];
            RecurrentState st;
            for (int t = 0; t < w.t0; ++t) (void)net.forward_frame(clip_frame(c, t), st, qctx);

            Tape tape;
            Tensor a0 = net.forward_frame(clip_frame(c, w.t0), st, qctx);
            Tensor a1 = net.forward_frame(clip_frame(c, w.t0 + 1), st, qctx);
            const auto& tg = targets.alpha[static_cast<std::size_t>(w.clip)];
            Tensor loss = mul_scalar(add(mse_loss(a0, tg[static_cast<std::size_t>(w.t0)]),
                                         mse_loss(a1, tg[static_cast<std::size_t>(w.t0 + 1)])),
                                     0.5f);
            if (cfg.ofa) {
                Tensor fl = flows->flow(c.clip_id, w.t0 + 1);
                loss = add(loss, mul_scalar(ofa_loss(a1, warp_bilinear(a0, fl)),
                                            static_cast<float>(cfg.lambda_ofa)));
            }
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                run.diverged = true;
                break;
            }
            tape.backward(loss);
            ++run.backward_passes;
            adam_step(params, opt, static_cast<float>(cfg.lr));
            for (Tensor& p : params) p.zero_grad();
            esum += lv;
        }
        if (run.diverged) break;
        const double el = esum / static_cast<double>(windows.size());
        run.log.push_back({"gac", std::to_string(e), e, el, timer.ms()});
        if (el < best_loss) {
            best_loss = el;
            best = calib_detail::snapshot_params(params);
        }
    }

    calib_detail::restore_params(params, best);
    // Epoch means are measured while parameters drift, so re-measure the
    // restored parameters and fall back to the identity correction if they
    // do not actually beat it. The returned model's calibration loss is
    // therefore never worse than the stage-1 model's.
    double final_loss = epoch_mean_loss();
    if (final_loss > identity_loss) {
        calib_detail::restore_params(params, identity);
        final_loss = identity_loss;
    }
    run.log.push_back({"gac", "final", cfg.epochs + 1, final_loss, timer.ms()});
    for (Tensor& p : params) p.set_requires_grad(false);
    net.sync_act_scales();
    for (const auto& l : net.layers)
        run.deviations.push_back({l.name, static_cast<double>(l.corr_gamma.data()[0]),
                                  static_cast<double>(l.corr_beta.data()[0])});
    net.absorb_affine_correction();
    run.wall_ms = timer.ms();
    return run;
}

// ---- correction deviation reporting ----

struct DeviationTable {
    std::vector<ParamDeviation> rows;
    double mean_abs_gamma_dev = 0.0;  // mean |gamma - 1|
    double mean_abs_beta = 0.0;       // mean |beta|
};

// Reads the learned corrections off the model (they keep their values after
// absorption). All-zero deviations mean GAC never ran or never stepped.
inline DeviationTable record_param_deviations(const RefNet& net) {
    DeviationTable t;
    for (const auto& l : net.layers) {
        if (!l.corr_enabled) continue;
        const double g = static_cast<double>(l.corr_gamma.data()[0]);
        const double b = static_cast<double>(l.corr_beta.data()[0]);
        t.rows.push_back({l.name, g, b});
        t.mean_abs_gamma_dev += std::abs(g - 1.0);
        t.mean_abs_beta += std::abs(b);
    }
    if (!t.rows.empty()) {
        t.mean_abs_gamma_dev /= static_cast<double>(t.rows.size());
        t.mean_abs_beta /= static_cast<double>(t.rows.size());
    }
    return t;
}

inline std::string deviations_csv(const DeviationTable& t) {
    std::string out = "layer,gamma,beta\n";
    char buf[96];
    for (const ParamDeviation& r : t.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.8f,%.8f\n", r.layer.c_str(), r.gamma, r.beta);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "mean_abs,%.8f,%.8f\n", t.mean_abs_gamma_dev, t.mean_abs_beta);
    out += buf;
    return out;
}

}  // namespace ptq4vm
