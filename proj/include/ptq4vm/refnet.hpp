// Compact recurrent matting network: MobileNet-style encoder, LR-ASPP neck,
// ConvGRU bottleneck, skip-connected decoder, sigmoid alpha head.
//
// The same graph serves four roles selected by ForwardCtx:
//   Float      full-precision reference (BN as channel affine until folded)
//   Observe    float activations, range observers at every quantization point
//   Quantized  fake-quantized weights and activations
// and per-layer WeightMode picks how the effective weight is produced.
#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ptq4vm/common.hpp"
#include "ptq4vm/nn.hpp"
#include "ptq4vm/quant.hpp"
#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

struct RefNetConfig {
    int height = 64;
    int width = 64;
    int base_channels = 16;
    int encoder_stages = 3;
    int gru_hidden = 32;
    std::uint64_t seed = 1;
};

enum class RunMode { Float, Observe, Quantized };

enum class WeightMode { Float, FakeRound, SoftRound, Frozen };

enum class BlockKind { InvertedResidual, Lraspp, Bottleneck, Upsampling, Output, Projection };

inline const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::InvertedResidual: return "inverted_residual";
        case BlockKind::Lraspp: return "lraspp";
        case BlockKind::Bottleneck: return "bottleneck";
        case BlockKind::Upsampling: return "upsampling";
        case BlockKind::Output: return "output";
        case BlockKind::Projection: return "projection";
    }
    return "?";
}

// Collects the value range and a strided sample of every tensor routed
// through a quantization point while the net runs in Observe mode.
struct ActObserver {
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    std::int64_t count = 0;
    std::vector<float> samples;

    static constexpr int kSamplesPerCall = 256;

    void observe(std::span<const float> v) {
        if (v.empty()) return;
        for (float x : v) {
            mn = std::min(mn, static_cast<double>(x));
            mx = std::max(mx, static_cast<double>(x));
        }
        std::size_t stride = std::max<std::size_t>(1, v.size() / kSamplesPerCall);
        for (std::size_t i = 0; i < v.size(); i += stride) samples.push_back(v[i]);
        count += static_cast<std::int64_t>(v.size());
    }
};

using ObserverMap = std::map<std::string, ActObserver>;

struct ForwardCtx {
    RunMode mode = RunMode::Float;
    ObserverMap* obs = nullptr;  // required in Observe mode
};

struct ConvLayer {
    std::string name;
    Tensor w;  // {co,ci,kh,kw}, or {c,1,kh,kw} depthwise
    Tensor b;  // {co}
    int stride = 1;
    int pad = 0;
    bool depthwise = false;

    // BN as inference-time channel affine; gamma/beta train, stats are buffers.
    bool has_bn = false;
    bool folded = false;
    Tensor bn_gamma, bn_beta;
    std::vector<float> bn_mean, bn_var;
    float bn_eps = 1e-5f;

    // Weight quantization state.
    WeightMode wmode = WeightMode::Float;
    std::vector<QuantParams> wq;  // per output channel
    Tensor round_mask;            // SoftRound
    QuantizedWeight frozen;       // Frozen
    Tensor dequant_cache;

    // Per-layer affine correction on the frozen dequantized weight.
    Tensor corr_gamma, corr_beta;  // {1}
    bool corr_enabled = false;
    bool corr_absorbed = false;
};

// Learnable activation quantizer. `zero`, qmin, qmax are fixed at range
// calibration; `scale` is a {1} tensor so calibration can train it. The
// double mirror in `qp` tracks the tensor for serialization and reporting.
struct QPoint {
    std::string name;
    QuantParams qp;
    Tensor scale;
    bool calibrated = false;
};

struct BlockDef {
    BlockKind kind;
    std::string name;
    std::vector<int> layer_ids;
    std::vector<std::string> qpoint_names;
    int num_inputs = 1;
};

struct RecurrentState {
    Tensor h;  // undefined until the first frame
};

// Every block-boundary tensor of one frame pass. BIQ uses these to cache
// block inputs and reconstruction targets.
struct FrameTrace {
    Tensor frame_q;  // post input-quantizer view of the frame
    Tensor s0, s1, s2;
    Tensor aspp;
    Tensor h;
    Tensor u1, u2, u3;
    Tensor outb;
    Tensor alpha;
};

class RefNet {
public:
    RefNetConfig cfg;
    std::vector<ConvLayer> layers;
    std::vector<QPoint> qpoints;

    explicit RefNet(const RefNetConfig& c) : cfg(c) {
        require(cfg.encoder_stages == 3, "only the 3-stage encoder layout is implemented, got ",
                cfg.encoder_stages);
        require(cfg.base_channels >= 8 && cfg.base_channels % 2 == 0,
                "base_channels must be even and >= 8, got ", cfg.base_channels);
        require(cfg.gru_hidden >= 8, "gru_hidden must be >= 8, got ", cfg.gru_hidden);
        require(cfg.height % 8 == 0 && cfg.width % 8 == 0 && cfg.height >= 16 && cfg.width >= 16,
                "frame size must be a multiple of 8 and >= 16, got ", cfg.height, "x", cfg.width);

        const int c0 = cfg.base_channels;          // 16
        const int c1 = cfg.base_channels * 3 / 2;  // 24
        const int c2 = cfg.base_channels * 2;      // 32
        const int hid = cfg.gru_hidden;

        Rng rng(mix_seed(cfg.seed, fnv1a64("refnet-init")));

        // Encoder: three stride-2 inverted-residual stages.
        const int stage_in[3] = {3, c0, c1};
        const int stage_out[3] = {c0, c1, c2};
        for (int s = 0; s < 3; ++s) {
            const int ex = 2 * stage_out[s];
            add_conv(rng, cat("e", s, "_expand"), stage_in[s], ex, 1, 1, 0, false, true);
            add_conv(rng, cat("e", s, "_dw"), ex, ex, 3, 2, 1, true, true);
            add_conv(rng, cat("e", s, "_project"), ex, stage_out[s], 1, 1, 0, false, true);
            blocks_.push_back({BlockKind::InvertedResidual, cat("enc", s),
                               {lid(cat("e", s, "_expand")), lid(cat("e", s, "_dw")),
                                lid(cat("e", s, "_project"))},
                               {cat("qp_e", s), cat("qp_d", s), cat("qp_s", s)},
                               1});
            if (s == 0) blocks_.back().qpoint_names.insert(blocks_.back().qpoint_names.begin(), "qp_in");
            add_qpoint(cat("qp_e", s));
            add_qpoint(cat("qp_d", s));
            add_qpoint(cat("qp_s", s));
        }
        add_qpoint("qp_in");

        // LR-ASPP neck: 1x1 branch gated by a pooled sigmoid attention.
        add_conv(rng, "aspp_conv", c2, c2, 1, 1, 0, false, true);
        add_conv(rng, "aspp_gate", c2, c2, 1, 1, 0, false, false);
        blocks_.push_back({BlockKind::Lraspp, "lraspp",
                           {lid("aspp_conv"), lid("aspp_gate")},
                           {"qp_pool", "qp_aspp"},
                           1});
        add_qpoint("qp_pool");
        add_qpoint("qp_aspp");

        // ConvGRU bottleneck at 1/8 resolution. zr conv emits both gates.
        add_conv(rng, "gru_zr", c2 + hid, 2 * hid, 3, 1, 1, false, false);
        add_conv(rng, "gru_cand", c2 + hid, hid, 3, 1, 1, false, false);
        blocks_.push_back({BlockKind::Bottleneck, "gru",
                           {lid("gru_zr"), lid("gru_cand")},
                           {"qp_rh", "qp_h"},
                           2});
        add_qpoint("qp_rh");
        add_qpoint("qp_h");

        // Decoder: three x2 upsampling blocks with encoder/frame skips.
        const int dec_in[3] = {hid + c1, c1 + c0, c0 + 3};
        const int dec_out[3] = {c1, c0, c0};
        for (int d = 0; d < 3; ++d) {
            add_conv(rng, cat("dec", d + 1, "_conv"), dec_in[d], dec_out[d], 3, 1, 1, false, true);
            blocks_.push_back({BlockKind::Upsampling, cat("up", d + 1),
                               {lid(cat("dec", d + 1, "_conv"))},
                               {cat("qp_us", d + 1), cat("qp_u", d + 1)},
                               2});
            add_qpoint(cat("qp_us", d + 1));
            add_qpoint(cat("qp_u", d + 1));
        }

        add_conv(rng, "out_conv", c0, c0, 3, 1, 1, false, true);
        blocks_.push_back({BlockKind::Output, "outblk", {lid("out_conv")}, {"qp_out"}, 1});
        add_qpoint("qp_out");

        add_conv(rng, "proj_conv", c0, 1, 1, 1, 0, false, false);
        blocks_.push_back({BlockKind::Projection, "proj", {lid("proj_conv")}, {}, 1});
    }

    // ---- lookup ----

    int layer_id(const std::string& name) const {
        auto it = layer_idx_.find(name);
        require(it != layer_idx_.end(), "no layer named ", name);
        return it->second;
    }
    ConvLayer& layer(const std::string& name) { return layers[layer_id(name)]; }

    int qpoint_id(const std::string& name) const {
        auto it = qp_idx_.find(name);
        require(it != qp_idx_.end(), "no qpoint named ", name);
        return it->second;
    }
    QPoint& qpoint(const std::string& name) { return qpoints[qpoint_id(name)]; }

    const std::vector<BlockDef>& blocks() const { return blocks_; }

    int block_id(const std::string& name) const {
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            if (blocks_[i].name == name) return static_cast<int>(i);
        require(false, "no block named ", name);
        return -1;
    }

    // ---- parameters ----

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& l : layers) {
            n += shape_numel(l.w.shape()) + shape_numel(l.b.shape());
            if (l.has_bn && !l.folded)
                n += shape_numel(l.bn_gamma.shape()) + shape_numel(l.bn_beta.shape());
        }
        return n;
    }

    // Pretraining set: conv weights, biases, live BN affines.
    std::vector<Tensor> trainable_params() {
        std::vector<Tensor> ps;
        for (auto& l : layers) {
            ps.push_back(l.w);
            ps.push_back(l.b);
            if (l.has_bn && !l.folded) {
                ps.push_back(l.bn_gamma);
                ps.push_back(l.bn_beta);
            }
        }
        return ps;
    }

    void set_params_requires_grad(bool rg) {
        for (auto& t : trainable_params()) t.set_requires_grad(rg);
    }

    // ---- BN folding ----

    // Folds every live BN affine into its conv. The folded float model is the
    // full-precision reference all calibration targets are computed from.
    void fold_all_bn() {
        for (auto& l : layers) {
            if (!l.has_bn || l.folded) continue;
            const int co = l.w.shape()[0];
            BnParams bn;
            bn.gamma.assign(l.bn_gamma.data().begin(), l.bn_gamma.data().end());
            bn.beta.assign(l.bn_beta.data().begin(), l.bn_beta.data().end());
            bn.mean = l.bn_mean;
            bn.var = l.bn_var;
            bn.eps = l.bn_eps;
            FoldedConv f = fold_bn(l.w.data(), l.b.data(), bn, co);
            std::copy(f.w.begin(), f.w.end(), l.w.mutable_data().begin());
            std::copy(f.b.begin(), f.b.end(), l.b.mutable_data().begin());
            l.folded = true;
        }
    }

    bool all_bn_folded() const {
        for (const auto& l : layers)
            if (l.has_bn && !l.folded) return false;
        return true;
    }

    // ---- weight quantization setup ----

    void set_weight_mode(WeightMode m) {
        for (auto& l : layers) set_weight_mode(l, m);
    }

    void set_weight_mode(ConvLayer& l, WeightMode m) {
        if (m != WeightMode::Float)
            require(!l.wq.empty(), "layer ", l.name, " has no weight quantizers");
        if (m == WeightMode::SoftRound)
            require(l.round_mask.defined(), "layer ", l.name, " has no round mask");
        if (m == WeightMode::Frozen)
            require(l.frozen.q.size() == static_cast<std::size_t>(shape_numel(l.w.shape())),
                    "layer ", l.name, " has no frozen weights");
        l.wmode = m;
        l.dequant_cache = Tensor();
    }

    // Per-output-channel MSE-grid quantizers over the folded float weights.
    void init_weight_quantizers(int bits) {
        require(all_bn_folded(), "fold BN before initializing weight quantizers");
        for (auto& l : layers) {
            l.wq = init_qparams_mse_per_channel(l.w, bits);
            l.round_mask = Tensor();
            l.frozen = QuantizedWeight();
            l.dequant_cache = Tensor();
        }
    }

    void init_round_masks() {
        for (auto& l : layers) {
            require(!l.wq.empty(), "layer ", l.name, " has no weight quantizers");
            l.round_mask = init_round_mask(l.w, l.wq);
        }
    }

    void freeze_round_nearest() {
        for (auto& l : layers) {
            l.frozen = quantize_weight(l.w, l.wq);
            set_weight_mode(l, WeightMode::Frozen);
        }
    }

    void freeze_from_masks() {
        for (auto& l : layers) {
            require(l.round_mask.defined(), "layer ", l.name, " has no round mask");
            l.frozen = binarize_round_mask(l.w, l.round_mask, l.wq);
            set_weight_mode(l, WeightMode::Frozen);
        }
    }

    // ---- activation quantization setup ----

    void init_act_quantizers(int bits, const ObserverMap& obs) {
        for (auto& q : qpoints) {
            auto it = obs.find(q.name);
            require(it != obs.end() && it->second.count > 0, "no observations for qpoint ", q.name);
            q.qp = init_qparams_from_range(it->second.mn, it->second.mx, bits);
            q.scale = Tensor::from_data({1}, {static_cast<float>(q.qp.scale)});
            q.calibrated = true;
        }
    }

    std::vector<Tensor> act_scale_params() {
        std::vector<Tensor> ps;
        for (auto& q : qpoints) {
            require(q.calibrated, "qpoint ", q.name, " not calibrated");
            ps.push_back(q.scale);
        }
        return ps;
    }

    void set_act_scales_requires_grad(bool rg) {
        for (auto& q : qpoints)
            if (q.calibrated) q.scale.set_requires_grad(rg);
    }

    // Copies learned scale tensors back into the double mirrors.
    void sync_act_scales() {
        for (auto& q : qpoints) {
            if (!q.calibrated) continue;
            double s = std::max(static_cast<double>(q.scale.data()[0]), kScaleFloor);
            q.qp.scale = s;
        }
    }

    // ---- affine correction (per-layer scalar gamma/beta on frozen weights) ----

    void enable_affine_correction() {
        for (auto& l : layers) {
            require(l.wmode == WeightMode::Frozen, "affine correction needs frozen weights on ",
                    l.name);
            l.corr_gamma = Tensor::from_data({1}, {1.0f});
            l.corr_beta = Tensor::from_data({1}, {0.0f});
            l.corr_enabled = true;
            l.corr_absorbed = false;
        }
    }

    std::vector<Tensor> affine_correction_params() {
        std::vector<Tensor> ps;
        for (auto& l : layers) {
            if (!l.corr_enabled) continue;
            ps.push_back(l.corr_gamma);
            ps.push_back(l.corr_beta);
        }
        return ps;
    }

    void set_affine_correction_requires_grad(bool rg) {
        for (auto& l : layers) {
            if (!l.corr_enabled) continue;
            l.corr_gamma.set_requires_grad(rg);
            l.corr_beta.set_requires_grad(rg);
        }
    }

    struct AbsorbReport {
        int absorbed = 0;
        int explicit_kept = 0;
    };

    // Folds each correction into the integer-weight quantizers where gamma
    // permits; degenerate gammas keep the explicit affine at inference.
    AbsorbReport absorb_affine_correction() {
        AbsorbReport rep;
        for (auto& l : layers) {
            if (!l.corr_enabled || l.corr_absorbed) continue;
            AbsorbResult r = absorb_affine(l.frozen, static_cast<double>(l.corr_gamma.data()[0]),
                                           static_cast<double>(l.corr_beta.data()[0]));
            if (r.absorbed) {
                l.corr_absorbed = true;
                l.dequant_cache = Tensor();
                ++rep.absorbed;
            } else {
                ++rep.explicit_kept;
            }
        }
        return rep;
    }

    // ---- forward ----

    Tensor run_block(int bid, const std::vector<Tensor>& ins, ForwardCtx& ctx) {
        require(bid >= 0 && bid < static_cast<int>(blocks_.size()), "bad block id ", bid);
        const BlockDef& bd = blocks_[bid];
        require(static_cast<int>(ins.size()) == bd.num_inputs, "block ", bd.name, " takes ",
                bd.num_inputs, " inputs, got ", ins.size());
        switch (bd.kind) {
            case BlockKind::InvertedResidual: {
                int s = bd.name.back() - '0';
                Tensor x = fq(cat("qp_e", s), relu(conv_bn(cat("e", s, "_expand"), ins[0], ctx)), ctx);
                x = fq(cat("qp_d", s), relu(conv_bn(cat("e", s, "_dw"), x, ctx)), ctx);
                return fq(cat("qp_s", s), conv_bn(cat("e", s, "_project"), x, ctx), ctx);
            }
            case BlockKind::Lraspp: {
                Tensor a = relu(conv_bn("aspp_conv", ins[0], ctx));
                Tensor p = fq("qp_pool", spatial_mean(ins[0]), ctx);
                Tensor g = sigmoid(conv_bn("aspp_gate", p, ctx));
                return fq("qp_aspp", mul(a, g), ctx);
            }
            case BlockKind::Bottleneck: {
                const Tensor& x = ins[0];
                const Tensor& hp = ins[1];
                const int hid = cfg.gru_hidden;
                Tensor zr = conv_bn("gru_zr", concat_channels({x, hp}), ctx);
                Tensor z = sigmoid(slice_channels(zr, 0, hid));
                Tensor r = sigmoid(slice_channels(zr, hid, 2 * hid));
                Tensor rh = fq("qp_rh", mul(r, hp), ctx);
                Tensor hc = tanh_op(conv_bn("gru_cand", concat_channels({x, rh}), ctx));
                Tensor hn = add(hp, mul(z, sub(hc, hp)));
                return fq("qp_h", hn, ctx);
            }
            case BlockKind::Upsampling: {
                int d = bd.name.back() - '0';
                Tensor u = fq(cat("qp_us", d), bilinear_upsample(ins[0], 2), ctx);
                Tensor x = concat_channels({u, ins[1]});
                return fq(cat("qp_u", d), relu(conv_bn(cat("dec", d, "_conv"), x, ctx)), ctx);
            }
            case BlockKind::Output:
                return fq("qp_out", relu(conv_bn("out_conv", ins[0], ctx)), ctx);
            case BlockKind::Projection:
                return sigmoid(conv_bn("proj_conv", ins[0], ctx));
        }
        require(false, "unreachable block kind");
        return Tensor();
    }

    FrameTrace forward_frame_trace(const Tensor& frame, RecurrentState& st, ForwardCtx& ctx) {
        require(frame.shape().size() == 4 && frame.shape()[1] == 3 &&
                    frame.shape()[2] == cfg.height && frame.shape()[3] == cfg.width,
                "frame must be {N,3,", cfg.height, ",", cfg.width, "}, got ",
                shape_str(frame.shape()));
        FrameTrace t;
        t.frame_q = fq("qp_in", frame, ctx);
        t.s0 = run_block(block_id("enc0"), {t.frame_q}, ctx);
        t.s1 = run_block(block_id("enc1"), {t.s0}, ctx);
        t.s2 = run_block(block_id("enc2"), {t.s1}, ctx);
        t.aspp = run_block(block_id("lraspp"), {t.s2}, ctx);
        Tensor hp = st.h.defined() ? st.h : initial_state(frame.shape()[0], ctx);
        t.h = run_block(block_id("gru"), {t.aspp, hp}, ctx);
        st.h = t.h;
        t.u1 = run_block(block_id("up1"), {t.h, t.s1}, ctx);
        t.u2 = run_block(block_id("up2"), {t.u1, t.s0}, ctx);
        t.u3 = run_block(block_id("up3"), {t.u2, t.frame_q}, ctx);
        t.outb = run_block(block_id("outblk"), {t.u3}, ctx);
        t.alpha = run_block(block_id("proj"), {t.outb}, ctx);
        return t;
    }

    Tensor forward_frame(const Tensor& frame, RecurrentState& st, ForwardCtx& ctx) {
        return forward_frame_trace(frame, st, ctx).alpha;
    }

    // Zero hidden state, routed through the state quantizer like any h.
    Tensor initial_state(int n, ForwardCtx& ctx) {
        Tensor z = Tensor::zeros({n, cfg.gru_hidden, cfg.height / 8, cfg.width / 8});
        return fq("qp_h", z, ctx);
    }

    // Quantization point application, dispatched on run mode.
    Tensor fq(const std::string& qp_name, const Tensor& x, ForwardCtx& ctx) {
        QPoint& q = qpoints[qpoint_id(qp_name)];
        switch (ctx.mode) {
            case RunMode::Float:
                return x;
            case RunMode::Observe:
                require(ctx.obs != nullptr, "Observe mode needs an observer map");
                (*ctx.obs)[q.name].observe(x.data());
                return x;
            case RunMode::Quantized:
                require(q.calibrated, "qpoint ", q.name, " not calibrated");
                return fake_quant_act(x, q.scale, q.qp.zero, q.qp.qmin, q.qp.qmax);
        }
        return x;
    }

    // Effective weight for a layer under its WeightMode. Float path sees the
    // master tensor; quantized paths see a fake-quantized or frozen view.
    Tensor effective_weight(ConvLayer& l, ForwardCtx& ctx) {
        if (ctx.mode != RunMode::Quantized && ctx.mode != RunMode::Observe) return l.w;
        switch (l.wmode) {
            case WeightMode::Float:
                return l.w;
            case WeightMode::FakeRound:
                return fake_quant_weight(l.w, l.wq);
            case WeightMode::SoftRound:
                return soft_round_weight(l.w, l.round_mask, l.wq);
            case WeightMode::Frozen: {
                if (l.corr_enabled && !l.corr_absorbed)
                    return add(mul_scalar_t(dequant_frozen(l), l.corr_gamma), l.corr_beta);
                return dequant_frozen(l);
            }
        }
        return l.w;
    }

private:
    std::unordered_map<std::string, int> layer_idx_;
    std::unordered_map<std::string, int> qp_idx_;
    std::vector<BlockDef> blocks_;

    int lid(const std::string& name) const { return layer_id(name); }

    void add_conv(Rng& rng, const std::string& name, int ci, int co, int k, int stride, int pad,
                  bool depthwise, bool bn) {
        ConvLayer l;
        l.name = name;
        Rng lr = rng.fork(fnv1a64(name));
        const int fan_in = (depthwise ? 1 : ci) * k * k;
        const float sd = std::sqrt(2.0f / static_cast<float>(fan_in));
        Shape ws = depthwise ? Shape{co, 1, k, k} : Shape{co, ci, k, k};
        std::vector<float> w(shape_numel(ws));
        for (auto& v : w) v = sd * static_cast<float>(lr.normal());
        l.w = Tensor::from_data(ws, w);
        l.b = Tensor::zeros({co});
        l.stride = stride;
        l.pad = pad;
        l.depthwise = depthwise;
        if (bn) {
            l.has_bn = true;
            l.bn_gamma = Tensor::full({co}, 1.0f);
            l.bn_beta = Tensor::zeros({co});
            l.bn_mean.assign(co, 0.0f);
            l.bn_var.assign(co, 1.0f);
        }
        layer_idx_[name] = static_cast<int>(layers.size());
        layers.push_back(std::move(l));
    }

    void add_qpoint(const std::string& name) {
        if (qp_idx_.count(name)) return;
        QPoint q;
        q.name = name;
        qp_idx_[name] = static_cast<int>(qpoints.size());
        qpoints.push_back(std::move(q));
    }

    Tensor conv_bn(const std::string& lname, const Tensor& x, ForwardCtx& ctx) {
        ConvLayer& l = layers[layer_id(lname)];
        Tensor w = effective_weight(l, ctx);
        Tensor y = l.depthwise ? depthwise_conv2d(x, w, l.b, l.stride, l.pad)
                               : conv2d(x, w, l.b, l.stride, l.pad);
        if (l.has_bn && !l.folded) {
            const int co = l.w.shape()[0];
            std::vector<float> inv(co), mu(co);
            for (int c = 0; c < co; ++c) {
                inv[c] = 1.0f / std::sqrt(l.bn_var[c] + l.bn_eps);
                mu[c] = l.bn_mean[c];
            }
            Tensor inv_t = Tensor::from_data({co}, inv);
            Tensor t = mul(l.bn_gamma, inv_t);
            Tensor shift = sub(l.bn_beta, mul(t, Tensor::from_data({co}, mu)));
            y = add(mul(y, t), shift);
        }
        return y;
    }

    // Dequantized frozen weights, cached until quant state changes.
    Tensor dequant_frozen(ConvLayer& l) {
        if (!l.dequant_cache.defined()) l.dequant_cache = dequantize_weight(l.frozen);
        return l.dequant_cache;
    }

    // mul by a {1} tensor with gradient support (broadcast scalar rhs).
    static Tensor mul_scalar_t(const Tensor& x, const Tensor& s) { return mul(x, s); }
};

}  // namespace ptq4vm
