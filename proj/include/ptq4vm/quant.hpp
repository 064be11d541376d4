#pragma once

// Uniform affine quantization: parameter structs, range calibration
// (min-max and MSE grid search), straight-through fake-quant ops, learned
// soft rounding with its annealed regularizer, batch-norm folding, and
// absorption of per-layer affine correction into quantizer constants.
//
// All quantizer arithmetic runs in double. Zero-points are real-valued, not
// integers; ties round half away from zero.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

struct QuantParams {
    double scale = 1.0;
    double zero = 0.0;  // real-valued zero-point
    int bits = 8;
    int qmin = 0;
    int qmax = 255;

    static QuantParams for_bits(int bits) {
        require(bits >= 2 && bits <= 30, "bit-width out of range: ", bits);
        QuantParams p;
        p.bits = bits;
        p.qmin = 0;
        p.qmax = (1 << bits) - 1;
        return p;
    }

    void validate() const {
        require(std::isfinite(scale) && scale > 0.0,
                "quantizer scale must be positive and finite, got ", scale);
        require(std::isfinite(zero), "quantizer zero-point must be finite");
        require(bits >= 2 && bits <= 30, "bit-width out of range: ", bits);
        require(qmax - qmin == (1 << bits) - 1, "quantizer grid [", qmin,
                ",", qmax, "] does not span 2^", bits, " levels");
    }
};

constexpr double kScaleFloor = 1e-8;

// Half-away-from-zero rounding.
inline double round_half_away(double x) { return std::round(x); }

inline double quantize_value(double v, const QuantParams& p) {
    double q = round_half_away(v / p.scale + p.zero);
    return std::clamp(q, static_cast<double>(p.qmin),
                      static_cast<double>(p.qmax));
}

inline double dequantize_value(double q, const QuantParams& p) {
    return p.scale * (q - p.zero);
}

inline float fake_quant_value(float v, const QuantParams& p) {
    return static_cast<float>(dequantize_value(quantize_value(v, p), p));
}

inline QuantParams init_qparams_from_range(double mn, double mx, int bits) {
    require(std::isfinite(mn) && std::isfinite(mx) && mn <= mx,
            "invalid range [", mn, ",", mx, "]");
    QuantParams p = QuantParams::for_bits(bits);
    double span = mx - mn;
    p.scale = std::max(span / (p.qmax - p.qmin), kScaleFloor);
    p.zero = p.qmin - mn / p.scale;
    return p;
}

inline QuantParams init_qparams_minmax(std::span<const float> values,
                                       int bits) {
    require(!values.empty(), "cannot calibrate a quantizer on no values");
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (float v : values) {
        mn = std::min(mn, static_cast<double>(v));
        mx = std::max(mx, static_cast<double>(v));
    }
    return init_qparams_from_range(mn, mx, bits);
}

inline double quant_mse(std::span<const float> values, const QuantParams& p,
                        size_t stride = 1) {
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < values.size(); i += stride) {
        double d = dequantize_value(quantize_value(values[i], p), p) -
                   values[i];
        acc += d * d;
        ++n;
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

// Grid search over 100 range candidates, fractions 0.5..1.0 of the min-max
// span; keeps the candidate with the lowest reconstruction MSE. Large inputs
// are subsampled by a deterministic stride.
inline QuantParams init_qparams_mse(std::span<const float> values, int bits) {
    require(!values.empty(), "cannot calibrate a quantizer on no values");
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (float v : values) {
        mn = std::min(mn, static_cast<double>(v));
        mx = std::max(mx, static_cast<double>(v));
    }
    constexpr size_t kMseSampleCap = 65536;
    size_t stride = values.size() > kMseSampleCap
                        ? (values.size() + kMseSampleCap - 1) / kMseSampleCap
                        : 1;
    QuantParams best = init_qparams_from_range(mn, mx, bits);
    double best_mse = quant_mse(values, best, stride);
    constexpr int kCandidates = 100;
    for (int k = 0; k < kCandidates; ++k) {
        double f = 0.5 + 0.5 * k / (kCandidates - 1);
        if (f >= 1.0) continue;  // full span already evaluated
        QuantParams cand = init_qparams_from_range(f * mn, f * mx, bits);
        double mse = quant_mse(values, cand, stride);
        if (mse < best_mse) {
            best_mse = mse;
            best = cand;
        }
    }
    return best;
}

// Per-output-channel calibration of a conv weight ({O,I,kh,kw} or
// {C,1,kh,kw}); channel = dim 0.
inline std::vector<QuantParams> init_qparams_mse_per_channel(const Tensor& w,
                                                             int bits) {
    require(w.shape().size() == 4, "per-channel calibration expects a 4-D "
            "weight, got ", shape_str(w.shape()));
    int oc = w.dim(0);
    int64_t chs = w.numel() / oc;
    std::vector<QuantParams> out;
    out.reserve(static_cast<size_t>(oc));
    const float* base = w.data().data();
    for (int c = 0; c < oc; ++c)
        out.push_back(init_qparams_mse(
            std::span<const float>(base + c * chs, static_cast<size_t>(chs)),
            bits));
    return out;
}

// ---------------------------------------------------------------------------
// Fake quantization (straight-through estimator)
// ---------------------------------------------------------------------------

// Per-tensor fake quant with fixed parameters. STE: gradient passes where
// the pre-clip integer lands inside [qmin, qmax].
inline Tensor fake_quant_act(const Tensor& x, const QuantParams& p) {
    p.validate();
    const auto xv = x.data();
    std::vector<float> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i)
        out[i] = fake_quant_value(xv[i], p);
    return detail::make_op(x.shape(), std::move(out), {x}, [p](Node& node) {
        Node& x = *node.parents[0];
        if (!x.grad_path) return;
        x.ensure_grad();
        const float* g = node.grad.data();
        const float* xv = x.value.data();
        float* dst = x.grad.data();
        int64_t n = node.numel();
        for (int64_t i = 0; i < n; ++i) {
            double q = round_half_away(xv[i] / p.scale + p.zero);
            if (q >= p.qmin && q <= p.qmax) dst[i] += g[i];
        }
    });
}

// Per-tensor fake quant with a learnable scale tensor (single element) and a
// fixed zero-point/grid. d(out)/d(scale) = q_clipped - zero, which matches
// finite differences everywhere away from rounding boundaries.
inline Tensor fake_quant_act(const Tensor& x, const Tensor& scale,
                             double zero, int qmin, int qmax) {
    require(scale.numel() == 1, "activation scale must be a single value");
    double s = std::max(static_cast<double>(scale.data()[0]), kScaleFloor);
    const auto xv = x.data();
    std::vector<float> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) {
        double q = std::clamp(round_half_away(xv[i] / s + zero),
                              static_cast<double>(qmin),
                              static_cast<double>(qmax));
        out[i] = static_cast<float>(s * (q - zero));
    }
    return detail::make_op(
        x.shape(), std::move(out), {x, scale},
        [s, zero, qmin, qmax](Node& node) {
            Node& x = *node.parents[0];
            Node& sc = *node.parents[1];
            const float* g = node.grad.data();
            const float* xv = x.value.data();
            int64_t n = node.numel();
            if (x.grad_path) x.ensure_grad();
            if (sc.grad_path) sc.ensure_grad();
            double gs = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double q = round_half_away(xv[i] / s + zero);
                bool in_range = q >= qmin && q <= qmax;
                if (x.grad_path && in_range) x.grad[i] += g[i];
                if (sc.grad_path) {
                    double qc = std::clamp(q, static_cast<double>(qmin),
                                           static_cast<double>(qmax));
                    gs += g[i] * (qc - zero);
                }
            }
            if (sc.grad_path) sc.grad[0] += static_cast<float>(gs);
        });
}

// Per-output-channel fake quant of a conv weight, STE on the weight.
inline Tensor fake_quant_weight(const Tensor& w,
                                const std::vector<QuantParams>& ch) {
    require(w.shape().size() == 4, "fake_quant_weight expects a 4-D weight");
    int oc = w.dim(0);
    require(static_cast<size_t>(oc) == ch.size(), "expected ", oc,
            " channel quantizers, got ", ch.size());
    int64_t chs = w.numel() / oc;
    const auto wv = w.data();
    std::vector<float> out(wv.size());
    for (int c = 0; c < oc; ++c) {
        const QuantParams& p = ch[static_cast<size_t>(c)];
        for (int64_t i = c * chs; i < (c + 1) * chs; ++i)
            out[static_cast<size_t>(i)] = fake_quant_value(wv[i], p);
    }
    return detail::make_op(
        w.shape(), std::move(out), {w}, [ch, chs](Node& node) {
            Node& w = *node.parents[0];
            if (!w.grad_path) return;
            w.ensure_grad();
            const float* g = node.grad.data();
            const float* wv = w.value.data();
            for (size_t c = 0; c < ch.size(); ++c) {
                const QuantParams& p = ch[c];
                for (int64_t i = static_cast<int64_t>(c) * chs;
                     i < static_cast<int64_t>(c + 1) * chs; ++i) {
                    double q = round_half_away(wv[i] / p.scale + p.zero);
                    if (q >= p.qmin && q <= p.qmax) w.grad[i] += g[i];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Learned rounding
// ---------------------------------------------------------------------------

constexpr double kRectSigmoidZeta = 1.1;
constexpr double kRectSigmoidEta = -0.1;

// Rectified sigmoid h(V) in [0, 1].
inline double rect_sigmoid(double v) {
    double s = 1.0 / (1.0 + std::exp(-v));
    return std::clamp(s * (kRectSigmoidZeta - kRectSigmoidEta) +
                          kRectSigmoidEta,
                      0.0, 1.0);
}

inline double rect_sigmoid_grad(double v) {
    double s = 1.0 / (1.0 + std::exp(-v));
    double pre = s * (kRectSigmoidZeta - kRectSigmoidEta) + kRectSigmoidEta;
    if (pre <= 0.0 || pre >= 1.0) return 0.0;
    return s * (1.0 - s) * (kRectSigmoidZeta - kRectSigmoidEta);
}

// Mask init so the soft weight reproduces w exactly: h(V) equals the
// fractional part of w/s + z.
inline Tensor init_round_mask(const Tensor& w,
                              const std::vector<QuantParams>& ch) {
    int oc = w.dim(0);
    int64_t chs = w.numel() / oc;
    const auto wv = w.data();
    std::vector<float> v(wv.size());
    for (int c = 0; c < oc; ++c) {
        const QuantParams& p = ch[static_cast<size_t>(c)];
        for (int64_t i = c * chs; i < (c + 1) * chs; ++i) {
            double t = static_cast<double>(wv[i]) / p.scale + p.zero;
            double frac = t - std::floor(t);
            double sig = (frac - kRectSigmoidEta) /
                         (kRectSigmoidZeta - kRectSigmoidEta);
            sig = std::clamp(sig, 1e-6, 1.0 - 1e-6);
            v[static_cast<size_t>(i)] =
                static_cast<float>(std::log(sig / (1.0 - sig)));
        }
    }
    return Tensor::from_data(w.shape(), std::move(v), true);
}

// Soft-rounded weight: s * (clip(floor(w/s + z) + h(V), qmin, qmax) - z).
// w is treated as a constant; the gradient flows into V only.
inline Tensor soft_round_weight(const Tensor& w, const Tensor& v,
                                const std::vector<QuantParams>& ch) {
    require(w.shape() == v.shape(), "rounding mask shape ",
            shape_str(v.shape()), " does not match weight ",
            shape_str(w.shape()));
    int oc = w.dim(0);
    require(static_cast<size_t>(oc) == ch.size(), "expected ", oc,
            " channel quantizers, got ", ch.size());
    int64_t chs = w.numel() / oc;
    const auto wv = w.data();
    const auto vv = v.data();
    std::vector<float> out(wv.size());
    for (int c = 0; c < oc; ++c) {
        const QuantParams& p = ch[static_cast<size_t>(c)];
        for (int64_t i = c * chs; i < (c + 1) * chs; ++i) {
            double soft = std::floor(wv[i] / p.scale + p.zero) +
                          rect_sigmoid(vv[i]);
            soft = std::clamp(soft, static_cast<double>(p.qmin),
                              static_cast<double>(p.qmax));
            out[static_cast<size_t>(i)] =
                static_cast<float>(p.scale * (soft - p.zero));
        }
    }
    return detail::make_op(
        w.shape(), std::move(out), {w, v}, [ch, chs](Node& node) {
            Node& w = *node.parents[0];
            Node& v = *node.parents[1];
            if (!v.grad_path) return;
            v.ensure_grad();
            const float* g = node.grad.data();
            const float* wv = w.value.data();
            const float* vv = v.value.data();
            for (size_t c = 0; c < ch.size(); ++c) {
                const QuantParams& p = ch[c];
                for (int64_t i = static_cast<int64_t>(c) * chs;
                     i < static_cast<int64_t>(c + 1) * chs; ++i) {
                    double soft = std::floor(wv[i] / p.scale + p.zero) +
                                  rect_sigmoid(vv[i]);
                    if (soft < p.qmin || soft > p.qmax) continue;
                    v.grad[i] += static_cast<float>(
                        g[i] * p.scale * rect_sigmoid_grad(vv[i]));
                }
            }
        });
}

// Polarization term sum(1 - |2 h(V) - 1|^b); zero once every mask saturates.
inline Tensor soft_round_reg(const Tensor& v, double b) {
    const auto vv = v.data();
    double acc = 0.0;
    for (float x : vv)
        acc += 1.0 - std::pow(std::fabs(2.0 * rect_sigmoid(x) - 1.0), b);
    return detail::make_op(
        Shape{1}, {static_cast<float>(acc)}, {v}, [b](Node& node) {
            Node& v = *node.parents[0];
            if (!v.grad_path) return;
            v.ensure_grad();
            float g = node.grad[0];
            const float* vv = v.value.data();
            int64_t n = v.numel();
            for (int64_t i = 0; i < n; ++i) {
                double h = rect_sigmoid(vv[i]);
                double t = 2.0 * h - 1.0;
                double at = std::fabs(t);
                if (at <= 0.0 || at >= 1.0) continue;
                double d = -b * std::pow(at, b - 1.0) * (t >= 0 ? 1.0 : -1.0) *
                           2.0 * rect_sigmoid_grad(vv[i]);
                v.grad[i] += static_cast<float>(g * d);
            }
        });
}

// Fraction of mask entries still away from both rounding poles.
inline double round_mask_unsettled(const Tensor& v, double margin = 1e-3) {
    const auto vv = v.data();
    int64_t n = 0;
    for (float x : vv) {
        double h = rect_sigmoid(x);
        if (h > margin && h < 1.0 - margin) ++n;
    }
    return static_cast<double>(n) / static_cast<double>(v.numel());
}

// ---------------------------------------------------------------------------
// Frozen integer weights
// ---------------------------------------------------------------------------

struct QuantizedWeight {
    Shape shape;
    std::vector<float> q;  // grid values, integral
    std::vector<QuantParams> ch;

    bool empty() const { return q.empty(); }
    int64_t channel_size() const {
        return static_cast<int64_t>(q.size()) / static_cast<int64_t>(ch.size());
    }
};

// Round-to-nearest freeze.
inline QuantizedWeight quantize_weight(const Tensor& w,
                                       const std::vector<QuantParams>& ch) {
    int oc = w.dim(0);
    require(static_cast<size_t>(oc) == ch.size(), "expected ", oc,
            " channel quantizers, got ", ch.size());
    int64_t chs = w.numel() / oc;
    QuantizedWeight out;
    out.shape = w.shape();
    out.ch = ch;
    out.q.resize(static_cast<size_t>(w.numel()));
    const auto wv = w.data();
    for (int c = 0; c < oc; ++c)
        for (int64_t i = c * chs; i < (c + 1) * chs; ++i)
            out.q[static_cast<size_t>(i)] = static_cast<float>(
                quantize_value(wv[i], ch[static_cast<size_t>(c)]));
    return out;
}

// Freeze a learned rounding mask: h(V) >= 0.5 rounds up, else down.
inline QuantizedWeight binarize_round_mask(const Tensor& w, const Tensor& v,
                                           const std::vector<QuantParams>& ch) {
    require(w.shape() == v.shape(), "mask/weight shape mismatch");
    int oc = w.dim(0);
    int64_t chs = w.numel() / oc;
    QuantizedWeight out;
    out.shape = w.shape();
    out.ch = ch;
    out.q.resize(static_cast<size_t>(w.numel()));
    const auto wv = w.data();
    const auto vv = v.data();
    for (int c = 0; c < oc; ++c) {
        const QuantParams& p = ch[static_cast<size_t>(c)];
        for (int64_t i = c * chs; i < (c + 1) * chs; ++i) {
            double up = rect_sigmoid(vv[i]) >= 0.5 ? 1.0 : 0.0;
            double q = std::floor(wv[i] / p.scale + p.zero) + up;
            out.q[static_cast<size_t>(i)] = static_cast<float>(std::clamp(
                q, static_cast<double>(p.qmin), static_cast<double>(p.qmax)));
        }
    }
    return out;
}

// Real-valued reconstruction s * (q - z), per channel. Plain constant.
inline Tensor dequantize_weight(const QuantizedWeight& qw) {
    std::vector<float> out(qw.q.size());
    int64_t chs = qw.channel_size();
    for (size_t c = 0; c < qw.ch.size(); ++c) {
        const QuantParams& p = qw.ch[c];
        for (int64_t i = static_cast<int64_t>(c) * chs;
             i < static_cast<int64_t>(c + 1) * chs; ++i)
            out[static_cast<size_t>(i)] = static_cast<float>(
                dequantize_value(qw.q[static_cast<size_t>(i)], p));
    }
    return Tensor::from_data(qw.shape, std::move(out));
}

// ---------------------------------------------------------------------------
// Batch-norm folding
// ---------------------------------------------------------------------------

struct BnParams {
    std::vector<float> gamma, beta, mean, var;
    float eps = 1e-5f;
};

struct FoldedConv {
    std::vector<float> w, b;
};

// W_f = gamma * W / sqrt(var + eps); B_f = gamma * (B - mean) / sqrt(var +
// eps) + beta. Exact algebraic fold of inference-mode BN into the preceding
// conv.
inline FoldedConv fold_bn(std::span<const float> w, std::span<const float> b,
                          const BnParams& bn, int out_channels) {
    size_t oc = static_cast<size_t>(out_channels);
    require(bn.gamma.size() == oc && bn.beta.size() == oc &&
                bn.mean.size() == oc && bn.var.size() == oc,
            "BN parameter size mismatch: expected ", oc, " channels");
    require(b.size() == oc, "conv bias size ", b.size(), " vs ", oc,
            " channels");
    require(w.size() % oc == 0, "weight size not divisible by channels");
    size_t chs = w.size() / oc;
    FoldedConv out;
    out.w.resize(w.size());
    out.b.resize(oc);
    for (size_t c = 0; c < oc; ++c) {
        double inv = bn.gamma[c] / std::sqrt(static_cast<double>(bn.var[c]) +
                                             bn.eps);
        for (size_t i = c * chs; i < (c + 1) * chs; ++i)
            out.w[i] = static_cast<float>(w[i] * inv);
        out.b[c] = static_cast<float>((b[c] - bn.mean[c]) * inv + bn.beta[c]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Affine-correction absorption
// ---------------------------------------------------------------------------

struct AbsorbResult {
    bool absorbed = false;
};

// Folds a learned per-layer affine gamma * W_dq + beta into the dequant
// constants: s' = gamma * s, z' = z - beta / (gamma * s). Gamma at or below
// the floor (including negative) would break the positive-scale invariant,
// so the explicit affine is left in place (caller keeps applying it).
inline AbsorbResult absorb_affine(QuantizedWeight& qw, double gamma,
                                  double beta, double gamma_floor = 1e-6) {
    AbsorbResult r;
    if (!(gamma > gamma_floor)) return r;
    for (auto& p : qw.ch) {
        double s2 = gamma * p.scale;
        p.zero = p.zero - beta / s2;
        p.scale = s2;
    }
    r.absorbed = true;
    return r;
}

}  // namespace ptq4vm
