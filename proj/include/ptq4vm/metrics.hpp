// Matting quality metrics with every definition pinned so evaluation is
// bit-reproducible across runs and refactors.
//
//   MAD    mean |pred - gt| x 1e3
//   MSE    mean (pred - gt)^2 x 1e3
//   Grad   sum_p (|grad pred|_p - |grad gt|_p)^2 x 1e3 / N, where the
//          gradient is a separable first-order Gaussian derivative filter
//          (sigma = 1.4, radius = ceil(3 sigma) = 5, 11 taps, replicate
//          border, smoothing taps normalized to unit sum, derivative taps
//          normalized to unit response on a unit-slope ramp). Requires
//          min(H, W) > radius so the kernel half-extent fits the image.
//   Conn   connectivity error: for theta in {0.1, ..., 0.9} take the largest
//          4-connected component of {pred >= theta} AND {gt >= theta}; a
//          pixel first excluded at theta_k gets l = theta_{k-1} (l = 1 if
//          never excluded); d = alpha - l; phi = 1 - d * [d >= 0.15];
//          error = sum |phi_pred - phi_gt| x 1e3 / N.
//   DTSSD  mean over t >= 1 of sqrt(mean_px((dpred_t - dgt_t)^2)) x 1e2,
//          where dX_t = X_t - X_{t-1}.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "ptq4vm/common.hpp"
#include "ptq4vm/refnet.hpp"
#include "ptq4vm/synthvid.hpp"
#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

namespace metrics_detail {

inline void require_matte_pair(const Tensor& pred, const Tensor& gt) {
    require(pred.shape() == gt.shape(), "metric shape mismatch: ", shape_str(pred.shape()),
            " vs ", shape_str(gt.shape()));
    require(pred.numel() > 0, "metric on empty tensor");
}

inline double mean_abs_diff(const Tensor& pred, const Tensor& gt) {
    require_matte_pair(pred, gt);
    const auto p = pred.data();
    const auto g = gt.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(static_cast<double>(p[i]) - g[i]);
    return acc / static_cast<double>(p.size());
}

}  // namespace metrics_detail

inline double mad(const Tensor& pred, const Tensor& gt) {
    return metrics_detail::mean_abs_diff(pred, gt) * 1e3;
}

inline double mse_metric(const Tensor& pred, const Tensor& gt) {
    metrics_detail::require_matte_pair(pred, gt);
    const auto p = pred.data();
    const auto g = gt.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = static_cast<double>(p[i]) - g[i];
        acc += d * d;
    }
    return acc / static_cast<double>(p.size()) * 1e3;
}

namespace metrics_detail {

inline constexpr double kGradSigma = 1.4;
inline constexpr int kGradRadius = 5;  // ceil(3 * 1.4)

inline std::array<double, 2 * kGradRadius + 1> grad_smooth_taps() {
    std::array<double, 2 * kGradRadius + 1> t{};
    double sum = 0.0;
    for (int k = -kGradRadius; k <= kGradRadius; ++k) {
        t[k + kGradRadius] = std::exp(-0.5 * k * k / (kGradSigma * kGradSigma));
        sum += t[k + kGradRadius];
    }
    for (double& v : t) v /= sum;
    return t;
}

inline std::array<double, 2 * kGradRadius + 1> grad_deriv_taps() {
    std::array<double, 2 * kGradRadius + 1> t{};
    double ramp = 0.0;
    for (int k = -kGradRadius; k <= kGradRadius; ++k) {
        t[k + kGradRadius] = k * std::exp(-0.5 * k * k / (kGradSigma * kGradSigma));
        ramp += k * t[k + kGradRadius];
    }
    for (double& v : t) v /= ramp;
    return t;
}

// Horizontal (axis 0) or vertical (axis 1) correlation with replicate border.
inline std::vector<double> correlate_axis(const std::vector<double>& im, int h, int w,
                                          const std::array<double, 2 * kGradRadius + 1>& taps,
                                          int axis) {
    std::vector<double> out(im.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -kGradRadius; k <= kGradRadius; ++k) {
                int sx = x, sy = y;
                if (axis == 0) sx = std::clamp(x + k, 0, w - 1);
                else sy = std::clamp(y + k, 0, h - 1);
                acc += taps[k + kGradRadius] * im[static_cast<std::size_t>(sy) * w + sx];
            }
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    return out;
}

inline std::vector<double> gradient_magnitude(const Tensor& m, int h, int w) {
    const auto taps_g = grad_smooth_taps();
    const auto taps_d = grad_deriv_taps();
    std::vector<double> im(m.data().begin(), m.data().end());
    const std::vector<double> gx = correlate_axis(correlate_axis(im, h, w, taps_d, 0), h, w,
                                                  taps_g, 1);
    const std::vector<double> gy = correlate_axis(correlate_axis(im, h, w, taps_g, 0), h, w,
                                                  taps_d, 1);
    std::vector<double> mag(im.size());
    for (std::size_t i = 0; i < im.size(); ++i) mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
    return mag;
}

}  // namespace metrics_detail

inline double grad_error(const Tensor& pred, const Tensor& gt) {
    metrics_detail::require_matte_pair(pred, gt);
    const Shape& s = pred.shape();
    require(s.size() == 4 && s[0] == 1 && s[1] == 1, "grad_error expects a {1,1,H,W} matte, got ",
            shape_str(s));
    const int h = s[2], w = s[3];
    require(std::min(h, w) > metrics_detail::kGradRadius,
            "image smaller than the gradient kernel half-extent: ", h, "x", w);
    const std::vector<double> mp = metrics_detail::gradient_magnitude(pred, h, w);
    const std::vector<double> mg = metrics_detail::gradient_magnitude(gt, h, w);
    double acc = 0.0;
    for (std::size_t i = 0; i < mp.size(); ++i) {
        const double d = mp[i] - mg[i];
        acc += d * d;
    }
    return acc * 1e3 / static_cast<double>(mp.size());
}

namespace metrics_detail {

// Largest 4-connected component of mask, deterministic under ties (the
// component containing the earliest pixel in scan order wins).
inline std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, int h,
                                                   int w) {
    std::vector<int> label(mask.size(), -1);
    std::vector<int> stack;
    int best_label = -1;
    std::size_t best_size = 0;
    int next = 0;
    for (std::size_t seed = 0; seed < mask.size(); ++seed) {
        if (!mask[seed] || label[seed] >= 0) continue;
        const int cur = next++;
        std::size_t size = 0;
        stack.assign(1, static_cast<int>(seed));
        label[seed] = cur;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++size;
            const int y = p / w, x = p % w;
            const int nb[4] = {y > 0 ? p - w : -1, y + 1 < h ? p + w : -1, x > 0 ? p - 1 : -1,
                               x + 1 < w ? p + 1 : -1};
            for (int q : nb) {
                if (q < 0 || !mask[q] || label[q] >= 0) continue;
                label[q] = cur;
                stack.push_back(q);
            }
        }
        if (size > best_size) {
            best_size = size;
            best_label = cur;
        }
    }
    std::vector<std::uint8_t> out(mask.size(), 0);
    if (best_label >= 0)
        for (std::size_t i = 0; i < mask.size(); ++i) out[i] = label[i] == best_label;
    return out;
}

}  // namespace metrics_detail

inline double conn_error(const Tensor& pred, const Tensor& gt) {
    metrics_detail::require_matte_pair(pred, gt);
    const Shape& s = pred.shape();
    require(s.size() == 4 && s[0] == 1 && s[1] == 1, "conn_error expects a {1,1,H,W} matte, got ",
            shape_str(s));
    const int h = s[2], w = s[3];
    const auto p = pred.data();
    const auto g = gt.data();
    const std::size_t n = p.size();
    std::vector<double> l_map(n, -1.0);
    std::vector<std::uint8_t> mask(n);
    for (int k = 1; k <= 9; ++k) {
        const double theta = k / 10.0;
        for (std::size_t i = 0; i < n; ++i) mask[i] = p[i] >= theta && g[i] >= theta;
        const std::vector<std::uint8_t> omega = metrics_detail::largest_component(mask, h, w);
        const double prev = (k - 1) / 10.0;
        for (std::size_t i = 0; i < n; ++i)
            if (l_map[i] < 0.0 && !omega[i]) l_map[i] = prev;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double l = l_map[i] < 0.0 ? 1.0 : l_map[i];
        const double dp = p[i] - l;
        const double dg = g[i] - l;
        const double phi_p = 1.0 - (dp >= 0.15 ? dp : 0.0);
        const double phi_g = 1.0 - (dg >= 0.15 ? dg : 0.0);
        acc += std::abs(phi_p - phi_g);
    }
    return acc * 1e3 / static_cast<double>(n);
}

inline double dtssd(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
    require(pred.size() == gt.size(), "dtssd sequence length mismatch: ", pred.size(), " vs ",
            gt.size());
    require(pred.size() >= 2, "dtssd needs at least 2 frames, got ", pred.size());
    double acc = 0.0;
    for (std::size_t t = 1; t < pred.size(); ++t) {
        metrics_detail::require_matte_pair(pred[t], gt[t]);
        metrics_detail::require_matte_pair(pred[t], pred[t - 1]);
        const auto pc = pred[t].data(), pp = pred[t - 1].data();
        const auto gc = gt[t].data(), gp = gt[t - 1].data();
        double sq = 0.0;
        for (std::size_t i = 0; i < pc.size(); ++i) {
            const double d = (static_cast<double>(pc[i]) - pp[i]) - (static_cast<double>(gc[i]) - gp[i]);
            sq += d * d;
        }
        acc += std::sqrt(sq / static_cast<double>(pc.size()));
    }
    return acc / static_cast<double>(pred.size() - 1) * 1e2;
}

struct ClipMetrics {
    std::uint32_t clip_id = 0;
    double mad = 0.0;
    double mse = 0.0;
    double grad = 0.0;
    double conn = 0.0;
    double dtssd = 0.0;
    bool has_dtssd = false;  // single-frame clips have no temporal term
};

struct FrameError {
    std::uint32_t clip_id = 0;
    int frame = 0;
    double alpha_err = 0.0;  // raw mean |pred - gt|, unscaled
};

struct MetricsReport {
    std::string method;
    int w_bits = 0;
    int a_bits = 0;
    std::vector<ClipMetrics> clips;
    ClipMetrics aggregate;  // mean of per-clip values
    std::vector<FrameError> frame_errors;
    int total_frames = 0;
    static constexpr const char* kScaleNote = "MAD/MSE/Grad/Conn x1e3, DTSSD x1e2";
};

// Runs the model over every clip (recurrent state threaded per clip) and
// scores predictions against ground truth. Per-clip MAD/MSE/Grad/Conn are
// means of the per-frame metric; DTSSD covers the whole frame sequence.
inline MetricsReport evaluate(RefNet& net, const std::vector<ClipData>& clips, RunMode mode,
                              const std::string& method, int w_bits, int a_bits) {
    require(!clips.empty(), "evaluate needs at least one clip");
    MetricsReport rep;
    rep.method = method;
    rep.w_bits = w_bits;
    rep.a_bits = a_bits;
    for (const ClipData& c : clips) {
        require(c.height == net.cfg.height && c.width == net.cfg.width,
                "clip resolution ", c.width, "x", c.height, " does not match the model");
        ForwardCtx ctx{mode, nullptr};
        RecurrentState st;
        std::vector<Tensor> preds, gts;
        preds.reserve(static_cast<std::size_t>(c.frames));
        gts.reserve(static_cast<std::size_t>(c.frames));
        for (int t = 0; t < c.frames; ++t) {
            preds.push_back(net.forward_frame(clip_frame(c, t), st, ctx));
            gts.push_back(clip_alpha(c, t));
        }
        ClipMetrics cm;
        cm.clip_id = c.clip_id;
        for (int t = 0; t < c.frames; ++t) {
            const double err = metrics_detail::mean_abs_diff(preds[t], gts[t]);
            cm.mad += err * 1e3;
            cm.mse += mse_metric(preds[t], gts[t]);
            cm.grad += grad_error(preds[t], gts[t]);
            cm.conn += conn_error(preds[t], gts[t]);
            rep.frame_errors.push_back({c.clip_id, t, err});
        }
        cm.mad /= c.frames;
        cm.mse /= c.frames;
        cm.grad /= c.frames;
        cm.conn /= c.frames;
        if (c.frames >= 2) {
            cm.dtssd = dtssd(preds, gts);
            cm.has_dtssd = true;
        }
        rep.total_frames += c.frames;
        rep.clips.push_back(cm);
    }
    ClipMetrics& agg = rep.aggregate;
    int dt_clips = 0;
    for (const ClipMetrics& cm : rep.clips) {
        agg.mad += cm.mad;
        agg.mse += cm.mse;
        agg.grad += cm.grad;
        agg.conn += cm.conn;
        if (cm.has_dtssd) {
            agg.dtssd += cm.dtssd;
            ++dt_clips;
        }
    }
    const double nc = static_cast<double>(rep.clips.size());
    agg.mad /= nc;
    agg.mse /= nc;
    agg.grad /= nc;
    agg.conn /= nc;
    if (dt_clips > 0) {
        agg.dtssd /= dt_clips;
        agg.has_dtssd = true;
    }
    return rep;
}

namespace metrics_detail {

inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline void append_metric_row(std::string& out, const MetricsReport& rep, const std::string& id,
                              const ClipMetrics& m) {
    out += rep.method;
    out += ',';
    out += std::to_string(rep.w_bits);
    out += ',';
    out += std::to_string(rep.a_bits);
    out += ',';
    out += id;
    out += ',';
    out += fmt6(m.mad);
    out += ',';
    out += fmt6(m.mse);
    out += ',';
    out += fmt6(m.grad);
    out += ',';
    out += fmt6(m.conn);
    out += ',';
    if (m.has_dtssd) out += fmt6(m.dtssd);
    out += '\n';
}

}  // namespace metrics_detail

// Fixed-precision rows so identical reports serialize byte-identically.
inline std::string metrics_csv(const MetricsReport& rep) {
    std::string out = "method,w_bits,a_bits,clip_id,MAD,MSE,Grad,Conn,DTSSD\n";
    for (const ClipMetrics& m : rep.clips)
        metrics_detail::append_metric_row(out, rep, std::to_string(m.clip_id), m);
    metrics_detail::append_metric_row(out, rep, "aggregate", rep.aggregate);
    return out;
}

inline std::string frame_errors_csv(const MetricsReport& rep) {
    std::string out = "method,w_bits,a_bits,clip_id,frame,alpha_err\n";
    for (const FrameError& fe : rep.frame_errors) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.8f", fe.alpha_err);
        out += rep.method;
        out += ',';
        out += std::to_string(rep.w_bits);
        out += ',';
        out += std::to_string(rep.a_bits);
        out += ',';
        out += std::to_string(fe.clip_id);
        out += ',';
        out += std::to_string(fe.frame);
        out += ',';
        out += buf;
        out += '\n';
    }
    return out;
}

}  // namespace ptq4vm
