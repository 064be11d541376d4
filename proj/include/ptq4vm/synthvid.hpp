// Synthetic matting clips: Gaussian-feathered ellipse sprites translating
// over a static sinusoidal background, composited as I = a*F + (1-a)*B.
// Every frame carries exact ground-truth alpha and dense backward flow
// (flow(p) = source offset, so source = p + flow(p) in the previous frame).
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ptq4vm/common.hpp"
#include "ptq4vm/io.hpp"
#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

struct SpriteSpec {
    float cx0 = 0, cy0 = 0;  // start center, px
    float vx = 0, vy = 0;    // px/frame
    float rx = 8, ry = 8;    // radii, px
    float angle = 0;         // orientation, radians
    float feather = 1.5f;    // Gaussian edge sigma, px
    float color[3] = {0.5f, 0.5f, 0.5f};
};

struct ClipSpec {
    int frames = 8;
    int height = 64;
    int width = 64;
    std::uint32_t clip_id = 0;
    std::vector<SpriteSpec> sprites;
    // Static ellipses painted into the background: they look like sprites but
    // contribute nothing to ground-truth alpha or flow (matting distractors).
    std::vector<SpriteSpec> distractors;
    // Per-channel background grating: base + amp*sin(2*pi*(fx*x + fy*y) + phase).
    float bg_base[3] = {0.5f, 0.5f, 0.5f};
    float bg_amp[3] = {0.2f, 0.2f, 0.2f};
    float bg_fx[3] = {0.02f, 0.03f, 0.015f};
    float bg_fy[3] = {0.03f, 0.015f, 0.02f};
    float bg_phase[3] = {0, 2, 4};
};

struct ClipData {
    int frames = 0;
    int height = 0;
    int width = 0;
    std::uint32_t clip_id = 0;
    std::vector<float> images;  // frames * 3 * H * W
    std::vector<float> alphas;  // frames * H * W
    // Forward motion fields F_{t-1 -> t}: ch0 = dx, ch1 = dy in pixels, stored
    // at the destination pixel; warping samples frame t-1 at (x-dx, y-dy).
    // Frame 0 has no predecessor and is all zero.
    std::vector<float> flows;

    std::size_t image_offset(int t) const { return static_cast<std::size_t>(t) * 3 * height * width; }
    std::size_t alpha_offset(int t) const { return static_cast<std::size_t>(t) * height * width; }
    std::size_t flow_offset(int t) const { return static_cast<std::size_t>(t) * 2 * height * width; }
};

inline Tensor clip_frame(const ClipData& c, int t) {
    require(t >= 0 && t < c.frames, "frame ", t, " out of range");
    auto b = c.images.begin() + static_cast<std::ptrdiff_t>(c.image_offset(t));
    return Tensor::from_data({1, 3, c.height, c.width},
                             std::vector<float>(b, b + 3LL * c.height * c.width));
}

inline Tensor clip_alpha(const ClipData& c, int t) {
    require(t >= 0 && t < c.frames, "frame ", t, " out of range");
    auto b = c.alphas.begin() + static_cast<std::ptrdiff_t>(c.alpha_offset(t));
    return Tensor::from_data({1, 1, c.height, c.width},
                             std::vector<float>(b, b + 1LL * c.height * c.width));
}

inline Tensor clip_flow(const ClipData& c, int t) {
    require(t >= 0 && t < c.frames, "frame ", t, " out of range");
    auto b = c.flows.begin() + static_cast<std::ptrdiff_t>(c.flow_offset(t));
    return Tensor::from_data({1, 2, c.height, c.width},
                             std::vector<float>(b, b + 2LL * c.height * c.width));
}

namespace detail {

// Normalized elliptical distance of (x,y) from a sprite at center (cx,cy):
// <= 1 inside the core, growing linearly outside.
inline float ellipse_q(const SpriteSpec& s, float cx, float cy, float x, float y) {
    const float dx = x - cx, dy = y - cy;
    const float ca = std::cos(s.angle), sa = std::sin(s.angle);
    const float ux = ca * dx + sa * dy;
    const float uy = -sa * dx + ca * dy;
    const float qx = ux / s.rx, qy = uy / s.ry;
    return std::sqrt(qx * qx + qy * qy);
}

inline float sprite_alpha(const SpriteSpec& s, float cx, float cy, float x, float y) {
    const float q = ellipse_q(s, cx, cy, x, y);
    if (q <= 1.0f) return 1.0f;
    const float d_px = (q - 1.0f) * std::min(s.rx, s.ry);
    const float z = d_px / s.feather;
    return std::exp(-0.5f * z * z);
}

}  // namespace detail

// Per-sprite center trajectories with elastic bouncing off a margin box so
// sprites stay in view for any clip length.
struct SpritePaths {
    std::vector<std::vector<float>> cx, cy;  // [sprite][frame]
};

inline SpritePaths sprite_paths(const ClipSpec& spec) {
    SpritePaths p;
    const float margin = 6.0f;
    const float xmin = margin, xmax = static_cast<float>(spec.width) - 1 - margin;
    const float ymin = margin, ymax = static_cast<float>(spec.height) - 1 - margin;
    require(xmax > xmin && ymax > ymin, "frame too small for sprite margins");
    for (const auto& s : spec.sprites) {
        std::vector<float> xs(spec.frames), ys(spec.frames);
        float x = std::clamp(s.cx0, xmin, xmax);
        float y = std::clamp(s.cy0, ymin, ymax);
        float vx = s.vx, vy = s.vy;
        for (int t = 0; t < spec.frames; ++t) {
            xs[t] = x;
            ys[t] = y;
            float nx = x + vx, ny = y + vy;
            if (nx < xmin || nx > xmax) {
                vx = -vx;
                nx = x + vx;
            }
            if (ny < ymin || ny > ymax) {
                vy = -vy;
                ny = y + vy;
            }
            x = std::clamp(nx, xmin, xmax);
            y = std::clamp(ny, ymin, ymax);
        }
        p.cx.push_back(std::move(xs));
        p.cy.push_back(std::move(ys));
    }
    return p;
}

inline ClipData render_clip(const ClipSpec& spec) {
    require(spec.frames >= 1 && spec.height >= 16 && spec.width >= 16, "bad clip geometry");
    ClipData c;
    c.frames = spec.frames;
    c.height = spec.height;
    c.width = spec.width;
    c.clip_id = spec.clip_id;
    const int H = spec.height, W = spec.width;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    c.images.assign(static_cast<std::size_t>(spec.frames) * 3 * plane, 0.0f);
    c.alphas.assign(static_cast<std::size_t>(spec.frames) * plane, 0.0f);
    c.flows.assign(static_cast<std::size_t>(spec.frames) * 2 * plane, 0.0f);

    const SpritePaths paths = sprite_paths(spec);
    const int ns = static_cast<int>(spec.sprites.size());
    constexpr float kTwoPi = 6.28318530717958647692f;

    for (int t = 0; t < spec.frames; ++t) {
        float* img = c.images.data() + c.image_offset(t);
        float* alp = c.alphas.data() + c.alpha_offset(t);
        float* flo = c.flows.data() + c.flow_offset(t);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t pi = static_cast<std::size_t>(y) * W + x;
                float px[3];
                for (int ch = 0; ch < 3; ++ch) {
                    float v = spec.bg_base[ch] +
                              spec.bg_amp[ch] * std::sin(kTwoPi * (spec.bg_fx[ch] * x +
                                                                   spec.bg_fy[ch] * y) +
                                                         spec.bg_phase[ch]);
                    px[ch] = std::clamp(v, 0.02f, 0.98f);
                }
                // Distractors are part of the background: painted in, but
                // invisible to alpha and flow ground truth.
                for (const auto& d : spec.distractors) {
                    const float a = detail::sprite_alpha(d, d.cx0, d.cy0, static_cast<float>(x),
                                                         static_cast<float>(y));
                    if (a < 1e-4f) continue;
                    for (int ch = 0; ch < 3; ++ch)
                        px[ch] = a * d.color[ch] + (1.0f - a) * px[ch];
                }
                float a_total = 0.0f;
                float best_a = 0.0f;
                int owner = -1;
                for (int s = 0; s < ns; ++s) {
                    const float a = detail::sprite_alpha(spec.sprites[s], paths.cx[s][t],
                                                         paths.cy[s][t], static_cast<float>(x),
                                                         static_cast<float>(y));
                    if (a < 1e-4f) continue;
                    for (int ch = 0; ch < 3; ++ch)
                        px[ch] = a * spec.sprites[s].color[ch] + (1.0f - a) * px[ch];
                    a_total = a + (1.0f - a) * a_total;
                    if (a >= best_a) {
                        best_a = a;
                        owner = s;
                    }
                }
                for (int ch = 0; ch < 3; ++ch) img[ch * plane + pi] = px[ch];
                alp[pi] = a_total;
                if (t > 0 && owner >= 0) {
                    flo[pi] = paths.cx[owner][t] - paths.cx[owner][t - 1];
                    flo[plane + pi] = paths.cy[owner][t] - paths.cy[owner][t - 1];
                }
            }
        }
    }
    return c;
}

// ---- clip file format ----
// header: magic "PTQ4VMCL", version u16, then W, H, T as u32 little-endian.
// payload: raw f32 planes, frames (T*3*H*W), alpha (T*H*W), flow ((T-1)*2*H*W).
// Frame-0 flow is definitionally zero and is not stored.

inline constexpr const char* kClipMagic = "PTQ4VMCL";
inline constexpr std::uint16_t kClipVersion = 1;

inline void save_clip(const std::string& path, const ClipData& c) {
    auto os = io::open_out(path);
    io::write_magic(os, kClipMagic);
    io::write_pod(os, kClipVersion);
    io::write_u32(os, static_cast<std::uint32_t>(c.width));
    io::write_u32(os, static_cast<std::uint32_t>(c.height));
    io::write_u32(os, static_cast<std::uint32_t>(c.frames));
    const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
    io::write_bytes(os, c.images.data(), c.images.size() * sizeof(float));
    io::write_bytes(os, c.alphas.data(), c.alphas.size() * sizeof(float));
    io::write_bytes(os, c.flows.data() + c.flow_offset(1),
                    static_cast<std::size_t>(c.frames - 1) * 2 * plane * sizeof(float));
    check(os.good(), "failed writing ", path);
}

inline ClipData load_clip(const std::string& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, kClipMagic, "clip");
    const auto ver = io::read_pod<std::uint16_t>(is);
    check(ver == kClipVersion, "unsupported clip version ", ver, " in ", path);
    ClipData c;
    c.width = static_cast<int>(io::read_u32(is));
    c.height = static_cast<int>(io::read_u32(is));
    c.frames = static_cast<int>(io::read_u32(is));
    check(c.frames >= 1 && c.frames <= 10000 && c.height >= 1 && c.height <= 4096 &&
              c.width >= 1 && c.width <= 4096,
          "implausible clip geometry in ", path);
    const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
    c.images.resize(static_cast<std::size_t>(c.frames) * 3 * plane);
    c.alphas.resize(static_cast<std::size_t>(c.frames) * plane);
    c.flows.assign(static_cast<std::size_t>(c.frames) * 2 * plane, 0.0f);
    io::read_bytes(is, c.images.data(), c.images.size() * sizeof(float));
    io::read_bytes(is, c.alphas.data(), c.alphas.size() * sizeof(float));
    io::read_bytes(is, c.flows.data() + c.flow_offset(1),
                   static_cast<std::size_t>(c.frames - 1) * 2 * plane * sizeof(float));
    check(is.peek() == std::char_traits<char>::eof(), "trailing bytes in ", path);
    return c;
}

// ---- dataset generation ----

struct DatasetConfig {
    std::string dir = "data";
    int calib_clips = 64;
    int calib_frames = 4;  // 64 x 4 = 256 calibration images
    int eval_clips = 16;
    int eval_frames = 20;
    int height = 64;
    int width = 64;
    int min_sprites = 1;
    int max_sprites = 3;
    float max_speed = 4.0f;
    std::uint64_t seed = 7;
};

struct DatasetManifest {
    int calib_clips = 0;
    int calib_frames = 0;
    int eval_clips = 0;
    int eval_frames = 0;
    int height = 0;
    int width = 0;
    std::uint64_t seed = 0;
};

inline std::string calib_clip_path(const std::string& dir, int i) {
    return cat(dir, "/calib_", i / 100 % 10, i / 10 % 10, i % 10, ".clip");
}
inline std::string eval_clip_path(const std::string& dir, int i) {
    return cat(dir, "/eval_", i / 100 % 10, i / 10 % 10, i % 10, ".clip");
}
inline std::string manifest_path(const std::string& dir) { return dir + "/dataset.manifest"; }

inline void save_manifest(const std::string& dir, const DatasetManifest& m) {
    std::ofstream os(manifest_path(dir), std::ios::trunc);
    check(os.is_open(), "cannot write manifest in ", dir);
    os << "calib_clips=" << m.calib_clips << "\n"
       << "calib_frames=" << m.calib_frames << "\n"
       << "eval_clips=" << m.eval_clips << "\n"
       << "eval_frames=" << m.eval_frames << "\n"
       << "height=" << m.height << "\n"
       << "width=" << m.width << "\n"
       << "seed=" << m.seed << "\n";
    check(os.good(), "failed writing manifest in ", dir);
}

inline DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream is(manifest_path(dir));
    check(is.is_open(), "no dataset manifest in ", dir, "; run gen-data first");
    DatasetManifest m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        check(eq != std::string::npos, "malformed manifest line: ", line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "calib_clips") m.calib_clips = std::stoi(val);
        else if (key == "calib_frames") m.calib_frames = std::stoi(val);
        else if (key == "eval_clips") m.eval_clips = std::stoi(val);
        else if (key == "eval_frames") m.eval_frames = std::stoi(val);
        else if (key == "height") m.height = std::stoi(val);
        else if (key == "width") m.width = std::stoi(val);
        else if (key == "seed") m.seed = std::stoull(val);
        else check(false, "unknown manifest key: ", key);
    }
    check(m.calib_clips > 0 && m.eval_clips > 0 && m.height > 0 && m.width > 0,
          "incomplete manifest in ", dir);
    return m;
}

inline ClipSpec random_clip_spec(Rng& rng, int frames, int height, int width,
                                 const DatasetConfig& cfg, std::uint32_t clip_id) {
    ClipSpec spec;
    spec.frames = frames;
    spec.height = height;
    spec.width = width;
    spec.clip_id = clip_id;
    for (int ch = 0; ch < 3; ++ch) {
        spec.bg_base[ch] = static_cast<float>(rng.uniform(0.3, 0.7));
        spec.bg_amp[ch] = static_cast<float>(rng.uniform(0.08, 0.22));
        spec.bg_fx[ch] = static_cast<float>(rng.uniform(0.01, 0.05));
        spec.bg_fy[ch] = static_cast<float>(rng.uniform(0.01, 0.05));
        spec.bg_phase[ch] = static_cast<float>(rng.uniform(0.0, 6.28318));
    }
    const int ns = cfg.min_sprites + static_cast<int>(rng.uniform_int(
                                         cfg.max_sprites - cfg.min_sprites + 1));
    for (int s = 0; s < ns; ++s) {
        SpriteSpec sp;
        sp.rx = static_cast<float>(rng.uniform(8.0, 18.0));
        sp.ry = static_cast<float>(rng.uniform(8.0, 18.0));
        sp.angle = static_cast<float>(rng.uniform(0.0, 3.14159));
        sp.feather = 1.5f;
        sp.cx0 = static_cast<float>(rng.uniform(8.0, width - 9.0));
        sp.cy0 = static_cast<float>(rng.uniform(8.0, height - 9.0));
        // The first sprite always moves at a substantial speed so every clip
        // has real motion; the rest may drift slowly.
        const double lo = (s == 0) ? 2.0 : 0.5;
        const double speed = rng.uniform(lo, static_cast<double>(cfg.max_speed));
        const double dir = rng.uniform(0.0, 6.28318530717958647692);
        sp.vx = static_cast<float>(speed * std::cos(dir));
        sp.vy = static_cast<float>(speed * std::sin(dir));
        for (int ch = 0; ch < 3; ++ch) sp.color[ch] = static_cast<float>(rng.uniform(0.1, 0.9));
        spec.sprites.push_back(sp);
    }
    return spec;
}

namespace detail {

// Mean |cur - prev warped by flow| over one plane, with the same clamped
// bilinear gather the calibration warp applies.
inline float warped_alpha_mad(const float* prev, const float* cur, const float* fx,
                              const float* fy, int h, int w) {
    double acc = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            float sx = std::clamp(static_cast<float>(x) - fx[p], 0.0f, static_cast<float>(w - 1));
            float sy = std::clamp(static_cast<float>(y) - fy[p], 0.0f, static_cast<float>(h - 1));
            const int x0 = static_cast<int>(sx);
            const int y0 = static_cast<int>(sy);
            const int x1 = std::min(x0 + 1, w - 1);
            const int y1 = std::min(y0 + 1, h - 1);
            const float wx = sx - static_cast<float>(x0);
            const float wy = sy - static_cast<float>(y0);
            const float v = (1 - wy) * (1 - wx) * prev[static_cast<std::size_t>(y0) * w + x0] +
                            (1 - wy) * wx * prev[static_cast<std::size_t>(y0) * w + x1] +
                            wy * (1 - wx) * prev[static_cast<std::size_t>(y1) * w + x0] +
                            wy * wx * prev[static_cast<std::size_t>(y1) * w + x1];
            acc += std::abs(cur[p] - v);
        }
    }
    return static_cast<float>(acc / (static_cast<std::size_t>(h) * w));
}

}  // namespace detail

// Worst per-frame mean |gt_alpha[t] - warp(gt_alpha[t-1], gt_flow[t])| of a
// rendered clip. The stored flow follows one sprite per pixel, so regions
// where overlapping sprites move apart break the single-layer motion model
// and drive this up.
inline float clip_flow_consistency(const ClipData& c) {
    const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
    float worst = 0.0f;
    for (int t = 1; t < c.frames; ++t) {
        const float* prev = c.alphas.data() + (static_cast<std::size_t>(t) - 1) * plane;
        const float* cur = c.alphas.data() + static_cast<std::size_t>(t) * plane;
        const float* fx = c.flows.data() + static_cast<std::size_t>(t) * 2 * plane;
        worst = std::max(worst, detail::warped_alpha_mad(prev, cur, fx, fx + plane, c.height,
                                                         c.width));
    }
    return worst;
}

// Every emitted clip must satisfy warp consistency with margin below the
// documented 0.02 budget; specs whose sprites cross too violently are
// resampled.
inline constexpr float kFlowConsistencyLimit = 0.018f;

// Draws clip specs until the rendered clip honors kFlowConsistencyLimit.
// Tries fork from `rng` without advancing it, so draws made on `rng` after
// this call do not depend on the retry count.
inline ClipSpec sample_clip_spec(const Rng& rng, int frames, int height, int width,
                                 const DatasetConfig& cfg, std::uint32_t clip_id) {
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        Rng r = rng.fork(mix_seed(fnv1a64("clip-attempt"), attempt));
        ClipSpec spec = random_clip_spec(r, frames, height, width, cfg, clip_id);
        if (clip_flow_consistency(render_clip(spec)) <= kFlowConsistencyLimit) return spec;
    }
    check(false, "could not sample a flow-consistent clip (id ", clip_id, ")");
    return {};
}

// Writes calib_NNN.clip / eval_NNN.clip plus the manifest. Fully determined
// by cfg.seed: each clip renders from its own forked stream.
inline void generate_dataset(const DatasetConfig& cfg) {
    require(cfg.calib_clips >= 1 && cfg.eval_clips >= 1, "need at least one clip of each kind");
    require(cfg.calib_frames >= 2 && cfg.eval_frames >= 2, "clips need at least 2 frames");
    require(cfg.min_sprites >= 1 && cfg.max_sprites >= cfg.min_sprites, "bad sprite counts");
    require(cfg.max_speed > 0 && cfg.max_speed <= 4.0f, "sprite speed must be in (0,4] px/frame");
    std::filesystem::create_directories(cfg.dir);
    Rng root(cfg.seed);
    for (int i = 0; i < cfg.calib_clips; ++i) {
        Rng r = root.fork(mix_seed(fnv1a64("calib"), static_cast<std::uint64_t>(i)));
        ClipSpec spec = sample_clip_spec(r, cfg.calib_frames, cfg.height, cfg.width, cfg,
                                         static_cast<std::uint32_t>(i));
        save_clip(calib_clip_path(cfg.dir, i), render_clip(spec));
    }
    for (int i = 0; i < cfg.eval_clips; ++i) {
        Rng r = root.fork(mix_seed(fnv1a64("eval"), static_cast<std::uint64_t>(i)));
        ClipSpec spec = sample_clip_spec(r, cfg.eval_frames, cfg.height, cfg.width, cfg,
                                         static_cast<std::uint32_t>(1000 + i));
        // Odd-indexed eval clips carry a static sprite-like distractor so the
        // evaluation split probes background-interference robustness too.
        if (i % 2 == 1) {
            SpriteSpec d;
            d.cx0 = static_cast<float>(r.uniform(12.0, cfg.width - 13.0));
            d.cy0 = static_cast<float>(r.uniform(12.0, cfg.height - 13.0));
            d.rx = static_cast<float>(r.uniform(7.0, 12.0));
            d.ry = static_cast<float>(r.uniform(7.0, 12.0));
            d.angle = static_cast<float>(r.uniform(0.0, 3.14159));
            d.feather = 1.5f;
            for (int ch = 0; ch < 3; ++ch)
                d.color[ch] = static_cast<float>(r.uniform(0.1, 0.9));
            spec.distractors.push_back(d);
        }
        save_clip(eval_clip_path(cfg.dir, i), render_clip(spec));
    }
    DatasetManifest m;
    m.calib_clips = cfg.calib_clips;
    m.calib_frames = cfg.calib_frames;
    m.eval_clips = cfg.eval_clips;
    m.eval_frames = cfg.eval_frames;
    m.height = cfg.height;
    m.width = cfg.width;
    m.seed = cfg.seed;
    save_manifest(cfg.dir, m);
}

// Clip ids are positional: calibration clips are 0..N-1, evaluation clips
// 1000..1000+M-1, so the two id sets never collide.
inline std::vector<ClipData> load_calib_clips(const std::string& dir) {
    DatasetManifest m = load_manifest(dir);
    std::vector<ClipData> clips;
    clips.reserve(m.calib_clips);
    for (int i = 0; i < m.calib_clips; ++i) {
        clips.push_back(load_clip(calib_clip_path(dir, i)));
        clips.back().clip_id = static_cast<std::uint32_t>(i);
    }
    return clips;
}

inline std::vector<ClipData> load_eval_clips(const std::string& dir) {
    DatasetManifest m = load_manifest(dir);
    std::vector<ClipData> clips;
    clips.reserve(m.eval_clips);
    for (int i = 0; i < m.eval_clips; ++i) {
        clips.push_back(load_clip(eval_clip_path(dir, i)));
        clips.back().clip_id = static_cast<std::uint32_t>(1000 + i);
    }
    return clips;
}

}  // namespace ptq4vm
