#pragma once

// Reverse-mode autodiff over dense float32 tensors (NCHW row-major).
//
// A Tensor is a shared handle to a Node holding the value buffer and, when
// the node participates in differentiation, a gradient buffer plus the
// closure that routes upstream gradients into its parents. Operations record
// onto the innermost live Tape; with no tape (or no differentiable inputs)
// they produce plain value nodes, which keeps inference allocation-light.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "ptq4vm/common.hpp"

namespace ptq4vm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        require(d > 0, "shape dims must be positive, got ", d);
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class Tape;

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily, same numel as value
    bool requires_grad = false;  // leaf parameter flag
    bool grad_path = false;      // reachable from a requires_grad leaf
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    Tape* tape = nullptr;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }

    void add_grad(const float* g, int64_t n) {
        ensure_grad();
        float* dst = grad.data();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<float> data,
                            bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        require(n == static_cast<int64_t>(data.size()), "data size ",
                data.size(), " does not match shape ", shape_str(shape));
        for (float v : data)
            require(std::isfinite(v), "non-finite value in tensor data");
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(data);
        node->requires_grad = requires_grad;
        node->grad_path = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        return from_data(std::move(shape),
                         std::vector<float>(static_cast<size_t>(n), v),
                         requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0f, requires_grad);
    }

    static Tensor scalar(float v) { return full({1}, v); }

    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        std::vector<float> data(static_cast<size_t>(n));
        for (auto& v : data)
            v = static_cast<float>(rng.normal()) * stddev;
        return from_data(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    std::span<const float> data() const {
        return {node_->value.data(), node_->value.size()};
    }
    // Direct value mutation; only valid outside recorded graphs (optimizer
    // updates, buffer initialization).
    std::span<float> mutable_data() {
        return {node_->value.data(), node_->value.size()};
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const float> grad() const {
        check(has_grad(), "gradient not populated");
        return {node_->grad.data(), node_->grad.size()};
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (node_->parents.empty())
            node_->grad_path = rg;  // leaves toggle cleanly
        else
            node_->grad_path = node_->grad_path || rg;
    }

    float item() const {
        require(numel() == 1, "item() needs a single-element tensor, shape ",
                shape_str(shape()));
        return node_->value[0];
    }

    // Value copy outside any graph.
    Tensor detach() const {
        auto node = std::make_shared<Node>();
        node->shape = node_->shape;
        node->value = node_->value;
        return Tensor(std::move(node));
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Innermost-live-tape stack. One backward pass per tape; reuse is an error.
class Tape {
public:
    Tape() : prev_(current_) { current_ = this; }
    ~Tape() {
        if (current_ == this) current_ = prev_;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    void record(std::shared_ptr<Node> node) {
        node->tape = this;
        ops_.push_back(std::move(node));
    }

    size_t size() const { return ops_.size(); }
    bool consumed() const { return consumed_; }

    // Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse
    // creation order. Leaf gradients accumulate; interior gradients are
    // freshly zeroed here.
    void backward(const Tensor& loss) {
        check(!consumed_, "tape already consumed by a previous backward()");
        require(loss.numel() == 1, "backward() needs a scalar loss, shape ",
                shape_str(loss.shape()));
        check(loss.node()->tape == this,
              "loss was not recorded on this tape");
        for (auto& n : ops_) n->grad.assign(n->value.size(), 0.0f);
        loss.node()->grad[0] = 1.0f;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            Node& n = **it;
            if (n.backward) n.backward(n);
        }
        consumed_ = true;
    }

private:
    static inline thread_local Tape* current_ = nullptr;
    std::vector<std::shared_ptr<Node>> ops_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

namespace detail {

inline bool any_grad_path(std::initializer_list<Tensor> inputs) {
    for (const auto& t : inputs)
        if (t.node()->grad_path) return true;
    return false;
}

#ifndef NDEBUG
inline void debug_check_finite(const Node& n) {
    for (float v : n.value)
        check(std::isfinite(v), "non-finite value produced by an op");
}
#else
inline void debug_check_finite(const Node&) {}
#endif

// Creates the output node and records it when a tape is live and some input
// is on a gradient path. The backward closure reads node.grad and pushes
// into parents (guarded per-parent by grad_path).
inline Tensor make_op(Shape shape, std::vector<float> value,
                      std::initializer_list<Tensor> inputs,
                      std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    debug_check_finite(*node);
    if (Tape::current() != nullptr && any_grad_path(inputs)) {
        node->grad_path = true;
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
        Tape::current()->record(node);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with restricted broadcasting. Accepted patterns:
// identical shapes, scalar (numel 1) on either side, or a per-channel
// operand ({C}, {1,C,1,1} or {N,C,1,1}) against an NCHW tensor.
// ---------------------------------------------------------------------------

namespace detail {

enum class Bcast { Same, ScalarRhs, ChannelRhs };

struct BinaryPlan {
    Bcast kind = Bcast::Same;
    bool swapped = false;  // original lhs was the broadcast side
    int n = 1, c = 1, hw = 1;
};

// lhs is the full-shape side after an optional swap.
inline bool channel_compatible(const Shape& full, const Shape& small, int& n,
                               int& c, int& hw) {
    if (full.size() != 4) return false;
    n = full[0];
    c = full[1];
    hw = full[2] * full[3];
    if (small.size() == 1) return small[0] == c;
    if (small.size() == 4 && small[2] == 1 && small[3] == 1 &&
        small[1] == c)
        return small[0] == 1 || small[0] == n;
    return false;
}

inline BinaryPlan binary_plan(const Tensor& a, const Tensor& b,
                              const char* opname) {
    BinaryPlan p;
    if (a.shape() == b.shape()) {
        p.kind = Bcast::Same;
        return p;
    }
    if (b.numel() == 1) {
        p.kind = Bcast::ScalarRhs;
        return p;
    }
    if (a.numel() == 1) {
        p.kind = Bcast::ScalarRhs;
        p.swapped = true;
        return p;
    }
    if (channel_compatible(a.shape(), b.shape(), p.n, p.c, p.hw)) {
        p.kind = Bcast::ChannelRhs;
        return p;
    }
    if (channel_compatible(b.shape(), a.shape(), p.n, p.c, p.hw)) {
        p.kind = Bcast::ChannelRhs;
        p.swapped = true;
        return p;
    }
    require(false, opname, ": incompatible shapes ", shape_str(a.shape()),
            " and ", shape_str(b.shape()));
    return p;
}

// Index of the broadcast-side element paired with flat index i of the full
// side, for the ChannelRhs plan.
inline int64_t channel_index(const BinaryPlan& p, bool small_has_batch,
                             int64_t i) {
    int64_t chan = (i / p.hw) % p.c;
    if (!small_has_batch) return chan;
    int64_t batch = i / (static_cast<int64_t>(p.hw) * p.c);
    return batch * p.c + chan;
}

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a_in, const Tensor& b_in, const char* opname,
                 Fwd fwd, BwdA bwd_full, BwdB bwd_small) {
    BinaryPlan plan = binary_plan(a_in, b_in, opname);
    const Tensor& full = plan.swapped ? b_in : a_in;
    const Tensor& small = plan.swapped ? a_in : b_in;
    bool swapped = plan.swapped;

    const auto fv = full.data();
    const auto sv = small.data();
    int64_t n = full.numel();
    std::vector<float> out(static_cast<size_t>(n));

    bool small_has_batch =
        plan.kind == Bcast::ChannelRhs && small.shape().size() == 4 &&
        small.shape()[0] == plan.n && plan.n > 1;

    auto small_at = [&](int64_t i) -> float {
        switch (plan.kind) {
            case Bcast::Same: return sv[i];
            case Bcast::ScalarRhs: return sv[0];
            default: return sv[channel_index(plan, small_has_batch, i)];
        }
    };

    for (int64_t i = 0; i < n; ++i)
        out[static_cast<size_t>(i)] =
            fwd(fv[i], small_at(i), swapped);

    return make_op(
        full.shape(), std::move(out), {a_in, b_in},
        [plan, swapped, small_has_batch, bwd_full, bwd_small](Node& node) {
            Node& a = *node.parents[0];
            Node& b = *node.parents[1];
            Node& nf = swapped ? b : a;
            Node& ns = swapped ? a : b;
            int64_t n = node.numel();
            const float* g = node.grad.data();
            const float* fv = nf.value.data();
            const float* sv = ns.value.data();

            auto sidx = [&](int64_t i) -> int64_t {
                switch (plan.kind) {
                    case Bcast::Same: return i;
                    case Bcast::ScalarRhs: return 0;
                    default:
                        return channel_index(plan, small_has_batch, i);
                }
            };
            if (nf.grad_path) {
                nf.ensure_grad();
                float* dst = nf.grad.data();
                for (int64_t i = 0; i < n; ++i)
                    dst[i] += bwd_full(g[i], fv[i], sv[sidx(i)], swapped);
            }
            if (ns.grad_path) {
                ns.ensure_grad();
                float* dst = ns.grad.data();
                for (int64_t i = 0; i < n; ++i)
                    dst[sidx(i)] += bwd_small(g[i], fv[i], sv[sidx(i)], swapped);
            }
        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](float x, float y, bool) { return x + y; },
        [](float g, float, float, bool) { return g; },
        [](float g, float, float, bool) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub",
        [](float x, float y, bool sw) { return sw ? y - x : x - y; },
        [](float g, float, float, bool sw) { return sw ? -g : g; },
        [](float g, float, float, bool sw) { return sw ? g : -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](float x, float y, bool) { return x * y; },
        [](float g, float, float y, bool) { return g * y; },
        [](float g, float x, float, bool) { return g * x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Non-differentiable constant variants.
inline Tensor add_scalar(const Tensor& a, float c) {
    const auto av = a.data();
    std::vector<float> out(av.begin(), av.end());
    for (auto& v : out) v += c;
    return detail::make_op(a.shape(), std::move(out), {a}, [](Node& node) {
        Node& a = *node.parents[0];
        if (a.grad_path) a.add_grad(node.grad.data(), node.numel());
    });
}

inline Tensor mul_scalar(const Tensor& a, float c) {
    const auto av = a.data();
    std::vector<float> out(av.begin(), av.end());
    for (auto& v : out) v *= c;
    return detail::make_op(a.shape(), std::move(out), {a}, [c](Node& node) {
        Node& a = *node.parents[0];
        if (!a.grad_path) return;
        a.ensure_grad();
        const float* g = node.grad.data();
        float* dst = a.grad.data();
        int64_t n = node.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += c * g[i];
    });
}

// ---------------------------------------------------------------------------
// Unary ops
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    const auto av = a.data();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0f ? av[i] : 0.0f;
    return detail::make_op(a.shape(), std::move(out), {a}, [](Node& node) {
        Node& a = *node.parents[0];
        if (!a.grad_path) return;
        a.ensure_grad();
        const float* g = node.grad.data();
        const float* x = a.value.data();
        float* dst = a.grad.data();
        int64_t n = node.numel();
        for (int64_t i = 0; i < n; ++i)
            if (x[i] > 0.0f) dst[i] += g[i];
    });
}

inline Tensor sigmoid(const Tensor& a) {
    const auto av = a.data();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i)
        out[i] = 1.0f / (1.0f + std::exp(-av[i]));
    return detail::make_op(a.shape(), std::move(out), {a}, [](Node& node) {
        Node& a = *node.parents[0];
        if (!a.grad_path) return;
        a.ensure_grad();
        const float* g = node.grad.data();
        const float* y = node.value.data();
        float* dst = a.grad.data();
        int64_t n = node.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * y[i] * (1.0f - y[i]);
    });
}

inline Tensor tanh_op(const Tensor& a) {
    const auto av = a.data();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
    return detail::make_op(a.shape(), std::move(out), {a}, [](Node& node) {
        Node& a = *node.parents[0];
        if (!a.grad_path) return;
        a.ensure_grad();
        const float* g = node.grad.data();
        const float* y = node.value.data();
        float* dst = a.grad.data();
        int64_t n = node.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * (1.0f - y[i] * y[i]);
    });
}

inline Tensor abs_op(const Tensor& a) {
    const auto av = a.data();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::fabs(av[i]);
    // Subgradient 0 at exactly 0.
    return detail::make_op(a.shape(), std::move(out), {a}, [](Node& node) {
        Node& a = *node.parents[0];
        if (!a.grad_path) return;
        a.ensure_grad();
        const float* g = node.grad.data();
        const float* x = a.value.data();
        float* dst = a.grad.data();
        int64_t n = node.numel();
        for (int64_t i = 0; i < n; ++i) {
            if (x[i] > 0.0f)
                dst[i] += g[i];
            else if (x[i] < 0.0f)
                dst[i] -= g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    const auto av = a.data();
    double acc = 0.0;
    for (float v : av) acc += v;
    return detail::make_op(
        Shape{1}, {static_cast<float>(acc)}, {a}, [](Node& node) {
            Node& a = *node.parents[0];
            if (!a.grad_path) return;
            a.ensure_grad();
            float g = node.grad[0];
            float* dst = a.grad.data();
            int64_t n = a.numel();
            for (int64_t i = 0; i < n; ++i) dst[i] += g;
        });
}

inline Tensor mean_all(const Tensor& a) {
    const auto av = a.data();
    double acc = 0.0;
    for (float v : av) acc += v;
    double inv = 1.0 / static_cast<double>(a.numel());
    return detail::make_op(
        Shape{1}, {static_cast<float>(acc * inv)}, {a}, [inv](Node& node) {
            Node& a = *node.parents[0];
            if (!a.grad_path) return;
            a.ensure_grad();
            float g = node.grad[0] * static_cast<float>(inv);
            float* dst = a.grad.data();
            int64_t n = a.numel();
            for (int64_t i = 0; i < n; ++i) dst[i] += g;
        });
}

// Global average pool: NCHW -> {N,C,1,1}.
inline Tensor spatial_mean(const Tensor& a) {
    require(a.shape().size() == 4, "spatial_mean expects NCHW, got ",
            shape_str(a.shape()));
    int n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    const auto av = a.data();
    std::vector<float> out(static_cast<size_t>(n * c));
    double inv = 1.0 / hw;
    for (int i = 0; i < n * c; ++i) {
        const float* plane = av.data() + static_cast<int64_t>(i) * hw;
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += plane[j];
        out[static_cast<size_t>(i)] = static_cast<float>(acc * inv);
    }
    return detail::make_op(
        Shape{n, c, 1, 1}, std::move(out), {a}, [n, c, hw, inv](Node& node) {
            Node& a = *node.parents[0];
            if (!a.grad_path) return;
            a.ensure_grad();
            const float* g = node.grad.data();
            float* dst = a.grad.data();
            for (int i = 0; i < n * c; ++i) {
                float gv = g[i] * static_cast<float>(inv);
                float* plane = dst + static_cast<int64_t>(i) * hw;
                for (int j = 0; j < hw; ++j) plane[j] += gv;
            }
        });
}

// ---------------------------------------------------------------------------
// Channel concat / slice (NCHW)
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_channels on empty list");
    const Shape& s0 = parts[0].shape();
    require(s0.size() == 4, "concat_channels expects NCHW, got ",
            shape_str(s0));
    int n = s0[0], h = s0[2], w = s0[3], ctotal = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == 4 && s[0] == n && s[2] == h && s[3] == w,
                "concat_channels mismatch: ", shape_str(s0), " vs ",
                shape_str(s));
        ctotal += s[1];
    }
    int64_t hw = static_cast<int64_t>(h) * w;
    std::vector<float> out(static_cast<size_t>(n * ctotal * hw));
    for (int b = 0; b < n; ++b) {
        int64_t coff = 0;
        for (const auto& p : parts) {
            int pc = p.shape()[1];
            const float* src = p.data().data() + static_cast<int64_t>(b) * pc * hw;
            float* dst = out.data() + (static_cast<int64_t>(b) * ctotal + coff) * hw;
            std::copy(src, src + static_cast<int64_t>(pc) * hw, dst);
            coff += pc;
        }
    }
    std::vector<int> widths;
    widths.reserve(parts.size());
    for (const auto& p : parts) widths.push_back(p.shape()[1]);

    bool record = Tape::current() != nullptr;
    bool grad_path = false;
    for (const auto& p : parts) grad_path = grad_path || p.node()->grad_path;
    auto node = std::make_shared<Node>();
    node->shape = Shape{n, ctotal, h, w};
    node->value = std::move(out);
    detail::debug_check_finite(*node);
    if (record && grad_path) {
        node->grad_path = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backward = [n, ctotal, hw, widths](Node& node) {
            const float* g = node.grad.data();
            for (int b = 0; b < n; ++b) {
                int64_t coff = 0;
                for (size_t pi = 0; pi < widths.size(); ++pi) {
                    Node& p = *node.parents[pi];
                    int pc = widths[pi];
                    if (p.grad_path) {
                        p.ensure_grad();
                        const float* src =
                            g + (static_cast<int64_t>(b) * ctotal + coff) * hw;
                        float* dst =
                            p.grad.data() + static_cast<int64_t>(b) * pc * hw;
                        for (int64_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
                    }
                    coff += pc;
                }
            }
        };
        Tape::current()->record(node);
    }
    return Tensor(std::move(node));
}

// Channels [c0, c1) of an NCHW tensor.
inline Tensor slice_channels(const Tensor& a, int c0, int c1) {
    require(a.shape().size() == 4, "slice_channels expects NCHW, got ",
            shape_str(a.shape()));
    int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    require(0 <= c0 && c0 < c1 && c1 <= c, "slice_channels range [", c0, ",",
            c1, ") out of bounds for C=", c);
    int64_t hw = static_cast<int64_t>(h) * w;
    int cs = c1 - c0;
    std::vector<float> out(static_cast<size_t>(n * cs * hw));
    const float* src = a.data().data();
    for (int b = 0; b < n; ++b)
        std::copy(src + (static_cast<int64_t>(b) * c + c0) * hw,
                  src + (static_cast<int64_t>(b) * c + c1) * hw,
                  out.data() + static_cast<int64_t>(b) * cs * hw);
    return detail::make_op(
        Shape{n, cs, h, w}, std::move(out), {a}, [n, c, c0, cs, hw](Node& node) {
            Node& a = *node.parents[0];
            if (!a.grad_path) return;
            a.ensure_grad();
            const float* g = node.grad.data();
            for (int b = 0; b < n; ++b) {
                const float* srow = g + static_cast<int64_t>(b) * cs * hw;
                float* drow = a.grad.data() + (static_cast<int64_t>(b) * c + c0) * hw;
                for (int64_t i = 0; i < cs * hw; ++i) drow[i] += srow[i];
            }
        });
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse_loss shape mismatch: ",
            shape_str(a.shape()), " vs ", shape_str(b.shape()));
    const auto av = a.data();
    const auto bv = b.data();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        double d = static_cast<double>(av[i]) - bv[i];
        acc += d * d;
    }
    double inv = 1.0 / static_cast<double>(a.numel());
    return detail::make_op(
        Shape{1}, {static_cast<float>(acc * inv)}, {a, b}, [inv](Node& node) {
            Node& a = *node.parents[0];
            Node& b = *node.parents[1];
            float g2 = 2.0f * node.grad[0] * static_cast<float>(inv);
            const float* av = a.value.data();
            const float* bv = b.value.data();
            int64_t n = a.numel();
            if (a.grad_path) {
                a.ensure_grad();
                float* dst = a.grad.data();
                for (int64_t i = 0; i < n; ++i) dst[i] += g2 * (av[i] - bv[i]);
            }
            if (b.grad_path) {
                b.ensure_grad();
                float* dst = b.grad.data();
                for (int64_t i = 0; i < n; ++i) dst[i] -= g2 * (av[i] - bv[i]);
            }
        });
}

inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "l1_loss shape mismatch: ",
            shape_str(a.shape()), " vs ", shape_str(b.shape()));
    const auto av = a.data();
    const auto bv = b.data();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i)
        acc += std::fabs(static_cast<double>(av[i]) - bv[i]);
    double inv = 1.0 / static_cast<double>(a.numel());
    return detail::make_op(
        Shape{1}, {static_cast<float>(acc * inv)}, {a, b}, [inv](Node& node) {
            Node& a = *node.parents[0];
            Node& b = *node.parents[1];
            float g = node.grad[0] * static_cast<float>(inv);
            const float* av = a.value.data();
            const float* bv = b.value.data();
            int64_t n = a.numel();
            if (a.grad_path) {
                a.ensure_grad();
                float* dst = a.grad.data();
                for (int64_t i = 0; i < n; ++i) {
                    float d = av[i] - bv[i];
                    if (d > 0.0f)
                        dst[i] += g;
                    else if (d < 0.0f)
                        dst[i] -= g;
                }
            }
            if (b.grad_path) {
                b.ensure_grad();
                float* dst = b.grad.data();
                for (int64_t i = 0; i < n; ++i) {
                    float d = av[i] - bv[i];
                    if (d > 0.0f)
                        dst[i] -= g;
                    else if (d < 0.0f)
                        dst[i] += g;
                }
            }
        });
}

}  // namespace ptq4vm
