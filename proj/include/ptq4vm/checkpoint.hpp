#pragma once

// Binary model checkpoints.
//
// Layout: header {magic "PTQ4VMCK", u32 version, u64 config_hash, u64 seed,
// u32 record_count}, then record_count named records, each
//   u32 name_len, name bytes, u32 dtype (0 = f32, 1 = f64),
//   u32 ndim, i64 dims..., payload (little-endian, dims product elements).
// Everything the forward pass reads is stored: weights, biases, BN state and
// fold flag, weight-quantizer channels, frozen integer grids, rounding masks
// when present, affine-correction state, and every activation quantizer.
// Loading therefore reproduces forward outputs bit-exactly.
//
// The stored config describes the architecture; the net is rebuilt from it.
// `config_hash` ties the checkpoint to the run configuration that produced
// it: a mismatch on load is reported as a warning, not an error, so archived
// checkpoints stay readable after config schema tweaks.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ptq4vm/common.hpp"
#include "ptq4vm/refnet.hpp"

namespace ptq4vm {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[9] = "PTQ4VMCK";

struct CheckpointMeta {
    std::uint32_t version = kCheckpointVersion;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    bool hash_mismatch = false;
};

namespace ckpt_detail {

struct Record {
    std::uint32_t dtype = 0;  // 0 f32, 1 f64
    std::vector<std::int64_t> dims;
    std::vector<char> payload;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (std::int64_t d : dims) n *= d;
        return n;
    }
};

class Writer {
public:
    void f32(const std::string& name, const std::vector<std::int64_t>& dims, const float* data) {
        Record r;
        r.dtype = 0;
        r.dims = dims;
        r.payload.resize(static_cast<std::size_t>(r.numel()) * 4);
        std::memcpy(r.payload.data(), data, r.payload.size());
        add(name, std::move(r));
    }

    void f32_tensor(const std::string& name, const Tensor& t) {
        std::vector<std::int64_t> dims(t.shape().begin(), t.shape().end());
        f32(name, dims, t.data().data());
    }

    void f64(const std::string& name, const std::vector<double>& v) {
        Record r;
        r.dtype = 1;
        r.dims = {static_cast<std::int64_t>(v.size())};
        r.payload.resize(v.size() * 8);
        std::memcpy(r.payload.data(), v.data(), r.payload.size());
        add(name, std::move(r));
    }

    void write(const std::string& path, std::uint64_t config_hash, std::uint64_t seed) const {
        std::ofstream f(path, std::ios::binary);
        require(f.good(), "cannot write checkpoint ", path);
        f.write(kCheckpointMagic, 8);
        const std::uint32_t ver = kCheckpointVersion;
        const std::uint32_t count = static_cast<std::uint32_t>(names_.size());
        f.write(reinterpret_cast<const char*>(&ver), 4);
        f.write(reinterpret_cast<const char*>(&config_hash), 8);
        f.write(reinterpret_cast<const char*>(&seed), 8);
        f.write(reinterpret_cast<const char*>(&count), 4);
        for (const std::string& name : names_) {
            const Record& r = records_.at(name);
            const std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
            const std::uint32_t ndim = static_cast<std::uint32_t>(r.dims.size());
            f.write(reinterpret_cast<const char*>(&nlen), 4);
            f.write(name.data(), nlen);
            f.write(reinterpret_cast<const char*>(&r.dtype), 4);
            f.write(reinterpret_cast<const char*>(&ndim), 4);
            for (std::int64_t d : r.dims) f.write(reinterpret_cast<const char*>(&d), 8);
            f.write(r.payload.data(), static_cast<std::streamsize>(r.payload.size()));
        }
        require(f.good(), "write failed for checkpoint ", path);
    }

private:
    void add(const std::string& name, Record&& r) {
        require(records_.emplace(name, std::move(r)).second, "duplicate record ", name);
        names_.push_back(name);
    }

    std::vector<std::string> names_;  // insertion order, for stable bytes
    std::map<std::string, Record> records_;
};

class Reader {
public:
    CheckpointMeta meta;

    explicit Reader(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        require(f.good(), "cannot read checkpoint ", path);
        char magic[8];
        f.read(magic, 8);
        require(f.good() && std::memcmp(magic, kCheckpointMagic, 8) == 0,
                "not a checkpoint file: ", path);
        std::uint32_t count = 0;
        f.read(reinterpret_cast<char*>(&meta.version), 4);
        require(meta.version == kCheckpointVersion, "unsupported checkpoint version ",
                meta.version);
        f.read(reinterpret_cast<char*>(&meta.config_hash), 8);
        f.read(reinterpret_cast<char*>(&meta.seed), 8);
        f.read(reinterpret_cast<char*>(&count), 4);
        for (std::uint32_t i = 0; i < count; ++i) {
            std::uint32_t nlen = 0, ndim = 0;
            f.read(reinterpret_cast<char*>(&nlen), 4);
            require(f.good() && nlen < 4096, "corrupt checkpoint record name");
            std::string name(nlen, '\0');
            f.read(name.data(), nlen);
            Record r;
            f.read(reinterpret_cast<char*>(&r.dtype), 4);
            f.read(reinterpret_cast<char*>(&ndim), 4);
            require(f.good() && r.dtype <= 1 && ndim <= 8, "corrupt checkpoint record ", name);
            r.dims.resize(ndim);
            for (std::uint32_t d = 0; d < ndim; ++d)
                f.read(reinterpret_cast<char*>(&r.dims[d]), 8);
            r.payload.resize(static_cast<std::size_t>(r.numel()) * (r.dtype == 0 ? 4 : 8));
            f.read(r.payload.data(), static_cast<std::streamsize>(r.payload.size()));
            require(f.good(), "truncated checkpoint record ", name);
            records_.emplace(std::move(name), std::move(r));
        }
    }

    bool has(const std::string& name) const { return records_.count(name) != 0; }

    const Record& rec(const std::string& name) const {
        auto it = records_.find(name);
        require(it != records_.end(), "checkpoint missing record ", name);
        return it->second;
    }

    std::vector<float> f32(const std::string& name) const {
        const Record& r = rec(name);
        require(r.dtype == 0, "record ", name, " is not f32");
        std::vector<float> v(static_cast<std::size_t>(r.numel()));
        std::memcpy(v.data(), r.payload.data(), r.payload.size());
        return v;
    }

    Tensor f32_tensor(const std::string& name) const {
        const Record& r = rec(name);
        require(r.dtype == 0, "record ", name, " is not f32");
        Shape shape(r.dims.begin(), r.dims.end());
        std::vector<float> v(static_cast<std::size_t>(r.numel()));
        std::memcpy(v.data(), r.payload.data(), r.payload.size());
        return Tensor::from_data(shape, std::move(v));
    }

    std::vector<double> f64(const std::string& name) const {
        const Record& r = rec(name);
        require(r.dtype == 1, "record ", name, " is not f64");
        std::vector<double> v(static_cast<std::size_t>(r.numel()));
        std::memcpy(v.data(), r.payload.data(), r.payload.size());
        return v;
    }

private:
    std::map<std::string, Record> records_;
};

inline std::vector<double> pack_qparams(const std::vector<QuantParams>& ch) {
    std::vector<double> v;
    v.reserve(ch.size() * 5);
    for (const QuantParams& p : ch) {
        v.push_back(p.scale);
        v.push_back(p.zero);
        v.push_back(static_cast<double>(p.bits));
        v.push_back(static_cast<double>(p.qmin));
        v.push_back(static_cast<double>(p.qmax));
    }
    return v;
}

inline std::vector<QuantParams> unpack_qparams(const std::vector<double>& v) {
    require(v.size() % 5 == 0, "bad quantizer record size ", v.size());
    std::vector<QuantParams> ch(v.size() / 5);
    for (std::size_t i = 0; i < ch.size(); ++i) {
        ch[i].scale = v[5 * i];
        ch[i].zero = v[5 * i + 1];
        ch[i].bits = static_cast<int>(v[5 * i + 2]);
        ch[i].qmin = static_cast<int>(v[5 * i + 3]);
        ch[i].qmax = static_cast<int>(v[5 * i + 4]);
    }
    return ch;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const RefNet& net,
                            std::uint64_t config_hash, std::uint64_t seed) {
    ckpt_detail::Writer w;
    const RefNetConfig& c = net.cfg;
    w.f64("net/config", {static_cast<double>(c.height), static_cast<double>(c.width),
                         static_cast<double>(c.base_channels), static_cast<double>(c.encoder_stages),
                         static_cast<double>(c.gru_hidden), static_cast<double>(c.seed)});
    for (const ConvLayer& l : net.layers) {
        const std::string p = "layer/" + l.name;
        w.f32_tensor(p + "/w", l.w);
        w.f32_tensor(p + "/b", l.b);
        if (l.has_bn) {
            w.f32_tensor(p + "/bn_gamma", l.bn_gamma);
            w.f32_tensor(p + "/bn_beta", l.bn_beta);
            w.f32(p + "/bn_mean", {static_cast<std::int64_t>(l.bn_mean.size())}, l.bn_mean.data());
            w.f32(p + "/bn_var", {static_cast<std::int64_t>(l.bn_var.size())}, l.bn_var.data());
            w.f64(p + "/bn_state", {l.folded ? 1.0 : 0.0, static_cast<double>(l.bn_eps)});
        }
        w.f64(p + "/wmode", {static_cast<double>(static_cast<int>(l.wmode))});
        if (!l.wq.empty()) w.f64(p + "/wq", ckpt_detail::pack_qparams(l.wq));
        if (l.round_mask.defined()) w.f32_tensor(p + "/round_mask", l.round_mask);
        if (!l.frozen.empty()) {
            std::vector<std::int64_t> dims(l.frozen.shape.begin(), l.frozen.shape.end());
            w.f32(p + "/frozen_q", dims, l.frozen.q.data());
            w.f64(p + "/frozen_ch", ckpt_detail::pack_qparams(l.frozen.ch));
        }
        if (l.corr_enabled) {
            w.f64(p + "/corr", {static_cast<double>(l.corr_gamma.data()[0]),
                                static_cast<double>(l.corr_beta.data()[0]),
                                l.corr_absorbed ? 1.0 : 0.0});
        }
    }
    for (const QPoint& q : net.qpoints) {
        const std::string p = "qpoint/" + q.name;
        if (q.scale.defined()) w.f32_tensor(p + "/scale", q.scale);
        w.f64(p + "/qp", {q.qp.scale, q.qp.zero, static_cast<double>(q.qp.bits),
                          static_cast<double>(q.qp.qmin), static_cast<double>(q.qp.qmax),
                          q.calibrated ? 1.0 : 0.0});
    }
    w.write(path, config_hash, seed);
}

struct LoadedCheckpoint {
    RefNet net;
    CheckpointMeta meta;
};

// Rebuilds the network stored at `path`. When `expect_hash` is nonzero and
// differs from the stored hash, a warning goes to stderr and
// meta.hash_mismatch is set; loading proceeds regardless.
inline LoadedCheckpoint load_checkpoint(const std::string& path, std::uint64_t expect_hash = 0) {
    ckpt_detail::Reader r(path);
    const std::vector<double> cv = r.f64("net/config");
    require(cv.size() == 6, "bad net/config record");
    RefNetConfig cfg;
    cfg.height = static_cast<int>(cv[0]);
    cfg.width = static_cast<int>(cv[1]);
    cfg.base_channels = static_cast<int>(cv[2]);
    cfg.encoder_stages = static_cast<int>(cv[3]);
    cfg.gru_hidden = static_cast<int>(cv[4]);
    cfg.seed = static_cast<std::uint64_t>(cv[5]);

    LoadedCheckpoint out{RefNet(cfg), r.meta};
    if (expect_hash != 0 && expect_hash != r.meta.config_hash) {
        out.meta.hash_mismatch = true;
        std::fprintf(stderr,
                     "warning: checkpoint %s was produced under a different config "
                     "(hash %016llx, expected %016llx)\n",
                     path.c_str(), static_cast<unsigned long long>(r.meta.config_hash),
                     static_cast<unsigned long long>(expect_hash));
    }

    RefNet& net = out.net;
    for (ConvLayer& l : net.layers) {
        const std::string p = "layer/" + l.name;
        l.w = r.f32_tensor(p + "/w");
        l.b = r.f32_tensor(p + "/b");
        if (l.has_bn) {
            l.bn_gamma = r.f32_tensor(p + "/bn_gamma");
            l.bn_beta = r.f32_tensor(p + "/bn_beta");
            l.bn_mean = r.f32(p + "/bn_mean");
            l.bn_var = r.f32(p + "/bn_var");
            const std::vector<double> st = r.f64(p + "/bn_state");
            require(st.size() == 2, "bad bn_state for ", l.name);
            l.folded = st[0] != 0.0;
            l.bn_eps = static_cast<float>(st[1]);
        }
        const std::vector<double> wm = r.f64(p + "/wmode");
        require(wm.size() == 1, "bad wmode for ", l.name);
        l.wmode = static_cast<WeightMode>(static_cast<int>(wm[0]));
        if (r.has(p + "/wq")) l.wq = ckpt_detail::unpack_qparams(r.f64(p + "/wq"));
        if (r.has(p + "/round_mask")) l.round_mask = r.f32_tensor(p + "/round_mask");
        if (r.has(p + "/frozen_q")) {
            Tensor q = r.f32_tensor(p + "/frozen_q");
            l.frozen.shape = q.shape();
            const auto qv = q.data();
            l.frozen.q.assign(qv.begin(), qv.end());
            l.frozen.ch = ckpt_detail::unpack_qparams(r.f64(p + "/frozen_ch"));
        }
        if (r.has(p + "/corr")) {
            const std::vector<double> cr = r.f64(p + "/corr");
            require(cr.size() == 3, "bad corr record for ", l.name);
            l.corr_gamma = Tensor::from_data({1}, {static_cast<float>(cr[0])});
            l.corr_beta = Tensor::from_data({1}, {static_cast<float>(cr[1])});
            l.corr_enabled = true;
            l.corr_absorbed = cr[2] != 0.0;
        }
        l.dequant_cache = Tensor();
    }
    for (QPoint& q : net.qpoints) {
        const std::string p = "qpoint/" + q.name;
        if (r.has(p + "/scale")) q.scale = r.f32_tensor(p + "/scale");
        const std::vector<double> qp = r.f64(p + "/qp");
        require(qp.size() == 6, "bad qp record for ", q.name);
        q.qp.scale = qp[0];
        q.qp.zero = qp[1];
        q.qp.bits = static_cast<int>(qp[2]);
        q.qp.qmin = static_cast<int>(qp[3]);
        q.qp.qmax = static_cast<int>(qp[4]);
        q.calibrated = qp[5] != 0.0;
    }
    return out;
}

}  // namespace ptq4vm
