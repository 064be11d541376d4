#pragma once

// Run configuration: one flat key=value text format covering every knob of
// the pipeline, fully defaulted so an empty config runs end to end.
//
// Precedence is built-ins < config file < command-line flags; the CLI layers
// the last step, this header handles the first two.
//
// One master seed drives everything. Module seeds are derived from it by
// name, so runs with the same config are bit-identical and runs that differ
// only in `seed` decorrelate every stage at once.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>

#include "ptq4vm/calib.hpp"
#include "ptq4vm/common.hpp"
#include "ptq4vm/flow.hpp"
#include "ptq4vm/refnet.hpp"
#include "ptq4vm/synthvid.hpp"

namespace ptq4vm {

struct RunConfig {
    std::string out_dir = "runs";
    std::string data_dir = "data";
    std::uint64_t seed = 7;
    std::string flow = "gt";  // gt | lk
    int threads = 0;          // 0 = hardware concurrency; PTQ4VM_THREADS caps

    int calib_clips = 64;
    int calib_frames = 4;
    int eval_clips = 16;
    int eval_frames = 20;
    int height = 64;
    int width = 64;
    int min_sprites = 1;
    int max_sprites = 3;
    double max_speed = 4.0;

    int base_channels = 16;
    int encoder_stages = 3;
    int gru_hidden = 32;

    int pretrain_epochs = 60;
    double pretrain_lr = 1e-3;
    double pretrain_target_mad = 0.05;

    int biq_iterations = 2000;
    int biq_batch = 8;
    double biq_lr = 4e-5;
    double biq_reg_weight = 0.01;
    double biq_b_start = 20.0;
    double biq_b_end = 2.0;

    int gac_epochs = 50;
    double gac_lr = 1e-4;
    double gac_lambda = 0.05;
};

namespace config_detail {

struct Field {
    enum Kind { Int, Double, String, Seed } kind;
    void* ptr;
};

inline std::map<std::string, Field> field_map(RunConfig& c) {
    return {
        {"out_dir", {Field::String, &c.out_dir}},
        {"data_dir", {Field::String, &c.data_dir}},
        {"seed", {Field::Seed, &c.seed}},
        {"flow", {Field::String, &c.flow}},
        {"threads", {Field::Int, &c.threads}},
        {"calib_clips", {Field::Int, &c.calib_clips}},
        {"calib_frames", {Field::Int, &c.calib_frames}},
        {"eval_clips", {Field::Int, &c.eval_clips}},
        {"eval_frames", {Field::Int, &c.eval_frames}},
        {"height", {Field::Int, &c.height}},
        {"width", {Field::Int, &c.width}},
        {"min_sprites", {Field::Int, &c.min_sprites}},
        {"max_sprites", {Field::Int, &c.max_sprites}},
        {"max_speed", {Field::Double, &c.max_speed}},
        {"base_channels", {Field::Int, &c.base_channels}},
        {"encoder_stages", {Field::Int, &c.encoder_stages}},
        {"gru_hidden", {Field::Int, &c.gru_hidden}},
        {"pretrain_epochs", {Field::Int, &c.pretrain_epochs}},
        {"pretrain_lr", {Field::Double, &c.pretrain_lr}},
        {"pretrain_target_mad", {Field::Double, &c.pretrain_target_mad}},
        {"biq_iterations", {Field::Int, &c.biq_iterations}},
        {"biq_batch", {Field::Int, &c.biq_batch}},
        {"biq_lr", {Field::Double, &c.biq_lr}},
        {"biq_reg_weight", {Field::Double, &c.biq_reg_weight}},
        {"biq_b_start", {Field::Double, &c.biq_b_start}},
        {"biq_b_end", {Field::Double, &c.biq_b_end}},
        {"gac_epochs", {Field::Int, &c.gac_epochs}},
        {"gac_lr", {Field::Double, &c.gac_lr}},
        {"gac_lambda", {Field::Double, &c.gac_lambda}},
    };
}

// Key order for canonical text; pinned so the config hash is stable.
inline const std::vector<std::string>& field_order() {
    static const std::vector<std::string> order = {
        "out_dir", "data_dir", "seed", "flow", "threads",
        "calib_clips", "calib_frames", "eval_clips", "eval_frames",
        "height", "width", "min_sprites", "max_sprites", "max_speed",
        "base_channels", "encoder_stages", "gru_hidden",
        "pretrain_epochs", "pretrain_lr", "pretrain_target_mad",
        "biq_iterations", "biq_batch", "biq_lr", "biq_reg_weight",
        "biq_b_start", "biq_b_end",
        "gac_epochs", "gac_lr", "gac_lambda",
    };
    return order;
}

inline void set_field(const Field& f, const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        switch (f.kind) {
            case Field::Int: {
                const int v = std::stoi(value, &used);
                require(used == value.size(), "trailing junk");
                *static_cast<int*>(f.ptr) = v;
                break;
            }
            case Field::Double: {
                const double v = std::stod(value, &used);
                require(used == value.size(), "trailing junk");
                *static_cast<double*>(f.ptr) = v;
                break;
            }
            case Field::Seed: {
                const std::uint64_t v = std::stoull(value, &used);
                require(used == value.size(), "trailing junk");
                *static_cast<std::uint64_t*>(f.ptr) = v;
                break;
            }
            case Field::String:
                *static_cast<std::string*>(f.ptr) = value;
                break;
        }
    } catch (const std::exception&) {
        throw std::invalid_argument("bad value for config key '" + key + "': " + value);
    }
}

inline std::string field_text(const Field& f) {
    char buf[64];
    switch (f.kind) {
        case Field::Int:
            std::snprintf(buf, sizeof buf, "%d", *static_cast<const int*>(f.ptr));
            return buf;
        case Field::Double:
            std::snprintf(buf, sizeof buf, "%.17g", *static_cast<const double*>(f.ptr));
            return buf;
        case Field::Seed:
            std::snprintf(buf, sizeof buf, "%llu",
                          static_cast<unsigned long long>(*static_cast<const std::uint64_t*>(f.ptr)));
            return buf;
        case Field::String:
            return *static_cast<const std::string*>(f.ptr);
    }
    return "";
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace config_detail

// Parses `key = value` lines; '#' starts a comment; blank lines ignored.
// Unknown keys are an error so a typo cannot silently fall back to defaults.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
    auto fields = config_detail::field_map(cfg);
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        " is not key = value: " + line);
        const std::string key = config_detail::trim(line.substr(0, eq));
        const std::string value = config_detail::trim(line.substr(eq + 1));
        auto it = fields.find(key);
        if (it == fields.end())
            throw std::invalid_argument("unknown config key '" + key + "' (line " +
                                        std::to_string(lineno) + ")");
        config_detail::set_field(it->second, key, value);
    }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "cannot read config file ", path);
    std::ostringstream ss;
    ss << f.rdbuf();
    apply_config_text(cfg, ss.str());
}

// Canonical text: every key in pinned order. Doubles as the config artifact
// written into run directories and as the hash input for checkpoints.
inline std::string config_text(const RunConfig& cfg) {
    auto fields = config_detail::field_map(const_cast<RunConfig&>(cfg));
    std::string out;
    for (const std::string& key : config_detail::field_order()) {
        out += key;
        out += " = ";
        out += config_detail::field_text(fields.at(key));
        out += "\n";
    }
    return out;
}

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(config_text(cfg)); }

// ---- resolved module configs, seeds derived from the master seed ----

inline DatasetConfig dataset_config(const RunConfig& c) {
    DatasetConfig d;
    d.dir = c.data_dir;
    d.calib_clips = c.calib_clips;
    d.calib_frames = c.calib_frames;
    d.eval_clips = c.eval_clips;
    d.eval_frames = c.eval_frames;
    d.height = c.height;
    d.width = c.width;
    d.min_sprites = c.min_sprites;
    d.max_sprites = c.max_sprites;
    d.max_speed = static_cast<float>(c.max_speed);
    d.seed = mix_seed(c.seed, fnv1a64("data"));
    return d;
}

inline RefNetConfig net_config(const RunConfig& c) {
    RefNetConfig n;
    n.height = c.height;
    n.width = c.width;
    n.base_channels = c.base_channels;
    n.encoder_stages = c.encoder_stages;
    n.gru_hidden = c.gru_hidden;
    n.seed = mix_seed(c.seed, fnv1a64("net"));
    return n;
}

inline PretrainConfig pretrain_config(const RunConfig& c) {
    PretrainConfig p;
    p.epochs = c.pretrain_epochs;
    p.lr = c.pretrain_lr;
    p.target_mad = c.pretrain_target_mad;
    p.seed = mix_seed(c.seed, fnv1a64("pretrain"));
    return p;
}

inline BIQConfig biq_config(const RunConfig& c) {
    BIQConfig b;
    b.iterations = c.biq_iterations;
    b.batch = c.biq_batch;
    b.lr = c.biq_lr;
    b.reg_weight = c.biq_reg_weight;
    b.b_start = c.biq_b_start;
    b.b_end = c.biq_b_end;
    b.seed = mix_seed(c.seed, fnv1a64("stage1"));
    return b;
}

inline GACConfig gac_config(const RunConfig& c) {
    GACConfig g;
    g.epochs = c.gac_epochs;
    g.lr = c.gac_lr;
    g.lambda_ofa = c.gac_lambda;
    g.seed = mix_seed(c.seed, fnv1a64("stage2"));
    return g;
}

inline FlowSource flow_source(const RunConfig& c) {
    if (c.flow == "gt") return FlowSource::GroundTruth;
    if (c.flow == "lk") return FlowSource::Lk;
    throw std::invalid_argument("flow must be 'gt' or 'lk', got '" + c.flow + "'");
}

// Worker count for clip-level parallelism: `threads` (0 = hardware), then
// capped by the PTQ4VM_THREADS environment variable when it is set.
inline int resolve_threads(const RunConfig& c) {
    int n = c.threads > 0 ? c.threads
                          : static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("PTQ4VM_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end && *end == '\0' && cap >= 1 && cap < n) n = static_cast<int>(cap);
    }
    return n;
}

}  // namespace ptq4vm
