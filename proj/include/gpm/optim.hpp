#pragma once

#include <cstdint>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "gpm/tensor.hpp"

namespace gpm {

// Named trainable parameters in fixed registration order, with gradient
// accumulators and AdamW moments alongside.
template <typename S>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Mat<S> value;
        Mat<S> grad;
        Mat<S> m1;
        Mat<S> m2;
    };

    int add(std::string name, Mat<S> init) {
        Entry e;
        e.name = std::move(name);
        e.grad = Mat<S>::Zero(init.rows(), init.cols());
        e.m1 = Mat<S>::Zero(init.rows(), init.cols());
        e.m2 = Mat<S>::Zero(init.rows(), init.cols());
        e.value = std::move(init);
        entries_.push_back(std::move(e));
        return static_cast<int>(entries_.size()) - 1;
    }

    size_t size() const { return entries_.size(); }
    Entry& operator[](size_t i) { return entries_[i]; }
    const Entry& operator[](size_t i) const { return entries_[i]; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grad() {
        for (auto& e : entries_) e.grad.setZero();
    }

    int64_t num_scalars() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    std::vector<Mat<S>> snapshot_values() const {
        std::vector<Mat<S>> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.value);
        return out;
    }

    void restore_values(const std::vector<Mat<S>>& vals) {
        detail::check(vals.size() == entries_.size(), "restore: entry count mismatch");
        for (size_t i = 0; i < vals.size(); ++i) entries_[i].value = vals[i];
    }

    uint64_t step = 0;  // AdamW step counter

private:
    std::vector<Entry> entries_;
};

// Linear warmup to base_lr over warmup_steps, constant afterwards.
inline double warmup_lr(uint64_t step, double base_lr, uint64_t warmup_steps) {
    if (warmup_steps == 0) return base_lr;
    if (step >= warmup_steps) return base_lr;
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

// Global-norm gradient clipping across every entry. Returns the pre-clip
// norm.
template <typename S>
double clip_grad_norm(ParamStore<S>& params, double max_norm) {
    detail::check(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& e : params.entries()) sq += static_cast<double>(e.grad.squaredNorm());
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const S s = static_cast<S>(max_norm / norm);
        for (auto& e : params.entries()) e.grad *= s;
    }
    return norm;
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam step with bias-corrected moments. Decay is
// applied to the parameters directly, never to the moments.
template <typename S>
void adamw_step(ParamStore<S>& params, double lr, const AdamWConfig& cfg = {}) {
    params.step += 1;
    const double t = static_cast<double>(params.step);
    const S bc1 = static_cast<S>(1.0 - std::pow(cfg.beta1, t));
    const S bc2 = static_cast<S>(1.0 - std::pow(cfg.beta2, t));
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    const S eps = static_cast<S>(cfg.eps);
    for (auto& e : params.entries()) {
        e.m1 = b1 * e.m1 + (S(1) - b1) * e.grad;
        e.m2 = b2 * e.m2 + (S(1) - b2) * e.grad.cwiseProduct(e.grad);
        if (cfg.weight_decay != 0.0) e.value -= static_cast<S>(lr * cfg.weight_decay) * e.value;
        Mat<S> mhat = e.m1 / bc1;
        Mat<S> vhat = e.m2 / bc2;
        e.value.array() -= static_cast<S>(lr) * mhat.array() / (vhat.array().sqrt() + eps);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic, u64 header length, JSON header (names, shapes,
// dtype, config hash, seed), then raw little-endian values per entry.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kCkptMagic[4] = {'G', 'P', 'M', 'W'};
}

template <typename S>
void save_checkpoint(const ParamStore<S>& params, const std::string& path, uint64_t config_hash, uint64_t graph_hash,
                     uint64_t seed) {
    nlohmann::ordered_json h;
    h["dtype"] = sizeof(S) == 4 ? "f32" : "f64";
    h["config_hash"] = config_hash;
    h["graph_hash"] = graph_hash;
    h["seed"] = seed;
    h["step"] = params.step;
    nlohmann::ordered_json names = nlohmann::ordered_json::array();
    for (const auto& e : params.entries())
        names.push_back({{"name", e.name}, {"rows", e.value.rows()}, {"cols", e.value.cols()}});
    h["params"] = std::move(names);
    std::string header = h.dump();

    std::ofstream out(path, std::ios::binary);
    detail::check(out.good(), "cannot write checkpoint");
    out.write(detail::kCkptMagic, 4);
    uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& e : params.entries())
        out.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(sizeof(S) * e.value.size()));
    detail::check(out.good(), "checkpoint write failure");
}

struct CheckpointInfo {
    uint64_t config_hash = 0;
    uint64_t graph_hash = 0;
    uint64_t seed = 0;
};

template <typename S>
CheckpointInfo load_checkpoint(ParamStore<S>& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::check(in.good(), "cannot open checkpoint");
    char magic[4];
    in.read(magic, 4);
    detail::check(in.good() && std::equal(magic, magic + 4, detail::kCkptMagic), "not a checkpoint file");
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    auto h = nlohmann::json::parse(header);
    detail::check(h.at("dtype").get<std::string>() == (sizeof(S) == 4 ? "f32" : "f64"),
                  "checkpoint dtype mismatch");
    const auto& names = h.at("params");
    detail::check(names.size() == params.size(), "checkpoint parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& e = params[i];
        detail::check(names[i].at("name").get<std::string>() == e.name, "checkpoint parameter name mismatch");
        detail::check(names[i].at("rows").get<Eigen::Index>() == e.value.rows() &&
                          names[i].at("cols").get<Eigen::Index>() == e.value.cols(),
                      "checkpoint parameter shape mismatch");
        in.read(reinterpret_cast<char*>(e.value.data()), static_cast<std::streamsize>(sizeof(S) * e.value.size()));
    }
    detail::check(in.good(), "truncated checkpoint");
    CheckpointInfo info;
    info.config_hash = h.at("config_hash").get<uint64_t>();
    info.graph_hash = h.at("graph_hash").get<uint64_t>();
    info.seed = h.at("seed").get<uint64_t>();
    params.step = h.value("step", uint64_t{0});
    return info;
}

template <typename S>
std::string checkpoint_to_json(const ParamStore<S>& params) {
    nlohmann::ordered_json j;
    for (const auto& e : params.entries()) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (Eigen::Index r = 0; r < e.value.rows(); ++r) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (Eigen::Index c = 0; c < e.value.cols(); ++c) row.push_back(static_cast<double>(e.value(r, c)));
            rows.push_back(std::move(row));
        }
        j[e.name] = std::move(rows);
    }
    return j.dump(2);
}

}  // namespace gpm
