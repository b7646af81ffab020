#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "gpm/graph.hpp"
#include "gpm/optim.hpp"
#include "gpm/pe.hpp"
#include "gpm/tensor.hpp"
#include "gpm/walk.hpp"

namespace gpm {

enum class SeqKind { Mean, Gru, Transformer };
enum class ReadoutKind { Mean, ClassToken };

inline SeqKind seq_kind_from_string(const std::string& s) {
    if (s == "mean" || s == "Mean" || s == "MEAN") return SeqKind::Mean;
    if (s == "gru" || s == "Gru" || s == "GRU") return SeqKind::Gru;
    if (s == "transformer" || s == "Transformer") return SeqKind::Transformer;
    throw std::runtime_error("unknown encoder kind: " + s);
}

inline std::string seq_kind_to_string(SeqKind k) {
    switch (k) {
        case SeqKind::Mean: return "mean";
        case SeqKind::Gru: return "gru";
        case SeqKind::Transformer: return "transformer";
    }
    return "mean";
}

struct ModelConfig {
    int hidden_dim = 256;
    SeqKind sp_kind = SeqKind::Transformer;
    SeqKind ap_kind = SeqKind::Gru;
    double lambda = 1.0;

    int heads = 4;
    int layers = 1;
    int d_out = 0;  // per-head query dim; 0 selects hidden_dim / heads
    bool use_class_token = false;
    ReadoutKind readout = ReadoutKind::Mean;
    bool prenorm = false;
    double dropout = 0.0;
    int ffn_mult = 2;

    int max_scale = 8;      // anonymous-path row width is max_scale + 1
    int node_feat_dim = 0;  // d_n
    int edge_feat_dim = 0;  // d_e (0 when the graph has no edge features)
    int pe_dim = 0;
    int out_dim = 1;  // classes, or 1 for regression / 2 for link scoring

    int step_dim() const { return node_feat_dim + edge_feat_dim + pe_dim; }
    int head_dim() const { return d_out > 0 ? d_out : hidden_dim / heads; }

    void validate() const {
        detail::check(hidden_dim >= 1, "config: hidden_dim must be >= 1");
        detail::check(lambda >= 0.0, "config: lambda must be >= 0");
        detail::check(heads >= 1 && layers >= 1, "config: heads/layers must be >= 1");
        detail::check(d_out > 0 || hidden_dim % heads == 0, "config: heads must divide hidden_dim");
        detail::check(ap_kind != SeqKind::Transformer, "config: anonymous encoder is Mean or GRU");
        detail::check(readout != ReadoutKind::ClassToken || use_class_token,
                      "config: class-token readout requires the class token");
        detail::check(max_scale >= 1, "config: max_scale must be >= 1");
        detail::check(out_dim >= 1, "config: out_dim must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Batched pattern features. Rows are instance-major: row b*m + j holds
// pattern j of instance b. Step tensors are step-major and zero-padded; a
// per-step {0,1} mask marks which patterns still have that step.
// ---------------------------------------------------------------------------
template <typename S>
struct PatternBatch {
    int instances = 0;
    int m = 0;
    int max_len = 0;  // largest scale present in the batch

    std::vector<Mat<S>> step_x;     // [t]: (B*m) x step_dim
    std::vector<Mat<S>> step_mask;  // [t]: (B*m) x 1
    std::vector<Mat<S>> anon_rows;  // [t]: (B*m) x (max_scale+1)
    Mat<S> inv_counts;              // (B*m) x 1, 1/(scale+1)

    struct ScaleGroup {
        int len;                // walk length (steps = len+1)
        std::vector<int> rows;  // pattern rows at this scale
    };
    std::vector<ScaleGroup> groups;

    std::vector<const WalkPattern*> pattern_ptrs;  // row-aligned, for export
    int rows() const { return instances * m; }
};

// Builds the per-step feature rows [x_i || e_{i-1,i} || alpha_i] plus the
// anonymous-path indicator rows for a set of instances. `pattern_idx`
// selects which cached patterns participate (one list per instance, all of
// equal size).
template <typename S>
PatternBatch<S> assemble_batch(const ModelConfig& cfg, const std::vector<Graph>& graphs,
                               const std::vector<NodePE>& pe, const std::vector<const PatternSet*>& sets,
                               const std::vector<std::vector<size_t>>& pattern_idx) {
    detail::check(!sets.empty(), "assemble_batch: empty batch");
    detail::check(sets.size() == pattern_idx.size(), "assemble_batch: index list count mismatch");
    PatternBatch<S> batch;
    batch.instances = static_cast<int>(sets.size());
    batch.m = static_cast<int>(pattern_idx[0].size());
    detail::check(batch.m >= 1, "assemble_batch: empty pattern selection");

    const int rows = batch.instances * batch.m;
    batch.pattern_ptrs.resize(static_cast<size_t>(rows));
    for (size_t b = 0; b < sets.size(); ++b) {
        detail::check(pattern_idx[b].size() == static_cast<size_t>(batch.m), "assemble_batch: ragged selection");
        for (int j = 0; j < batch.m; ++j) {
            const WalkPattern& p = sets[b]->patterns.at(pattern_idx[b][static_cast<size_t>(j)]);
            detail::check(p.scale <= cfg.max_scale, "assemble_batch: pattern scale exceeds configured max");
            batch.pattern_ptrs[static_cast<size_t>(b) * batch.m + static_cast<size_t>(j)] = &p;
            batch.max_len = std::max(batch.max_len, p.scale);
        }
    }

    const int F = cfg.step_dim();
    const int zdim = cfg.max_scale + 1;
    batch.step_x.assign(static_cast<size_t>(batch.max_len) + 1, Mat<S>::Zero(rows, F));
    batch.step_mask.assign(static_cast<size_t>(batch.max_len) + 1, Mat<S>::Zero(rows, 1));
    batch.anon_rows.assign(static_cast<size_t>(batch.max_len) + 1, Mat<S>::Zero(rows, zdim));
    batch.inv_counts.resize(rows, 1);

    std::vector<std::vector<int>> group_rows(static_cast<size_t>(batch.max_len) + 1);
    for (int r = 0; r < rows; ++r) {
        const WalkPattern& p = *batch.pattern_ptrs[static_cast<size_t>(r)];
        const int b = r / batch.m;
        const Graph& g = graphs.at(static_cast<size_t>(sets[static_cast<size_t>(b)]->instance.graph));
        const auto* pe_table =
            cfg.pe_dim > 0 ? &pe.at(static_cast<size_t>(sets[static_cast<size_t>(b)]->instance.graph)) : nullptr;
        const int len = p.semantic.length();
        batch.inv_counts(r, 0) = S(1) / static_cast<S>(len + 1);
        group_rows[static_cast<size_t>(len)].push_back(r);
        if (cfg.edge_feat_dim > 0)
            detail::check(!p.semantic.arcs.empty(), "assemble_batch: edge features required but walk has no arcs");
        for (int t = 0; t <= len; ++t) {
            batch.step_mask[static_cast<size_t>(t)](r, 0) = S(1);
            auto row = batch.step_x[static_cast<size_t>(t)].row(r);
            int at = 0;
            const NodeId node = p.semantic.nodes[static_cast<size_t>(t)];
            if (cfg.node_feat_dim > 0) {
                detail::check(g.has_node_features(), "assemble_batch: node feature table absent");
                for (int c = 0; c < cfg.node_feat_dim; ++c) row(at + c) = static_cast<S>(g.node_features()(node, c));
                at += cfg.node_feat_dim;
            }
            if (cfg.edge_feat_dim > 0) {
                if (t > 0) {
                    const ArcId arc = p.semantic.arcs[static_cast<size_t>(t) - 1];
                    for (int c = 0; c < cfg.edge_feat_dim; ++c)
                        row(at + c) = static_cast<S>(g.edge_features()(arc, c));
                }
                at += cfg.edge_feat_dim;  // step 0 keeps the zero vector
            }
            if (cfg.pe_dim > 0) {
                for (int c = 0; c < cfg.pe_dim; ++c) row(at + c) = static_cast<S>(pe_table->table(node, c));
                at += cfg.pe_dim;
            }
            auto zrow = batch.anon_rows[static_cast<size_t>(t)].row(r);
            for (int jj = 0; jj <= len; ++jj)
                if (p.anonymous.labels[static_cast<size_t>(t)] == p.anonymous.labels[static_cast<size_t>(jj)])
                    zrow(jj) = S(1);
        }
    }
    for (int len = 0; len <= batch.max_len; ++len)
        if (!group_rows[static_cast<size_t>(len)].empty())
            batch.groups.push_back({len, std::move(group_rows[static_cast<size_t>(len)])});
    return batch;
}

// Per-layer attention weights, stacked (instances*heads*block) x block as
// emitted by the attention op. block counts the class token when present.
template <typename S>
struct AttentionRecord {
    int heads = 0;
    int block = 0;
    std::vector<Mat<S>> layers;

    // Head-averaged attention from the class-token row of instance b to
    // each of its patterns, final layer.
    std::vector<double> class_token_scores(int b) const {
        detail::check(!layers.empty() && block >= 2, "attention record: class token absent");
        const Mat<S>& last = layers.back();
        std::vector<double> s(static_cast<size_t>(block) - 1, 0.0);
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index row = (static_cast<Eigen::Index>(b) * heads + h) * block;
            for (int j = 1; j < block; ++j) s[static_cast<size_t>(j) - 1] += static_cast<double>(last(row, j));
        }
        for (auto& x : s) x /= heads;
        return s;
    }
};

struct RankedPattern {
    int index = 0;
    double score = 0.0;
};

// Patterns of one instance ranked by head-averaged final-layer class-token
// attention; ties break by pattern index.
template <typename S>
std::vector<RankedPattern> top_patterns(const AttentionRecord<S>& attn, int instance, int top_k) {
    auto scores = attn.class_token_scores(instance);
    std::vector<RankedPattern> ranked(scores.size());
    for (size_t j = 0; j < scores.size(); ++j) ranked[j] = {static_cast<int>(j), scores[j]};
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedPattern& a, const RankedPattern& b) {
        return a.score > b.score;
    });
    if (top_k >= 0 && static_cast<size_t>(top_k) < ranked.size()) ranked.resize(static_cast<size_t>(top_k));
    return ranked;
}

template <typename S>
struct ForwardResult {
    VarId logits = -1;
    VarId embeddings = -1;
    std::vector<VarId> param_leaves;
    AttentionRecord<S> attn;
};

// ---------------------------------------------------------------------------
// The pattern machine: per-step projection, semantic/anonymous sequence
// encoders, transformer identifier over the pattern set, readout, head.
// ---------------------------------------------------------------------------
template <typename S>
class Model {
public:
    ModelConfig cfg;
    ParamStore<S> params;

    Model() = default;
    explicit Model(ModelConfig c) : cfg(std::move(c)) { cfg.validate(); }

    void init(uint64_t seed) {
        cfg.validate();
        Rng rng(hash_mix(seed, 0x6d6f64656cull));
        auto w = [&](const std::string& name, int rows, int cols) {
            Mat<S> m(rows, cols);
            const double std = rows > 0 ? 1.0 / std::sqrt(static_cast<double>(rows)) : 1.0;
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(rng.normal() * std);
            return params.add(name, std::move(m));
        };
        auto zeros = [&](const std::string& name, int rows, int cols) {
            return params.add(name, Mat<S>::Zero(rows, cols));
        };
        auto ones = [&](const std::string& name, int rows, int cols) {
            return params.add(name, Mat<S>::Ones(rows, cols));
        };
        const int D = cfg.hidden_dim;

        sp_proj_W_ = w("sp.proj.W", cfg.step_dim(), D);
        sp_proj_b_ = zeros("sp.proj.b", 1, D);
        if (cfg.sp_kind == SeqKind::Gru) sp_gru_ = add_gru("sp.gru", D, D, w, zeros);
        if (cfg.sp_kind == SeqKind::Transformer)
            sp_block_ = add_block("sp.tr", D, cfg.heads, cfg.head_dim(), w, zeros, ones);

        if (cfg.lambda > 0.0) {
            ap_proj_W_ = w("ap.proj.W", cfg.max_scale + 1, D);
            ap_proj_b_ = zeros("ap.proj.b", 1, D);
            if (cfg.ap_kind == SeqKind::Gru) ap_gru_ = add_gru("ap.gru", D, D, w, zeros);
        }

        id_blocks_.clear();
        for (int l = 0; l < cfg.layers; ++l)
            id_blocks_.push_back(add_block("id.L" + std::to_string(l), D, cfg.heads, cfg.head_dim(), w, zeros, ones));

        if (cfg.use_class_token) {
            Mat<S> ct(1, D);
            for (Eigen::Index c = 0; c < D; ++c) ct(0, c) = static_cast<S>(rng.normal() * 0.02);
            cls_ = params.add("cls", std::move(ct));
        }
        head_W_ = w("head.W", D, cfg.out_dim);
        head_b_ = zeros("head.b", 1, cfg.out_dim);

        sinusoid_ = make_sinusoid(cfg.max_scale + 1, D);
    }

    struct Ctx {
        Tape<S>* tape = nullptr;
        std::vector<VarId> leaves;
        bool training = false;
        Rng* rng = nullptr;
        AttentionRecord<S>* attn = nullptr;
    };

    Ctx make_ctx(Tape<S>& t, bool training = false, Rng* rng = nullptr, AttentionRecord<S>* attn = nullptr) const {
        Ctx ctx;
        ctx.tape = &t;
        ctx.training = training;
        ctx.rng = rng;
        ctx.attn = attn;
        ctx.leaves.reserve(params.size());
        for (const auto& e : params.entries()) ctx.leaves.push_back(t.leaf(&e.value, true));
        return ctx;
    }

    ForwardResult<S> forward(Tape<S>& t, const PatternBatch<S>& batch, bool training = false, Rng* rng = nullptr,
                             bool record_attention = false) const {
        ForwardResult<S> out;
        Ctx ctx = make_ctx(t, training, rng, record_attention ? &out.attn : nullptr);
        VarId p = encode_patterns(ctx, batch);
        VarId pp = identify(ctx, p, batch.instances, batch.m);
        out.embeddings = readout(ctx, pp, batch.instances, batch.m);
        out.logits = predict(ctx, out.embeddings);
        out.param_leaves = ctx.leaves;
        return out;
    }

    // p = rho_s(w) + lambda * rho_a(phi), one row per pattern.
    VarId encode_patterns(Ctx& ctx, const PatternBatch<S>& batch) const {
        VarId s = encode_semantic(ctx, batch);
        if (cfg.lambda == 0.0) return s;  // anonymous branch never evaluated
        VarId a = encode_anonymous(ctx, batch);
        return add(*ctx.tape, s, scale(*ctx.tape, a, static_cast<S>(cfg.lambda)));
    }

    VarId encode_semantic(Ctx& ctx, const PatternBatch<S>& batch) const {
        Tape<S>& t = *ctx.tape;
        std::vector<VarId> h(batch.step_x.size());
        for (size_t st = 0; st < batch.step_x.size(); ++st) {
            VarId x = t.leaf(&batch.step_x[st], false);
            h[st] = linear(t, x, ctx.leaves[static_cast<size_t>(sp_proj_W_)], ctx.leaves[static_cast<size_t>(sp_proj_b_)]);
        }
        switch (cfg.sp_kind) {
            case SeqKind::Mean: return encode_steps_mean(ctx, batch, h);
            case SeqKind::Gru: return encode_steps_gru(ctx, batch, h, sp_gru_);
            case SeqKind::Transformer: return encode_steps_transformer(ctx, batch, h);
        }
        detail::check(false, "unreachable");
        return -1;
    }

    VarId encode_anonymous(Ctx& ctx, const PatternBatch<S>& batch) const {
        detail::check(cfg.lambda > 0.0, "encode_anonymous: branch disabled (lambda 0)");
        Tape<S>& t = *ctx.tape;
        std::vector<VarId> h(batch.anon_rows.size());
        for (size_t st = 0; st < batch.anon_rows.size(); ++st) {
            VarId z = t.leaf(&batch.anon_rows[st], false);
            h[st] = linear(t, z, ctx.leaves[static_cast<size_t>(ap_proj_W_)], ctx.leaves[static_cast<size_t>(ap_proj_b_)]);
        }
        if (cfg.ap_kind == SeqKind::Mean) return encode_steps_mean(ctx, batch, h);
        return encode_steps_gru(ctx, batch, h, ap_gru_);
    }

    // Transformer over the pattern set; class token prepended when enabled.
    VarId identify(Ctx& ctx, VarId p, int instances, int m) const {
        Tape<S>& t = *ctx.tape;
        const int block = m + (cfg.use_class_token ? 1 : 0);
        VarId x = p;
        if (cfg.use_class_token) {
            VarId ct = repeat_row(t, ctx.leaves[static_cast<size_t>(cls_)], instances);
            VarId stacked = concat_rows(t, {ct, p});
            std::vector<int> perm(static_cast<size_t>(instances) * static_cast<size_t>(block));
            for (int b = 0; b < instances; ++b) {
                perm[static_cast<size_t>(b) * block] = b;
                for (int j = 0; j < m; ++j)
                    perm[static_cast<size_t>(b) * block + 1 + static_cast<size_t>(j)] = instances + b * m + j;
            }
            x = gather_rows(t, stacked, std::move(perm));
        }
        if (ctx.attn) {
            ctx.attn->heads = cfg.heads;
            ctx.attn->block = block;
            ctx.attn->layers.clear();
        }
        for (const auto& blk : id_blocks_) {
            Mat<S> attn_probs;
            x = transformer_block(ctx, x, block, blk, ctx.attn ? &attn_probs : nullptr);
            if (ctx.attn) ctx.attn->layers.push_back(std::move(attn_probs));
        }
        return x;
    }

    // Mean over pattern rows (class token excluded) or the class-token row.
    VarId readout(Ctx& ctx, VarId pp, int instances, int m) const {
        Tape<S>& t = *ctx.tape;
        const int block = m + (cfg.use_class_token ? 1 : 0);
        if (cfg.readout == ReadoutKind::ClassToken) {
            detail::check(cfg.use_class_token, "readout: class token absent");
            std::vector<int> idx(static_cast<size_t>(instances));
            for (int b = 0; b < instances; ++b) idx[static_cast<size_t>(b)] = b * block;
            return gather_rows(t, pp, std::move(idx));
        }
        return block_mean_rows(t, pp, block, cfg.use_class_token);
    }

    VarId predict(Ctx& ctx, VarId emb) const {
        return linear(*ctx.tape, emb, ctx.leaves[static_cast<size_t>(head_W_)],
                      ctx.leaves[static_cast<size_t>(head_b_)]);
    }

    const Mat<S>& sinusoid() const { return sinusoid_; }

private:
    struct BlockIdx {
        int Wq = -1, Wk = -1, Wv = -1, Wo = -1;
        int W1 = -1, b1 = -1, W2 = -1, b2 = -1;
        int ln1g = -1, ln1b = -1, ln2g = -1, ln2b = -1;
    };

    struct GruIdx {
        int Wz = -1, Uz = -1, bz = -1, Wr = -1, Ur = -1, br = -1, Wc = -1, Uc = -1, bc = -1;
    };

    template <typename WFn, typename ZFn>
    GruIdx add_gru(const std::string& prefix, int in_dim, int D, WFn& w, ZFn& zeros) {
        GruIdx g;
        g.Wz = w(prefix + ".Wz", in_dim, D);
        g.Uz = w(prefix + ".Uz", D, D);
        g.bz = zeros(prefix + ".bz", 1, D);
        g.Wr = w(prefix + ".Wr", in_dim, D);
        g.Ur = w(prefix + ".Ur", D, D);
        g.br = zeros(prefix + ".br", 1, D);
        g.Wc = w(prefix + ".Wc", in_dim, D);
        g.Uc = w(prefix + ".Uc", D, D);
        g.bc = zeros(prefix + ".bc", 1, D);
        return g;
    }

    template <typename WFn, typename ZFn, typename OFn>
    BlockIdx add_block(const std::string& prefix, int D, int heads, int dout, WFn& w, ZFn& zeros, OFn& ones) {
        BlockIdx b;
        const int attn_dim = heads * dout;
        b.Wq = w(prefix + ".Wq", D, attn_dim);
        b.Wk = w(prefix + ".Wk", D, attn_dim);
        b.Wv = w(prefix + ".Wv", D, attn_dim);
        b.Wo = w(prefix + ".Wo", attn_dim, D);
        b.W1 = w(prefix + ".ffn.W1", D, cfg.ffn_mult * D);
        b.b1 = zeros(prefix + ".ffn.b1", 1, cfg.ffn_mult * D);
        b.W2 = w(prefix + ".ffn.W2", cfg.ffn_mult * D, D);
        b.b2 = zeros(prefix + ".ffn.b2", 1, D);
        if (cfg.prenorm) {
            b.ln1g = ones(prefix + ".ln1.g", 1, D);
            b.ln1b = zeros(prefix + ".ln1.b", 1, D);
            b.ln2g = ones(prefix + ".ln2.g", 1, D);
            b.ln2b = zeros(prefix + ".ln2.b", 1, D);
        }
        return b;
    }

    GruParamIds gru_leaf_ids(const Ctx& ctx, const GruIdx& g) const {
        auto L = [&](int i) { return ctx.leaves[static_cast<size_t>(i)]; };
        return GruParamIds{L(g.Wz), L(g.Uz), L(g.bz), L(g.Wr), L(g.Ur), L(g.br), L(g.Wc), L(g.Uc), L(g.bc)};
    }

    VarId encode_steps_mean(Ctx& ctx, const PatternBatch<S>& batch, const std::vector<VarId>& h) const {
        Tape<S>& t = *ctx.tape;
        VarId acc = -1;
        for (size_t st = 0; st < h.size(); ++st) {
            VarId mask = t.leaf(&batch.step_mask[st], false);
            VarId masked = mul_cols(t, h[st], mask);
            acc = (st == 0) ? masked : add(t, acc, masked);
        }
        VarId inv = t.constant(batch.inv_counts);
        return mul_cols(t, acc, inv);
    }

    VarId encode_steps_gru(Ctx& ctx, const PatternBatch<S>& batch, const std::vector<VarId>& h,
                           const GruIdx& gru) const {
        Tape<S>& t = *ctx.tape;
        GruParamIds pids = gru_leaf_ids(ctx, gru);
        VarId state = t.constant(Mat<S>::Zero(batch.rows(), cfg.hidden_dim));
        for (size_t st = 0; st < h.size(); ++st) {
            VarId next = gru_cell(t, state, h[st], pids);
            VarId mask = t.leaf(&batch.step_mask[st], false);
            state = add(t, state, mul_cols(t, sub(t, next, state), mask));
        }
        return state;
    }

    // Per-scale groups run through one transformer block over walk steps
    // (with a sinusoidal step signal) and are mean-pooled per pattern.
    VarId encode_steps_transformer(Ctx& ctx, const PatternBatch<S>& batch, const std::vector<VarId>& h) const {
        Tape<S>& t = *ctx.tape;
        std::vector<VarId> group_out;
        std::vector<int> restore(static_cast<size_t>(batch.rows()), -1);
        int at = 0;
        for (const auto& grp : batch.groups) {
            const int L = grp.len + 1;  // steps per pattern
            const int G = static_cast<int>(grp.rows.size());
            std::vector<VarId> gathered(static_cast<size_t>(L));
            for (int st = 0; st < L; ++st) gathered[static_cast<size_t>(st)] = gather_rows(t, h[static_cast<size_t>(st)], grp.rows);
            VarId step_major = concat_rows(t, gathered);
            std::vector<int> perm(static_cast<size_t>(L) * static_cast<size_t>(G));
            for (int g = 0; g < G; ++g)
                for (int st = 0; st < L; ++st)
                    perm[static_cast<size_t>(g) * L + static_cast<size_t>(st)] = st * G + g;
            VarId seq = gather_rows(t, step_major, std::move(perm));

            Mat<S> pos(static_cast<Eigen::Index>(L) * G, cfg.hidden_dim);
            for (int g = 0; g < G; ++g) pos.middleRows(static_cast<Eigen::Index>(g) * L, L) = sinusoid_.topRows(L);
            seq = add(t, seq, t.constant(std::move(pos)));

            VarId enc = transformer_block(ctx, seq, L, sp_block_, nullptr);
            group_out.push_back(block_mean_rows(t, enc, L, false));
            for (int g = 0; g < G; ++g) restore[static_cast<size_t>(grp.rows[static_cast<size_t>(g)])] = at + g;
            at += G;
        }
        VarId stacked = group_out.size() == 1 ? group_out[0] : concat_rows(t, group_out);
        return gather_rows(t, stacked, std::move(restore));
    }

    // Default composite: P' = FFN(P + Attn(P)). With prenorm: standard
    // pre-norm residual block.
    VarId transformer_block(Ctx& ctx, VarId x, int block, const BlockIdx& blk, Mat<S>* attn_probs) const {
        Tape<S>& t = *ctx.tape;
        auto L = [&](int i) { return ctx.leaves[static_cast<size_t>(i)]; };
        auto attention = [&](VarId qin) {
            VarId q = matmul(t, qin, L(blk.Wq));
            VarId k = matmul(t, qin, L(blk.Wk));
            VarId v = matmul(t, qin, L(blk.Wv));
            VarId a = mha_block_attention(t, q, k, v, block, cfg.heads, cfg.dropout, ctx.rng, ctx.training,
                                          attn_probs);
            return matmul(t, a, L(blk.Wo));
        };
        auto ffn = [&](VarId xin) {
            VarId hmid = gelu(t, linear(t, xin, L(blk.W1), L(blk.b1)));
            if (ctx.training && cfg.dropout > 0.0) hmid = dropout(t, hmid, cfg.dropout, *ctx.rng, true);
            return linear(t, hmid, L(blk.W2), L(blk.b2));
        };
        if (!cfg.prenorm) {
            VarId res = add(t, x, attention(x));
            return ffn(res);
        }
        VarId n1 = layer_norm_rows(t, x, L(blk.ln1g), L(blk.ln1b));
        VarId x1 = add(t, x, attention(n1));
        VarId n2 = layer_norm_rows(t, x1, L(blk.ln2g), L(blk.ln2b));
        return add(t, x1, ffn(n2));
    }

    static Mat<S> make_sinusoid(int length, int dim) {
        Mat<S> p(length, dim);
        for (int t = 0; t < length; ++t)
            for (int d = 0; d < dim; ++d) {
                double angle = t / std::pow(10000.0, 2.0 * (d / 2) / dim);
                p(t, d) = static_cast<S>((d % 2 == 0) ? std::sin(angle) : std::cos(angle));
            }
        return p;
    }

    int sp_proj_W_ = -1, sp_proj_b_ = -1;
    int ap_proj_W_ = -1, ap_proj_b_ = -1;
    GruIdx sp_gru_, ap_gru_;
    BlockIdx sp_block_;
    std::vector<BlockIdx> id_blocks_;
    int cls_ = -1;
    int head_W_ = -1, head_b_ = -1;
    Mat<S> sinusoid_;
};

}  // namespace gpm
