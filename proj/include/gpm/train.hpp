#pragma once

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <string>
#include <vector>

#include "gpm/model.hpp"
#include "gpm/parallel.hpp"

namespace gpm {

enum class TaskKind { NodeClf, LinkPred, GraphClf, GraphReg };

inline TaskKind task_from_string(const std::string& s) {
    if (s == "node_clf" || s == "node") return TaskKind::NodeClf;
    if (s == "link_pred" || s == "link") return TaskKind::LinkPred;
    if (s == "graph_clf" || s == "graph") return TaskKind::GraphClf;
    if (s == "graph_reg" || s == "regression") return TaskKind::GraphReg;
    throw std::runtime_error("unknown task: " + s);
}

inline std::string task_to_string(TaskKind t) {
    switch (t) {
        case TaskKind::NodeClf: return "node_clf";
        case TaskKind::LinkPred: return "link_pred";
        case TaskKind::GraphClf: return "graph_clf";
        case TaskKind::GraphReg: return "graph_reg";
    }
    return "node_clf";
}

// Full hyperparameter record; serialized flat to JSON.
struct RunConfig {
    TaskKind task = TaskKind::NodeClf;
    int m_train = 16;
    int k_infer = 128;
    int k_val = 0;  // patterns for per-epoch validation; 0 selects k_infer
    std::vector<int> scales{2, 4, 6, 8};
    BiasParams bias;
    double lr = 1e-2;
    double dropout = 0.1;
    double weight_decay = 0.0;
    int batch_size = 256;
    double label_smoothing = 0.05;
    double clip_norm = 1.0;
    int warmup_steps = 100;
    int epochs = 200;
    int patience = 100;
    int eval_every = 1;  // validation cadence in epochs
    uint64_t seed = 0;
    double stop_at_metric = std::numeric_limits<double>::infinity();  // early exit threshold

    int hidden_dim = 256;
    SeqKind sp_kind = SeqKind::Transformer;
    SeqKind ap_kind = SeqKind::Gru;
    double lambda = 1.0;
    PeKind pe_kind = PeKind::None;
    int pe_dim = 0;
    int heads = 4;
    int layers = 1;
    bool use_class_token = false;
    ReadoutKind readout = ReadoutKind::Mean;
    bool prenorm = false;
    int ffn_mult = 2;

    double train_frac = 0.8;
    double val_frac = 0.1;
    int neg_eval_pool = 100;  // link eval negatives per split
    int hits_k = 10;

    void validate() const {
        detail::check(m_train >= 1 && k_infer >= 1, "run config: counts must be positive");
        detail::check(m_train <= k_infer, "run config: m_train must be <= k_infer");
        detail::check(!scales.empty(), "run config: scales must be nonempty");
        detail::check(bias.p > 0 && bias.q > 0, "run config: bias parameters must be positive");
        detail::check(batch_size >= 1 && epochs >= 1 && patience >= 1, "run config: counts must be positive");
        detail::check(label_smoothing >= 0.0 && label_smoothing < 1.0, "run config: label smoothing in [0,1)");
        detail::check(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0 + 1e-12,
                      "run config: invalid split fractions");
    }

    int max_scale() const {
        int m = 0;
        for (int s : scales) m = std::max(m, s);
        return m;
    }

    nlohmann::ordered_json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    uint64_t hash() const;
};

inline nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task_to_string(task);
    j["m_train"] = m_train;
    j["k_infer"] = k_infer;
    j["k_val"] = k_val;
    j["scales"] = scales;
    j["bias_p"] = bias.p;
    j["bias_q"] = bias.q;
    j["lr"] = lr;
    j["dropout"] = dropout;
    j["weight_decay"] = weight_decay;
    j["batch_size"] = batch_size;
    j["label_smoothing"] = label_smoothing;
    j["clip_norm"] = clip_norm;
    j["warmup_steps"] = warmup_steps;
    j["epochs"] = epochs;
    j["patience"] = patience;
    j["eval_every"] = eval_every;
    j["seed"] = seed;
    j["hidden_dim"] = hidden_dim;
    j["sp.kind"] = seq_kind_to_string(sp_kind);
    j["ap.kind"] = seq_kind_to_string(ap_kind);
    j["lambda"] = lambda;
    j["pe.kind"] = pe_kind_to_string(pe_kind);
    j["pe.dim"] = pe_dim;
    j["heads"] = heads;
    j["layers"] = layers;
    j["use_class_token"] = use_class_token;
    j["readout"] = readout == ReadoutKind::Mean ? "mean" : "class_token";
    j["prenorm"] = prenorm;
    j["ffn_mult"] = ffn_mult;
    j["train_frac"] = train_frac;
    j["val_frac"] = val_frac;
    j["neg_eval_pool"] = neg_eval_pool;
    j["hits_k"] = hits_k;
    return j;
}

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const auto& v = it.value();
        if (k == "task") c.task = task_from_string(v.get<std::string>());
        else if (k == "m_train") c.m_train = v.get<int>();
        else if (k == "k_infer") c.k_infer = v.get<int>();
        else if (k == "k_val") c.k_val = v.get<int>();
        else if (k == "scales") c.scales = v.get<std::vector<int>>();
        else if (k == "bias_p") c.bias.p = v.get<double>();
        else if (k == "bias_q") c.bias.q = v.get<double>();
        else if (k == "lr") c.lr = v.get<double>();
        else if (k == "dropout") c.dropout = v.get<double>();
        else if (k == "weight_decay") c.weight_decay = v.get<double>();
        else if (k == "batch_size") c.batch_size = v.get<int>();
        else if (k == "label_smoothing") c.label_smoothing = v.get<double>();
        else if (k == "clip_norm") c.clip_norm = v.get<double>();
        else if (k == "warmup_steps") c.warmup_steps = v.get<int>();
        else if (k == "epochs") c.epochs = v.get<int>();
        else if (k == "patience") c.patience = v.get<int>();
        else if (k == "eval_every") c.eval_every = v.get<int>();
        else if (k == "seed") c.seed = v.get<uint64_t>();
        else if (k == "stop_at_metric") c.stop_at_metric = v.get<double>();
        else if (k == "hidden_dim") c.hidden_dim = v.get<int>();
        else if (k == "sp.kind") c.sp_kind = seq_kind_from_string(v.get<std::string>());
        else if (k == "ap.kind") c.ap_kind = seq_kind_from_string(v.get<std::string>());
        else if (k == "lambda") c.lambda = v.get<double>();
        else if (k == "pe.kind") c.pe_kind = pe_kind_from_string(v.get<std::string>());
        else if (k == "pe.dim") c.pe_dim = v.get<int>();
        else if (k == "heads") c.heads = v.get<int>();
        else if (k == "layers") c.layers = v.get<int>();
        else if (k == "use_class_token") c.use_class_token = v.get<bool>();
        else if (k == "readout") c.readout = v.get<std::string>() == "class_token" ? ReadoutKind::ClassToken
                                                                                   : ReadoutKind::Mean;
        else if (k == "prenorm") c.prenorm = v.get<bool>();
        else if (k == "ffn_mult") c.ffn_mult = v.get<int>();
        else if (k == "train_frac") c.train_frac = v.get<double>();
        else if (k == "val_frac") c.val_frac = v.get<double>();
        else if (k == "neg_eval_pool") c.neg_eval_pool = v.get<int>();
        else if (k == "hits_k") c.hits_k = v.get<int>();
        else throw std::runtime_error("run config: unknown key '" + k + "'");
    }
    c.validate();
    return c;
}

inline uint64_t RunConfig::hash() const {
    std::string s = to_json().dump();
    uint64_t h = 1469598103934665603ull;
    for (char ch : s) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Datasets and splits
// ---------------------------------------------------------------------------

struct Dataset {
    TaskKind task = TaskKind::NodeClf;
    std::vector<Graph> graphs;
    std::vector<InstanceRef> instances;
    std::vector<double> targets;  // class id or regression target
    int num_classes = 0;
    std::vector<NodePE> pe;  // per graph, filled by prepare_pe

    void prepare_pe(PeKind kind, int dim) {
        pe.clear();
        if (kind == PeKind::None || dim == 0) return;
        pe.reserve(graphs.size());
        for (const auto& g : graphs) pe.push_back(compute_pe(g, kind, dim));
    }
};

struct Split {
    std::vector<size_t> train, val, test;
};

// Labeled, non-isolated nodes across all graphs (labels < 0 are ignored).
Dataset make_node_dataset(std::vector<Graph> graphs);
// One instance per graph carrying a graph label.
Dataset make_graph_dataset(std::vector<Graph> graphs, bool regression);

Split make_split(size_t n, double train_frac, double val_frac, uint64_t seed);

// Uniformly sampled distinct non-edges, disjoint from `used` (which is
// extended with the draws). Errors when the graph cannot supply the count.
std::vector<std::pair<NodeId, NodeId>> negative_sampling(const Graph& g, size_t count, Rng& rng,
                                                         std::vector<std::pair<NodeId, NodeId>>* used = nullptr);

struct LinkData {
    Dataset data;
    Split split;
};

// Edge split (train/val/test positives) plus sampled negatives: 1:1 at
// train, a fixed pool per eval split.
LinkData make_link_dataset(Graph graph, double train_frac, double val_frac, int neg_eval_pool, uint64_t seed);

struct TaskData {
    Dataset data;
    Split split;
};

// Instance pool + split for the configured task, deterministic per config
// seed. Presampling and training derive the same pool from the same config.
TaskData build_task(std::vector<Graph> graphs, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);
double mean_absolute_error(const std::vector<double>& preds, const std::vector<double>& targets);
// Fraction of positives scoring strictly above the K-th highest negative.
double hits_at_k(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores, int k);

// ---------------------------------------------------------------------------
// Evaluation (forward-only, chunked; results independent of worker count)
// ---------------------------------------------------------------------------

struct EvalOutput {
    double metric = 0.0;          // accuracy, hits@K, or -MAE
    std::vector<int> preds;       // per evaluated instance (classification)
    std::vector<double> values;   // regression predictions / link scores
};

inline ModelConfig model_config_from(const RunConfig& run, const Dataset& data) {
    ModelConfig mc;
    mc.hidden_dim = run.hidden_dim;
    mc.sp_kind = run.sp_kind;
    mc.ap_kind = run.ap_kind;
    mc.lambda = run.lambda;
    mc.heads = run.heads;
    mc.layers = run.layers;
    mc.use_class_token = run.use_class_token;
    mc.readout = run.readout;
    mc.prenorm = run.prenorm;
    mc.dropout = run.dropout;
    mc.ffn_mult = run.ffn_mult;
    mc.max_scale = run.max_scale();
    const Graph& g0 = data.graphs.at(0);
    mc.node_feat_dim = g0.has_node_features() ? static_cast<int>(g0.node_features().cols()) : 0;
    mc.edge_feat_dim = g0.has_edge_features() ? static_cast<int>(g0.edge_features().cols()) : 0;
    mc.pe_dim = run.pe_kind == PeKind::None ? 0 : run.pe_dim;
    switch (run.task) {
        case TaskKind::NodeClf:
        case TaskKind::GraphClf: mc.out_dim = data.num_classes; break;
        case TaskKind::LinkPred: mc.out_dim = 2; break;
        case TaskKind::GraphReg: mc.out_dim = 1; break;
    }
    return mc;
}

template <typename S>
EvalOutput evaluate(const Model<S>& model, const Dataset& data, const PatternCache& cache,
                    const std::vector<size_t>& indices, int k_eval, int hits_k = 10, int workers = 1) {
    detail::check(cache.k() >= k_eval, "evaluate: cache holds fewer than k_eval patterns");
    EvalOutput out;
    const size_t n = indices.size();
    if (n == 0) return out;
    std::vector<int> preds(n, 0);
    std::vector<double> values(n, 0.0);

    constexpr size_t kChunk = 64;  // fixed; keeps results worker-independent
    const size_t nchunks = (n + kChunk - 1) / kChunk;
    std::vector<size_t> subsample(static_cast<size_t>(k_eval));
    for (size_t i = 0; i < subsample.size(); ++i) subsample[i] = i;

    auto run_chunk = [&](size_t ci) {
        const size_t begin = ci * kChunk;
        const size_t end = std::min(begin + kChunk, n);
        std::vector<const PatternSet*> sets;
        std::vector<std::vector<size_t>> idx;
        sets.reserve(end - begin);
        idx.reserve(end - begin);
        for (size_t i = begin; i < end; ++i) {
            sets.push_back(&cache.at(indices[i]));
            idx.push_back(subsample);
        }
        PatternBatch<S> batch = assemble_batch<S>(model.cfg, data.graphs, data.pe, sets, idx);
        Tape<S> tape;
        auto fwd = model.forward(tape, batch, /*training=*/false, nullptr, false);
        const Mat<S>& logits = tape.val(fwd.logits);
        for (size_t i = begin; i < end; ++i) {
            const Eigen::Index r = static_cast<Eigen::Index>(i - begin);
            if (data.task == TaskKind::GraphReg) {
                values[i] = static_cast<double>(logits(r, 0));
            } else if (data.task == TaskKind::LinkPred) {
                values[i] = static_cast<double>(logits(r, 1)) - static_cast<double>(logits(r, 0));
            } else {
                Eigen::Index best;
                logits.row(r).maxCoeff(&best);
                preds[i] = static_cast<int>(best);
            }
        }
    };
    parallel_for_chunks(nchunks, workers, run_chunk, 1);

    switch (data.task) {
        case TaskKind::NodeClf:
        case TaskKind::GraphClf: {
            std::vector<int> labels(n);
            for (size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(data.targets[indices[i]]);
            out.metric = accuracy(preds, labels);
            break;
        }
        case TaskKind::GraphReg: {
            std::vector<double> targets(n);
            for (size_t i = 0; i < n; ++i) targets[i] = data.targets[indices[i]];
            out.metric = -mean_absolute_error(values, targets);
            break;
        }
        case TaskKind::LinkPred: {
            std::vector<double> pos, neg;
            for (size_t i = 0; i < n; ++i)
                (data.targets[indices[i]] > 0.5 ? pos : neg).push_back(values[i]);
            out.metric = hits_at_k(pos, neg, hits_k);
            break;
        }
    }
    out.preds = std::move(preds);
    out.values = std::move(values);
    return out;
}

// Prediction for one instance from its first k_infer cached patterns.
template <typename S>
Mat<S> tta_infer(const Model<S>& model, const Dataset& data, const PatternCache& cache, size_t instance_idx,
                 int k_infer) {
    detail::check(cache.k() >= k_infer, "tta_infer: insufficient cached patterns");
    std::vector<size_t> idx(static_cast<size_t>(k_infer));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Tape<S> tape;
    PatternBatch<S> batch = assemble_batch<S>(model.cfg, data.graphs, data.pe, {&cache.at(instance_idx)}, {idx});
    auto fwd = model.forward(tape, batch, false, nullptr, false);
    return tape.val(fwd.logits);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_metric = 0.0;
};

struct TrainSummary {
    std::vector<EpochLog> history;
    double best_val = -std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    uint64_t steps = 0;
};

// Trains in place; on return the model holds the best-validation snapshot.
// Validation uses k_infer patterns (test-time augmentation pipeline).
template <typename S>
TrainSummary train_model(Model<S>& model, const RunConfig& cfg, const Dataset& data, const Split& split,
                         const PatternCache& cache, int workers = 1, std::ostream* history_out = nullptr) {
    cfg.validate();
    detail::check(cache.size() == data.instances.size(), "train: cache does not cover the instance pool");
    detail::check(cache.k() >= cfg.k_infer, "train: cache holds fewer than k_infer patterns");
    detail::check(!split.train.empty(), "train: empty training split");

    model.init(cfg.seed);
    AdamWConfig adam;
    adam.weight_decay = cfg.weight_decay;

    TrainSummary summary;
    std::vector<Mat<S>> best_values = model.params.snapshot_values();
    int since_best = 0;

    const std::vector<size_t>& val_idx = split.val.empty() ? split.train : split.val;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = split.train;
        Rng order_rng(hash_mix(hash_mix(cfg.seed, 0x6f726465ull), static_cast<uint64_t>(epoch)));
        order_rng.shuffle(order);

        double loss_sum = 0.0;
        size_t loss_count = 0;
        double lr_now = cfg.lr;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
            std::vector<const PatternSet*> sets;
            std::vector<std::vector<size_t>> pidx;
            std::vector<int> targets_cls;
            Mat<S> targets_reg(static_cast<Eigen::Index>(end - at), 1);
            sets.reserve(end - at);
            for (size_t i = at; i < end; ++i) {
                const size_t inst = order[i];
                sets.push_back(&cache.at(inst));
                Rng sub_rng(hash_mix(hash_mix(hash_mix(cfg.seed, 0x737562ull), static_cast<uint64_t>(epoch)),
                                     data.instances[inst].key()));
                pidx.push_back(subsample_indices(static_cast<size_t>(cache.k()), static_cast<size_t>(cfg.m_train),
                                                 sub_rng));
                if (data.task == TaskKind::GraphReg)
                    targets_reg(static_cast<Eigen::Index>(i - at), 0) = static_cast<S>(data.targets[inst]);
                else
                    targets_cls.push_back(static_cast<int>(data.targets[inst]));
            }

            PatternBatch<S> batch = assemble_batch<S>(model.cfg, data.graphs, data.pe, sets, pidx);
            Tape<S> tape;
            Rng drop_rng(hash_mix(hash_mix(cfg.seed, 0x64726f70ull), summary.steps));
            auto fwd = model.forward(tape, batch, true, &drop_rng, false);
            VarId loss = data.task == TaskKind::GraphReg
                             ? l1_loss(tape, fwd.logits, targets_reg)
                             : label_smoothed_ce(tape, fwd.logits, targets_cls, cfg.label_smoothing);
            const double loss_val = static_cast<double>(tape.val(loss)(0, 0));
            if (!std::isfinite(loss_val)) {
                double pnorm = 0.0;
                for (const auto& e : model.params.entries()) pnorm += static_cast<double>(e.value.squaredNorm());
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch at " +
                                         std::to_string(at) + ", param norm " + std::to_string(std::sqrt(pnorm)));
            }
            loss_sum += loss_val * static_cast<double>(end - at);
            loss_count += end - at;

            tape.backward(loss);
            model.params.zero_grad();
            for (size_t pi = 0; pi < model.params.size(); ++pi) {
                const auto& g = tape.grad(fwd.param_leaves[pi]);
                if (g.size()) model.params[pi].grad = g;
            }
            clip_grad_norm(model.params, cfg.clip_norm);
            lr_now = warmup_lr(summary.steps, cfg.lr, static_cast<uint64_t>(cfg.warmup_steps));
            adamw_step(model.params, lr_now, adam);
            summary.steps += 1;
        }

        const int k_val = cfg.k_val > 0 ? cfg.k_val : cfg.k_infer;
        const bool eval_now = cfg.eval_every <= 1 || epoch % cfg.eval_every == cfg.eval_every - 1 ||
                              epoch == cfg.epochs - 1;
        double metric_now = summary.history.empty() ? -std::numeric_limits<double>::infinity()
                                                    : summary.history.back().val_metric;
        if (eval_now) metric_now = evaluate(model, data, cache, val_idx, k_val, cfg.hits_k, workers).metric;
        EpochLog log{epoch, lr_now, loss_sum / static_cast<double>(loss_count), metric_now};
        summary.history.push_back(log);
        if (history_out) {
            nlohmann::ordered_json jl;
            jl["epoch"] = log.epoch;
            jl["lr"] = log.lr;
            jl["train_loss"] = log.train_loss;
            jl["val_metric"] = log.val_metric;
            (*history_out) << jl.dump() << "\n";
        }

        if (eval_now && metric_now > summary.best_val) {
            summary.best_val = metric_now;
            summary.best_epoch = epoch;
            best_values = model.params.snapshot_values();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if (summary.best_val >= cfg.stop_at_metric) break;
        if (since_best >= cfg.patience) break;
    }

    model.params.restore_values(best_values);
    return summary;
}

}  // namespace gpm
