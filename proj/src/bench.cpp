#include "gpm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "gpm/model.hpp"
#include "gpm/walk.hpp"

namespace gpm {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

double now_sec() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

}  // namespace

std::vector<Graph> gen_csl(const CSLSpec& spec, uint64_t seed) {
    require(spec.n >= 5, "csl: n too small");
    std::set<int> seen;
    for (int r : spec.skips) {
        require(r > 1 && 2 * r < spec.n, "csl: skip must satisfy 1 < r < n/2");
        require(seen.insert(r).second, "csl: duplicate skip");
    }
    Rng rng(hash_mix(seed, 0x63736cull));
    std::vector<Graph> out;
    out.reserve(spec.skips.size() * static_cast<size_t>(spec.copies_per_class));
    for (size_t ci = 0; ci < spec.skips.size(); ++ci) {
        const int r = spec.skips[ci];
        for (int copy = 0; copy < spec.copies_per_class; ++copy) {
            std::vector<NodeId> perm(static_cast<size_t>(spec.n));
            for (int i = 0; i < spec.n; ++i) perm[static_cast<size_t>(i)] = i;
            rng.shuffle(perm);
            std::vector<std::pair<NodeId, NodeId>> edges;
            edges.reserve(static_cast<size_t>(2 * spec.n));
            for (int i = 0; i < spec.n; ++i) {
                edges.emplace_back(perm[static_cast<size_t>(i)], perm[static_cast<size_t>((i + 1) % spec.n)]);
                edges.emplace_back(perm[static_cast<size_t>(i)], perm[static_cast<size_t>((i + r) % spec.n)]);
            }
            Graph g = Graph::from_edges(spec.n, edges, true, false);
            g.set_node_features(Eigen::MatrixXd::Ones(spec.n, 1));
            g.set_graph_label(static_cast<double>(ci));
            out.push_back(std::move(g));
        }
    }
    return out;
}

std::vector<Graph> gen_tree_match(const TreeMatchSpec& spec, uint64_t seed) {
    require(spec.radius >= 2, "tree_match: radius must be >= 2");
    require(spec.classes >= 2, "tree_match: need at least 2 classes");
    const int leaves = 1 << spec.radius;
    const int tree_nodes = (1 << (spec.radius + 1)) - 1;
    Rng rng(hash_mix(seed, 0x74726565ull));
    std::vector<Graph> out;
    out.reserve(static_cast<size_t>(spec.examples));
    for (int ex = 0; ex < spec.examples; ++ex) {
        std::vector<int> keys(static_cast<size_t>(leaves));
        for (int i = 0; i < leaves; ++i) keys[static_cast<size_t>(i)] = i;
        rng.shuffle(keys);
        std::vector<int> labels(static_cast<size_t>(leaves));
        for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<uint64_t>(spec.classes)));
        const int root_leaf = static_cast<int>(rng.below(static_cast<uint64_t>(leaves)));
        const int root_key = keys[static_cast<size_t>(root_leaf)];
        const int root_label = labels[static_cast<size_t>(root_leaf)];

        std::vector<std::pair<NodeId, NodeId>> edges;
        for (int v = 1; v < tree_nodes; ++v) edges.emplace_back((v - 1) / 2, v);
        const int first_leaf = tree_nodes - leaves;

        int total_nodes = tree_nodes;
        std::vector<int> dummy_parent;  // degree variant: extra children
        if (spec.degree_variant) {
            auto attach = [&](int node, int count) {
                for (int d = 0; d < count; ++d) {
                    edges.emplace_back(node, total_nodes);
                    dummy_parent.push_back(node);
                    total_nodes++;
                }
            };
            for (int i = 0; i < leaves; ++i) attach(first_leaf + i, keys[static_cast<size_t>(i)] + 1);
            attach(0, root_key + 1);
        }

        Graph g = Graph::from_edges(static_cast<NodeId>(total_nodes), edges, true, false);
        const int d_n = spec.degree_variant ? spec.classes : leaves + spec.classes;
        Eigen::MatrixXd x = Eigen::MatrixXd::Zero(total_nodes, d_n);
        if (spec.degree_variant) {
            for (int i = 0; i < leaves; ++i) x(first_leaf + i, labels[static_cast<size_t>(i)]) = 1.0;
        } else {
            x(0, root_key) = 1.0;
            for (int i = 0; i < leaves; ++i) {
                x(first_leaf + i, keys[static_cast<size_t>(i)]) = 1.0;
                x(first_leaf + i, leaves + labels[static_cast<size_t>(i)]) = 1.0;
            }
        }
        g.set_node_features(std::move(x));
        std::vector<int> node_labels(static_cast<size_t>(total_nodes), -1);
        node_labels[0] = root_label;
        g.set_node_labels(std::move(node_labels));
        out.push_back(std::move(g));
    }
    return out;
}

Graph gen_sbm(const SBMSpec& spec, uint64_t seed) {
    require(spec.p_in >= 0.0 && spec.p_in <= 1.0 && spec.p_out >= 0.0 && spec.p_out <= 1.0,
            "sbm: probabilities must be in [0,1]");
    const int n = spec.blocks * spec.nodes_per_block;
    Rng rng(hash_mix(seed, 0x73626dull));
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (int u = 0; u < n; ++u) {
        for (int v = u + 1; v < n; ++v) {
            const bool same = (u / spec.nodes_per_block) == (v / spec.nodes_per_block);
            if (rng.uniform() < (same ? spec.p_in : spec.p_out)) edges.emplace_back(u, v);
        }
    }
    Graph g = Graph::from_edges(n, edges, true, false);
    Eigen::MatrixXd x(n, spec.feature_dim);
    std::vector<int> labels(static_cast<size_t>(n));
    for (int v = 0; v < n; ++v) {
        const int b = v / spec.nodes_per_block;
        labels[static_cast<size_t>(v)] = b;
        for (int c = 0; c < spec.feature_dim; ++c) {
            double mu = (c == b % spec.feature_dim) ? spec.feature_separation : 0.0;
            x(v, c) = mu + rng.normal();
        }
    }
    g.set_node_features(std::move(x));
    g.set_node_labels(std::move(labels));
    return g;
}

std::map<uint64_t, int64_t> wl1_refine(const Graph& g, int rounds) {
    require(rounds >= 1, "wl1_refine: rounds must be >= 1");
    std::vector<uint64_t> color(static_cast<size_t>(g.num_nodes()), 0);
    std::vector<uint64_t> next(color.size());
    std::vector<uint64_t> nbc;
    for (int round = 0; round < rounds; ++round) {
        for (NodeId v = 0; v < g.num_nodes(); ++v) {
            nbc.clear();
            for (NodeId w : g.neighbors(v)) nbc.push_back(color[static_cast<size_t>(w)]);
            std::sort(nbc.begin(), nbc.end());
            uint64_t h = hash_mix(0x776c31ull, color[static_cast<size_t>(v)]);
            for (uint64_t c : nbc) h = hash_mix(h, c);
            next[static_cast<size_t>(v)] = h;
        }
        color.swap(next);
    }
    std::map<uint64_t, int64_t> hist;
    for (uint64_t c : color) hist[c]++;
    return hist;
}

bool wl1_equivalent(const Graph& a, const Graph& b) {
    const int rounds = std::max(a.num_nodes(), b.num_nodes());
    return wl1_refine(a, rounds) == wl1_refine(b, rounds);
}

// ---------------------------------------------------------------------------
// Harnesses
// ---------------------------------------------------------------------------

namespace {

PatternCache presample_for(const Dataset& data, const RunConfig& cfg, int workers) {
    return presample(data.graphs, data.instances, cfg.k_infer, cfg.scales, cfg.bias, cfg.seed, workers);
}

}  // namespace

CslBenchResult run_csl_bench(uint64_t seed, int workers) {
    CSLSpec spec;
    auto graphs = gen_csl(spec, seed);

    CslBenchResult result;
    result.wl_all_identical = true;
    const int rounds = spec.n;
    auto ref = wl1_refine(graphs[0], rounds);
    for (size_t i = 1; i < graphs.size(); ++i)
        if (wl1_refine(graphs[i], rounds) != ref) result.wl_all_identical = false;

    Dataset data = make_graph_dataset(std::move(graphs), false);

    RunConfig cfg;
    cfg.task = TaskKind::GraphClf;
    cfg.seed = seed;
    cfg.k_infer = 64;
    cfg.m_train = 16;
    cfg.scales = {2, 4, 6, 8};
    cfg.hidden_dim = 48;
    cfg.sp_kind = SeqKind::Mean;
    cfg.ap_kind = SeqKind::Gru;
    cfg.lambda = 0.0;
    cfg.pe_kind = PeKind::Rwse;
    cfg.pe_dim = 16;
    cfg.lr = 0.01;
    cfg.dropout = 0.0;
    cfg.label_smoothing = 0.0;
    cfg.batch_size = 12;
    cfg.epochs = 400;
    cfg.patience = 200;
    cfg.stop_at_metric = 1.0;
    cfg.train_frac = 0.6;
    cfg.val_frac = 0.2;

    data.prepare_pe(cfg.pe_kind, cfg.pe_dim);
    Split split = make_split(data.instances.size(), cfg.train_frac, cfg.val_frac, seed);
    PatternCache cache = presample_for(data, cfg, workers);

    Model<float> model(model_config_from(cfg, data));
    auto summary = train_model(model, cfg, data, split, cache, workers);
    result.epochs_ran = static_cast<int>(summary.history.size());
    result.test_accuracy = evaluate(model, data, cache, split.test, cfg.k_infer, cfg.hits_k, workers).metric;
    return result;
}

TreeBenchResult run_tree_bench(uint64_t seed, int radius, int workers) {
    TreeMatchSpec spec;
    spec.radius = radius;
    spec.examples = 128;
    spec.classes = 4;
    Dataset data = make_node_dataset(gen_tree_match(spec, seed));

    RunConfig cfg;
    cfg.task = TaskKind::NodeClf;
    cfg.seed = seed;
    cfg.k_infer = 128;
    cfg.m_train = 32;
    cfg.scales = {2 * radius, 2 * radius + 4};
    cfg.hidden_dim = 48;
    cfg.sp_kind = SeqKind::Mean;
    cfg.ap_kind = SeqKind::Gru;
    cfg.lambda = 0.0;  // matching is a feature task; topology branch off
    cfg.pe_kind = PeKind::None;
    cfg.pe_dim = 0;
    cfg.lr = 0.01;
    cfg.dropout = 0.0;
    cfg.label_smoothing = 0.0;
    cfg.batch_size = 32;
    cfg.epochs = 500;
    cfg.patience = 500;
    cfg.eval_every = 4;
    cfg.stop_at_metric = 1.0;

    Split split;
    split.train.resize(data.instances.size());
    for (size_t i = 0; i < split.train.size(); ++i) split.train[i] = i;
    split.val = split.train;  // fitting task: the tracked metric is training accuracy

    PatternCache cache = presample_for(data, cfg, workers);
    Model<float> model(model_config_from(cfg, data));
    auto summary = train_model(model, cfg, data, split, cache, workers);

    TreeBenchResult result;
    result.train_accuracy = evaluate(model, data, cache, split.train, cfg.k_infer, cfg.hits_k, workers).metric;
    result.epochs_to_fit = summary.best_val >= 1.0 ? summary.best_epoch + 1 : -1;
    return result;
}

namespace {

RunConfig sbm_node_config(uint64_t seed) {
    RunConfig cfg;
    cfg.task = TaskKind::NodeClf;
    cfg.seed = seed;
    cfg.k_infer = 128;
    cfg.k_val = 32;
    cfg.m_train = 16;
    cfg.scales = {2, 4, 6, 8};
    cfg.hidden_dim = 32;
    cfg.sp_kind = SeqKind::Mean;
    cfg.ap_kind = SeqKind::Gru;
    cfg.lambda = 0.0;
    cfg.pe_kind = PeKind::Lap;
    cfg.pe_dim = 4;
    cfg.lr = 0.01;
    cfg.dropout = 0.1;
    cfg.batch_size = 128;
    cfg.epochs = 40;
    cfg.patience = 12;
    cfg.train_frac = 0.5;
    cfg.val_frac = 0.25;
    return cfg;
}

SbmNodeBenchResult run_sbm_config(const SBMSpec& spec, const RunConfig& cfg, uint64_t seed, int workers) {
    Dataset data = make_node_dataset({gen_sbm(spec, seed)});
    data.prepare_pe(cfg.pe_kind, cfg.pe_dim);
    Split split = make_split(data.instances.size(), cfg.train_frac, cfg.val_frac, seed);
    PatternCache cache = presample_for(data, cfg, workers);

    Model<float> model(model_config_from(cfg, data));
    train_model(model, cfg, data, split, cache, workers);

    SbmNodeBenchResult r;
    r.test_accuracy = evaluate(model, data, cache, split.test, cfg.k_infer, cfg.hits_k, workers).metric;
    r.acc_infer_16 = evaluate(model, data, cache, split.test, 16, cfg.hits_k, workers).metric;
    r.acc_infer_128 = evaluate(model, data, cache, split.test, 128, cfg.hits_k, workers).metric;

    std::vector<int64_t> counts(static_cast<size_t>(data.num_classes), 0);
    for (size_t i : split.test) counts[static_cast<size_t>(data.targets[i])]++;
    r.majority_baseline =
        static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(split.test.size());
    return r;
}

}  // namespace

SbmNodeBenchResult run_sbm_node_bench(uint64_t seed, int workers) {
    return run_sbm_config(SBMSpec{}, sbm_node_config(seed), seed, workers);
}

SbmNodeBenchResult run_sbm_tta_bench(uint64_t seed, int workers) {
    SBMSpec spec;
    spec.nodes_per_block = 150;
    spec.feature_separation = 0.4;
    RunConfig cfg = sbm_node_config(seed);
    return run_sbm_config(spec, cfg, seed, workers);
}

SbmLinkBenchResult run_sbm_link_bench(uint64_t seed, int workers) {
    SBMSpec spec;
    Graph g = gen_sbm(spec, seed);
    RunConfig cfg;
    cfg.task = TaskKind::LinkPred;
    cfg.seed = seed;
    cfg.k_infer = 64;
    cfg.m_train = 16;
    cfg.scales = {2, 4, 6, 8};
    cfg.hidden_dim = 32;
    cfg.sp_kind = SeqKind::Mean;
    cfg.ap_kind = SeqKind::Gru;
    cfg.lambda = 0.0;
    cfg.pe_kind = PeKind::Lap;
    cfg.pe_dim = 4;
    cfg.lr = 0.01;
    cfg.dropout = 0.1;
    cfg.batch_size = 256;
    cfg.epochs = 40;
    cfg.patience = 15;
    cfg.train_frac = 0.8;
    cfg.val_frac = 0.05;
    cfg.neg_eval_pool = 100;
    cfg.hits_k = 10;

    LinkData link = make_link_dataset(std::move(g), cfg.train_frac, cfg.val_frac, cfg.neg_eval_pool, seed);
    link.data.prepare_pe(cfg.pe_kind, cfg.pe_dim);
    PatternCache cache = presample_for(link.data, cfg, workers);

    Model<float> model(model_config_from(cfg, link.data));
    train_model(model, cfg, link.data, link.split, cache, workers);

    SbmLinkBenchResult r;
    r.hits_k = cfg.hits_k;
    r.hits = evaluate(model, link.data, cache, link.split.test, cfg.k_infer, cfg.hits_k, workers).metric;

    // Random-scoring baseline on the same positive/negative pools.
    Rng rng(hash_mix(seed, 0x72616e64ull));
    std::vector<double> pos, neg;
    for (size_t i : link.split.test)
        (link.data.targets[i] > 0.5 ? pos : neg).push_back(rng.uniform());
    r.random_baseline = hits_at_k(pos, neg, cfg.hits_k);
    return r;
}

TtaSpeedResult run_tta_speed(uint64_t seed, int workers) {
    SBMSpec spec;
    Dataset data = make_node_dataset({gen_sbm(spec, seed)});
    RunConfig cfg = sbm_node_config(seed);
    data.prepare_pe(cfg.pe_kind, cfg.pe_dim);
    Split split = make_split(data.instances.size(), cfg.train_frac, cfg.val_frac, seed);
    PatternCache cache = presample_for(data, cfg, workers);

    auto time_epochs = [&](int m_train) {
        RunConfig c = cfg;
        c.m_train = m_train;
        c.epochs = 3;
        c.patience = 1000;
        c.k_infer = m_train;  // keep validation out of the per-epoch comparison
        Model<float> model(model_config_from(c, data));
        // warmup epoch excluded from timing
        RunConfig warm = c;
        warm.epochs = 1;
        Model<float> wmodel(model_config_from(c, data));
        train_model(wmodel, warm, data, split, cache, 1);
        double t0 = now_sec();
        train_model(model, c, data, split, cache, 1);
        return (now_sec() - t0) / static_cast<double>(c.epochs);
    };
    (void)workers;
    TtaSpeedResult r;
    r.sec_per_epoch_m16 = time_epochs(16);
    r.sec_per_epoch_m128 = time_epochs(128);
    r.ratio = r.sec_per_epoch_m128 / r.sec_per_epoch_m16;
    return r;
}

double fit_loglog_exponent(const std::vector<std::pair<double, double>>& points) {
    double sx = 0, sy = 0;
    const double n = static_cast<double>(points.size());
    for (auto& [x, y] : points) {
        sx += std::log(x);
        sy += std::log(y);
    }
    const double mx = sx / n, my = sy / n;
    double num = 0, den = 0;
    for (auto& [x, y] : points) {
        num += (std::log(x) - mx) * (std::log(y) - my);
        den += (std::log(x) - mx) * (std::log(x) - mx);
    }
    return num / den;
}

ScalingResult run_scaling(uint64_t seed) {
    ScalingResult out;

    // Identifier (pattern-set transformer) forward cost per instance.
    {
        ModelConfig mc;
        mc.hidden_dim = 8;
        mc.heads = 2;
        mc.layers = 1;
        mc.ffn_mult = 1;
        mc.sp_kind = SeqKind::Mean;
        mc.ap_kind = SeqKind::Mean;
        mc.node_feat_dim = 1;
        mc.out_dim = 2;
        mc.max_scale = 4;
        Model<float> model(mc);
        model.init(seed);
        Rng rng(hash_mix(seed, 0x7363616cull));
        for (int k : {16, 32, 64, 128}) {
            const int instances = std::max(1, 2048 / k);
            Mat<float> P(instances * k, mc.hidden_dim);
            for (Eigen::Index i = 0; i < P.rows(); ++i)
                for (Eigen::Index j = 0; j < P.cols(); ++j) P(i, j) = static_cast<float>(rng.normal());
            // warmup + timed repetitions
            double best = std::numeric_limits<double>::infinity();
            int reps = std::max(3, 40960 / (instances * k));
            for (int trial = 0; trial < 3; ++trial) {
                double t0 = now_sec();
                for (int rep = 0; rep < reps; ++rep) {
                    Tape<float> tape;
                    auto ctx = model.make_ctx(tape);
                    VarId p = tape.constant(P);
                    model.identify(ctx, p, instances, k);
                }
                best = std::min(best, (now_sec() - t0) / (reps * instances));
            }
            out.identifier_cost.emplace_back(k, best);
        }
        std::vector<std::pair<double, double>> pts;
        for (auto& [k, c] : out.identifier_cost) pts.emplace_back(static_cast<double>(k), c);
        out.identifier_exponent = fit_loglog_exponent(pts);
    }

    // Presample wall time across graph sizes (expected linear).
    {
        for (int64_t n : {int64_t{1000}, int64_t{10000}, int64_t{100000}}) {
            Rng grng(hash_mix(seed, static_cast<uint64_t>(n)));
            std::vector<std::pair<NodeId, NodeId>> edges;
            edges.reserve(static_cast<size_t>(4 * n));
            for (int64_t v = 0; v < n; ++v)
                for (int d = 0; d < 4; ++d) {
                    NodeId w = static_cast<NodeId>(grng.below(static_cast<uint64_t>(n)));
                    if (w != v) edges.emplace_back(static_cast<NodeId>(v), w);
                }
            Graph g = Graph::from_edges(static_cast<NodeId>(n), edges, true, false);
            std::vector<InstanceRef> insts;
            insts.reserve(static_cast<size_t>(n));
            for (NodeId v = 0; v < g.num_nodes(); ++v)
                if (g.degree(v) > 0) insts.push_back(InstanceRef::node(v));
            const int reps = n <= 1000 ? 10 : (n <= 10000 ? 3 : 1);
            double t0 = now_sec();
            for (int rep = 0; rep < reps; ++rep)
                presample({g}, insts, 16, {4}, BiasParams{}, seed + static_cast<uint64_t>(rep), 1);
            out.presample_cost.emplace_back(n, (now_sec() - t0) / reps);
        }
        std::vector<std::pair<double, double>> pts;
        for (auto& [n, c] : out.presample_cost) pts.emplace_back(static_cast<double>(n), c);
        out.presample_exponent = fit_loglog_exponent(pts);
    }
    return out;
}

nlohmann::ordered_json run_bench_suite(const std::string& profile, uint64_t seed, int workers) {
    nlohmann::ordered_json j;
    j["profile"] = profile;
    j["seed"] = seed;
    if (profile == "quick") {
        auto sbm = run_sbm_node_bench(seed, workers);
        j["sbm_node"] = {{"test_accuracy", sbm.test_accuracy},
                         {"majority_baseline", sbm.majority_baseline},
                         {"acc_infer_16", sbm.acc_infer_16},
                         {"acc_infer_128", sbm.acc_infer_128}};
        return j;
    }
    if (profile == "tta") {
        auto sbm = run_sbm_tta_bench(seed, workers);
        j["sbm_tta"] = {{"test_accuracy", sbm.test_accuracy},
                        {"majority_baseline", sbm.majority_baseline},
                        {"acc_infer_16", sbm.acc_infer_16},
                        {"acc_infer_128", sbm.acc_infer_128}};
        return j;
    }
    if (profile == "full") {
        auto csl = run_csl_bench(seed, workers);
        j["csl"] = {{"test_accuracy", csl.test_accuracy},
                    {"wl_all_identical", csl.wl_all_identical},
                    {"epochs", csl.epochs_ran}};
        auto tree = run_tree_bench(seed, 4, workers);
        j["tree_match_r4"] = {{"train_accuracy", tree.train_accuracy}, {"epochs_to_fit", tree.epochs_to_fit}};
        auto sbm = run_sbm_node_bench(seed, workers);
        j["sbm_node"] = {{"test_accuracy", sbm.test_accuracy},
                         {"majority_baseline", sbm.majority_baseline},
                         {"acc_infer_16", sbm.acc_infer_16},
                         {"acc_infer_128", sbm.acc_infer_128}};
        auto link = run_sbm_link_bench(seed, workers);
        j["sbm_link"] = {{"hits_at_k", link.hits}, {"k", link.hits_k}, {"random_baseline", link.random_baseline}};
        return j;
    }
    throw std::runtime_error("unknown bench profile: " + profile);
}

}  // namespace gpm
