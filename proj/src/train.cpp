#include "gpm/train.hpp"

#include <algorithm>
#include <set>

namespace gpm {

Dataset make_node_dataset(std::vector<Graph> graphs) {
    Dataset d;
    d.task = TaskKind::NodeClf;
    d.graphs = std::move(graphs);
    int max_label = -1;
    for (size_t gi = 0; gi < d.graphs.size(); ++gi) {
        const Graph& g = d.graphs[gi];
        if (!g.has_node_labels()) continue;
        for (NodeId v = 0; v < g.num_nodes(); ++v) {
            int y = g.node_labels()[static_cast<size_t>(v)];
            if (y < 0 || g.degree(v) == 0) continue;
            d.instances.push_back(InstanceRef::node(v, static_cast<int32_t>(gi)));
            d.targets.push_back(static_cast<double>(y));
            max_label = std::max(max_label, y);
        }
    }
    detail::check(!d.instances.empty(), "node dataset: no labeled non-isolated nodes");
    d.num_classes = max_label + 1;
    return d;
}

Dataset make_graph_dataset(std::vector<Graph> graphs, bool regression) {
    Dataset d;
    d.task = regression ? TaskKind::GraphReg : TaskKind::GraphClf;
    d.graphs = std::move(graphs);
    int max_label = -1;
    for (size_t gi = 0; gi < d.graphs.size(); ++gi) {
        const Graph& g = d.graphs[gi];
        detail::check(g.graph_label().has_value(), "graph dataset: graph without a label");
        d.instances.push_back(InstanceRef::graph_instance(static_cast<int32_t>(gi)));
        double y = *g.graph_label();
        d.targets.push_back(y);
        if (!regression) max_label = std::max(max_label, static_cast<int>(y));
    }
    d.num_classes = regression ? 0 : max_label + 1;
    return d;
}

Split make_split(size_t n, double train_frac, double val_frac, uint64_t seed) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(hash_mix(seed, 0x73706c6974ull));
    rng.shuffle(order);
    size_t n_train = static_cast<size_t>(std::llround(train_frac * static_cast<double>(n)));
    size_t n_val = static_cast<size_t>(std::llround(val_frac * static_cast<double>(n)));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

std::vector<std::pair<NodeId, NodeId>> negative_sampling(const Graph& g, size_t count, Rng& rng,
                                                         std::vector<std::pair<NodeId, NodeId>>* used) {
    const int64_t n = g.num_nodes();
    const int64_t possible = n * (n - 1) / 2 - g.num_edges();
    detail::check(static_cast<int64_t>(count) + static_cast<int64_t>(used ? used->size() : 0) <= possible,
                  "negative_sampling: graph too dense for the requested count");
    std::set<std::pair<NodeId, NodeId>> taken;
    if (used)
        for (auto& e : *used) taken.insert(e);
    std::vector<std::pair<NodeId, NodeId>> out;
    out.reserve(count);
    size_t attempts = 0;
    const size_t max_attempts = 1000 + 200 * count;
    while (out.size() < count) {
        detail::check(++attempts <= max_attempts, "negative_sampling: rejection sampling exhausted");
        NodeId u = static_cast<NodeId>(rng.below(static_cast<uint64_t>(n)));
        NodeId v = static_cast<NodeId>(rng.below(static_cast<uint64_t>(n)));
        if (u == v) continue;
        if (u > v) std::swap(u, v);
        if (g.has_edge(u, v)) continue;
        if (!taken.insert({u, v}).second) continue;
        out.emplace_back(u, v);
    }
    if (used) used->insert(used->end(), out.begin(), out.end());
    return out;
}

LinkData make_link_dataset(Graph graph, double train_frac, double val_frac, int neg_eval_pool, uint64_t seed) {
    std::vector<std::pair<NodeId, NodeId>> pos;
    for (NodeId u = 0; u < graph.num_nodes(); ++u)
        for (NodeId v : graph.neighbors(u))
            if (u < v) pos.emplace_back(u, v);
    Rng rng(hash_mix(seed, 0x6c696e6bull));
    rng.shuffle(pos);

    const size_t n = pos.size();
    size_t n_train = static_cast<size_t>(std::llround(train_frac * static_cast<double>(n)));
    size_t n_val = static_cast<size_t>(std::llround(val_frac * static_cast<double>(n)));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    const size_t n_test = n - n_train - n_val;

    std::vector<std::pair<NodeId, NodeId>> used;  // keeps all negative draws disjoint
    auto train_neg = negative_sampling(graph, n_train, rng, &used);
    auto val_neg = negative_sampling(graph, static_cast<size_t>(neg_eval_pool), rng, &used);
    auto test_neg = negative_sampling(graph, static_cast<size_t>(neg_eval_pool), rng, &used);

    LinkData out;
    out.data.task = TaskKind::LinkPred;
    out.data.num_classes = 2;
    out.data.graphs.push_back(std::move(graph));

    auto push = [&](const std::vector<std::pair<NodeId, NodeId>>& edges, size_t begin, size_t end, double label,
                    std::vector<size_t>& into) {
        for (size_t i = begin; i < end; ++i) {
            into.push_back(out.data.instances.size());
            out.data.instances.push_back(InstanceRef::edge(edges[i].first, edges[i].second, 0));
            out.data.targets.push_back(label);
        }
    };
    push(pos, 0, n_train, 1.0, out.split.train);
    push(train_neg, 0, train_neg.size(), 0.0, out.split.train);
    push(pos, n_train, n_train + n_val, 1.0, out.split.val);
    push(val_neg, 0, val_neg.size(), 0.0, out.split.val);
    push(pos, n_train + n_val, n_train + n_val + n_test, 1.0, out.split.test);
    push(test_neg, 0, test_neg.size(), 0.0, out.split.test);
    return out;
}

TaskData build_task(std::vector<Graph> graphs, const RunConfig& cfg) {
    TaskData out;
    switch (cfg.task) {
        case TaskKind::NodeClf:
            out.data = make_node_dataset(std::move(graphs));
            out.split = make_split(out.data.instances.size(), cfg.train_frac, cfg.val_frac, cfg.seed);
            break;
        case TaskKind::GraphClf:
        case TaskKind::GraphReg:
            out.data = make_graph_dataset(std::move(graphs), cfg.task == TaskKind::GraphReg);
            out.split = make_split(out.data.instances.size(), cfg.train_frac, cfg.val_frac, cfg.seed);
            break;
        case TaskKind::LinkPred: {
            detail::check(graphs.size() == 1, "link task: expected a single graph");
            LinkData link =
                make_link_dataset(std::move(graphs[0]), cfg.train_frac, cfg.val_frac, cfg.neg_eval_pool, cfg.seed);
            out.data = std::move(link.data);
            out.split = std::move(link.split);
            break;
        }
    }
    out.data.prepare_pe(cfg.pe_kind, cfg.pe_dim);
    return out;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    detail::check(!preds.empty() && preds.size() == labels.size(), "accuracy: length mismatch");
    size_t hit = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) hit++;
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double mean_absolute_error(const std::vector<double>& preds, const std::vector<double>& targets) {
    detail::check(!preds.empty() && preds.size() == targets.size(), "mae: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - targets[i]);
    return s / static_cast<double>(preds.size());
}

double hits_at_k(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores, int k) {
    detail::check(!pos_scores.empty(), "hits_at_k: empty positives");
    detail::check(k >= 1 && static_cast<size_t>(k) <= neg_scores.size(), "hits_at_k: K exceeds negative count");
    std::vector<double> negs = neg_scores;
    std::sort(negs.begin(), negs.end(), std::greater<double>());
    const double threshold = negs[static_cast<size_t>(k) - 1];
    size_t hit = 0;
    for (double s : pos_scores)
        if (s > threshold) hit++;
    return static_cast<double>(hit) / static_cast<double>(pos_scores.size());
}

}  // namespace gpm
