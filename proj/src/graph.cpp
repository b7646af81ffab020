#include "gpm/graph.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "gpm/rng.hpp"

namespace gpm {

using json = nlohmann::ordered_json;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

}  // namespace

Graph Graph::from_edges(NodeId num_nodes, const std::vector<std::pair<NodeId, NodeId>>& edges,
                        bool symmetrize, bool allow_self_loops) {
    require(num_nodes >= 0, "graph: negative node count");
    std::vector<std::pair<NodeId, NodeId>> arcs;
    arcs.reserve(edges.size() * 2);
    for (auto [u, v] : edges) {
        require(u >= 0 && u < num_nodes && v >= 0 && v < num_nodes, "graph: edge endpoint out of range");
        if (u == v) {
            require(allow_self_loops, "graph: self-loop without allow_self_loops");
            arcs.emplace_back(u, v);
            continue;
        }
        arcs.emplace_back(u, v);
        if (symmetrize) arcs.emplace_back(v, u);
    }
    std::sort(arcs.begin(), arcs.end());
    arcs.erase(std::unique(arcs.begin(), arcs.end()), arcs.end());

    if (!symmetrize) {
        for (auto [u, v] : arcs) {
            if (u == v) continue;
            bool rev = std::binary_search(arcs.begin(), arcs.end(), std::make_pair(v, u));
            require(rev, "graph: asymmetric edge list without symmetrize flag");
        }
    }

    Graph g;
    g.num_nodes_ = num_nodes;
    g.offsets_.assign(static_cast<size_t>(num_nodes) + 1, 0);
    for (auto [u, v] : arcs) g.offsets_[static_cast<size_t>(u) + 1]++;
    for (NodeId i = 0; i < num_nodes; ++i) g.offsets_[i + 1] += g.offsets_[i];
    g.adj_.resize(arcs.size());
    {
        std::vector<ArcId> cursor(g.offsets_.begin(), g.offsets_.end() - 1);
        for (auto [u, v] : arcs) g.adj_[static_cast<size_t>(cursor[u]++)] = v;
    }
    int64_t self = 0;
    for (auto [u, v] : arcs)
        if (u == v) self++;
    g.num_edges_ = (static_cast<int64_t>(arcs.size()) - self) / 2 + self;
    return g;
}

int Graph::degree(NodeId v) const {
    require(v >= 0 && v < num_nodes_, "graph: node id out of range");
    return static_cast<int>(offsets_[static_cast<size_t>(v) + 1] - offsets_[v]);
}

std::span<const NodeId> Graph::neighbors(NodeId v) const {
    require(v >= 0 && v < num_nodes_, "graph: node id out of range");
    return {adj_.data() + offsets_[v], static_cast<size_t>(offsets_[static_cast<size_t>(v) + 1] - offsets_[v])};
}

ArcId Graph::arc_id(NodeId u, NodeId v) const {
    require(u >= 0 && u < num_nodes_ && v >= 0 && v < num_nodes_, "graph: node id out of range");
    auto begin = adj_.begin() + offsets_[u];
    auto end = adj_.begin() + offsets_[static_cast<size_t>(u) + 1];
    auto it = std::lower_bound(begin, end, v);
    if (it == end || *it != v) return -1;
    return static_cast<ArcId>(it - adj_.begin());
}

void Graph::set_node_features(Eigen::MatrixXd x) {
    require(x.rows() == num_nodes_, "graph: node feature row count mismatch");
    node_features_ = std::move(x);
}

void Graph::set_edge_features(Eigen::MatrixXd e) {
    require(e.rows() == static_cast<Eigen::Index>(adj_.size()), "graph: edge feature row count mismatch");
    edge_features_ = std::move(e);
}

void Graph::set_node_labels(std::vector<int> labels) {
    require(static_cast<NodeId>(labels.size()) == num_nodes_, "graph: node label length mismatch");
    node_labels_ = std::move(labels);
}

uint64_t Graph::structure_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    mix(static_cast<uint64_t>(num_nodes_));
    for (auto o : offsets_) mix(static_cast<uint64_t>(o));
    for (auto v : adj_) mix(static_cast<uint64_t>(v));
    return h;
}

void Graph::check_invariants() const {
    require(offsets_.size() == static_cast<size_t>(num_nodes_) + 1, "graph: offset table size");
    for (size_t i = 0; i + 1 < offsets_.size(); ++i)
        require(offsets_[i] <= offsets_[i + 1], "graph: offsets not nondecreasing");
    require(offsets_.back() == static_cast<ArcId>(adj_.size()), "graph: last offset != arc count");
    for (NodeId v = 0; v < num_nodes_; ++v) {
        auto nb = neighbors(v);
        for (size_t i = 0; i + 1 < nb.size(); ++i) require(nb[i] < nb[i + 1], "graph: neighbors not sorted/unique");
        for (NodeId w : nb)
            if (w != v) require(arc_id(w, v) >= 0, "graph: missing reverse arc");
    }
    if (node_features_.size() > 0) require(node_features_.rows() == num_nodes_, "graph: node feature rows");
    if (edge_features_.size() > 0)
        require(edge_features_.rows() == static_cast<Eigen::Index>(adj_.size()), "graph: edge feature rows");
    if (!node_labels_.empty()) require(node_labels_.size() == static_cast<size_t>(num_nodes_), "graph: label length");
}

uint64_t InstanceRef::key() const {
    uint64_t h = hash_mix(static_cast<uint64_t>(kind), static_cast<uint64_t>(graph));
    h = hash_mix(h, static_cast<uint64_t>(static_cast<int64_t>(u)));
    h = hash_mix(h, static_cast<uint64_t>(static_cast<int64_t>(v)));
    return h;
}

double homophily_ratio(const Graph& g, const std::vector<int>& labels) {
    require(labels.size() == static_cast<size_t>(g.num_nodes()), "homophily: label length mismatch");
    int64_t same = 0, total = 0;
    for (NodeId u = 0; u < g.num_nodes(); ++u) {
        for (NodeId v : g.neighbors(u)) {
            if (v < u) continue;  // each undirected edge once
            total++;
            if (labels[static_cast<size_t>(u)] == labels[static_cast<size_t>(v)]) same++;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(same) / static_cast<double>(total);
}

EgoGraph ego_graph(const Graph& g, NodeId v, int radius) {
    require(v >= 0 && v < g.num_nodes(), "ego_graph: node id out of range");
    require(radius >= 0, "ego_graph: negative radius");
    std::vector<int> dist(static_cast<size_t>(g.num_nodes()), -1);
    std::deque<NodeId> queue{v};
    dist[static_cast<size_t>(v)] = 0;
    std::vector<NodeId> kept{v};
    while (!queue.empty()) {
        NodeId cur = queue.front();
        queue.pop_front();
        if (dist[static_cast<size_t>(cur)] == radius) continue;
        for (NodeId w : g.neighbors(cur)) {
            if (dist[static_cast<size_t>(w)] >= 0) continue;
            dist[static_cast<size_t>(w)] = dist[static_cast<size_t>(cur)] + 1;
            kept.push_back(w);
            queue.push_back(w);
        }
    }
    std::sort(kept.begin(), kept.end());
    std::vector<NodeId> remap(static_cast<size_t>(g.num_nodes()), -1);
    for (size_t i = 0; i < kept.size(); ++i) remap[static_cast<size_t>(kept[i])] = static_cast<NodeId>(i);
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (NodeId u : kept) {
        for (NodeId w : g.neighbors(u)) {
            if (remap[static_cast<size_t>(w)] < 0) continue;
            if (w < u) continue;
            edges.emplace_back(remap[static_cast<size_t>(u)], remap[static_cast<size_t>(w)]);
        }
    }
    EgoGraph out;
    out.graph = Graph::from_edges(static_cast<NodeId>(kept.size()), edges, true, true);
    if (g.has_node_features()) {
        Eigen::MatrixXd x(kept.size(), g.node_features().cols());
        for (size_t i = 0; i < kept.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = g.node_features().row(kept[i]);
        out.graph.set_node_features(std::move(x));
    }
    out.original_ids = std::move(kept);
    return out;
}

namespace {

json graph_to_json_obj(const Graph& g) {
    json j;
    j["num_nodes"] = g.num_nodes();
    json edges = json::array();
    json efeat = json::array();
    for (NodeId u = 0; u < g.num_nodes(); ++u) {
        ArcId a = g.offsets()[u];
        for (NodeId v : g.neighbors(u)) {
            if (u <= v) {
                edges.push_back(json::array({u, v}));
                if (g.has_edge_features()) {
                    json row = json::array();
                    for (Eigen::Index c = 0; c < g.edge_features().cols(); ++c)
                        row.push_back(g.edge_features()(a, c));
                    efeat.push_back(std::move(row));
                }
            }
            ++a;
        }
    }
    j["edges"] = std::move(edges);
    if (g.has_node_features()) {
        json x = json::array();
        for (Eigen::Index r = 0; r < g.node_features().rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < g.node_features().cols(); ++c) row.push_back(g.node_features()(r, c));
            x.push_back(std::move(row));
        }
        j["node_features"] = std::move(x);
    } else {
        j["node_features"] = nullptr;
    }
    j["edge_features"] = g.has_edge_features() ? json(std::move(efeat)) : json(nullptr);
    if (g.has_node_labels())
        j["node_labels"] = g.node_labels();
    else
        j["node_labels"] = nullptr;
    if (g.graph_label())
        j["graph_label"] = *g.graph_label();
    else
        j["graph_label"] = nullptr;
    return j;
}

Graph graph_from_json_obj(const json& j, const LoadOptions& opts) {
    require(j.contains("num_nodes") && j["num_nodes"].is_number_integer(), "graph json: missing num_nodes");
    NodeId n = j["num_nodes"].get<NodeId>();
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (const auto& e : j.at("edges")) {
        require(e.is_array() && e.size() == 2, "graph json: malformed edge");
        edges.emplace_back(e[0].get<NodeId>(), e[1].get<NodeId>());
    }
    Graph g = Graph::from_edges(n, edges, opts.symmetrize, opts.allow_self_loops);
    if (j.contains("node_features") && !j["node_features"].is_null()) {
        const auto& x = j["node_features"];
        require(x.is_array() && x.size() == static_cast<size_t>(n), "graph json: node feature row count");
        Eigen::Index d = x.empty() ? 0 : static_cast<Eigen::Index>(x[0].size());
        Eigen::MatrixXd m(n, d);
        for (size_t r = 0; r < x.size(); ++r) {
            require(static_cast<Eigen::Index>(x[r].size()) == d, "graph json: ragged node features");
            for (Eigen::Index c = 0; c < d; ++c) m(static_cast<Eigen::Index>(r), c) = x[r][c].get<double>();
        }
        g.set_node_features(std::move(m));
    }
    if (j.contains("edge_features") && !j["edge_features"].is_null()) {
        const auto& ef = j["edge_features"];
        require(ef.size() == edges.size(), "graph json: edge feature row count mismatch");
        Eigen::Index d = ef.empty() ? 0 : static_cast<Eigen::Index>(ef[0].size());
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(g.num_arcs(), d);
        for (size_t i = 0; i < edges.size(); ++i) {
            auto [u, v] = edges[i];
            require(static_cast<Eigen::Index>(ef[i].size()) == d, "graph json: ragged edge features");
            Eigen::VectorXd row(d);
            for (Eigen::Index c = 0; c < d; ++c) row(c) = ef[i][c].get<double>();
            ArcId a = g.arc_id(u, v);
            ArcId b = g.arc_id(v, u);
            m.row(a) = row;
            if (b >= 0) m.row(b) = row;
        }
        g.set_edge_features(std::move(m));
    }
    if (j.contains("node_labels") && !j["node_labels"].is_null())
        g.set_node_labels(j["node_labels"].get<std::vector<int>>());
    if (j.contains("graph_label") && !j["graph_label"].is_null()) g.set_graph_label(j["graph_label"].get<double>());
    g.check_invariants();
    return g;
}

json parse_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("parse failure in " + path + ": " + e.what());
    }
    return j;
}

}  // namespace

std::string graph_to_json(const Graph& g) { return graph_to_json_obj(g).dump(); }

Graph graph_from_json_text(const std::string& text, const LoadOptions& opts) {
    return graph_from_json_obj(json::parse(text), opts);
}

Graph load_graph(const std::string& path, GraphFormat, const LoadOptions& opts) {
    json j = parse_file(path);
    require(j.is_object(), "graph json: expected a single graph object");
    return graph_from_json_obj(j, opts);
}

std::vector<Graph> load_graph_dataset(const std::string& path, GraphFormat, const LoadOptions& opts) {
    json j = parse_file(path);
    std::vector<Graph> out;
    if (j.is_object()) {
        out.push_back(graph_from_json_obj(j, opts));
        return out;
    }
    require(j.is_array(), "graph json: expected object or array");
    out.reserve(j.size());
    for (const auto& item : j) out.push_back(graph_from_json_obj(item, opts));
    return out;
}

void save_graph(const Graph& g, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "cannot write file: " + path);
    out << graph_to_json_obj(g).dump(2) << "\n";
}

void save_graph_dataset(const std::vector<Graph>& graphs, const std::string& path) {
    json arr = json::array();
    for (const auto& g : graphs) arr.push_back(graph_to_json_obj(g));
    std::ofstream out(path);
    require(out.good(), "cannot write file: " + path);
    out << arr.dump(2) << "\n";
}

}  // namespace gpm
