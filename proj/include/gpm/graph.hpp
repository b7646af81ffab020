#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gpm {

using NodeId = int32_t;
using ArcId = int64_t;

// Immutable undirected graph in CSR form. Every edge is stored as two
// directed arcs; neighbor lists are sorted ascending. Optional dense
// feature tables and labels ride along.
class Graph {
public:
    Graph() = default;

    // Builds from an undirected edge list. When `symmetrize` is false the
    // list must already contain both directions of every edge.
    static Graph from_edges(NodeId num_nodes, const std::vector<std::pair<NodeId, NodeId>>& edges,
                            bool symmetrize = true, bool allow_self_loops = false);

    NodeId num_nodes() const { return num_nodes_; }
    ArcId num_arcs() const { return static_cast<ArcId>(adj_.size()); }
    // Undirected edge count (self-loops, when permitted, count once).
    int64_t num_edges() const { return num_edges_; }

    int degree(NodeId v) const;
    std::span<const NodeId> neighbors(NodeId v) const;

    // Position of arc (u,v) in the CSR arrays; -1 if absent.
    ArcId arc_id(NodeId u, NodeId v) const;
    bool has_edge(NodeId u, NodeId v) const { return arc_id(u, v) >= 0; }

    const std::vector<ArcId>& offsets() const { return offsets_; }
    const std::vector<NodeId>& adjacency() const { return adj_; }

    bool has_node_features() const { return node_features_.size() > 0; }
    bool has_edge_features() const { return edge_features_.size() > 0; }
    const Eigen::MatrixXd& node_features() const { return node_features_; }
    // Row per directed arc, aligned with the CSR arc order.
    const Eigen::MatrixXd& edge_features() const { return edge_features_; }
    const std::vector<int>& node_labels() const { return node_labels_; }
    bool has_node_labels() const { return !node_labels_.empty(); }
    std::optional<double> graph_label() const { return graph_label_; }

    void set_node_features(Eigen::MatrixXd x);
    // One row per directed arc (use set_edge_features_undirected for
    // per-edge rows that should be mirrored onto both arcs).
    void set_edge_features(Eigen::MatrixXd e);
    void set_node_labels(std::vector<int> labels);
    void set_graph_label(double y) { graph_label_ = y; }

    // Structure-only FNV-1a hash (offsets + adjacency); pairs caches and
    // checkpoints with the graph they were computed on.
    uint64_t structure_hash() const;

    void check_invariants() const;

private:
    NodeId num_nodes_ = 0;
    int64_t num_edges_ = 0;
    std::vector<ArcId> offsets_;
    std::vector<NodeId> adj_;
    Eigen::MatrixXd node_features_;
    Eigen::MatrixXd edge_features_;
    std::vector<int> node_labels_;
    std::optional<double> graph_label_;
};

enum class InstanceKind { Node, Edge, Graph };

// A learning instance: a node, a node pair, or a whole graph. `graph`
// indexes into the owning dataset (0 for single-graph tasks).
struct InstanceRef {
    InstanceKind kind = InstanceKind::Node;
    int32_t graph = 0;
    NodeId u = 0;
    NodeId v = 0;

    static InstanceRef node(NodeId id, int32_t g = 0) { return {InstanceKind::Node, g, id, 0}; }
    static InstanceRef edge(NodeId a, NodeId b, int32_t g = 0) { return {InstanceKind::Edge, g, a, b}; }
    static InstanceRef graph_instance(int32_t g) { return {InstanceKind::Graph, g, 0, 0}; }

    bool operator==(const InstanceRef&) const = default;
    uint64_t key() const;
};

// Fraction of edges whose endpoints share a label; 0 for edgeless graphs.
double homophily_ratio(const Graph& g, const std::vector<int>& labels);

struct EgoGraph {
    Graph graph;
    std::vector<NodeId> original_ids;  // new id -> original id
};

// Induced subgraph on nodes within `radius` hops of v.
EgoGraph ego_graph(const Graph& g, NodeId v, int radius);

struct LoadOptions {
    bool symmetrize = true;
    bool allow_self_loops = false;
};

enum class GraphFormat { Json };

Graph load_graph(const std::string& path, GraphFormat format, const LoadOptions& opts = {});
std::vector<Graph> load_graph_dataset(const std::string& path, GraphFormat format,
                                      const LoadOptions& opts = {});
void save_graph(const Graph& g, const std::string& path);
void save_graph_dataset(const std::vector<Graph>& graphs, const std::string& path);

// JSON (de)serialization against the canonical single-graph schema.
std::string graph_to_json(const Graph& g);
Graph graph_from_json_text(const std::string& text, const LoadOptions& opts = {});

}  // namespace gpm
