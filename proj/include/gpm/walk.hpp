#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gpm/graph.hpp"
#include "gpm/rng.hpp"

namespace gpm {

// Node sequence of one random walk, plus the traversed arc ids when the
// graph carries edge features (empty otherwise).
struct SemanticPath {
    std::vector<NodeId> nodes;  // v_0 .. v_L
    std::vector<ArcId> arcs;    // length L, or empty

    int length() const { return static_cast<int>(nodes.size()) - 1; }
};

// First-occurrence relabeling of a walk: 0 for the start node, each new
// node gets the next unused integer, revisits repeat their label.
struct AnonymousPath {
    std::vector<int> labels;

    int length() const { return static_cast<int>(labels.size()) - 1; }
    bool operator==(const AnonymousPath&) const = default;
};

struct WalkPattern {
    SemanticPath semantic;
    AnonymousPath anonymous;
    int scale = 0;  // the length bucket this pattern was sampled at
};

struct PatternSet {
    InstanceRef instance;
    std::vector<WalkPattern> patterns;
};

// Second-order walk bias. (1,1) is the unbiased law.
struct BiasParams {
    double p = 1.0;  // return parameter
    double q = 1.0;  // in-out parameter

    bool unbiased() const { return p == 1.0 && q == 1.0; }
};

// One walk of `length` steps from `start`. Unbiased steps are uniform over
// neighbors; biased steps weight the previous node 1/p, its neighbors 1,
// and everything else 1/q.
SemanticPath sample_walk(const Graph& g, NodeId start, int length, const BiasParams& bias, Rng& rng);

AnonymousPath anonymize(const SemanticPath& walk);

// Indicator rows z_i with z_{i,j} = 1 iff labels i and j match, each row
// zero-padded to pad_to+1 entries (pad_to < 0 uses the path's own length).
std::vector<std::vector<float>> loop_adjacency(const AnonymousPath& anon, int pad_to = -1);

// k patterns for one instance. Node: all walks start at the node.
// Edge(u,v): ceil(k/2) from u then floor(k/2) from v. Graph: starts drawn
// uniformly from non-isolated nodes. Scales assigned round-robin.
PatternSet tokenize_instance(const Graph& g, const InstanceRef& inst, int k, const std::vector<int>& scales,
                             const BiasParams& bias, Rng& rng);

// Pre-sampled patterns for a list of instances, keyed by position.
class PatternCache {
public:
    PatternCache() = default;
    PatternCache(uint64_t seed, int k, std::vector<int> scales, BiasParams bias, uint64_t graph_hash)
        : seed_(seed), k_(k), scales_(std::move(scales)), bias_(bias), graph_hash_(graph_hash) {}

    uint64_t seed() const { return seed_; }
    int k() const { return k_; }
    const std::vector<int>& scales() const { return scales_; }
    const BiasParams& bias() const { return bias_; }
    uint64_t graph_hash() const { return graph_hash_; }
    int max_scale() const;

    size_t size() const { return sets_.size(); }
    const PatternSet& at(size_t i) const { return sets_.at(i); }
    std::vector<PatternSet>& sets() { return sets_; }
    const std::vector<PatternSet>& sets() const { return sets_; }

    void save(const std::string& path) const;
    static PatternCache load(const std::string& path, const std::vector<Graph>& graphs);
    std::string to_json() const;

private:
    uint64_t seed_ = 0;
    int k_ = 0;
    std::vector<int> scales_;
    BiasParams bias_;
    uint64_t graph_hash_ = 0;
    std::vector<PatternSet> sets_;
};

// Deterministic per-instance seeding: results do not depend on worker
// count or scheduling. `workers` <= 1 runs inline.
PatternCache presample(const std::vector<Graph>& graphs, const std::vector<InstanceRef>& instances, int k,
                       const std::vector<int>& scales, const BiasParams& bias, uint64_t seed, int workers = 1);

// Structure hash covering every graph of a dataset.
uint64_t dataset_hash(const std::vector<Graph>& graphs);

// m pattern indices drawn without replacement from a cached set.
std::vector<size_t> subsample_indices(size_t cache_k, size_t m, Rng& rng);

}  // namespace gpm
