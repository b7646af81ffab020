#include "gpm/walk.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <thread>

#include "gpm/parallel.hpp"

namespace gpm {

using json = nlohmann::ordered_json;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

}  // namespace

SemanticPath sample_walk(const Graph& g, NodeId start, int length, const BiasParams& bias, Rng& rng) {
    require(length >= 1, "sample_walk: length must be >= 1");
    require(g.degree(start) >= 1, "sample_walk: start node has degree 0");
    require(bias.p > 0.0 && bias.q > 0.0, "sample_walk: bias parameters must be positive");

    SemanticPath path;
    path.nodes.reserve(static_cast<size_t>(length) + 1);
    if (g.has_edge_features()) path.arcs.reserve(static_cast<size_t>(length));
    path.nodes.push_back(start);

    NodeId cur = start;
    NodeId prev = -1;
    std::vector<double> weights;
    for (int step = 0; step < length; ++step) {
        auto nb = g.neighbors(cur);
        NodeId next;
        if (bias.unbiased() || prev < 0) {
            next = nb[static_cast<size_t>(rng.below(nb.size()))];
        } else {
            weights.resize(nb.size());
            auto prev_nb = g.neighbors(prev);
            double total = 0.0;
            for (size_t i = 0; i < nb.size(); ++i) {
                double w;
                if (nb[i] == prev)
                    w = 1.0 / bias.p;
                else if (std::binary_search(prev_nb.begin(), prev_nb.end(), nb[i]))
                    w = 1.0;
                else
                    w = 1.0 / bias.q;
                total += w;
                weights[i] = total;
            }
            double r = rng.uniform() * total;
            size_t idx = static_cast<size_t>(std::lower_bound(weights.begin(), weights.end(), r) - weights.begin());
            if (idx >= nb.size()) idx = nb.size() - 1;
            next = nb[idx];
        }
        if (g.has_edge_features()) path.arcs.push_back(g.arc_id(cur, next));
        path.nodes.push_back(next);
        prev = cur;
        cur = next;
    }
    return path;
}

AnonymousPath anonymize(const SemanticPath& walk) {
    require(!walk.nodes.empty(), "anonymize: empty walk");
    AnonymousPath out;
    out.labels.reserve(walk.nodes.size());
    std::vector<std::pair<NodeId, int>> seen;  // (node, label), small linear scan
    for (NodeId v : walk.nodes) {
        int label = -1;
        for (const auto& [node, lab] : seen) {
            if (node == v) {
                label = lab;
                break;
            }
        }
        if (label < 0) {
            label = static_cast<int>(seen.size());
            seen.emplace_back(v, label);
        }
        out.labels.push_back(label);
    }
    return out;
}

std::vector<std::vector<float>> loop_adjacency(const AnonymousPath& anon, int pad_to) {
    const int len = anon.length();
    require(len >= 0, "loop_adjacency: empty path");
    const int dim = (pad_to < 0 ? len : pad_to) + 1;
    require(dim >= len + 1, "loop_adjacency: pad_to shorter than path");
    std::vector<std::vector<float>> rows(static_cast<size_t>(len) + 1);
    for (int i = 0; i <= len; ++i) {
        auto& row = rows[static_cast<size_t>(i)];
        row.assign(static_cast<size_t>(dim), 0.0f);
        for (int j = 0; j <= len; ++j)
            if (anon.labels[static_cast<size_t>(i)] == anon.labels[static_cast<size_t>(j)])
                row[static_cast<size_t>(j)] = 1.0f;
    }
    return rows;
}

PatternSet tokenize_instance(const Graph& g, const InstanceRef& inst, int k, const std::vector<int>& scales,
                             const BiasParams& bias, Rng& rng) {
    require(k >= 1, "tokenize_instance: k must be >= 1");
    require(!scales.empty(), "tokenize_instance: scales must be nonempty");
    for (int s : scales) require(s >= 1, "tokenize_instance: scales must be >= 1");

    PatternSet set;
    set.instance = inst;
    set.patterns.reserve(static_cast<size_t>(k));

    std::vector<NodeId> starts;
    starts.reserve(static_cast<size_t>(k));
    switch (inst.kind) {
        case InstanceKind::Node:
            require(inst.u >= 0 && inst.u < g.num_nodes(), "tokenize_instance: node id out of range");
            require(g.degree(inst.u) >= 1, "tokenize_instance: node instance has degree 0");
            starts.assign(static_cast<size_t>(k), inst.u);
            break;
        case InstanceKind::Edge: {
            require(inst.u >= 0 && inst.u < g.num_nodes() && inst.v >= 0 && inst.v < g.num_nodes(),
                    "tokenize_instance: edge endpoint out of range");
            require(g.degree(inst.u) >= 1 && g.degree(inst.v) >= 1,
                    "tokenize_instance: edge endpoint has degree 0");
            int from_u = (k + 1) / 2;
            for (int i = 0; i < k; ++i) starts.push_back(i < from_u ? inst.u : inst.v);
            break;
        }
        case InstanceKind::Graph: {
            std::vector<NodeId> pool;
            for (NodeId v = 0; v < g.num_nodes(); ++v)
                if (g.degree(v) >= 1) pool.push_back(v);
            require(!pool.empty(), "tokenize_instance: graph has no node with degree >= 1");
            for (int i = 0; i < k; ++i) starts.push_back(pool[static_cast<size_t>(rng.below(pool.size()))]);
            break;
        }
    }

    for (int i = 0; i < k; ++i) {
        int scale = scales[static_cast<size_t>(i) % scales.size()];
        WalkPattern pat;
        pat.scale = scale;
        pat.semantic = sample_walk(g, starts[static_cast<size_t>(i)], scale, bias, rng);
        pat.anonymous = anonymize(pat.semantic);
        set.patterns.push_back(std::move(pat));
    }
    return set;
}

int PatternCache::max_scale() const {
    int m = 0;
    for (int s : scales_) m = std::max(m, s);
    return m;
}

uint64_t dataset_hash(const std::vector<Graph>& graphs) {
    uint64_t h = 0x6a09e667f3bcc908ull;
    for (const auto& g : graphs) h = hash_mix(h, g.structure_hash());
    return h;
}

PatternCache presample(const std::vector<Graph>& graphs, const std::vector<InstanceRef>& instances, int k,
                       const std::vector<int>& scales, const BiasParams& bias, uint64_t seed, int workers) {
    PatternCache cache(seed, k, scales, bias, dataset_hash(graphs));
    cache.sets().resize(instances.size());
    auto work = [&](size_t i) {
        const InstanceRef& inst = instances[i];
        Rng rng(hash_mix(hash_mix(seed, 0x70617474ull), inst.key()));
        cache.sets()[i] = tokenize_instance(graphs.at(static_cast<size_t>(inst.graph)), inst, k, scales, bias, rng);
    };
    parallel_for_chunks(instances.size(), workers, work);
    return cache;
}

std::vector<size_t> subsample_indices(size_t cache_k, size_t m, Rng& rng) {
    require(m <= cache_k, "subsample: m exceeds cached pattern count");
    return rng.sample_without_replacement(cache_k, m);
}

// ---------------------------------------------------------------------------
// Cache file: magic, u64 header length, JSON header, then fixed-width
// little-endian records. Arc ids and anonymous paths are recomputed on load.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'G', 'P', 'M', 'C'};

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

json header_json(const PatternCache& c) {
    json h;
    h["seed"] = c.seed();
    h["k"] = c.k();
    h["scales"] = c.scales();
    h["bias"] = {{"p", c.bias().p}, {"q", c.bias().q}};
    h["graph_hash"] = c.graph_hash();
    h["instances"] = c.size();
    return h;
}

}  // namespace

void PatternCache::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write cache file: " + path);
    out.write(kMagic, 4);
    std::string header = header_json(*this).dump();
    write_pod<uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& set : sets_) {
        write_pod<uint8_t>(out, static_cast<uint8_t>(set.instance.kind));
        write_pod<int32_t>(out, set.instance.graph);
        write_pod<int32_t>(out, set.instance.u);
        write_pod<int32_t>(out, set.instance.v);
        for (const auto& pat : set.patterns) {
            write_pod<int32_t>(out, pat.scale);
            write_pod<int32_t>(out, static_cast<int32_t>(pat.semantic.nodes.size()));
            for (NodeId n : pat.semantic.nodes) write_pod<int32_t>(out, n);
        }
    }
    require(out.good(), "write failure on cache file: " + path);
}

PatternCache PatternCache::load(const std::string& path, const std::vector<Graph>& graphs) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open cache file: " + path);
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::equal(magic, magic + 4, kMagic), "not a pattern cache file: " + path);
    uint64_t hlen = read_pod<uint64_t>(in);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    json h = json::parse(header);

    PatternCache cache(h.at("seed").get<uint64_t>(), h.at("k").get<int>(), h.at("scales").get<std::vector<int>>(),
                       BiasParams{h.at("bias").at("p").get<double>(), h.at("bias").at("q").get<double>()},
                       h.at("graph_hash").get<uint64_t>());
    require(cache.graph_hash() == dataset_hash(graphs), "cache/graph hash mismatch: " + path);

    size_t count = h.at("instances").get<size_t>();
    cache.sets_.resize(count);
    for (size_t i = 0; i < count; ++i) {
        PatternSet& set = cache.sets_[i];
        set.instance.kind = static_cast<InstanceKind>(read_pod<uint8_t>(in));
        set.instance.graph = read_pod<int32_t>(in);
        set.instance.u = read_pod<int32_t>(in);
        set.instance.v = read_pod<int32_t>(in);
        const Graph& g = graphs.at(static_cast<size_t>(set.instance.graph));
        set.patterns.resize(static_cast<size_t>(cache.k_));
        for (auto& pat : set.patterns) {
            pat.scale = read_pod<int32_t>(in);
            int32_t n = read_pod<int32_t>(in);
            pat.semantic.nodes.resize(static_cast<size_t>(n));
            for (auto& node : pat.semantic.nodes) node = read_pod<int32_t>(in);
            if (g.has_edge_features()) {
                pat.semantic.arcs.resize(static_cast<size_t>(n) - 1);
                for (size_t s = 0; s + 1 < static_cast<size_t>(n); ++s)
                    pat.semantic.arcs[s] = g.arc_id(pat.semantic.nodes[s], pat.semantic.nodes[s + 1]);
            }
            pat.anonymous = anonymize(pat.semantic);
        }
        require(in.good(), "truncated cache file: " + path);
    }
    return cache;
}

std::string PatternCache::to_json() const {
    json j;
    j["header"] = header_json(*this);
    json sets = json::array();
    for (const auto& set : sets_) {
        json s;
        s["instance"] = {{"kind", static_cast<int>(set.instance.kind)},
                         {"graph", set.instance.graph},
                         {"u", set.instance.u},
                         {"v", set.instance.v}};
        json pats = json::array();
        for (const auto& pat : set.patterns) {
            pats.push_back({{"scale", pat.scale}, {"nodes", pat.semantic.nodes}, {"anon", pat.anonymous.labels}});
        }
        s["patterns"] = std::move(pats);
        sets.push_back(std::move(s));
    }
    j["sets"] = std::move(sets);
    return j.dump(2);
}

}  // namespace gpm
