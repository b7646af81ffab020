#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "gpm/graph.hpp"
#include "gpm/train.hpp"

namespace gpm {

// Circulant skip-link graphs: node i connects to i+-1 and i+-r (mod n).
// One class per skip; copies are uniformly random node relabelings. Node
// features are all-ones so only structure is informative.
struct CSLSpec {
    int n = 41;
    std::vector<int> skips{2, 3, 5, 6, 9};
    int copies_per_class = 12;
};
std::vector<Graph> gen_csl(const CSLSpec& spec, uint64_t seed);

// Complete binary trees; leaves carry (key, label) one-hot features, the
// root carries a key matching exactly one leaf, the root label (stored as
// node label of node 0) is that leaf's label. The degree variant expresses
// keys structurally as dummy-child counts instead of feature slots.
struct TreeMatchSpec {
    int radius = 4;
    int examples = 1000;
    int classes = 4;
    bool degree_variant = false;
};
std::vector<Graph> gen_tree_match(const TreeMatchSpec& spec, uint64_t seed);

// Two-level stochastic block model with class-conditional Gaussian
// features; labels are block ids.
struct SBMSpec {
    int blocks = 3;
    int nodes_per_block = 80;
    double p_in = 0.08;
    double p_out = 0.01;
    int feature_dim = 8;
    double feature_separation = 1.0;
};
Graph gen_sbm(const SBMSpec& spec, uint64_t seed);

// 1-WL color refinement from a constant initial coloring; returns the
// color histogram after exactly `rounds` iterations. Histograms from equal
// round counts are comparable across graphs.
std::map<uint64_t, int64_t> wl1_refine(const Graph& g, int rounds);
bool wl1_equivalent(const Graph& a, const Graph& b);

// ---------------------------------------------------------------------------
// Benchmark harnesses (each deterministic per seed)
// ---------------------------------------------------------------------------

struct CslBenchResult {
    double test_accuracy = 0.0;
    bool wl_all_identical = false;
    int epochs_ran = 0;
};
CslBenchResult run_csl_bench(uint64_t seed, int workers);

struct TreeBenchResult {
    double train_accuracy = 0.0;
    int epochs_to_fit = -1;  // -1 when 100% was not reached
};
TreeBenchResult run_tree_bench(uint64_t seed, int radius, int workers);

struct SbmNodeBenchResult {
    double test_accuracy = 0.0;
    double majority_baseline = 0.0;
    double acc_infer_16 = 0.0;
    double acc_infer_128 = 0.0;
};
SbmNodeBenchResult run_sbm_node_bench(uint64_t seed, int workers);

// Same task on a harder feature configuration where per-pattern signal is
// weak; exercises the train-small/infer-large augmentation gap.
SbmNodeBenchResult run_sbm_tta_bench(uint64_t seed, int workers);

struct SbmLinkBenchResult {
    double hits = 0.0;
    double random_baseline = 0.0;
    int hits_k = 10;
};
SbmLinkBenchResult run_sbm_link_bench(uint64_t seed, int workers);

// Per-epoch training wall time at m=16 versus m=128 on the SBM task,
// presampled cache shared (test-time-augmentation speedup measurement).
struct TtaSpeedResult {
    double sec_per_epoch_m16 = 0.0;
    double sec_per_epoch_m128 = 0.0;
    double ratio = 0.0;
};
TtaSpeedResult run_tta_speed(uint64_t seed, int workers);

// Identifier cost across pattern counts and presample cost across graph
// sizes, with fitted log-log exponents.
struct ScalingResult {
    std::vector<std::pair<int, double>> identifier_cost;      // (k, sec per instance)
    std::vector<std::pair<int64_t, double>> presample_cost;   // (n, sec)
    double identifier_exponent = 0.0;
    double presample_exponent = 0.0;
};
ScalingResult run_scaling(uint64_t seed);

// Deterministic metric JSON for a bench profile ("quick" or "full").
// Contains metrics, seeds, and config hashes only; no wall times.
nlohmann::ordered_json run_bench_suite(const std::string& profile, uint64_t seed, int workers);

double fit_loglog_exponent(const std::vector<std::pair<double, double>>& points);

}  // namespace gpm
