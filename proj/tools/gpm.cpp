// Command-line front end: dataset generation, pattern pre-sampling,
// training, evaluation, interpretability export, gradient checking, and
// the benchmark/scaling harnesses. All randomness flows from --seed; all
// outputs are UTF-8 JSON except binary caches and checkpoints.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>

#include "gpm/bench.hpp"
#include "gpm/gradcheck.hpp"
#include "gpm/graph.hpp"
#include "gpm/model.hpp"
#include "gpm/train.hpp"
#include "gpm/walk.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw ValidationError("cannot open file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ValidationError("parse failure in " + path + ": " + e.what());
    }
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out.good()) throw std::runtime_error("cannot write file: " + path);
    out << text;
}

gpm::RunConfig load_run_config(const std::string& path) {
    try {
        return gpm::RunConfig::from_json(read_json_file(path));
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception& e) {
        throw ValidationError(std::string("invalid run config: ") + e.what());
    }
}

std::vector<gpm::Graph> load_graphs(const std::string& path, bool symmetrize, bool allow_self_loops) {
    gpm::LoadOptions opts;
    opts.symmetrize = symmetrize;
    opts.allow_self_loops = allow_self_loops;
    try {
        return gpm::load_graph_dataset(path, gpm::GraphFormat::Json, opts);
    } catch (const std::exception& e) {
        throw ValidationError(e.what());
    }
}

json dataset_manifest(const std::string& kind, const json& spec, uint64_t seed,
                      const std::vector<gpm::Graph>& graphs) {
    json m;
    m["kind"] = kind;
    m["spec"] = spec;
    m["seed"] = seed;
    m["graphs"] = graphs.size();
    m["dataset_hash"] = gpm::dataset_hash(graphs);
    return m;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"graph pattern machine"};
    app.require_subcommand(1);
    app.fallthrough();

    uint64_t seed = 0;
    int workers = 1;
    std::string out_dir = ".";
    app.add_option("--seed", seed, "global random seed")->capture_default_str();
    app.add_option("--workers", workers, "worker thread count")->capture_default_str();
    app.add_option("--out", out_dir, "output directory or file")->capture_default_str();

    // ---- gen ----------------------------------------------------------
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    gen->require_subcommand(1);

    auto* gen_csl_cmd = gen->add_subcommand("csl", "circulant skip-link graphs");
    gpm::CSLSpec csl_spec;
    int csl_classes = static_cast<int>(csl_spec.skips.size());
    gen_csl_cmd->add_option("--n", csl_spec.n)->capture_default_str();
    gen_csl_cmd->add_option("--skips", csl_spec.skips, "skip length per class")->delimiter(',');
    gen_csl_cmd->add_option("--classes", csl_classes, "use the first N default skips")->capture_default_str();
    gen_csl_cmd->add_option("--copies", csl_spec.copies_per_class)->capture_default_str();

    auto* gen_tree_cmd = gen->add_subcommand("tree", "neighbors-matching binary trees");
    gpm::TreeMatchSpec tree_spec;
    gen_tree_cmd->add_option("--radius", tree_spec.radius)->capture_default_str();
    gen_tree_cmd->add_option("--examples", tree_spec.examples)->capture_default_str();
    gen_tree_cmd->add_option("--classes", tree_spec.classes)->capture_default_str();
    gen_tree_cmd->add_flag("--degree-variant", tree_spec.degree_variant,
                           "express keys as dummy-child degrees instead of feature slots");

    auto* gen_sbm_cmd = gen->add_subcommand("sbm", "stochastic block model graph");
    gpm::SBMSpec sbm_spec;
    gen_sbm_cmd->add_option("--blocks", sbm_spec.blocks)->capture_default_str();
    gen_sbm_cmd->add_option("--nodes-per-block", sbm_spec.nodes_per_block)->capture_default_str();
    gen_sbm_cmd->add_option("--p-in", sbm_spec.p_in)->capture_default_str();
    gen_sbm_cmd->add_option("--p-out", sbm_spec.p_out)->capture_default_str();
    gen_sbm_cmd->add_option("--feature-dim", sbm_spec.feature_dim)->capture_default_str();
    gen_sbm_cmd->add_option("--separation", sbm_spec.feature_separation)->capture_default_str();

    // ---- presample ------------------------------------------------------
    auto* pre = app.add_subcommand("presample", "pre-sample walk patterns into a cache");
    std::string config_path, data_path, cache_path = "patterns.cache";
    std::string export_json_path;
    bool symmetrize = true, allow_self_loops = false;
    pre->add_option("--config", config_path, "run-config JSON")->required();
    pre->add_option("--data", data_path, "graph dataset JSON")->required();
    pre->add_option("--cache", cache_path, "cache output path")->capture_default_str();
    pre->add_option("--export-json", export_json_path, "also dump a human-readable cache");
    pre->add_flag("--symmetrize,!--no-symmetrize", symmetrize, "add reverse arcs when loading");
    pre->add_flag("--allow-self-loops", allow_self_loops);

    // ---- train ----------------------------------------------------------
    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_config, tr_data, tr_cache;
    tr->add_option("--config", tr_config)->required();
    tr->add_option("--data", tr_data)->required();
    tr->add_option("--cache", tr_cache)->required();

    // ---- eval -----------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_config, ev_data, ev_cache, ev_ckpt, ev_split = "test";
    ev->add_option("--config", ev_config)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--cache", ev_cache)->required();
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--split", ev_split, "train|val|test")->capture_default_str();

    // ---- interpret --------------------------------------------------------
    auto* ip = app.add_subcommand("interpret", "export top attention-ranked patterns");
    std::string ip_config, ip_data, ip_cache, ip_ckpt, ip_dot;
    size_t ip_instance = 0;
    int ip_top = 9;
    ip->add_option("--config", ip_config)->required();
    ip->add_option("--data", ip_data)->required();
    ip->add_option("--cache", ip_cache)->required();
    ip->add_option("--checkpoint", ip_ckpt)->required();
    ip->add_option("--instance", ip_instance, "instance index")->capture_default_str();
    ip->add_option("--top", ip_top, "patterns to export")->capture_default_str();
    ip->add_option("--dot", ip_dot, "also write a DOT rendering");

    // ---- gradcheck / bench / scaling -------------------------------------
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
    auto* be = app.add_subcommand("bench", "run the synthetic benchmark suite");
    std::string bench_profile = "full";
    be->add_option("--profile", bench_profile, "quick|full")->capture_default_str();
    auto* sc = app.add_subcommand("scaling", "complexity scaling measurements");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        std::vector<gpm::Graph> graphs;
        json spec_json;
        std::string kind;
        if (gen_csl_cmd->parsed()) {
            if (!gen_csl_cmd->count("--skips") && csl_classes < static_cast<int>(csl_spec.skips.size()))
                csl_spec.skips.resize(static_cast<size_t>(csl_classes));
            graphs = gpm::gen_csl(csl_spec, seed);
            kind = "csl";
            spec_json = {{"n", csl_spec.n}, {"skips", csl_spec.skips}, {"copies", csl_spec.copies_per_class}};
        } else if (gen_tree_cmd->parsed()) {
            graphs = gpm::gen_tree_match(tree_spec, seed);
            kind = "tree";
            spec_json = {{"radius", tree_spec.radius},
                         {"examples", tree_spec.examples},
                         {"classes", tree_spec.classes},
                         {"degree_variant", tree_spec.degree_variant}};
        } else {
            graphs = {gpm::gen_sbm(sbm_spec, seed)};
            kind = "sbm";
            spec_json = {{"blocks", sbm_spec.blocks},           {"nodes_per_block", sbm_spec.nodes_per_block},
                         {"p_in", sbm_spec.p_in},               {"p_out", sbm_spec.p_out},
                         {"feature_dim", sbm_spec.feature_dim}, {"separation", sbm_spec.feature_separation}};
        }
        fs::create_directories(out_dir);
        gpm::save_graph_dataset(graphs, out_dir + "/dataset.json");
        write_text(out_dir + "/manifest.json", dataset_manifest(kind, spec_json, seed, graphs).dump(2) + "\n");
        std::cout << "wrote " << graphs.size() << " graph(s) to " << out_dir << "/dataset.json\n";
        return 0;
    }

    if (pre->parsed()) {
        gpm::RunConfig cfg = load_run_config(config_path);
        auto graphs = load_graphs(data_path, symmetrize, allow_self_loops);
        gpm::TaskData task = gpm::build_task(std::move(graphs), cfg);
        gpm::PatternCache cache = gpm::presample(task.data.graphs, task.data.instances, cfg.k_infer, cfg.scales,
                                                 cfg.bias, cfg.seed, workers);
        cache.save(cache_path);
        if (!export_json_path.empty()) write_text(export_json_path, cache.to_json() + "\n");
        std::cout << "cached " << cache.size() << " instances x " << cache.k() << " patterns -> " << cache_path
                  << "\n";
        return 0;
    }

    if (tr->parsed()) {
        gpm::RunConfig cfg = load_run_config(tr_config);
        auto graphs = load_graphs(tr_data, true, false);
        gpm::TaskData task = gpm::build_task(std::move(graphs), cfg);
        gpm::PatternCache cache = gpm::PatternCache::load(tr_cache, task.data.graphs);
        if (cache.k() < cfg.k_infer) throw ValidationError("cache holds fewer than k_infer patterns");

        fs::create_directories(out_dir);
        std::ofstream history(out_dir + "/history.jsonl");
        gpm::Model<float> model(gpm::model_config_from(cfg, task.data));
        auto summary = gpm::train_model(model, cfg, task.data, task.split, cache, workers, &history);

        gpm::save_checkpoint(model.params, out_dir + "/checkpoint.bin", cfg.hash(),
                             gpm::dataset_hash(task.data.graphs), cfg.seed);
        double test_metric =
            task.split.test.empty()
                ? summary.best_val
                : gpm::evaluate(model, task.data, cache, task.split.test, cfg.k_infer, cfg.hits_k, workers).metric;
        json report;
        report["metric"] = test_metric;
        report["val_metric"] = summary.best_val;
        report["best_epoch"] = summary.best_epoch;
        report["epochs_ran"] = summary.history.size();
        report["seed"] = cfg.seed;
        report["config_hash"] = cfg.hash();
        write_text(out_dir + "/report.json", report.dump(2) + "\n");
        std::cout << report.dump(2) << "\n";
        return 0;
    }

    if (ev->parsed()) {
        gpm::RunConfig cfg = load_run_config(ev_config);
        auto graphs = load_graphs(ev_data, true, false);
        gpm::TaskData task = gpm::build_task(std::move(graphs), cfg);
        gpm::PatternCache cache = gpm::PatternCache::load(ev_cache, task.data.graphs);
        gpm::Model<float> model(gpm::model_config_from(cfg, task.data));
        model.init(cfg.seed);
        auto info = gpm::load_checkpoint(model.params, ev_ckpt);
        if (info.graph_hash != gpm::dataset_hash(task.data.graphs))
            throw ValidationError("checkpoint/graph hash mismatch");
        if (info.config_hash != cfg.hash()) throw ValidationError("checkpoint/config hash mismatch");

        const std::vector<size_t>& idx =
            ev_split == "train" ? task.split.train : (ev_split == "val" ? task.split.val : task.split.test);
        auto evo = gpm::evaluate(model, task.data, cache, idx, cfg.k_infer, cfg.hits_k, workers);
        json report;
        report["split"] = ev_split;
        report["metric"] = evo.metric;
        report["instances"] = idx.size();
        report["seed"] = cfg.seed;
        report["config_hash"] = cfg.hash();
        if (out_dir != ".") write_text(out_dir, report.dump(2) + "\n");
        std::cout << report.dump(2) << "\n";
        return 0;
    }

    if (ip->parsed()) {
        gpm::RunConfig cfg = load_run_config(ip_config);
        if (!cfg.use_class_token) throw ValidationError("interpret requires use_class_token=true");
        auto graphs = load_graphs(ip_data, true, false);
        gpm::TaskData task = gpm::build_task(std::move(graphs), cfg);
        gpm::PatternCache cache = gpm::PatternCache::load(ip_cache, task.data.graphs);
        gpm::Model<float> model(gpm::model_config_from(cfg, task.data));
        model.init(cfg.seed);
        auto info = gpm::load_checkpoint(model.params, ip_ckpt);
        if (info.graph_hash != gpm::dataset_hash(task.data.graphs))
            throw ValidationError("checkpoint/graph hash mismatch");
        if (ip_instance >= cache.size()) throw ValidationError("instance index out of range");

        std::vector<size_t> idx(static_cast<size_t>(cfg.k_infer));
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        gpm::Tape<float> tape;
        auto batch =
            gpm::assemble_batch<float>(model.cfg, task.data.graphs, task.data.pe, {&cache.at(ip_instance)}, {idx});
        auto fwd = model.forward(tape, batch, false, nullptr, true);
        auto ranked = gpm::top_patterns(fwd.attn, 0, ip_top);

        const gpm::PatternSet& set = cache.at(ip_instance);
        json j;
        j["instance"] = {{"kind", static_cast<int>(set.instance.kind)},
                         {"graph", set.instance.graph},
                         {"u", set.instance.u},
                         {"v", set.instance.v}};
        json pats = json::array();
        for (const auto& rp : ranked) {
            const gpm::WalkPattern& p = set.patterns[static_cast<size_t>(rp.index)];
            pats.push_back({{"nodes", p.semantic.nodes}, {"anon", p.anonymous.labels}, {"score", rp.score}});
        }
        j["patterns"] = std::move(pats);
        std::string out_path = out_dir == "." ? "interpret.json" : out_dir;
        write_text(out_path, j.dump(2) + "\n");
        if (!ip_dot.empty()) {
            std::string dot = "graph patterns {\n";
            int pi = 0;
            for (const auto& rp : ranked) {
                const gpm::WalkPattern& p = set.patterns[static_cast<size_t>(rp.index)];
                dot += "  subgraph cluster_" + std::to_string(pi) + " {\n";
                dot += "    label=\"score " + std::to_string(rp.score) + "\";\n";
                std::set<std::pair<gpm::NodeId, gpm::NodeId>> seen;
                for (size_t i = 0; i + 1 < p.semantic.nodes.size(); ++i) {
                    auto a = p.semantic.nodes[i], b = p.semantic.nodes[i + 1];
                    if (!seen.insert({std::min(a, b), std::max(a, b)}).second) continue;
                    dot += "    p" + std::to_string(pi) + "n" + std::to_string(a) + " -- p" + std::to_string(pi) +
                           "n" + std::to_string(b) + ";\n";
                }
                dot += "  }\n";
                pi++;
            }
            dot += "}\n";
            write_text(ip_dot, dot);
        }
        std::cout << "wrote " << ranked.size() << " patterns to " << out_path << "\n";
        return 0;
    }

    if (gc->parsed()) {
        auto report = gpm::run_gradcheck(seed);
        for (const auto& op : report.ops)
            std::cout << (op.max_rel_error < (op.linear ? 1e-6 : 1e-3) ? "ok   " : "FAIL ") << op.name << "  "
                      << op.max_rel_error << "\n";
        std::cout << "model end-to-end  " << report.model_max_rel_error << "\n";
        std::cout << "max linear " << report.max_linear() << ", max nonlinear " << report.max_nonlinear() << "\n";
        const bool ok = report.pass();
        std::cout << (ok ? "PASS" : "FAIL") << "\n";
        return ok ? 0 : 2;
    }

    if (be->parsed()) {
        json metrics = gpm::run_bench_suite(bench_profile, seed, workers);
        std::string out_path = out_dir == "." ? "bench_metrics.json" : out_dir;
        write_text(out_path, metrics.dump(2) + "\n");
        std::cout << metrics.dump(2) << "\n";
        return 0;
    }

    if (sc->parsed()) {
        auto r = gpm::run_scaling(seed);
        json j;
        json ident = json::array();
        for (auto& [k, c] : r.identifier_cost) ident.push_back({{"k", k}, {"sec_per_instance", c}});
        json pres = json::array();
        for (auto& [n, c] : r.presample_cost) pres.push_back({{"n", n}, {"sec", c}});
        j["identifier"] = {{"points", ident}, {"exponent", r.identifier_exponent}};
        j["presample"] = {{"points", pres}, {"exponent", r.presample_exponent}};
        std::string out_path = out_dir == "." ? "scaling.json" : out_dir;
        write_text(out_path, j.dump(2) + "\n");
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
}
