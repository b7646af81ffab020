#include "gpm/pe.hpp"

#include <Eigen/Eigenvalues>
#include <stdexcept>
#include <vector>

namespace gpm {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

std::vector<std::vector<NodeId>> connected_components(const Graph& g) {
    std::vector<int> comp(static_cast<size_t>(g.num_nodes()), -1);
    std::vector<std::vector<NodeId>> comps;
    std::vector<NodeId> stack;
    for (NodeId s = 0; s < g.num_nodes(); ++s) {
        if (comp[static_cast<size_t>(s)] >= 0) continue;
        int id = static_cast<int>(comps.size());
        comps.emplace_back();
        stack.push_back(s);
        comp[static_cast<size_t>(s)] = id;
        while (!stack.empty()) {
            NodeId v = stack.back();
            stack.pop_back();
            comps[static_cast<size_t>(id)].push_back(v);
            for (NodeId w : g.neighbors(v)) {
                if (comp[static_cast<size_t>(w)] < 0) {
                    comp[static_cast<size_t>(w)] = id;
                    stack.push_back(w);
                }
            }
        }
    }
    return comps;
}

Eigen::MatrixXd sym_normalized_laplacian(const Graph& g, const std::vector<NodeId>& nodes) {
    const Eigen::Index n = static_cast<Eigen::Index>(nodes.size());
    std::vector<NodeId> local(static_cast<size_t>(g.num_nodes()), -1);
    for (Eigen::Index i = 0; i < n; ++i) local[static_cast<size_t>(nodes[static_cast<size_t>(i)])] = static_cast<NodeId>(i);
    Eigen::VectorXd dinv_sqrt(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        int d = g.degree(nodes[static_cast<size_t>(i)]);
        dinv_sqrt(i) = d > 0 ? 1.0 / std::sqrt(static_cast<double>(d)) : 0.0;
    }
    Eigen::MatrixXd lap = Eigen::MatrixXd::Identity(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        NodeId v = nodes[static_cast<size_t>(i)];
        for (NodeId w : g.neighbors(v)) {
            Eigen::Index j = local[static_cast<size_t>(w)];
            lap(i, j) -= dinv_sqrt(i) * dinv_sqrt(j);
        }
    }
    return lap;
}

void sign_fix(Eigen::Ref<Eigen::VectorXd> v) {
    Eigen::Index best = 0;
    double mag = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        double a = std::abs(v(i));
        if (a > mag) {
            mag = a;
            best = i;
        }
    }
    if (v(best) < 0.0) v = -v;
}

}  // namespace

PeKind pe_kind_from_string(const std::string& s) {
    if (s == "none" || s == "None") return PeKind::None;
    if (s == "lap" || s == "Lap") return PeKind::Lap;
    if (s == "rwse" || s == "RWSE" || s == "rw" || s == "RW") return PeKind::Rwse;
    throw std::runtime_error("unknown pe kind: " + s);
}

std::string pe_kind_to_string(PeKind k) {
    switch (k) {
        case PeKind::None: return "none";
        case PeKind::Lap: return "lap";
        case PeKind::Rwse: return "rwse";
    }
    return "none";
}

NodePE laplacian_pe(const Graph& g, int dim) {
    require(dim >= 0, "laplacian_pe: negative dim");
    require(dim < g.num_nodes(), "laplacian_pe: dim must be < num_nodes");
    NodePE pe;
    pe.kind = PeKind::Lap;
    pe.dim = dim;
    pe.table = Eigen::MatrixXd::Zero(g.num_nodes(), dim);
    if (dim == 0) return pe;

    for (const auto& nodes : connected_components(g)) {
        const Eigen::Index n = static_cast<Eigen::Index>(nodes.size());
        if (n <= 1) continue;
        Eigen::MatrixXd lap = sym_normalized_laplacian(g, nodes);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap);
        require(solver.info() == Eigen::Success, "laplacian_pe: eigensolver failed to converge");
        Eigen::MatrixXd vecs = solver.eigenvectors();  // ascending eigenvalues
        const Eigen::Index take = std::min<Eigen::Index>(dim, n - 1);
        for (Eigen::Index c = 0; c < take; ++c) {
            Eigen::VectorXd col = vecs.col(c + 1);  // skip the trivial eigenvector
            sign_fix(col);
            for (Eigen::Index i = 0; i < n; ++i) pe.table(nodes[static_cast<size_t>(i)], c) = col(i);
        }
    }
    return pe;
}

NodePE rwse(const Graph& g, int dim) {
    require(dim >= 1, "rwse: dim must be >= 1");
    NodePE pe;
    pe.kind = PeKind::Rwse;
    pe.dim = dim;
    const Eigen::Index n = g.num_nodes();
    pe.table = Eigen::MatrixXd::Zero(n, dim);

    Eigen::MatrixXd trans = Eigen::MatrixXd::Zero(n, n);  // D^{-1} A
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
        int d = g.degree(v);
        if (d == 0) continue;
        double w = 1.0 / static_cast<double>(d);
        for (NodeId u : g.neighbors(v)) trans(v, u) = w;
    }
    Eigen::MatrixXd power = trans;
    for (int t = 1; t <= dim; ++t) {
        pe.table.col(t - 1) = power.diagonal();
        if (t < dim) power = (power * trans).eval();
    }
    return pe;
}

NodePE compute_pe(const Graph& g, PeKind kind, int dim) {
    switch (kind) {
        case PeKind::None: return NodePE::none();
        case PeKind::Lap: return laplacian_pe(g, dim);
        case PeKind::Rwse: return rwse(g, dim);
    }
    return NodePE::none();
}

Eigen::VectorXd laplacian_eigenvalues(const Graph& g) {
    std::vector<NodeId> all(static_cast<size_t>(g.num_nodes()));
    for (NodeId v = 0; v < g.num_nodes(); ++v) all[static_cast<size_t>(v)] = v;
    Eigen::MatrixXd lap = sym_normalized_laplacian(g, all);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap, Eigen::EigenvaluesOnly);
    require(solver.info() == Eigen::Success, "laplacian_eigenvalues: eigensolver failed");
    return solver.eigenvalues();
}

}  // namespace gpm
