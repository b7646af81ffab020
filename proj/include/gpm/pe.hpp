#pragma once

#include <Eigen/Dense>
#include <string>

#include "gpm/graph.hpp"

namespace gpm {

enum class PeKind { None, Lap, Rwse };

PeKind pe_kind_from_string(const std::string& s);
std::string pe_kind_to_string(PeKind k);

// Per-node positional embedding table (N x dim); dim 0 means "no PE" and
// concatenation with it is a no-op.
struct NodePE {
    PeKind kind = PeKind::None;
    int dim = 0;
    Eigen::MatrixXd table;

    static NodePE none() { return {}; }
};

// Eigenvectors 2..dim+1 of the symmetric normalized Laplacian, ascending
// eigenvalue order, sign-fixed (largest-magnitude entry positive) and unit
// norm. Disconnected graphs are handled per component with zero-fill.
NodePE laplacian_pe(const Graph& g, int dim);

// Entry (v,t) is the t-step return probability of v under the simple
// random walk, t = 1..dim. Isolated nodes get all-zero rows.
NodePE rwse(const Graph& g, int dim);

NodePE compute_pe(const Graph& g, PeKind kind, int dim);

// Eigenvalues of the symmetric normalized Laplacian, ascending. Exposed for
// verification against closed forms.
Eigen::VectorXd laplacian_eigenvalues(const Graph& g);

}  // namespace gpm
