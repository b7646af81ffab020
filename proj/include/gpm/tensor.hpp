#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpm/rng.hpp"

namespace gpm {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

using VarId = int;

namespace detail {
inline void check(bool cond, const char* msg) {
    if (!cond) throw std::runtime_error(std::string("tensor: ") + msg);
}
}  // namespace detail

// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
// order (hence already topologically sorted); backward walks the record
// once in reverse. A tape is single-owner and not shared across threads.
template <typename S>
class Tape {
public:
    using M = Mat<S>;
    using BackwardFn = std::function<void(Tape&, VarId)>;

    Tape() { nodes_.reserve(512); }

    // Leaf referencing external storage (parameters, batch constants).
    VarId leaf(const M* external, bool requires_grad) {
        Node n;
        n.external = external;
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    // Owned constant with no gradient.
    VarId constant(M value) {
        Node n;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    VarId op(M value, bool requires_grad, BackwardFn bw) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    const M& val(VarId id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(VarId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Accumulates `expr` into the gradient of `id` (no-op when the node
    // does not require gradients).
    template <typename Expr>
    void accum(VarId id, const Expr& expr) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            const M& v = n.external ? *n.external : n.value;
            n.grad = M::Zero(v.rows(), v.cols());
        }
        n.grad += expr;
    }

    // Mutable gradient access for scatter-style accumulation.
    M& grad_buffer(VarId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() == 0) {
            const M& v = n.external ? *n.external : n.value;
            n.grad = M::Zero(v.rows(), v.cols());
        }
        return n.grad;
    }

    const M& grad(VarId id) const {
        static const M empty;
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.grad.size() ? n.grad : empty;
    }

    bool has_grad(VarId id) const { return nodes_[static_cast<size_t>(id)].grad.size() != 0; }

    // Reverse sweep from a scalar loss. Each node's backward runs exactly
    // once; nodes that never received gradient are skipped.
    void backward(VarId loss) {
        detail::check(loss >= 0 && loss < static_cast<VarId>(nodes_.size()), "backward: loss not on tape");
        detail::check(val(loss).rows() == 1 && val(loss).cols() == 1, "backward: loss must be scalar");
        Node& ln = nodes_[static_cast<size_t>(loss)];
        detail::check(ln.requires_grad, "backward: loss does not require grad");
        ln.grad = M::Ones(1, 1);
        for (VarId i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        M value;
        const M* external = nullptr;
        M grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitive operations. Each computes eagerly and registers its backward.
// ---------------------------------------------------------------------------

template <typename S>
VarId matmul(Tape<S>& t, VarId a, VarId b) {
    const auto& A = t.val(a);
    const auto& B = t.val(b);
    detail::check(A.cols() == B.rows(), "matmul: inner dimension mismatch");
    Mat<S> out(A.rows(), B.cols());
    out.noalias() = A * B;
    return t.op(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(a)) tp.accum(a, g * tp.val(b).transpose());
        if (tp.requires_grad(b)) tp.accum(b, tp.val(a).transpose() * g);
    });
}

template <typename S>
VarId add(Tape<S>& t, VarId a, VarId b) {
    detail::check(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(), "add: shape mismatch");
    return t.op(t.val(a) + t.val(b), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape<S>& tp, VarId self) {
        tp.accum(a, tp.grad(self));
        tp.accum(b, tp.grad(self));
    });
}

template <typename S>
VarId sub(Tape<S>& t, VarId a, VarId b) {
    detail::check(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(), "sub: shape mismatch");
    return t.op(t.val(a) - t.val(b), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape<S>& tp, VarId self) {
        tp.accum(a, tp.grad(self));
        tp.accum(b, -tp.grad(self));
    });
}

template <typename S>
VarId cwise_mul(Tape<S>& t, VarId a, VarId b) {
    detail::check(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(),
                  "cwise_mul: shape mismatch");
    return t.op(t.val(a).cwiseProduct(t.val(b)), t.requires_grad(a) || t.requires_grad(b),
                [a, b](Tape<S>& tp, VarId self) {
                    const auto& g = tp.grad(self);
                    if (tp.requires_grad(a)) tp.accum(a, g.cwiseProduct(tp.val(b)));
                    if (tp.requires_grad(b)) tp.accum(b, g.cwiseProduct(tp.val(a)));
                });
}

template <typename S>
VarId scale(Tape<S>& t, VarId a, S c) {
    return t.op(t.val(a) * c, t.requires_grad(a),
                [a, c](Tape<S>& tp, VarId self) { tp.accum(a, tp.grad(self) * c); });
}

// out = a with the 1xC bias row added to every row.
template <typename S>
VarId add_bias_row(Tape<S>& t, VarId a, VarId bias) {
    const auto& A = t.val(a);
    const auto& B = t.val(bias);
    detail::check(B.rows() == 1 && B.cols() == A.cols(), "add_bias_row: bias must be 1 x cols");
    Mat<S> out = A.rowwise() + B.row(0);
    return t.op(std::move(out), t.requires_grad(a) || t.requires_grad(bias), [a, bias](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        tp.accum(a, g);
        if (tp.requires_grad(bias)) tp.accum(bias, g.colwise().sum());
    });
}

// out(i,j) = a(i,j) * m(i,0); column-vector broadcast (step masks, counts).
template <typename S>
VarId mul_cols(Tape<S>& t, VarId a, VarId m) {
    const auto& A = t.val(a);
    const auto& Mv = t.val(m);
    detail::check(Mv.cols() == 1 && Mv.rows() == A.rows(), "mul_cols: multiplier must be rows x 1");
    Mat<S> out = (A.array().colwise() * Mv.col(0).array()).matrix();
    return t.op(std::move(out), t.requires_grad(a) || t.requires_grad(m), [a, m](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(a)) tp.accum(a, (g.array().colwise() * tp.val(m).col(0).array()).matrix());
        if (tp.requires_grad(m)) tp.accum(m, g.cwiseProduct(tp.val(a)).rowwise().sum());
    });
}

template <typename S>
VarId concat_cols(Tape<S>& t, const std::vector<VarId>& parts) {
    detail::check(!parts.empty(), "concat_cols: empty part list");
    Eigen::Index rows = t.val(parts[0]).rows();
    Eigen::Index cols = 0;
    bool rg = false;
    for (VarId p : parts) {
        detail::check(t.val(p).rows() == rows, "concat_cols: row mismatch");
        cols += t.val(p).cols();
        rg = rg || t.requires_grad(p);
    }
    Mat<S> out(rows, cols);
    Eigen::Index at = 0;
    for (VarId p : parts) {
        out.middleCols(at, t.val(p).cols()) = t.val(p);
        at += t.val(p).cols();
    }
    return t.op(std::move(out), rg, [parts](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        Eigen::Index at = 0;
        for (VarId p : parts) {
            Eigen::Index c = tp.val(p).cols();
            tp.accum(p, g.middleCols(at, c));
            at += c;
        }
    });
}

template <typename S>
VarId concat_rows(Tape<S>& t, const std::vector<VarId>& parts) {
    detail::check(!parts.empty(), "concat_rows: empty part list");
    Eigen::Index cols = t.val(parts[0]).cols();
    Eigen::Index rows = 0;
    bool rg = false;
    for (VarId p : parts) {
        detail::check(t.val(p).cols() == cols, "concat_rows: column mismatch");
        rows += t.val(p).rows();
        rg = rg || t.requires_grad(p);
    }
    Mat<S> out(rows, cols);
    Eigen::Index at = 0;
    for (VarId p : parts) {
        out.middleRows(at, t.val(p).rows()) = t.val(p);
        at += t.val(p).rows();
    }
    return t.op(std::move(out), rg, [parts](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        Eigen::Index at = 0;
        for (VarId p : parts) {
            Eigen::Index r = tp.val(p).rows();
            tp.accum(p, g.middleRows(at, r));
            at += r;
        }
    });
}

// out.row(i) = a.row(idx[i]). Backward scatter-adds.
template <typename S>
VarId gather_rows(Tape<S>& t, VarId a, std::vector<int> idx) {
    const auto& A = t.val(a);
    Mat<S> out(static_cast<Eigen::Index>(idx.size()), A.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        detail::check(idx[i] >= 0 && idx[i] < A.rows(), "gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = A.row(idx[i]);
    }
    return t.op(std::move(out), t.requires_grad(a), [a, idx = std::move(idx)](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        auto& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

template <typename S>
VarId slice_cols(Tape<S>& t, VarId a, Eigen::Index c0, Eigen::Index n) {
    const auto& A = t.val(a);
    detail::check(c0 >= 0 && n >= 0 && c0 + n <= A.cols(), "slice_cols: range out of bounds");
    return t.op(A.middleCols(c0, n), t.requires_grad(a), [a, c0, n](Tape<S>& tp, VarId self) {
        auto& ga = tp.grad_buffer(a);
        ga.middleCols(c0, n) += tp.grad(self);
    });
}

namespace detail {

// Softmax over each row with max-shift; mask entries 0 are excluded and
// produce exactly 0. mask may be empty (no masking).
template <typename S>
Mat<S> masked_softmax_value(const Mat<S>& x, const Mat<S>& mask) {
    Mat<S> p(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S mx = -std::numeric_limits<S>::infinity();
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            bool on = mask.size() == 0 || mask(r, c) != S(0);
            if (on && x(r, c) > mx) mx = x(r, c);
        }
        check(mx > -std::numeric_limits<S>::infinity(), "softmax: all entries masked in a row");
        S total = S(0);
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            bool on = mask.size() == 0 || mask(r, c) != S(0);
            S e = on ? std::exp(x(r, c) - mx) : S(0);
            p(r, c) = e;
            total += e;
        }
        p.row(r) /= total;
    }
    return p;
}

template <typename S>
Mat<S> softmax_backward_value(const Mat<S>& p, const Mat<S>& g) {
    Mat<S> dot = (g.cwiseProduct(p)).rowwise().sum();
    return p.cwiseProduct(g - dot.replicate(1, g.cols()));
}

}  // namespace detail

template <typename S>
VarId softmax_rows(Tape<S>& t, VarId a) {
    Mat<S> p = detail::masked_softmax_value(t.val(a), Mat<S>());
    return t.op(std::move(p), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        tp.accum(a, detail::softmax_backward_value(tp.val(self), tp.grad(self)));
    });
}

// mask(r,c) == 0 excludes the entry; excluded outputs are exactly 0.
template <typename S>
VarId masked_softmax_rows(Tape<S>& t, VarId a, const Mat<S>& mask) {
    detail::check(mask.rows() == t.val(a).rows() && mask.cols() == t.val(a).cols(),
                  "masked_softmax: mask shape mismatch");
    Mat<S> p = detail::masked_softmax_value(t.val(a), mask);
    return t.op(std::move(p), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        tp.accum(a, detail::softmax_backward_value(tp.val(self), tp.grad(self)));
    });
}

// Train-mode inverted dropout; eval mode is the identity.
template <typename S>
VarId dropout(Tape<S>& t, VarId a, double p, Rng& rng, bool training) {
    detail::check(p >= 0.0 && p < 1.0, "dropout: rate must be in [0,1)");
    if (!training || p == 0.0) return a;
    const auto& A = t.val(a);
    Mat<S> factor(A.rows(), A.cols());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    for (Eigen::Index r = 0; r < A.rows(); ++r)
        for (Eigen::Index c = 0; c < A.cols(); ++c) factor(r, c) = rng.uniform() < p ? S(0) : keep_scale;
    Mat<S> out = A.cwiseProduct(factor);
    return t.op(std::move(out), t.requires_grad(a), [a, factor = std::move(factor)](Tape<S>& tp, VarId self) {
        tp.accum(a, tp.grad(self).cwiseProduct(factor));
    });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
VarId gelu(Tape<S>& t, VarId a) {
    const auto& A = t.val(a);
    Mat<S> out(A.rows(), A.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r)
        for (Eigen::Index c = 0; c < A.cols(); ++c) {
            S x = A(r, c);
            out(r, c) = S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475244)));
        }
    return t.op(std::move(out), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        const auto& X = tp.val(a);
        const auto& g = tp.grad(self);
        Mat<S> d(X.rows(), X.cols());
        for (Eigen::Index r = 0; r < X.rows(); ++r)
            for (Eigen::Index c = 0; c < X.cols(); ++c) {
                S x = X(r, c);
                S cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475244)));
                S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);
                d(r, c) = cdf + x * pdf;
            }
        tp.accum(a, g.cwiseProduct(d));
    });
}

template <typename S>
VarId sigmoid(Tape<S>& t, VarId a) {
    const auto& A = t.val(a);
    Mat<S> out = (S(1) / (S(1) + (-A.array()).exp())).matrix();
    return t.op(std::move(out), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        const auto& y = tp.val(self);
        tp.accum(a, tp.grad(self).cwiseProduct((y.array() * (S(1) - y.array())).matrix()));
    });
}

template <typename S>
VarId tanh_op(Tape<S>& t, VarId a) {
    Mat<S> out = t.val(a).array().tanh().matrix();
    return t.op(std::move(out), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        const auto& y = tp.val(self);
        tp.accum(a, tp.grad(self).cwiseProduct((S(1) - y.array().square()).matrix()));
    });
}

// Row-wise layer normalization with learnable gain/shift (1 x C each).
template <typename S>
VarId layer_norm_rows(Tape<S>& t, VarId a, VarId gamma, VarId beta, S eps = S(1e-5)) {
    const auto& X = t.val(a);
    const Eigen::Index C = X.cols();
    detail::check(t.val(gamma).rows() == 1 && t.val(gamma).cols() == C, "layer_norm: gamma must be 1 x cols");
    detail::check(t.val(beta).rows() == 1 && t.val(beta).cols() == C, "layer_norm: beta must be 1 x cols");
    Mat<S> xhat(X.rows(), C);
    Mat<S> inv_std(X.rows(), 1);
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        S mu = X.row(r).mean();
        S var = (X.row(r).array() - mu).square().mean();
        S is = S(1) / std::sqrt(var + eps);
        inv_std(r, 0) = is;
        xhat.row(r) = ((X.row(r).array() - mu) * is).matrix();
    }
    Mat<S> out = (xhat.array().rowwise() * t.val(gamma).row(0).array()).matrix().rowwise() + t.val(beta).row(0);
    bool rg = t.requires_grad(a) || t.requires_grad(gamma) || t.requires_grad(beta);
    return t.op(std::move(out), rg,
                [a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& tp, VarId self) {
                    const auto& g = tp.grad(self);
                    if (tp.requires_grad(gamma)) tp.accum(gamma, g.cwiseProduct(xhat).colwise().sum());
                    if (tp.requires_grad(beta)) tp.accum(beta, g.colwise().sum());
                    if (tp.requires_grad(a)) {
                        const Eigen::Index C2 = g.cols();
                        Mat<S> h = g.array().rowwise() * tp.val(gamma).row(0).array();
                        Mat<S> dx(g.rows(), C2);
                        for (Eigen::Index r = 0; r < g.rows(); ++r) {
                            S mh = h.row(r).mean();
                            S mhx = h.row(r).cwiseProduct(xhat.row(r)).mean();
                            dx.row(r) =
                                ((h.row(r).array() - mh - xhat.row(r).array() * mhx) * inv_std(r, 0)).matrix();
                        }
                        tp.accum(a, dx);
                    }
                });
}

// Mean over rows (axis 0) -> 1 x C.
template <typename S>
VarId mean_rows(Tape<S>& t, VarId a) {
    const auto& A = t.val(a);
    detail::check(A.rows() > 0, "mean_rows: empty input");
    Mat<S> out = A.colwise().mean();
    return t.op(std::move(out), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        const auto& A2 = tp.val(a);
        tp.accum(a, tp.grad(self).replicate(A2.rows(), 1) / static_cast<S>(A2.rows()));
    });
}

// Mean over columns (axis 1) -> R x 1.
template <typename S>
VarId mean_cols(Tape<S>& t, VarId a) {
    const auto& A = t.val(a);
    detail::check(A.cols() > 0, "mean_cols: empty input");
    Mat<S> out = A.rowwise().mean();
    return t.op(std::move(out), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        const auto& A2 = tp.val(a);
        tp.accum(a, tp.grad(self).replicate(1, A2.cols()) / static_cast<S>(A2.cols()));
    });
}

template <typename S>
VarId sum_all(Tape<S>& t, VarId a) {
    Mat<S> out(1, 1);
    out(0, 0) = t.val(a).sum();
    return t.op(std::move(out), t.requires_grad(a), [a](Tape<S>& tp, VarId self) {
        const auto& A = tp.val(a);
        tp.accum(a, Mat<S>::Constant(A.rows(), A.cols(), tp.grad(self)(0, 0)));
    });
}

// Mean over each consecutive block of `block` rows -> (R/block) x C.
// skip_first drops the first row of every block from the mean (class token).
template <typename S>
VarId block_mean_rows(Tape<S>& t, VarId a, Eigen::Index block, bool skip_first = false) {
    const auto& A = t.val(a);
    detail::check(block >= 1 && A.rows() % block == 0, "block_mean_rows: rows not divisible by block");
    const Eigen::Index skip = skip_first ? 1 : 0;
    detail::check(block - skip >= 1, "block_mean_rows: empty block after skip");
    const Eigen::Index nblocks = A.rows() / block;
    Mat<S> out(nblocks, A.cols());
    for (Eigen::Index b = 0; b < nblocks; ++b)
        out.row(b) = A.middleRows(b * block + skip, block - skip).colwise().mean();
    return t.op(std::move(out), t.requires_grad(a), [a, block, skip](Tape<S>& tp, VarId self) {
        const auto& g = tp.grad(self);
        auto& ga = tp.grad_buffer(a);
        const S inv = S(1) / static_cast<S>(block - skip);
        for (Eigen::Index b = 0; b < g.rows(); ++b)
            ga.middleRows(b * block + skip, block - skip).rowwise() += g.row(b) * inv;
    });
}

// Tiles a 1 x C row n times.
template <typename S>
VarId repeat_row(Tape<S>& t, VarId a, Eigen::Index n) {
    const auto& A = t.val(a);
    detail::check(A.rows() == 1, "repeat_row: input must be 1 x C");
    return t.op(A.replicate(n, 1), t.requires_grad(a),
                [a](Tape<S>& tp, VarId self) { tp.accum(a, tp.grad(self).colwise().sum()); });
}

// ---------------------------------------------------------------------------
// Block-diagonal multi-head scaled dot-product attention. Rows are grouped
// into consecutive blocks of `block` rows (one block per instance or per
// walk); attention never crosses block boundaries. Optional dropout on the
// attention weights; optional export of the softmax matrices, stacked as
// (nblocks*heads*block) x block.
// ---------------------------------------------------------------------------
template <typename S>
VarId mha_block_attention(Tape<S>& t, VarId q, VarId k, VarId v, Eigen::Index block, int heads,
                          double attn_dropout = 0.0, Rng* rng = nullptr, bool training = false,
                          Mat<S>* attn_out = nullptr) {
    const auto& Q = t.val(q);
    const auto& K = t.val(k);
    const auto& V = t.val(v);
    const Eigen::Index R = Q.rows(), D = Q.cols();
    detail::check(K.rows() == R && V.rows() == R && K.cols() == D && V.cols() == D,
                  "attention: Q/K/V shape mismatch");
    detail::check(block >= 1 && R % block == 0, "attention: rows not divisible by block");
    detail::check(heads >= 1 && D % heads == 0, "attention: heads must divide width");
    const Eigen::Index dh = D / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    const Eigen::Index nblocks = R / block;
    const bool use_drop = training && attn_dropout > 0.0;
    detail::check(!use_drop || rng != nullptr, "attention: dropout requires an rng");

    Mat<S> out(R, D);
    Mat<S> probs(nblocks * heads * block, block);   // pre-dropout softmax
    Mat<S> factor;                                  // dropout factors
    if (use_drop) factor.resize(nblocks * heads * block, block);
    const S keep_scale = use_drop ? static_cast<S>(1.0 / (1.0 - attn_dropout)) : S(1);

    Mat<S> scores(block, block), p(block, block);
    for (Eigen::Index b = 0; b < nblocks; ++b) {
        for (int h = 0; h < heads; ++h) {
            auto Qb = Q.block(b * block, h * dh, block, dh);
            auto Kb = K.block(b * block, h * dh, block, dh);
            auto Vb = V.block(b * block, h * dh, block, dh);
            scores.noalias() = Qb * Kb.transpose();
            scores *= inv_sqrt;
            for (Eigen::Index r = 0; r < block; ++r) {
                const S mx = scores.row(r).maxCoeff();
                p.row(r) = (scores.row(r).array() - mx).exp();
                p.row(r) /= p.row(r).sum();
            }
            const Eigen::Index seg = (b * heads + h) * block;
            probs.middleRows(seg, block) = p;
            if (use_drop) {
                for (Eigen::Index r = 0; r < block; ++r)
                    for (Eigen::Index c = 0; c < block; ++c)
                        factor(seg + r, c) = rng->uniform() < attn_dropout ? S(0) : keep_scale;
                p = p.cwiseProduct(factor.middleRows(seg, block));
            }
            out.block(b * block, h * dh, block, dh).noalias() = p * Vb;
        }
    }
    if (attn_out) *attn_out = probs;

    bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
    return t.op(std::move(out), rg,
                [q, k, v, block, heads, dh, inv_sqrt, nblocks, use_drop, probs = std::move(probs),
                 factor = std::move(factor)](Tape<S>& tp, VarId self) {
                    const auto& g = tp.grad(self);
                    const auto& Q2 = tp.val(q);
                    const auto& K2 = tp.val(k);
                    const auto& V2 = tp.val(v);
                    auto& gq = tp.grad_buffer(q);
                    auto& gk = tp.grad_buffer(k);
                    auto& gv = tp.grad_buffer(v);
                    Mat<S> dp(block, block), ds(block, block), pd(block, block);
                    for (Eigen::Index b = 0; b < nblocks; ++b) {
                        for (int h = 0; h < heads; ++h) {
                            const Eigen::Index seg = (b * heads + h) * block;
                            auto P = probs.middleRows(seg, block);
                            auto gO = g.block(b * block, h * dh, block, dh);
                            auto Vb = V2.block(b * block, h * dh, block, dh);
                            if (use_drop) {
                                pd = P.cwiseProduct(factor.middleRows(seg, block));
                                dp.noalias() = gO * Vb.transpose();
                                gv.block(b * block, h * dh, block, dh).noalias() += pd.transpose() * gO;
                                dp = dp.cwiseProduct(factor.middleRows(seg, block));
                            } else {
                                dp.noalias() = gO * Vb.transpose();
                                gv.block(b * block, h * dh, block, dh).noalias() += P.transpose() * gO;
                            }
                            ds = detail::softmax_backward_value(Mat<S>(P), dp);
                            ds *= inv_sqrt;
                            gq.block(b * block, h * dh, block, dh).noalias() +=
                                ds * K2.block(b * block, h * dh, block, dh);
                            gk.block(b * block, h * dh, block, dh).noalias() +=
                                ds.transpose() * Q2.block(b * block, h * dh, block, dh);
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean label-smoothed cross-entropy: target distribution puts 1-eps on the
// true class and eps/C on every class.
template <typename S>
VarId label_smoothed_ce(Tape<S>& t, VarId logits, std::vector<int> targets, double eps) {
    const auto& X = t.val(logits);
    const Eigen::Index R = X.rows(), C = X.cols();
    detail::check(eps >= 0.0 && eps < 1.0, "label_smoothed_ce: eps must be in [0,1)");
    detail::check(static_cast<Eigen::Index>(targets.size()) == R, "label_smoothed_ce: target count mismatch");
    for (int y : targets) detail::check(y >= 0 && y < C, "label_smoothed_ce: invalid class id");
    const S off = static_cast<S>(eps) / static_cast<S>(C);
    const S on = S(1) - static_cast<S>(eps);
    S total = S(0);
    for (Eigen::Index r = 0; r < R; ++r) {
        S mx = X.row(r).maxCoeff();
        S lse = std::log((X.row(r).array() - mx).exp().sum()) + mx;
        S expect = on * X(r, targets[static_cast<size_t>(r)]) + off * X.row(r).sum();
        total += lse - expect;
    }
    Mat<S> out(1, 1);
    out(0, 0) = total / static_cast<S>(R);
    return t.op(std::move(out), t.requires_grad(logits),
                [logits, targets = std::move(targets), on, off](Tape<S>& tp, VarId self) {
                    const auto& X2 = tp.val(logits);
                    const S g = tp.grad(self)(0, 0) / static_cast<S>(X2.rows());
                    Mat<S> d = detail::masked_softmax_value(X2, Mat<S>());
                    d.array() -= off;
                    for (Eigen::Index r = 0; r < X2.rows(); ++r) d(r, targets[static_cast<size_t>(r)]) -= on;
                    tp.accum(logits, d * g);
                });
}

// Mean absolute error against a constant target matrix.
template <typename S>
VarId l1_loss(Tape<S>& t, VarId pred, Mat<S> target) {
    const auto& P = t.val(pred);
    detail::check(P.rows() == target.rows() && P.cols() == target.cols(), "l1_loss: shape mismatch");
    detail::check(P.size() > 0, "l1_loss: empty input");
    Mat<S> out(1, 1);
    out(0, 0) = (P - target).array().abs().mean();
    return t.op(std::move(out), t.requires_grad(pred), [pred, target = std::move(target)](Tape<S>& tp, VarId self) {
        const auto& P2 = tp.val(pred);
        const S g = tp.grad(self)(0, 0) / static_cast<S>(P2.size());
        Mat<S> d = (P2 - target).array().sign().matrix() * g;
        tp.accum(pred, d);
    });
}

// ---------------------------------------------------------------------------
// Composite cells
// ---------------------------------------------------------------------------

struct GruParamIds {
    VarId Wz, Uz, bz;
    VarId Wr, Ur, br;
    VarId Wc, Uc, bc;
};

// One GRU step. h: R x D state, x: R x F input.
//   z = sigmoid(x Wz + h Uz + bz)
//   r = sigmoid(x Wr + h Ur + br)
//   c = tanh(x Wc + (r . h) Uc + bc)
//   h' = (1 - z) . h + z . c
template <typename S>
VarId gru_cell(Tape<S>& t, VarId h, VarId x, const GruParamIds& p) {
    VarId z = sigmoid(t, add_bias_row(t, add(t, matmul(t, x, p.Wz), matmul(t, h, p.Uz)), p.bz));
    VarId r = sigmoid(t, add_bias_row(t, add(t, matmul(t, x, p.Wr), matmul(t, h, p.Ur)), p.br));
    VarId c = tanh_op(t, add_bias_row(t, add(t, matmul(t, x, p.Wc), matmul(t, cwise_mul(t, r, h), p.Uc)), p.bc));
    return add(t, h, cwise_mul(t, z, sub(t, c, h)));
}

// Wx + b.
template <typename S>
VarId linear(Tape<S>& t, VarId x, VarId W, VarId b) {
    return add_bias_row(t, matmul(t, x, W), b);
}

}  // namespace gpm
