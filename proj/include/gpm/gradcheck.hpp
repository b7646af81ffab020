#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gpm/model.hpp"
#include "gpm/train.hpp"

namespace gpm {

// Finite-difference validation of every tape primitive plus the full
// end-to-end model, in double precision.
struct GradCheckReport {
    struct OpResult {
        std::string name;
        double max_rel_error = 0.0;
        bool linear = false;  // held to the tighter tolerance
    };
    std::vector<OpResult> ops;
    double model_max_rel_error = 0.0;

    double max_linear() const {
        double m = 0;
        for (const auto& o : ops)
            if (o.linear) m = std::max(m, o.max_rel_error);
        return m;
    }
    double max_nonlinear() const {
        double m = 0;
        for (const auto& o : ops)
            if (!o.linear) m = std::max(m, o.max_rel_error);
        return m;
    }
    bool pass(double linear_tol = 1e-6, double nonlinear_tol = 1e-3) const {
        return max_linear() < linear_tol && max_nonlinear() < nonlinear_tol &&
               model_max_rel_error < nonlinear_tol;
    }
};

namespace gradcheck_detail {

inline Mat<double> random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
    return m;
}

// Checks d(sum(f(inputs) . R))/d(inputs) against central differences.
// `f` must be a pure function of the tape and the leaf ids it is given.
inline double check_functional(const std::vector<Mat<double>*>& inputs,
                               const std::function<VarId(Tape<double>&, const std::vector<VarId>&)>& f,
                               Rng& rng) {
    // Fixed random projection makes the output scalar.
    Mat<double> proj;
    auto eval = [&](bool with_grad, std::vector<Mat<double>>* grads) {
        Tape<double> t;
        std::vector<VarId> ids;
        ids.reserve(inputs.size());
        for (auto* m : inputs) ids.push_back(t.leaf(m, true));
        VarId out = f(t, ids);
        const Mat<double>& o = t.val(out);
        if (proj.size() == 0) proj = random_mat(rng, o.rows(), o.cols());
        VarId loss = sum_all(t, cwise_mul(t, out, t.constant(proj)));
        double value = t.val(loss)(0, 0);
        if (with_grad) {
            t.backward(loss);
            grads->clear();
            for (size_t i = 0; i < ids.size(); ++i) {
                const Mat<double>& g = t.grad(ids[i]);
                grads->push_back(g.size() ? g : Mat<double>::Zero(inputs[i]->rows(), inputs[i]->cols()));
            }
        }
        return value;
    };

    std::vector<Mat<double>> analytic;
    eval(true, &analytic);

    const double h = 1e-5;
    double max_rel = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        Mat<double>& x = *inputs[i];
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                const double keep = x(r, c);
                x(r, c) = keep + h;
                const double fp = eval(false, nullptr);
                x(r, c) = keep - h;
                const double fm = eval(false, nullptr);
                x(r, c) = keep;
                const double numeric = (fp - fm) / (2 * h);
                const double a = analytic[i](r, c);
                const double rel = std::abs(a - numeric) / std::max(1.0, std::max(std::abs(a), std::abs(numeric)));
                max_rel = std::max(max_rel, rel);
            }
    }
    return max_rel;
}

}  // namespace gradcheck_detail

// Every primitive over several random small shapes, then the full model.
inline GradCheckReport run_gradcheck(uint64_t seed, int instances_per_op = 10) {
    using gradcheck_detail::check_functional;
    using gradcheck_detail::random_mat;
    GradCheckReport report;
    Rng rng(hash_mix(seed, 0x67726164ull));

    auto record = [&](const std::string& name, bool linear,
                      const std::function<double(Rng&)>& one_instance) {
        double worst = 0.0;
        for (int i = 0; i < instances_per_op; ++i) worst = std::max(worst, one_instance(rng));
        report.ops.push_back({name, worst, linear});
    };

    auto dims = [&](Rng& r) { return std::pair<Eigen::Index, Eigen::Index>(2 + r.below(3), 2 + r.below(3)); };

    record("matmul", true, [&](Rng& r) {
        auto [n, k] = dims(r);
        auto [k2, m] = dims(r);
        (void)k2;
        Mat<double> A = random_mat(r, n, k), B = random_mat(r, k, m);
        return check_functional({&A, &B}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return matmul(t, v[0], v[1]);
        }, r);
    });
    record("add", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), B = random_mat(r, n, m);
        return check_functional({&A, &B}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return add(t, v[0], v[1]);
        }, r);
    });
    record("sub", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), B = random_mat(r, n, m);
        return check_functional({&A, &B}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return sub(t, v[0], v[1]);
        }, r);
    });
    record("scale", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return scale(t, v[0], 1.7);
        }, r);
    });
    record("cwise_mul", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), B = random_mat(r, n, m);
        return check_functional({&A, &B}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return cwise_mul(t, v[0], v[1]);
        }, r);
    });
    record("add_bias_row", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), b = random_mat(r, 1, m);
        return check_functional({&A, &b}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return add_bias_row(t, v[0], v[1]);
        }, r);
    });
    record("mul_cols", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), c = random_mat(r, n, 1);
        return check_functional({&A, &c}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return mul_cols(t, v[0], v[1]);
        }, r);
    });
    record("concat_cols", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), B = random_mat(r, n, m + 1);
        return check_functional({&A, &B}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return concat_cols(t, {v[0], v[1]});
        }, r);
    });
    record("concat_rows", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m), B = random_mat(r, n + 2, m);
        return check_functional({&A, &B}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return concat_rows(t, {v[0], v[1]});
        }, r);
    });
    record("gather_rows", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        std::vector<int> idx;
        for (int i = 0; i < 2 * n; ++i) idx.push_back(static_cast<int>(r.below(static_cast<uint64_t>(n))));
        return check_functional({&A}, [idx](Tape<double>& t, const std::vector<VarId>& v) {
            return gather_rows(t, v[0], idx);
        }, r);
    });
    record("slice_cols", true, [&](Rng& r) {
        Mat<double> A = random_mat(r, 4, 5);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return slice_cols(t, v[0], 1, 3);
        }, r);
    });
    record("softmax_rows", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return softmax_rows(t, v[0]);
        }, r);
    });
    record("masked_softmax_rows", false, [&](Rng& r) {
        Eigen::Index n = 3, m = 5;
        Mat<double> A = random_mat(r, n, m);
        Mat<double> mask = Mat<double>::Ones(n, m);
        mask(0, 1) = 0;
        mask(2, 0) = 0;
        mask(2, 4) = 0;
        return check_functional({&A}, [mask](Tape<double>& t, const std::vector<VarId>& v) {
            return masked_softmax_rows(t, v[0], mask);
        }, r);
    });
    record("dropout", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        const uint64_t drop_seed = r.next();
        return check_functional({&A}, [drop_seed](Tape<double>& t, const std::vector<VarId>& v) {
            Rng dr(drop_seed);  // same mask for every evaluation
            return dropout(t, v[0], 0.3, dr, true);
        }, r);
    });
    record("gelu", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return gelu(t, v[0]);
        }, r);
    });
    record("sigmoid", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return sigmoid(t, v[0]);
        }, r);
    });
    record("tanh", false, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return tanh_op(t, v[0]);
        }, r);
    });
    record("layer_norm_rows", false, [&](Rng& r) {
        Eigen::Index n = 3, m = 6;
        Mat<double> A = random_mat(r, n, m);
        Mat<double> g = random_mat(r, 1, m, 0.5);
        g.array() += 1.0;
        Mat<double> b = random_mat(r, 1, m, 0.3);
        return check_functional({&A, &g, &b}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return layer_norm_rows(t, v[0], v[1], v[2]);
        }, r);
    });
    record("mean_rows", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return mean_rows(t, v[0]);
        }, r);
    });
    record("mean_cols", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return mean_cols(t, v[0]);
        }, r);
    });
    record("sum_all", true, [&](Rng& r) {
        auto [n, m] = dims(r);
        Mat<double> A = random_mat(r, n, m);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return sum_all(t, v[0]);
        }, r);
    });
    record("block_mean_rows", true, [&](Rng& r) {
        Mat<double> A = random_mat(r, 6, 4);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return block_mean_rows(t, v[0], 3, true);
        }, r);
    });
    record("repeat_row", true, [&](Rng& r) {
        Mat<double> A = random_mat(r, 1, 4);
        return check_functional({&A}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return repeat_row(t, v[0], 5);
        }, r);
    });
    record("attention", false, [&](Rng& r) {
        const Eigen::Index rows = 6, d = 4;  // 2 blocks of 3, 2 heads
        Mat<double> Q = random_mat(r, rows, d), K = random_mat(r, rows, d), V = random_mat(r, rows, d);
        return check_functional({&Q, &K, &V}, [](Tape<double>& t, const std::vector<VarId>& v) {
            return mha_block_attention(t, v[0], v[1], v[2], 3, 2);
        }, r);
    });
    record("gru_cell", false, [&](Rng& r) {
        const Eigen::Index rows = 3, f = 4, d = 3;
        Mat<double> h = random_mat(r, rows, d), x = random_mat(r, rows, f);
        Mat<double> Wz = random_mat(r, f, d), Uz = random_mat(r, d, d), bz = random_mat(r, 1, d);
        Mat<double> Wr = random_mat(r, f, d), Ur = random_mat(r, d, d), br = random_mat(r, 1, d);
        Mat<double> Wc = random_mat(r, f, d), Uc = random_mat(r, d, d), bc = random_mat(r, 1, d);
        return check_functional(
            {&h, &x, &Wz, &Uz, &bz, &Wr, &Ur, &br, &Wc, &Uc, &bc},
            [](Tape<double>& t, const std::vector<VarId>& v) {
                GruParamIds p{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
                return gru_cell(t, v[0], v[1], p);
            },
            r);
    });
    record("label_smoothed_ce", false, [&](Rng& r) {
        Mat<double> X = random_mat(r, 4, 3);
        std::vector<int> targets{0, 2, 1, 2};
        return check_functional({&X}, [targets](Tape<double>& t, const std::vector<VarId>& v) {
            return label_smoothed_ce(t, v[0], targets, 0.05);
        }, r);
    });
    record("l1_loss", false, [&](Rng& r) {
        Mat<double> X = random_mat(r, 4, 1);
        Mat<double> targets = random_mat(r, 4, 1) * 3.0;  // keep |pred - target| away from the kink
        targets.array() += 5.0;
        return check_functional({&X}, [targets](Tape<double>& t, const std::vector<VarId>& v) {
            return l1_loss(t, v[0], targets);
        }, r);
    });

    // ---- end-to-end tiny model -------------------------------------------
    {
        Graph g = Graph::from_edges(5, {{0, 1}, {1, 2}, {2, 0}, {2, 3}, {3, 4}, {4, 0}});
        Eigen::MatrixXd x(5, 2);
        x << 0.3, -0.2, 1.0, 0.4, -0.5, 0.8, 0.1, 0.1, 0.7, -0.9;
        g.set_node_features(x);

        ModelConfig mc;
        mc.hidden_dim = 8;
        mc.heads = 2;
        mc.layers = 1;
        mc.sp_kind = SeqKind::Transformer;
        mc.ap_kind = SeqKind::Gru;
        mc.lambda = 0.7;
        mc.use_class_token = true;
        mc.readout = ReadoutKind::Mean;
        mc.max_scale = 4;
        mc.node_feat_dim = 2;
        mc.out_dim = 3;
        Model<double> model(mc);
        model.init(seed);

        std::vector<Graph> graphs{g};
        Rng wrng(hash_mix(seed, 0x77616c6bull));
        PatternSet set = tokenize_instance(graphs[0], InstanceRef::node(0), 6, {2, 4}, BiasParams{}, wrng);
        PatternSet set2 = tokenize_instance(graphs[0], InstanceRef::node(2), 6, {2, 4}, BiasParams{}, wrng);
        std::vector<std::vector<size_t>> idx{{0, 1, 2, 3, 4, 5}, {0, 1, 2, 3, 4, 5}};
        PatternBatch<double> batch = assemble_batch<double>(mc, graphs, {}, {&set, &set2}, idx);
        std::vector<int> targets{1, 0};

        auto loss_value = [&](std::vector<Mat<double>>* grads) {
            Tape<double> t;
            auto fwd = model.forward(t, batch, false, nullptr, false);
            VarId loss = label_smoothed_ce(t, fwd.logits, targets, 0.05);
            double v = t.val(loss)(0, 0);
            if (grads) {
                t.backward(loss);
                grads->clear();
                for (size_t i = 0; i < model.params.size(); ++i) {
                    const Mat<double>& gr = t.grad(fwd.param_leaves[i]);
                    grads->push_back(gr.size() ? gr
                                               : Mat<double>::Zero(model.params[i].value.rows(),
                                                                   model.params[i].value.cols()));
                }
            }
            return v;
        };

        std::vector<Mat<double>> analytic;
        loss_value(&analytic);
        const double h = 1e-5;
        double worst = 0.0;
        for (size_t pi = 0; pi < model.params.size(); ++pi) {
            Mat<double>& p = model.params[pi].value;
            for (Eigen::Index r = 0; r < p.rows(); ++r)
                for (Eigen::Index c = 0; c < p.cols(); ++c) {
                    const double keep = p(r, c);
                    p(r, c) = keep + h;
                    const double fp = loss_value(nullptr);
                    p(r, c) = keep - h;
                    const double fm = loss_value(nullptr);
                    p(r, c) = keep;
                    const double numeric = (fp - fm) / (2 * h);
                    const double a = analytic[pi](r, c);
                    const double rel =
                        std::abs(a - numeric) / std::max(1.0, std::max(std::abs(a), std::abs(numeric)));
                    worst = std::max(worst, rel);
                }
        }
        report.model_max_rel_error = worst;
    }

    return report;
}

}  // namespace gpm
