#ifndef SEGPIPE_GRADCHECK_HPP
#define SEGPIPE_GRADCHECK_HPP

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "segpipe/autodiff.hpp"
#include "segpipe/blocks.hpp"
#include "segpipe/loss.hpp"

namespace segpipe {

/// Relative error with an absolute floor so near-zero gradient pairs (e.g. a
/// conv bias absorbed by the following batchnorm, whose true gradient is 0)
/// compare as equal instead of amplifying finite-difference roundoff.
inline double rel_error(double a, double b) {
    const double diff = std::abs(a - b);
    if (diff <= 1e-8) return 0.0;
    return diff / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct FdReport {
    double max_rel = 0.0;
    std::int64_t probes = 0;
};

/// Central finite differences of eval_loss() w.r.t. `store`, compared against
/// the analytic gradient. eval_loss must recompute the loss from the current
/// contents of `store` on every call. Probes every entry unless max_probes
/// limits to a random sample.
template <class F>
FdReport finite_diff_check(F&& eval_loss, Tensor<double>& store, const Tensor<double>& analytic,
                           double eps = 1e-5, int max_probes = 0, Rng* rng = nullptr) {
    if (!store.same_shape(analytic)) throw ShapeError("finite_diff_check: gradient shape mismatch");
    std::vector<std::int64_t> idx;
    if (max_probes > 0 && max_probes < store.numel()) {
        for (int i = 0; i < max_probes; ++i)
            idx.push_back(static_cast<std::int64_t>(rng->below(static_cast<std::uint64_t>(store.numel()))));
    } else {
        idx.resize(static_cast<std::size_t>(store.numel()));
        std::iota(idx.begin(), idx.end(), 0);
    }
    FdReport rep;
    for (std::int64_t i : idx) {
        const double orig = store[i];
        store.mutable_data()[i] = orig + eps;
        const double fp = eval_loss();
        store.mutable_data()[i] = orig - eps;
        const double fm = eval_loss();
        store.mutable_data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        rep.max_rel = std::max(rep.max_rel, rel_error(fd, analytic[i]));
        ++rep.probes;
    }
    return rep;
}

/// Random weights shaped like `t`, used to reduce an op output to a scalar
/// loss sum(w*out) with a nondegenerate seed gradient.
inline Tensor<double> random_weights(const Shape& shape, Rng& rng) {
    Tensor<double> w(shape);
    double* p = w.mutable_data();
    for (std::int64_t i = 0; i < w.numel(); ++i) p[i] = rng.uniform(-1.0, 1.0);
    return w;
}

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(shape);
    double* p = t.mutable_data();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

struct OpCheck {
    std::string op;
    double max_rel = 0.0;
    double tol = 1e-4;
    bool pass() const { return max_rel < tol; }
};

/// Finite-difference suite over every autodiff op plus the Dice loss.
/// `corrupt` deliberately biases one analytic gradient; the suite must then
/// fail, which the CLI uses as a self-test of the harness.
inline std::vector<OpCheck> gradcheck_ops(std::uint64_t seed, bool corrupt = false) {
    Rng root(seed);
    std::vector<OpCheck> out;

    // generic: loss = sum(w ⊙ op(tensors)), FD each watched tensor
    auto run = [&](const std::string& name, auto&& build, std::vector<Tensor<double>*> watched,
                   double tol = 1e-4) {
        Rng wrng = root.stream("weights." + name);
        Tensor<double> w;
        // analytic pass
        std::vector<Tensor<double>> analytic;
        {
            Graph<double> g(Mode::train);
            ValueRef y;
            std::vector<ValueRef> leaves;
            y = build(g, leaves);
            w = random_weights(g.value(y).shape(), wrng);
            g.backward(y, &w);
            for (std::size_t k = 0; k < watched.size(); ++k) analytic.push_back(g.grad(leaves[k]).clone());
        }
        if (corrupt && !analytic.empty() && analytic[0].numel() > 0) {
            double* p = analytic[0].mutable_data();
            p[0] += 0.5;
        }
        OpCheck chk{name, 0.0, tol};
        for (std::size_t k = 0; k < watched.size(); ++k) {
            auto eval = [&]() {
                Graph<double> g(Mode::train);
                std::vector<ValueRef> leaves;
                ValueRef y = build(g, leaves);
                return sum_all(mul(g.value(y), w));
            };
            auto rep = finite_diff_check(eval, *watched[k], analytic[k]);
            chk.max_rel = std::max(chk.max_rel, rep.max_rel);
        }
        out.push_back(chk);
    };

    Rng drng = root.stream("data");

    {  // conv2d stride 1, same padding, with bias
        Tensor<double> x = random_tensor({2, 3, 6, 5}, drng);
        Tensor<double> wgt = random_tensor({4, 3, 3, 3}, drng);
        Tensor<double> b = random_tensor({4}, drng);
        run("conv2d_s1_same", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x), g.input(wgt), g.input(b)};
            return g.conv2d(lv[0], lv[1], lv[2], 1, Padding::same);
        }, {&x, &wgt, &b});
    }
    {  // conv2d stride 2, valid padding, no bias
        Tensor<double> x = random_tensor({2, 2, 7, 5}, drng);
        Tensor<double> wgt = random_tensor({3, 2, 3, 3}, drng);
        run("conv2d_s2_valid", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x), g.input(wgt)};
            return g.conv2d(lv[0], lv[1], 2, Padding::valid);
        }, {&x, &wgt});
    }
    {
        Tensor<double> x = random_tensor({2, 3, 4, 6}, drng);
        run("maxpool2", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x)};
            return g.maxpool2(lv[0]);
        }, {&x});
    }
    {
        Tensor<double> x = random_tensor({1, 3, 3, 4}, drng);
        run("upsample2", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x)};
            return g.upsample2(lv[0]);
        }, {&x});
    }
    ParamStore<double> bn_buffers;
    {
        Tensor<double> x = random_tensor({2, 3, 4, 4}, drng);
        Tensor<double> gamma = random_tensor({3}, drng, 0.5, 1.5);
        Tensor<double> beta = random_tensor({3}, drng);
        // train mode only writes the running buffers, so one set is reusable
        BatchNormState<double> st;
        st.running_mean = &bn_buffers.create("rm", Tensor<double>::zeros({1, 3, 1, 1}), false, true);
        st.running_var = &bn_buffers.create("rv", Tensor<double>::ones({1, 3, 1, 1}), false, true);
        st.batches_tracked = &bn_buffers.create("n", Tensor<double>::zeros({1}), false, true);
        run("batchnorm", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x), g.input(gamma), g.input(beta)};
            return g.batchnorm(lv[0], lv[1], lv[2], st);
        }, {&x, &gamma, &beta});
    }
    {  // keep samples away from the relu kink
        Tensor<double> x = random_tensor({2, 4, 5, 5}, drng);
        double* p = x.mutable_data();
        for (std::int64_t i = 0; i < x.numel(); ++i)
            if (std::abs(p[i]) < 0.05) p[i] = p[i] < 0 ? -0.05 : 0.05;
        run("relu", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x)};
            return g.relu(lv[0]);
        }, {&x});
    }
    {
        Tensor<double> x = random_tensor({2, 2, 4, 4}, drng, -3, 3);
        run("sigmoid", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(x)};
            return g.sigmoid(lv[0]);
        }, {&x});
    }
    {  // dropout with a mask pinned by re-seeding per evaluation
        Tensor<double> x = random_tensor({2, 3, 4, 4}, drng);
        run("dropout", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            Rng mask_rng(4242);
            lv = {g.input(x)};
            return g.dropout(lv[0], 0.3, mask_rng);
        }, {&x});
    }
    {
        Tensor<double> a = random_tensor({2, 2, 3, 3}, drng);
        Tensor<double> b = random_tensor({2, 3, 3, 3}, drng);
        run("concat_channels", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(a), g.input(b)};
            return g.concat_channels(lv[0], lv[1]);
        }, {&a, &b});
    }
    {
        Tensor<double> a = random_tensor({2, 2, 3, 3}, drng);
        Tensor<double> b = random_tensor({2, 2, 3, 3}, drng);
        run("add", [&](Graph<double>& g, std::vector<ValueRef>& lv) {
            lv = {g.input(a), g.input(b)};
            return g.add(lv[0], lv[1]);
        }, {&a, &b});
    }
    {  // Dice loss against its analytic gradient, tighter tolerance
        Tensor<double> pred = random_tensor({1, 1, 6, 6}, drng, 0.02, 0.98);
        Tensor<double> mask({1, 1, 6, 6});
        double* mp = mask.mutable_data();
        for (std::int64_t i = 0; i < mask.numel(); ++i) {
            const double u = drng.uniform();
            mp[i] = u < 0.15 ? kVoidLabel : (u < 0.6 ? 1.0 : 0.0);
        }
        Tensor<double> analytic = dice_loss(pred, mask, 1e-5).grad;
        if (corrupt) analytic.mutable_data()[0] += 0.5;
        auto eval = [&]() { return static_cast<double>(dice_loss(pred, mask, 1e-5).loss); };
        auto rep = finite_diff_check(eval, pred, analytic);
        out.push_back({"dice_loss", rep.max_rel, 1e-6});
    }
    return out;
}

/// Finite-difference checks of whole residual blocks (input and every
/// trainable parameter) across all variant/resample combinations.
inline std::vector<OpCheck> gradcheck_blocks(std::uint64_t seed) {
    Rng root(seed);
    std::vector<OpCheck> out;

    struct Case {
        const char* name;
        bool bottleneck;
        int in_w, out_w;
        Resample rs;
    };
    const Case cases[] = {
        {"simple_keep", false, 4, 4, Resample::none},
        {"simple_down", false, 4, 4, Resample::down},
        {"simple_up", false, 8, 4, Resample::up},
        {"bottleneck_keep", true, 8, 8, Resample::none},
        {"bottleneck_down", true, 4, 8, Resample::down},
        {"bottleneck_up", true, 16, 8, Resample::up},
    };
    for (const Case& c : cases) {
        auto h = make_residual_block<double>(c.bottleneck, c.in_w, c.out_w, c.rs, 0.0,
                                             root.stream(c.name).seed());
        Rng drng = root.stream(std::string(c.name) + ".data");
        Tensor<double> x = random_tensor({2, c.in_w, 6, 6}, drng);
        Tensor<double> w;

        auto forward = [&](Graph<double>& g) {
            return h.unit.apply(g, g.input(x), nullptr);
        };
        // analytic gradients
        Tensor<double> dx;
        {
            Graph<double> g(Mode::train);
            auto xi = g.input(x);
            auto y = h.unit.apply(g, xi, nullptr);
            w = random_weights(g.value(y).shape(), drng);
            h.store.zero_grads();
            g.backward(y, &w);
            dx = g.grad(xi).clone();
        }
        auto eval = [&]() {
            Graph<double> g(Mode::train);
            return sum_all(mul(g.value(forward(g)), w));
        };
        OpCheck chk{c.name, 0.0, 1e-4};
        chk.max_rel = finite_diff_check(eval, x, dx).max_rel;
        Rng prng = root.stream(std::string(c.name) + ".probes");
        for (std::size_t pi = 0; pi < h.store.size(); ++pi) {
            auto& p = h.store[pi];
            if (!p.trainable) continue;
            auto rep = finite_diff_check(eval, p.value, p.grad, 1e-5, 40, &prng);
            chk.max_rel = std::max(chk.max_rel, rep.max_rel);
        }
        out.push_back(chk);
    }
    return out;
}

struct PipelineCheck {
    double max_rel = 0.0;
    int probes = 0;
    bool pass() const { return max_rel < 1e-3; }
};

/// End-to-end check: Dice loss of the full pipeline on a 16x16 input at
/// scale 1/16, finite differences over a random sample of parameters.
inline PipelineCheck gradcheck_pipeline(std::uint64_t seed, int param_probes = 20) {
    Rng root(seed);
    auto model = build_pipeline<double>(1.0 / 16.0, root.stream("model").seed());
    Rng drng = root.stream("data");
    Tensor<double> x = random_tensor({2, 1, 16, 16}, drng, -1.0, 3.0);
    Tensor<double> mask({2, 1, 16, 16});
    double* mp = mask.mutable_data();
    for (std::int64_t i = 0; i < mask.numel(); ++i) mp[i] = drng.coin() ? 1.0 : 0.0;

    auto eval = [&]() {
        Graph<double> g(Mode::train);
        auto out = model.forward(g, g.input(x));
        return static_cast<double>(dice_loss(g.value(out), mask, 1e-5).loss);
    };

    model.for_each_store([](ParamStore<double>& s) { s.zero_grads(); });
    {
        Graph<double> g(Mode::train);
        auto out = model.forward(g, g.input(x));
        auto loss = dice_loss_node(g, out, mask, 1e-5);
        g.backward(loss);
    }

    std::vector<Parameter<double>*> trainable;
    model.for_each_store([&](ParamStore<double>& s) {
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i].trainable) trainable.push_back(&s[i]);
    });

    PipelineCheck chk;
    Rng prng = root.stream("probes");
    for (int k = 0; k < param_probes; ++k) {
        Parameter<double>& p = *trainable[prng.below(trainable.size())];
        const std::int64_t idx =
            static_cast<std::int64_t>(prng.below(static_cast<std::uint64_t>(p.value.numel())));
        const double orig = p.value[idx];
        p.value.mutable_data()[idx] = orig + 1e-5;
        const double fp = eval();
        p.value.mutable_data()[idx] = orig - 1e-5;
        const double fm = eval();
        p.value.mutable_data()[idx] = orig;
        const double fd = (fp - fm) / 2e-5;
        chk.max_rel = std::max(chk.max_rel, rel_error(fd, p.grad[idx]));
        ++chk.probes;
    }
    return chk;
}

} // namespace segpipe

#endif
