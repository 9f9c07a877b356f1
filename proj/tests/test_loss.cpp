#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "segpipe/gradcheck.hpp"
#include "segpipe/loss.hpp"

using namespace segpipe;

namespace {

Tensor<double> random_mask(Shape s, Rng& rng, double p_fg = 0.5, double p_void = 0.0) {
    Tensor<double> m(std::move(s));
    double* p = m.mutable_data();
    for (std::int64_t i = 0; i < m.numel(); ++i) {
        const double u = rng.uniform();
        p[i] = u < p_void ? kVoidLabel : (u < p_void + p_fg ? 1.0 : 0.0);
    }
    return m;
}

} // namespace

TEST_CASE("dice loss unit values") {
    SUBCASE("perfect prediction scores -1") {
        Tensor<double> y({1, 1, 2, 2}, {1, 0, 1, 1});
        CHECK(dice_loss(y, y, 0.0).loss == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("all-zero prediction scores 0") {
        Tensor<double> o = Tensor<double>::zeros({1, 1, 2, 2});
        Tensor<double> y({1, 1, 2, 2}, {1, 0, 1, 0});
        CHECK(dice_loss(o, y, 0.0).loss == 0.0);
    }
    SUBCASE("half overlap closed form") {
        // o = 0.5 everywhere on N pixels, y foreground on N/2 of them:
        // -2*(0.5*N/2)/(0.5N + N/2) = -0.5
        const int N = 36;
        Tensor<double> o = Tensor<double>::full({1, 1, 6, 6}, 0.5);
        Tensor<double> y = Tensor<double>::zeros({1, 1, 6, 6});
        double* yp = y.mutable_data();
        for (int i = 0; i < N / 2; ++i) yp[i] = 1.0;
        CHECK(dice_loss(o, y, 0.0).loss == doctest::Approx(-0.5).epsilon(1e-9));
    }
}

TEST_CASE("dice loss error and edge handling") {
    Tensor<double> o = Tensor<double>::full({1, 1, 2, 2}, 0.5);
    SUBCASE("entirely void mask") {
        Tensor<double> v = Tensor<double>::full({1, 1, 2, 2}, kVoidLabel);
        CHECK_THROWS_AS(dice_loss(o, v, 0.0), Error);
    }
    SUBCASE("shape mismatch") {
        Tensor<double> y = Tensor<double>::zeros({1, 1, 4, 4});
        CHECK_THROWS_AS(dice_loss(o, y, 0.0), ShapeError);
    }
    SUBCASE("saturated predictions produce finite values and gradients") {
        Tensor<double> sat({1, 1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
        Tensor<double> y({1, 1, 2, 2}, {0, 1, 0, 1});
        auto r = dice_loss(sat, y, 0.0);
        CHECK(std::isfinite(static_cast<double>(r.loss)));
        CHECK_FALSE(has_nan(r.grad));
    }
    SUBCASE("all-background mask with smoothing") {
        Tensor<double> y = Tensor<double>::zeros({1, 1, 2, 2});
        Tensor<double> o0 = Tensor<double>::zeros({1, 1, 2, 2});
        auto r = dice_loss(o0, y, 1e-5);  // 0/0 avoided by the smoothing term
        CHECK(r.loss == 0.0);
        CHECK_FALSE(has_nan(r.grad));
    }
    SUBCASE("void pixels carry zero gradient") {
        Rng rng(5);
        auto o2 = random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
        auto y = random_mask({1, 1, 4, 4}, rng, 0.4, 0.3);
        bool any_valid = false;
        for (std::int64_t i = 0; i < y.numel(); ++i) any_valid |= static_cast<int>(y[i]) != kVoidLabel;
        REQUIRE(any_valid);
        auto r = dice_loss(o2, y, 0.0);
        for (std::int64_t i = 0; i < y.numel(); ++i)
            if (static_cast<int>(y[i]) == kVoidLabel) CHECK(r.grad[i] == 0.0);
    }
}

TEST_CASE("dice loss gradient vs finite differences") {
    Rng rng(303);
    Tensor<double> pred = random_tensor({1, 1, 6, 6}, rng, 0.05, 0.95);
    auto mask = random_mask({1, 1, 6, 6}, rng, 0.5, 0.1);
    auto analytic = dice_loss(pred, mask, 1e-5).grad;
    auto eval = [&]() { return static_cast<double>(dice_loss(pred, mask, 1e-5).loss); };
    auto rep = finite_diff_check(eval, pred, analytic);
    CHECK(rep.max_rel < 1e-6);
}

TEST_CASE("dice loss bounds and monotonicity") {
    Rng rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> o = random_tensor({1, 1, 5, 5}, rng, 0.0, 1.0);
        auto y = random_mask({1, 1, 5, 5}, rng, 0.5, 0.1);
        bool has_valid = false;
        for (std::int64_t i = 0; i < y.numel(); ++i) has_valid |= static_cast<int>(y[i]) != kVoidLabel;
        if (!has_valid) continue;
        auto r = dice_loss(o, y, 1e-5);
        CHECK(r.loss >= -1.0);
        CHECK(r.loss <= 0.0);

        // raising o at a foreground pixel never increases the loss
        std::int64_t fg = -1;
        for (std::int64_t i = 0; i < y.numel(); ++i)
            if (static_cast<int>(y[i]) == 1) fg = i;
        if (fg >= 0) {
            Tensor<double> o2 = o.clone();
            o2.mutable_data()[fg] = std::min(1.0, o2[fg] + 0.1);
            CHECK(dice_loss(o2, y, 1e-5).loss <= r.loss + 1e-12);
        }
    }
}

TEST_CASE("dice loss permutation invariance") {
    Rng rng(82);
    Tensor<double> o = random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
    auto y = random_mask({1, 1, 4, 4}, rng, 0.4, 0.1);
    const auto base = dice_loss(o, y, 0.0).loss;

    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 15; i > 0; --i)
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
    Tensor<double> o2({1, 1, 4, 4});
    Tensor<double> y2({1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) {
        o2.mutable_data()[i] = o[perm[static_cast<std::size_t>(i)]];
        y2.mutable_data()[i] = y[perm[static_cast<std::size_t>(i)]];
    }
    CHECK(dice_loss(o2, y2, 0.0).loss == doctest::Approx(base).epsilon(1e-12));
    CHECK(dice_coefficient(o2, y2) == doctest::Approx(dice_coefficient(o, y)).epsilon(1e-12));
}

TEST_CASE("dice coefficient") {
    SUBCASE("perfect overlap") {
        Tensor<double> m({1, 1, 2, 2}, {1, 0, 1, 1});
        CHECK(dice_coefficient(m, m) == 1.0);
    }
    SUBCASE("disjoint nonempty sets") {
        Tensor<double> p({1, 1, 2, 2}, {1, 0, 0, 0});
        Tensor<double> y({1, 1, 2, 2}, {0, 1, 0, 0});
        CHECK(dice_coefficient(p, y) == 0.0);
    }
    SUBCASE("both empty returns 1") {
        Tensor<double> z = Tensor<double>::zeros({1, 1, 2, 2});
        CHECK(dice_coefficient(z, z) == 1.0);
    }
    SUBCASE("shifted 3x3 squares overlap 6 of 9") {
        // squares at columns [1,3] and [2,4] inside a 6x6 image: 2*6/(9+9)
        Tensor<double> p = Tensor<double>::zeros({1, 1, 6, 6});
        Tensor<double> y = Tensor<double>::zeros({1, 1, 6, 6});
        for (int r = 1; r <= 3; ++r)
            for (int c = 1; c <= 3; ++c) {
                p.mutable_data()[p.index4(0, 0, r, c)] = 1.0;
                y.mutable_data()[y.index4(0, 0, r, c + 1)] = 1.0;
            }
        CHECK(dice_coefficient(p, y) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("coefficient equals negated loss on binarized predictions") {
        Rng rng(91);
        for (int trial = 0; trial < 10; ++trial) {
            auto y = random_mask({1, 1, 4, 4}, rng, 0.5, 0.1);
            bool has_fg = false;
            for (std::int64_t i = 0; i < y.numel(); ++i) has_fg |= static_cast<int>(y[i]) == 1;
            if (!has_fg) continue;
            Tensor<double> p = random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
            Tensor<double> bin({1, 1, 4, 4});
            for (std::int64_t i = 0; i < p.numel(); ++i)
                bin.mutable_data()[i] = p[i] >= 0.5 ? 1.0 : 0.0;
            CHECK(dice_coefficient(p, y) ==
                  doctest::Approx(-dice_loss(bin, y, 0.0).loss).epsilon(1e-12));
        }
    }
}

TEST_CASE("dice loss graph node backpropagates its analytic gradient") {
    Rng rng(111);
    Tensor<double> logits = random_tensor({1, 1, 4, 4}, rng, -2, 2);
    auto y = random_mask({1, 1, 4, 4}, rng, 0.5, 0.0);

    Graph<double> g(Mode::train);
    auto xi = g.input(logits);
    auto pred = g.sigmoid(xi);
    auto loss = dice_loss_node(g, pred, y, 1e-5);
    g.backward(loss);

    auto analytic = g.grad(xi).clone();
    auto eval = [&]() {
        Graph<double> g2(Mode::train);
        auto p2 = g2.sigmoid(g2.input(logits));
        return static_cast<double>(dice_loss(g2.value(p2), y, 1e-5).loss);
    };
    auto rep = finite_diff_check(eval, logits, analytic);
    CHECK(rep.max_rel < 1e-6);
}
