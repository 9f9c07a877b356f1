#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "segpipe/tensor.hpp"

using namespace segpipe;
namespace fs = std::filesystem;

TEST_CASE("constant fills") {
    auto z = Tensor<float>::zeros({2, 3});
    CHECK(z.numel() == 6);
    for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0.0f);

    auto f = Tensor<float>::full({1}, 7.5f);
    CHECK(f.numel() == 1);
    CHECK(f[0] == 7.5f);

    auto o = Tensor<double>::ones({1, 1, 2, 2});
    CHECK(sum_all(o) == 4.0);
}

TEST_CASE("invalid shapes rejected") {
    CHECK_THROWS_AS(Tensor<float>::zeros({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>::zeros({}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>::zeros({1, 1, 1, 1, 1}), ShapeError);
}

TEST_CASE("elementwise arithmetic") {
    Tensor<double> a({2}, {1, 2});
    Tensor<double> b({2}, {3, 4});
    auto s = add(a, b);
    CHECK(s[0] == 4.0);
    CHECK(s[1] == 6.0);

    auto m = mul(Tensor<double>::full({2, 2}, 3.0), 0.0);
    for (std::int64_t i = 0; i < m.numel(); ++i) CHECK(m[i] == 0.0);

    auto e = ew_exp(Tensor<double>::zeros({1}));
    CHECK(e[0] == 1.0);

    CHECK(neg(a)[1] == -2.0);
    CHECK(ew_max(a, b)[0] == 3.0);
    CHECK(sub(b, a)[1] == 2.0);
}

TEST_CASE("division policy") {
    Tensor<double> a({2}, {1, 2});
    Tensor<double> z({2}, {1, 0});
    CHECK_THROWS_AS(div(a, z), NumericError);
    auto p = div(a, z, DivPolicy::permissive);
    CHECK(p[0] == 1.0);
    CHECK(std::isinf(p[1]));
    CHECK_THROWS_AS(div(a, 0.0), NumericError);
}

TEST_CASE("incompatible elementwise shapes") {
    Tensor<double> a({2, 3});
    Tensor<double> b({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("channel broadcast equals loop reference") {
    Rng rng(42);
    for (int trial = 0; trial < 10; ++trial) {
        const int B = 1 + static_cast<int>(rng.below(2));
        const int C = 1 + static_cast<int>(rng.below(4));
        const int H = 1 + static_cast<int>(rng.below(8));
        const int W = 1 + static_cast<int>(rng.below(8));
        Tensor<double> x({B, C, H, W});
        Tensor<double> bias({1, C, 1, 1});
        double* xp = x.mutable_data();
        for (std::int64_t i = 0; i < x.numel(); ++i) xp[i] = rng.uniform(-2, 2);
        double* bp = bias.mutable_data();
        for (int c = 0; c < C; ++c) bp[c] = rng.uniform(-2, 2);

        auto out = add(x, bias);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        CHECK(out.at4(b, c, h, w) == x.at4(b, c, h, w) + bias[c]);
    }
}

TEST_CASE("reductions") {
    Tensor<double> a({2, 2}, {1, 2, 3, 4});
    CHECK(reduce(ReduceOp::sum, a, {0, 1})[0] == 10.0);
    CHECK(reduce(ReduceOp::mean, Tensor<double>({2}, {2, 4}), {0})[0] == 3.0);

    Tensor<double> m({2, 2}, {1, 5, 3, 2});
    auto mx = reduce(ReduceOp::max, m, {1});
    CHECK(mx[0] == 5.0);
    CHECK(mx[1] == 3.0);

    // keepdims and empty-axes identity
    auto kd = reduce(ReduceOp::sum, a, {1}, true);
    CHECK(kd.shape() == Shape{2, 1});
    auto id = reduce(ReduceOp::sum, a, {});
    CHECK(id.same_shape(a));
    CHECK(id[3] == 4.0);

    CHECK_THROWS_AS(reduce(ReduceOp::sum, a, {2}), ShapeError);
    CHECK_THROWS_AS(reduce(ReduceOp::sum, a, {0, 0}), ShapeError);
}

TEST_CASE("reduce agrees with a per-element index reference") {
    Rng rng(314);
    for (int trial = 0; trial < 30; ++trial) {
        const int nd = 1 + static_cast<int>(rng.below(4));
        Shape shape;
        for (int d = 0; d < nd; ++d) shape.push_back(1 + static_cast<int>(rng.below(5)));
        Tensor<double> a(shape);
        double* ap = a.mutable_data();
        for (std::int64_t i = 0; i < a.numel(); ++i) ap[i] = rng.uniform(-5, 5);

        std::vector<int> axes;
        for (int d = 0; d < nd; ++d)
            if (rng.coin()) axes.push_back(d);
        if (axes.empty()) axes.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(nd))));

        const ReduceOp op = static_cast<ReduceOp>(rng.below(3));
        auto got = reduce(op, a, axes);

        // reference: route every element through multi_index arithmetic
        std::vector<bool> hit(static_cast<std::size_t>(nd), false);
        for (int ax : axes) hit[static_cast<std::size_t>(ax)] = true;
        Tensor<double> want = (op == ReduceOp::max)
                                  ? Tensor<double>::full(got.shape(), std::numeric_limits<double>::lowest())
                                  : Tensor<double>::zeros(got.shape());
        double* wp = want.mutable_data();
        std::int64_t group = 1;
        for (int d = 0; d < nd; ++d)
            if (hit[static_cast<std::size_t>(d)]) group *= shape[static_cast<std::size_t>(d)];
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            auto idx = multi_index(shape, i);
            std::int64_t oi = 0;
            for (int d = 0; d < nd; ++d)
                if (!hit[static_cast<std::size_t>(d)])
                    oi = oi * shape[static_cast<std::size_t>(d)] + idx[static_cast<std::size_t>(d)];
            if (op == ReduceOp::max)
                wp[oi] = std::max(wp[oi], a[i]);
            else
                wp[oi] += a[i];
        }
        if (op == ReduceOp::mean)
            for (std::int64_t i = 0; i < want.numel(); ++i) wp[i] /= static_cast<double>(group);

        REQUIRE(got.same_shape(want));
        for (std::int64_t i = 0; i < got.numel(); ++i)
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("sum/mean consistency") {
    Rng rng(7);
    Tensor<float> a({2, 3, 4, 5});
    float* p = a.mutable_data();
    for (std::int64_t i = 0; i < a.numel(); ++i) p[i] = static_cast<float>(rng.uniform(-10, 10));
    const float mean = reduce(ReduceOp::mean, a, all_axes(a))[0];
    const float via_sum = sum_all(a) / static_cast<float>(a.numel());
    CHECK(mean == doctest::Approx(via_sum).epsilon(1e-6));
}

TEST_CASE("linearization round-trip") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const int nd = 1 + static_cast<int>(rng.below(4));
        Shape shape;
        for (int d = 0; d < nd; ++d) shape.push_back(1 + static_cast<int>(rng.below(6)));
        const std::int64_t n = shape_numel(shape);
        const std::int64_t flat = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        CHECK(flat_index(shape, multi_index(shape, flat)) == flat);
    }
    // and the documented 4-d convention
    Tensor<float> t({2, 3, 4, 5});
    CHECK(t.index4(1, 2, 3, 4) == ((1 * 3 + 2) * 4 + 3) * 5 + 4);
}

TEST_CASE("init_weights zeros") {
    Rng rng(1);
    auto t = init_weights<float>(InitScheme::zeros, {4, 2, 3, 3}, rng);
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0f);
}

TEST_CASE("he_normal moments") {
    // fan_in for [16,1,3,3] is 9; pool ~1e5 samples and compare the std.
    Rng rng(2024);
    double sum = 0, sum2 = 0;
    std::int64_t n = 0;
    while (n < 100000) {
        auto t = init_weights<double>(InitScheme::he_normal, {16, 1, 3, 3}, rng);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            sum += t[i];
            sum2 += t[i] * t[i];
        }
        n += t.numel();
    }
    const double mean = sum / static_cast<double>(n);
    const double stddev = std::sqrt(sum2 / static_cast<double>(n) - mean * mean);
    const double expect = std::sqrt(2.0 / 9.0);
    CHECK(std::abs(stddev - expect) / expect < 0.20);
    CHECK(std::abs(mean) < 0.05);
}

TEST_CASE("glorot_uniform bound") {
    // [8,8,3,3]: fan_in = fan_out = 72, bound = sqrt(6/144)
    const double bound = std::sqrt(6.0 / 144.0);
    Rng rng(5);
    auto t = init_weights<double>(InitScheme::glorot_uniform, {8, 8, 3, 3}, rng);
    double lo = 0, hi = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
    }
    CHECK(hi <= bound);
    CHECK(lo >= -bound);
    CHECK(hi > 0.9 * bound);
    CHECK(lo < -0.9 * bound);
}

TEST_CASE("init determinism") {
    Rng a(77), b(77);
    auto t1 = init_weights<float>(InitScheme::he_normal, {8, 4, 3, 3}, a);
    auto t2 = init_weights<float>(InitScheme::he_normal, {8, 4, 3, 3}, b);
    CHECK(std::memcmp(t1.data(), t2.data(), sizeof(float) * static_cast<std::size_t>(t1.numel())) == 0);
}

TEST_CASE("rng substreams are independent of draw order") {
    Rng root(123);
    auto s1 = root.stream("init", 0);
    root.next_u64();
    auto s2 = root.stream("init", 0);
    CHECK(s1.next_u64() == s2.next_u64());
    auto other = root.stream("init", 1);
    CHECK(s1.next_u64() != other.next_u64());
}

TEST_CASE("SGT1 round-trip is bit exact") {
    const fs::path dir = fs::temp_directory_path() / "segpipe_sgt1_test";
    fs::create_directories(dir);

    Rng rng(11);
    Tensor<float> tf({2, 3, 4, 5});
    float* p = tf.mutable_data();
    for (std::int64_t i = 0; i < tf.numel(); ++i) p[i] = static_cast<float>(rng.normal());
    write_sgt1(dir / "a.sgt1", tf);
    auto rf = read_sgt1<float>(dir / "a.sgt1");
    CHECK(rf.shape() == tf.shape());
    CHECK(std::memcmp(rf.data(), tf.data(), sizeof(float) * static_cast<std::size_t>(tf.numel())) == 0);

    Tensor<double> td({3, 7});
    double* q = td.mutable_data();
    for (std::int64_t i = 0; i < td.numel(); ++i) q[i] = rng.normal();
    write_sgt1(dir / "b.sgt1", td);
    auto rd = read_sgt1<double>(dir / "b.sgt1");
    CHECK(std::memcmp(rd.data(), td.data(), sizeof(double) * static_cast<std::size_t>(td.numel())) == 0);

    // f32 payload readable as f64
    auto up = read_sgt1<double>(dir / "a.sgt1");
    CHECK(up[3] == static_cast<double>(tf[3]));

    fs::remove_all(dir);
}

TEST_CASE("SGT1 rejects corrupt input") {
    const fs::path dir = fs::temp_directory_path() / "segpipe_sgt1_bad";
    fs::create_directories(dir);

    {
        std::ofstream os(dir / "bad_magic.sgt1", std::ios::binary);
        os.write("NOPE", 4);
    }
    CHECK_THROWS_AS(read_sgt1<float>(dir / "bad_magic.sgt1"), ConfigError);

    {
        // zero extent in header
        std::ofstream os(dir / "zero_extent.sgt1", std::ios::binary);
        os.write("SGT1", 4);
        os.put('\0');
        os.put('\x01');
        const char z[4] = {0, 0, 0, 0};
        os.write(z, 4);
    }
    CHECK_THROWS_AS(read_sgt1<float>(dir / "zero_extent.sgt1"), ConfigError);

    CHECK_THROWS_AS(read_sgt1<float>(dir / "missing.sgt1"), ConfigError);
    fs::remove_all(dir);
}
