#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "segpipe/augment.hpp"

using namespace segpipe;

namespace {

Tensor<float> smooth_image(int h, int w, Rng& rng) {
    // sum of a few low-frequency sinusoids; smooth enough for warp tests
    Tensor<float> t({1, h, w});
    float* p = t.mutable_data();
    const double fy = rng.uniform(0.5, 2.0), fx = rng.uniform(0.5, 2.0);
    const double ph = rng.uniform(0, 6.28);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            p[y * w + x] = static_cast<float>(
                10.0 + 3.0 * std::sin(fy * y * 6.28 / h + ph) * std::cos(fx * x * 6.28 / w));
    return t;
}

Tensor<float> blob_mask(int h, int w, int cy, int cx, int r) {
    Tensor<float> m({1, h, w});
    float* p = m.mutable_data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            p[y * w + x] = ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) ? 1.0f : 0.0f;
    return m;
}

} // namespace

TEST_CASE("degenerate configuration is the identity") {
    Rng rng(1);
    auto img = smooth_image(16, 16, rng);
    auto mask = blob_mask(16, 16, 8, 8, 4);
    AugmentConfig cfg;  // everything off, crop 0 = full size
    Rng r(7);
    auto [oi, om] = augment_apply(img, mask, cfg, r);
    CHECK(std::memcmp(oi.data(), img.data(), sizeof(float) * 256) == 0);
    CHECK(std::memcmp(om.data(), mask.data(), sizeof(float) * 256) == 0);
}

TEST_CASE("double horizontal flip is the identity") {
    Rng rng(2);
    auto img = smooth_image(12, 10, rng);
    auto mask = blob_mask(12, 10, 6, 5, 3);
    AugmentParams p;
    p.flip_h = true;
    auto [i1, m1] = augment_apply_params(img, mask, p);
    auto [i2, m2] = augment_apply_params(i1, m1, p);
    CHECK(std::memcmp(i2.data(), img.data(), sizeof(float) * static_cast<std::size_t>(img.numel())) == 0);
    CHECK(std::memcmp(m2.data(), mask.data(), sizeof(float) * static_cast<std::size_t>(mask.numel())) == 0);
}

TEST_CASE("rotation by 90 degrees permutes a 2x2 image") {
    // nearest-neighbor path (the mask channel): [0,1;2,3] -> [1,3;0,2]
    Tensor<float> img({1, 2, 2}, {0, 1, 2, 3});
    AugmentParams p;
    p.rotation_deg = 90.0;
    auto [oi, om] = augment_apply_params(img, img, p);
    CHECK(om[0] == 1.0f);
    CHECK(om[1] == 3.0f);
    CHECK(om[2] == 0.0f);
    CHECK(om[3] == 2.0f);
    // bilinear path agrees up to roundoff at the sample points
    CHECK(oi[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(oi[3] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("spline warp") {
    Rng rng(3);
    auto img = smooth_image(32, 32, rng);
    auto mask = blob_mask(32, 32, 16, 16, 6);

    SUBCASE("sigma 0 deviates from identity by < 1e-6") {
        Rng r(11);
        auto [oi, om] = spline_warp(img, mask, 8, 0.0, r);
        for (std::int64_t i = 0; i < img.numel(); ++i)
            CHECK(std::abs(oi[i] - img[i]) < 1e-6f);
        CHECK(std::memcmp(om.data(), mask.data(), sizeof(float) * static_cast<std::size_t>(mask.numel())) == 0);
    }
    SUBCASE("constant images stay exactly constant") {
        auto c = Tensor<float>::full({1, 32, 32}, 4.25f);
        Rng r(12);
        auto [oi, om] = spline_warp(c, mask, 8, 5.0, r);
        for (std::int64_t i = 0; i < c.numel(); ++i) CHECK(oi[i] == 4.25f);
    }
    SUBCASE("warped mask labels stay in the closure") {
        Rng r(13);
        auto [oi, om] = spline_warp(img, mask, 8, 6.0, r);
        for (std::int64_t i = 0; i < om.numel(); ++i) {
            const int label = static_cast<int>(om[i]);
            CHECK((label == 0 || label == 1 || label == kVoidLabel));
        }
    }
    SUBCASE("grid spacing below 2 rejected") {
        Rng r(14);
        CHECK_THROWS_AS(spline_warp(img, mask, 1, 5.0, r), ConfigError);
    }
    SUBCASE("warp-only augmentation roughly preserves mean intensity") {
        Rng r(15);
        double orig_mean = 0, warp_mean = 0;
        auto [oi, om] = spline_warp(img, mask, 8, 3.0, r);
        for (std::int64_t i = 0; i < img.numel(); ++i) {
            orig_mean += img[i];
            warp_mean += oi[i];
        }
        CHECK(std::abs(warp_mean - orig_mean) / std::abs(orig_mean) < 0.05);
    }
}

TEST_CASE("label closure under the full transform stack") {
    Rng rng(4);
    auto img = smooth_image(40, 40, rng);
    auto mask = blob_mask(40, 40, 20, 22, 7);
    AugmentConfig cfg;
    cfg.flip_h = cfg.flip_v = true;
    cfg.rotation_max = 25.0;
    cfg.shear_max = 0.41;
    cfg.crop_size = 24;
    cfg.warp = true;
    cfg.warp_grid_spacing = 8;
    cfg.warp_sigma = 4.0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng r(100 + static_cast<std::uint64_t>(trial));
        auto [oi, om] = augment_apply(img, mask, cfg, r);
        CHECK(oi.shape() == Shape{1, 24, 24});
        CHECK(om.shape() == Shape{1, 24, 24});
        for (std::int64_t i = 0; i < om.numel(); ++i) {
            const int label = static_cast<int>(om[i]);
            CHECK((label == 0 || label == 1 || label == kVoidLabel));
        }
    }
}

TEST_CASE("augmentation is deterministic given the rng") {
    Rng rng(5);
    auto img = smooth_image(32, 32, rng);
    auto mask = blob_mask(32, 32, 16, 16, 5);
    AugmentConfig cfg;
    cfg.flip_h = true;
    cfg.rotation_max = 10.0;
    cfg.shear_max = 0.2;
    cfg.crop_size = 16;
    cfg.warp = true;
    cfg.warp_grid_spacing = 8;
    cfg.warp_sigma = 2.0;

    Rng r1(99), r2(99), r3(100);
    auto [a_img, a_mask] = augment_apply(img, mask, cfg, r1);
    auto [b_img, b_mask] = augment_apply(img, mask, cfg, r2);
    auto [c_img, c_mask] = augment_apply(img, mask, cfg, r3);
    CHECK(std::memcmp(a_img.data(), b_img.data(), sizeof(float) * static_cast<std::size_t>(a_img.numel())) == 0);
    CHECK(std::memcmp(a_mask.data(), b_mask.data(), sizeof(float) * static_cast<std::size_t>(a_mask.numel())) == 0);
    bool differ = false;
    for (std::int64_t i = 0; i < a_img.numel(); ++i) differ = differ || a_img[i] != c_img[i];
    CHECK(differ);
}

TEST_CASE("crops") {
    Rng rng(6);
    auto img = smooth_image(32, 32, rng);

    SUBCASE("output extents equal the crop size exactly") {
        auto mask = blob_mask(32, 32, 16, 16, 5);
        AugmentConfig cfg;
        cfg.crop_size = 20;
        Rng r(7);
        auto [oi, om] = augment_apply(img, mask, cfg, r);
        CHECK(oi.shape() == Shape{1, 20, 20});
        CHECK(om.shape() == Shape{1, 20, 20});
    }
    SUBCASE("oversized crop rejected") {
        auto mask = blob_mask(32, 32, 16, 16, 5);
        AugmentConfig cfg;
        cfg.crop_size = 64;
        Rng r(8);
        CHECK_THROWS_AS(augment_apply(img, mask, cfg, r), Error);
    }
    SUBCASE("foreground-constrained crops contain foreground") {
        // tiny blob in a corner; unconstrained crops usually miss it
        auto mask = blob_mask(32, 32, 4, 4, 2);
        AugmentConfig cfg;
        cfg.crop_size = 8;
        cfg.crop_contains_foreground = true;
        for (int trial = 0; trial < 20; ++trial) {
            Rng r(200 + static_cast<std::uint64_t>(trial));
            auto [oi, om] = augment_apply(img, mask, cfg, r);
            bool has_fg = false;
            for (std::int64_t i = 0; i < om.numel(); ++i) has_fg |= static_cast<int>(om[i]) == 1;
            CHECK(has_fg);
        }
    }
}

TEST_CASE("out-of-domain handling") {
    // a large rotation pushes corners outside; image uses edge replication,
    // mask becomes void there
    Rng rng(9);
    auto img = smooth_image(16, 16, rng);
    auto mask = blob_mask(16, 16, 8, 8, 10);  // mask fills most of the frame
    AugmentParams p;
    p.rotation_deg = 45.0;
    auto [oi, om] = augment_apply_params(img, mask, p);
    bool any_void = false;
    for (std::int64_t i = 0; i < om.numel(); ++i)
        any_void = any_void || static_cast<int>(om[i]) == kVoidLabel;
    CHECK(any_void);
    CHECK_FALSE(has_nan(oi));
}
