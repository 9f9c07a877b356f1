#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "segpipe/analysis.hpp"
#include "segpipe/postprocess.hpp"

using namespace segpipe;
namespace fs = std::filesystem;

namespace {

// fill an axis-aligned box with probability p
void box(Tensor<float>& v, int z0, int z1, int y0, int y1, int x0, int x1, float p) {
    float* d = v.mutable_data();
    const int H = v.extent(1), W = v.extent(2);
    for (int z = z0; z < z1; ++z)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                d[(static_cast<std::int64_t>(z) * H + y) * W + x] = p;
}

std::int64_t count_fg(const Tensor<float>& v) {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < v.numel(); ++i) n += v[i] != 0.0f;
    return n;
}

} // namespace

TEST_CASE("largest component keeps only the biggest blob") {
    Tensor<float> vol = Tensor<float>::zeros({2, 10, 10});
    box(vol, 0, 2, 0, 5, 0, 10, 0.9f);  // 100 voxels
    box(vol, 0, 2, 7, 9, 0, 10, 0.9f);  // 40 voxels, separated by a gap
    auto out = largest_component(vol, 0.5, 26);
    CHECK(count_fg(out) == 100);
    CHECK(out[(0 * 10 + 8) * 10 + 3] == 0.0f);

    SUBCASE("idempotent") {
        auto again = largest_component(out, 0.5, 26);
        CHECK(std::memcmp(again.data(), out.data(),
                          sizeof(float) * static_cast<std::size_t>(out.numel())) == 0);
    }
    SUBCASE("single blob unchanged (as a binary map)") {
        Tensor<float> one = Tensor<float>::zeros({1, 6, 6});
        box(one, 0, 1, 1, 4, 2, 5, 0.8f);
        auto kept = largest_component(one, 0.5, 26);
        CHECK(count_fg(kept) == 9);
        for (std::int64_t i = 0; i < one.numel(); ++i)
            CHECK((kept[i] != 0.0f) == (one[i] >= 0.5f));
    }
    SUBCASE("output is a subset of the thresholded input") {
        for (std::int64_t i = 0; i < out.numel(); ++i)
            if (out[i] != 0.0f) CHECK(vol[i] >= 0.5f);
    }
    SUBCASE("empty prediction stays empty") {
        auto empty = largest_component(Tensor<float>::zeros({2, 4, 4}), 0.5, 26);
        CHECK(count_fg(empty) == 0);
    }
    SUBCASE("bad arguments") {
        CHECK_THROWS_AS(largest_component(vol, 0.0, 26), Error);
        CHECK_THROWS_AS(largest_component(vol, 0.5, 8), Error);
        CHECK_THROWS_AS(largest_component(Tensor<float>::zeros({4, 4}), 0.5, 26), ShapeError);
    }
}

TEST_CASE("connectivity semantics") {
    SUBCASE("diagonal voxels connect under 26 but not 6") {
        // a 4-voxel diagonal chain and a later 3-voxel bar two rows away
        Tensor<float> v = Tensor<float>::zeros({1, 6, 6});
        for (int i = 0; i < 4; ++i) v.mutable_data()[i * 6 + i] = 1.0f;
        box(v, 0, 1, 5, 6, 0, 3, 1.0f);
        auto big26 = largest_component(v, 0.5, 26);
        CHECK(count_fg(big26) == 4);  // the chain is one component
        CHECK(big26[0] == 1.0f);
        auto big6 = largest_component(v, 0.5, 6);
        CHECK(count_fg(big6) == 3);  // 6-conn sees four singleton diagonals
        CHECK(big6[5 * 6 + 0] == 1.0f);
    }
    SUBCASE("slices connect across depth") {
        Tensor<float> v = Tensor<float>::zeros({2, 2, 2});
        v.mutable_data()[0] = 1.0f;      // (z0,y0,x0)
        v.mutable_data()[4] = 1.0f;      // (z1,y0,x0)
        auto out = largest_component(v, 0.5, 6);
        CHECK(count_fg(out) == 2);
    }
    SUBCASE("tie broken toward the first component in scan order") {
        Tensor<float> v = Tensor<float>::zeros({1, 3, 5});
        box(v, 0, 1, 0, 1, 0, 2, 1.0f);  // two voxels, appears first
        box(v, 0, 1, 2, 3, 3, 5, 1.0f);  // two voxels, appears later
        auto out = largest_component(v, 0.5, 26);
        CHECK(count_fg(out) == 2);
        CHECK(out[0] == 1.0f);
        CHECK(out[(0 * 3 + 2) * 5 + 3] == 0.0f);
    }
}

TEST_CASE("exactly one component survives") {
    Rng rng(77);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor<float> v({2, 8, 8});
        float* d = v.mutable_data();
        for (std::int64_t i = 0; i < v.numel(); ++i)
            d[i] = rng.uniform() < 0.3 ? 0.9f : 0.1f;
        auto out = largest_component(v, 0.5, 26);
        if (count_fg(out) == 0) continue;
        auto again = largest_component(out, 0.5, 26);
        CHECK(count_fg(again) == count_fg(out));  // a single component is a fixed point
    }
}

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("normalization analysis") {
    TempDir td("segpipe_analysis");
    SyntheticTaskCfg cfg;
    cfg.count = 3;
    cfg.size = 32;
    cfg.seed = 3;
    cfg.noise_sigma = 10.0;
    auto stats = generate_synthetic(cfg, td.path);
    auto ds = Dataset<float>::load(td.path / "manifest.json");
    auto model = build_pipeline<float>(1.0 / 16.0, 5);

    SUBCASE("counts per class equal the non-void class pixel counts") {
        auto rep = analyze_normalization(model, ds, 20);
        REQUIRE(rep.entries.size() == 4);  // 2 stages x 2 classes
        std::int64_t in_bg = 0, in_fg = 0;
        for (const auto& h : rep.entries) {
            std::int64_t sum = 0;
            for (auto c : h.counts) sum += c;
            CHECK(sum == h.total);
            if (h.stage == "input" && h.cls == 0) in_bg = h.total;
            if (h.stage == "input" && h.cls == 1) in_fg = h.total;
        }
        CHECK(in_bg == stats.bg_pixels);
        CHECK(in_fg == stats.fg_pixels);
    }
    SUBCASE("input-stage ranges match the generator records") {
        auto rep = analyze_normalization(model, ds, 20);
        double mn = std::numeric_limits<double>::infinity(), mx = -mn;
        for (const auto& h : rep.entries)
            if (h.stage == "input") {
                mn = std::min(mn, h.min);
                mx = std::max(mx, h.max);
            }
        CHECK(mn == stats.img_min);
        CHECK(mx == stats.img_max);
    }
    SUBCASE("constant dataset concentrates in one bin with sigma 0") {
        TempDir tc("segpipe_analysis_const");
        fs::create_directories(tc.path / "images");
        fs::create_directories(tc.path / "masks");
        write_sgt1(tc.path / "images" / "c.sgt1", Tensor<float>::full({1, 32, 32}, 5.0f));
        Tensor<float> m = Tensor<float>::zeros({1, 32, 32});
        m.mutable_data()[0] = 1.0f;
        write_sgt1(tc.path / "masks" / "c.sgt1", m);
        json man = {{"void_label", 255},
                    {"class_map", {{"background", 0}, {"foreground", 1}}},
                    {"records", json::array({{{"image", "images/c.sgt1"}, {"mask", "masks/c.sgt1"}}})}};
        std::ofstream(tc.path / "manifest.json") << man.dump();
        auto cds = Dataset<float>::load(tc.path / "manifest.json");
        auto rep = analyze_normalization(model, cds, 10);
        for (const auto& h : rep.entries) {
            if (h.stage != "input") continue;
            CHECK(h.sigma == 0.0);
            std::int64_t nonzero_bins = 0;
            for (auto c : h.counts) nonzero_bins += c > 0;
            CHECK(nonzero_bins == 1);
        }
    }
    SUBCASE("zeroed pre-processor concentrates stage two at 0") {
        auto zero_model = build_pipeline<float>(1.0 / 16.0, 5);
        zero_model.fcn.params().for_each([](Parameter<float>& p) {
            if (p.trainable) p.value = Tensor<float>::zeros(p.value.shape());
        });
        auto rep = analyze_normalization(zero_model, ds, 10);
        for (const auto& h : rep.entries)
            if (h.stage == "preprocessed") {
                CHECK(h.min == 0.0);
                CHECK(h.max == 0.0);
                CHECK(h.sigma == 0.0);
            }
    }
    SUBCASE("CSV outputs are written and deterministic") {
        auto rep = analyze_normalization(model, ds, 10);
        write_histogram_csv(rep, td.path / "hist.csv");
        write_histogram_summary_csv(rep, td.path / "summary.csv");
        auto slurp = [](const fs::path& p) {
            std::ifstream is(p);
            return std::string((std::istreambuf_iterator<char>(is)), {});
        };
        const std::string a = slurp(td.path / "hist.csv");
        write_histogram_csv(rep, td.path / "hist2.csv");
        CHECK(a == slurp(td.path / "hist2.csv"));
        CHECK(a.find("stage,class,bin_left,bin_right,count") == 0);
    }
}
