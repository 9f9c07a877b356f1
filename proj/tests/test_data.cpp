#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <fstream>
#include <set>

#include "segpipe/data.hpp"

using namespace segpipe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_pair(const fs::path& dir, const std::string& stem, int h, int w, float img_val,
                float mask_val) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    write_sgt1(dir / "images" / (stem + ".sgt1"), Tensor<float>::full({1, h, w}, img_val));
    write_sgt1(dir / "masks" / (stem + ".sgt1"), Tensor<float>::full({1, h, w}, mask_val));
}

void write_manifest(const fs::path& dir, const json& records) {
    json m = {{"void_label", 255},
              {"class_map", {{"background", 0}, {"foreground", 1}}},
              {"split", "all"},
              {"records", records}};
    std::ofstream os(dir / "manifest.json");
    os << m.dump(2);
}

} // namespace

TEST_CASE("manifest loading") {
    TempDir td("segpipe_data_manifest");
    for (int i = 0; i < 3; ++i)
        write_pair(td.path, "00" + std::to_string(i), 64, 64, static_cast<float>(i), 1.0f);
    json recs = json::array();
    for (int i = 0; i < 3; ++i)
        recs.push_back({{"image", "images/00" + std::to_string(i) + ".sgt1"},
                        {"mask", "masks/00" + std::to_string(i) + ".sgt1"}});
    write_manifest(td.path, recs);

    auto ds = Dataset<float>::load(td.path / "manifest.json");
    REQUIRE(ds.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        auto s = ds.get(i);
        CHECK(s.image[0] == static_cast<float>(i));  // listed order preserved
        CHECK(s.has_mask());
    }
}

TEST_CASE("manifest error paths") {
    TempDir td("segpipe_data_errors");
    write_pair(td.path, "000", 32, 32, 1.0f, 0.0f);

    SUBCASE("missing file") {
        write_manifest(td.path, json::array({{{"image", "images/nope.sgt1"}}}));
        CHECK_THROWS_AS(Dataset<float>::load(td.path / "manifest.json"), ConfigError);
    }
    SUBCASE("unknown manifest key rejected") {
        json m = {{"void_label", 255}, {"records", json::array()}, {"surprise", 1}};
        std::ofstream(td.path / "manifest.json") << m.dump();
        CHECK_THROWS_AS(Dataset<float>::load(td.path / "manifest.json"), ConfigError);
    }
    SUBCASE("extent mismatch between image and mask") {
        write_sgt1(td.path / "masks" / "000.sgt1", Tensor<float>::zeros({1, 16, 16}));
        write_manifest(td.path,
                       json::array({{{"image", "images/000.sgt1"}, {"mask", "masks/000.sgt1"}}}));
        auto ds = Dataset<float>::load(td.path / "manifest.json");
        CHECK_THROWS_AS(ds.get(0), ConfigError);
    }
    SUBCASE("unknown label rejected") {
        write_sgt1(td.path / "masks" / "000.sgt1", Tensor<float>::full({1, 32, 32}, 7.0f));
        write_manifest(td.path,
                       json::array({{{"image", "images/000.sgt1"}, {"mask", "masks/000.sgt1"}}}));
        auto ds = Dataset<float>::load(td.path / "manifest.json");
        CHECK_THROWS_AS(ds.get(0), ConfigError);
    }
}

TEST_CASE("padding to multiples of 32") {
    TempDir td("segpipe_data_pad");
    write_pair(td.path, "odd", 500, 500, 3.5f, 1.0f);
    write_manifest(td.path,
                   json::array({{{"image", "images/odd.sgt1"}, {"mask", "masks/odd.sgt1"}}}));
    auto ds = Dataset<float>::load(td.path / "manifest.json");
    auto s = ds.get(0);
    CHECK(s.image.shape() == Shape{1, 512, 512});
    CHECK(s.mask.shape() == Shape{1, 512, 512});
    CHECK(s.orig_h == 500);
    CHECK(s.orig_w == 500);
    // edge replication on images, void on masks
    CHECK(s.image.at4(0, 0, 511, 511) == doctest::Approx(3.5f));
    CHECK(static_cast<int>(s.mask[static_cast<std::int64_t>(511) * 512 + 511]) == kVoidLabel);

    SUBCASE("crop-back inverts the padding on the original region") {
        auto back = crop_back(s.image, s.orig_h, s.orig_w);
        CHECK(back.shape() == Shape{1, 500, 500});
        for (int i = 0; i < 500 * 500; ++i) CHECK(back[i] == 3.5f);
    }
}

TEST_CASE("prediction-only records train rejection") {
    TempDir td("segpipe_data_nomask");
    write_pair(td.path, "000", 32, 32, 1.0f, 0.0f);
    write_manifest(td.path, json::array({{{"image", "images/000.sgt1"}, {"mask", nullptr}}}));
    auto ds = Dataset<float>::load(td.path / "manifest.json");
    auto samples = ds.load_all();
    CHECK_FALSE(samples[0].has_mask());
    Rng rng(1);
    CHECK_THROWS_AS(assemble_batch(samples, {0}, nullptr, &rng, 0), ConfigError);
}

TEST_CASE("batch plans") {
    SUBCASE("10 samples at batch 4 split 4,4,2") {
        auto plan = epoch_batches(10, 4, false, Rng(1));
        REQUIRE(plan.size() == 3);
        CHECK(plan[0].size() == 4);
        CHECK(plan[1].size() == 4);
        CHECK(plan[2].size() == 2);
    }
    SUBCASE("shuffle off preserves manifest order") {
        auto plan = epoch_batches(5, 2, false, Rng(1));
        CHECK(plan[0] == std::vector<std::size_t>{0, 1});
        CHECK(plan[2] == std::vector<std::size_t>{4});
    }
    SUBCASE("epoch seeds give different but reproducible permutations") {
        Rng root(42);
        auto e0a = epoch_batches(16, 16, true, root.stream("shuffle", 0));
        auto e0b = epoch_batches(16, 16, true, root.stream("shuffle", 0));
        auto e1 = epoch_batches(16, 16, true, root.stream("shuffle", 1));
        CHECK(e0a == e0b);
        CHECK(e0a != e1);
    }
}

TEST_CASE("synthetic generation") {
    SyntheticTaskCfg cfg;
    cfg.count = 8;
    cfg.size = 64;
    cfg.seed = 7;
    cfg.noise_sigma = 25.0;
    cfg.val_count = 2;

    SUBCASE("reproducible byte-for-byte") {
        TempDir a("segpipe_gen_a"), b("segpipe_gen_b");
        generate_synthetic(cfg, a.path);
        generate_synthetic(cfg, b.path);
        for (int n = 0; n < cfg.count; ++n) {
            char name[32];
            std::snprintf(name, sizeof(name), "%03d.sgt1", n);
            for (const char* sub : {"images", "masks"}) {
                std::ifstream fa(a.path / sub / name, std::ios::binary);
                std::ifstream fb(b.path / sub / name, std::ios::binary);
                std::string sa((std::istreambuf_iterator<char>(fa)), {});
                std::string sb((std::istreambuf_iterator<char>(fb)), {});
                CHECK(sa == sb);
                CHECK(!sa.empty());
            }
        }
    }
    SUBCASE("disk coverage stays within 1..40 percent") {
        TempDir t("segpipe_gen_frac");
        auto stats = generate_synthetic(cfg, t.path);
        CHECK(stats.fg_frac_min >= 0.01);
        CHECK(stats.fg_frac_max <= 0.40);
        CHECK(stats.img_min >= cfg.clip_lo);
        CHECK(stats.img_max <= cfg.clip_hi);
    }
    SUBCASE("degenerate noise and texture give exactly two aligned levels") {
        TempDir t("segpipe_gen_flat");
        SyntheticTaskCfg flat = cfg;
        flat.noise_sigma = 0.0;
        flat.texture = false;
        flat.antialias = false;
        flat.count = 2;
        flat.val_count = 0;
        generate_synthetic(flat, t.path);
        auto ds = Dataset<float>::load(t.path / "manifest.json");
        for (std::size_t i = 0; i < ds.size(); ++i) {
            auto s = ds.get(i);
            std::set<float> levels;
            for (std::int64_t k = 0; k < s.image.numel(); ++k) levels.insert(s.image[k]);
            CHECK(levels.size() == 2);
            // pixel alignment: every foreground pixel carries the brighter level
            const float hi = *levels.rbegin();
            for (std::int64_t k = 0; k < s.mask.numel(); ++k)
                if (static_cast<int>(s.mask[k]) == 1) CHECK(s.image[k] == hi);
        }
    }
    SUBCASE("split manifests partition the records 6/2") {
        TempDir t("segpipe_gen_split");
        generate_synthetic(cfg, t.path);
        auto train = Dataset<float>::load(t.path / "manifest_train.json");
        auto val = Dataset<float>::load(t.path / "manifest_val.json");
        CHECK(train.size() == 6);
        CHECK(val.size() == 2);
        CHECK(train.split() == "train");
    }
    SUBCASE("membranes task emits only labels 0 and 1") {
        TempDir t("segpipe_gen_mem");
        SyntheticTaskCfg mem = cfg;
        mem.task = SyntheticTaskCfg::Task::membranes;
        mem.count = 2;
        mem.val_count = 0;
        generate_synthetic(mem, t.path);
        auto ds = Dataset<float>::load(t.path / "manifest.json");
        auto s = ds.get(0);
        bool has0 = false, has1 = false;
        for (std::int64_t k = 0; k < s.mask.numel(); ++k) {
            const int label = static_cast<int>(s.mask[k]);
            CHECK((label == 0 || label == 1));
            has0 |= label == 0;
            has1 |= label == 1;
        }
        CHECK(has0);
        CHECK(has1);
    }
}

TEST_CASE("volume grouping") {
    auto slice = [](float v) { return Tensor<float>::full({1, 4, 4}, v); };

    SUBCASE("three slices stack in index order") {
        std::vector<Tensor<float>> s = {slice(2), slice(0), slice(1)};
        std::vector<SliceRef> refs = {{"vol", 2, "a"}, {"vol", 0, "b"}, {"vol", 1, "c"}};
        auto vols = group_slices_to_volume(s, refs);
        REQUIRE(vols.count("vol") == 1);
        const auto& v = vols.at("vol");
        CHECK(v.shape() == Shape{3, 4, 4});
        CHECK(v[0] == 0.0f);
        CHECK(v[16] == 1.0f);
        CHECK(v[32] == 2.0f);
    }
    SUBCASE("single slice volume has depth 1") {
        auto vols = group_slices_to_volume<float>({slice(5)}, {{"", -1, "solo"}});
        CHECK(vols.begin()->second.shape() == Shape{1, 4, 4});
    }
    SUBCASE("interleaved volumes regroup correctly") {
        std::vector<Tensor<float>> s = {slice(0), slice(10), slice(1), slice(11)};
        std::vector<SliceRef> refs = {{"a", 0, ""}, {"b", 0, ""}, {"a", 1, ""}, {"b", 1, ""}};
        auto vols = group_slices_to_volume(s, refs);
        CHECK(vols.at("a")[0] == 0.0f);
        CHECK(vols.at("a")[16] == 1.0f);
        CHECK(vols.at("b")[0] == 10.0f);
        CHECK(vols.at("b")[16] == 11.0f);
    }
    SUBCASE("missing slice index rejected") {
        std::vector<Tensor<float>> s = {slice(0), slice(2)};
        std::vector<SliceRef> refs = {{"v", 0, ""}, {"v", 2, ""}};
        CHECK_THROWS_AS(group_slices_to_volume(s, refs), ConfigError);
    }
    SUBCASE("duplicate slice index rejected") {
        std::vector<Tensor<float>> s = {slice(0), slice(1)};
        std::vector<SliceRef> refs = {{"v", 1, ""}, {"v", 1, ""}};
        CHECK_THROWS_AS(group_slices_to_volume(s, refs), ConfigError);
    }
}
