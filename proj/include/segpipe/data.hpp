#ifndef SEGPIPE_DATA_HPP
#define SEGPIPE_DATA_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "segpipe/augment.hpp"
#include "segpipe/loss.hpp"
#include "segpipe/tensor.hpp"

namespace segpipe {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
    }
}

struct DatasetRecord {
    std::string id;
    std::string image_path;          // absolute, resolved against the manifest
    std::string mask_path;           // empty when the record has no mask
    std::string volume_id;           // empty when the record is a free slice
    int slice_index = -1;
};

template <class T>
struct Sample {
    Tensor<T> image;  // [1,H,W], padded to multiples of 32
    Tensor<T> mask;   // [1,H,W] labels, void-padded; empty when absent
    int orig_h = 0, orig_w = 0;
    std::string id;
    std::string volume_id;
    int slice_index = -1;
    bool has_mask() const { return !mask.empty(); }
};

inline int next_multiple_32(int n) { return (n + 31) / 32 * 32; }

/// Pad [1,H,W] to the next multiples of 32: edge replication for images,
/// void labels for masks.
template <class T>
Tensor<T> pad_to_32(const Tensor<T>& t, bool is_mask) {
    const int H = t.extent(1), W = t.extent(2);
    const int ph = next_multiple_32(H), pw = next_multiple_32(W);
    if (ph == H && pw == W) return t;
    Tensor<T> out({1, ph, pw});
    T* o = out.mutable_data();
    const T* p = t.data();
    for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
            if (is_mask && (y >= H || x >= W)) {
                o[static_cast<std::int64_t>(y) * pw + x] = static_cast<T>(kVoidLabel);
            } else {
                const int sy = std::min(y, H - 1);
                const int sx = std::min(x, W - 1);
                o[static_cast<std::int64_t>(y) * pw + x] = p[static_cast<std::int64_t>(sy) * W + sx];
            }
        }
    return out;
}

/// Crop a padded [1,H,W] (or [B,1,H,W]) map back to the recorded extents.
template <class T>
Tensor<T> crop_back(const Tensor<T>& t, int orig_h, int orig_w) {
    if (t.ndim() == 4) return crop_back(t.reshaped({t.extent(1), t.extent(2), t.extent(3)}), orig_h, orig_w);
    const int H = t.extent(1), W = t.extent(2);
    if (H == orig_h && W == orig_w) return t;
    if (orig_h > H || orig_w > W) throw ShapeError("crop_back: original extents exceed tensor");
    Tensor<T> out({1, orig_h, orig_w});
    T* o = out.mutable_data();
    for (int y = 0; y < orig_h; ++y)
        for (int x = 0; x < orig_w; ++x)
            o[static_cast<std::int64_t>(y) * orig_w + x] = t[static_cast<std::int64_t>(y) * W + x];
    return out;
}

/// Manifest-backed dataset. Loading the manifest validates the schema and
/// file existence; tensors are read lazily per record.
template <class T>
class Dataset {
public:
    static Dataset load(const fs::path& manifest_path) {
        std::ifstream is(manifest_path);
        if (!is) throw ConfigError("cannot open manifest: " + manifest_path.string());
        json j;
        try {
            is >> j;
        } catch (const json::exception& e) {
            throw ConfigError("manifest is not valid JSON: " + std::string(e.what()));
        }
        reject_unknown_keys(j, {"records", "class_map", "void_label", "split", "stats"},
                            manifest_path.string());
        Dataset d;
        d.dir_ = manifest_path.parent_path();
        d.void_label_ = j.value("void_label", kVoidLabel);
        d.split_ = j.value("split", std::string("all"));
        if (j.contains("class_map"))
            for (auto it = j["class_map"].begin(); it != j["class_map"].end(); ++it)
                d.class_map_[it.key()] = it.value().get<int>();
        else
            d.class_map_ = {{"background", 0}, {"foreground", 1}};
        if (j.contains("stats")) d.stats_ = j["stats"];
        if (!j.contains("records") || !j["records"].is_array())
            throw ConfigError("manifest must contain a records array");
        int idx = 0;
        for (const auto& r : j["records"]) {
            reject_unknown_keys(r, {"image", "mask", "volume_id", "slice_index"},
                                "record " + std::to_string(idx));
            DatasetRecord rec;
            if (!r.contains("image")) throw ConfigError("record missing image path");
            rec.image_path = (d.dir_ / r["image"].get<std::string>()).string();
            rec.id = fs::path(r["image"].get<std::string>()).stem().string();
            if (r.contains("mask") && !r["mask"].is_null())
                rec.mask_path = (d.dir_ / r["mask"].get<std::string>()).string();
            if (r.contains("volume_id") && !r["volume_id"].is_null())
                rec.volume_id = r["volume_id"].get<std::string>();
            if (r.contains("slice_index") && !r["slice_index"].is_null())
                rec.slice_index = r["slice_index"].get<int>();
            if (!fs::exists(rec.image_path))
                throw ConfigError("missing image file: " + rec.image_path);
            if (!rec.mask_path.empty() && !fs::exists(rec.mask_path))
                throw ConfigError("missing mask file: " + rec.mask_path);
            d.records_.push_back(std::move(rec));
            ++idx;
        }
        return d;
    }

    std::size_t size() const { return records_.size(); }
    const DatasetRecord& record(std::size_t i) const { return records_[i]; }
    const std::map<std::string, int>& class_map() const { return class_map_; }
    int void_label() const { return void_label_; }
    const std::string& split() const { return split_; }
    const json& stats() const { return stats_; }

    Sample<T> get(std::size_t i) const {
        const DatasetRecord& rec = records_.at(i);
        Sample<T> s;
        s.id = rec.id;
        s.volume_id = rec.volume_id;
        s.slice_index = rec.slice_index;
        Tensor<T> img = read_sgt1<T>(rec.image_path);
        if (img.ndim() == 2) img = img.reshaped({1, img.extent(0), img.extent(1)});
        if (img.ndim() != 3 || img.extent(0) != 1)
            throw ConfigError("image must be [1,H,W]: " + rec.image_path);
        s.orig_h = img.extent(1);
        s.orig_w = img.extent(2);
        s.image = pad_to_32(img, false);
        if (!rec.mask_path.empty()) {
            Tensor<T> m = read_sgt1<T>(rec.mask_path);
            if (m.ndim() == 2) m = m.reshaped({1, m.extent(0), m.extent(1)});
            if (m.extent(1) != s.orig_h || m.extent(2) != s.orig_w)
                throw ConfigError("image/mask extent mismatch for record " + rec.id);
            std::set<int> allowed;
            for (const auto& [k, v] : class_map_) allowed.insert(v);
            allowed.insert(void_label_);
            for (std::int64_t k = 0; k < m.numel(); ++k)
                if (!allowed.count(static_cast<int>(m[k])))
                    throw ConfigError("unknown label " + std::to_string(static_cast<int>(m[k])) +
                                      " in mask " + rec.mask_path);
            s.mask = pad_to_32(m, true);
        }
        return s;
    }

    std::vector<Sample<T>> load_all() const {
        std::vector<Sample<T>> v;
        v.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) v.push_back(get(i));
        return v;
    }

private:
    fs::path dir_;
    std::vector<DatasetRecord> records_;
    std::map<std::string, int> class_map_;
    int void_label_ = kVoidLabel;
    std::string split_;
    json stats_;
};

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

template <class T>
struct Batch {
    Tensor<T> images;  // [B,1,H,W]
    Tensor<T> masks;   // [B,1,H,W]
    std::vector<std::size_t> indices;
};

/// Per-epoch shuffled batch plan; the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                           bool shuffle, Rng rng) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle)
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

/// Stack (optionally augmented) samples into one batch. All samples in a
/// batch must share spatial extents after augmentation.
template <class T>
Batch<T> assemble_batch(const std::vector<Sample<T>>& samples,
                        const std::vector<std::size_t>& indices, const AugmentConfig* aug,
                        Rng* rng_root, std::uint64_t epoch) {
    if (indices.empty()) throw Error("empty batch");
    std::vector<Tensor<T>> imgs, masks;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const Sample<T>& s = samples[indices[k]];
        if (!s.has_mask()) throw ConfigError("record " + s.id + " has no mask; cannot train on it");
        if (aug) {
            Rng r = rng_root->stream("augment." + std::to_string(epoch), indices[k]);
            auto [ai, am] = augment_apply(s.image, s.mask, *aug, r);
            imgs.push_back(std::move(ai));
            masks.push_back(std::move(am));
        } else {
            imgs.push_back(s.image);
            masks.push_back(s.mask);
        }
    }
    const int H = imgs[0].extent(1), W = imgs[0].extent(2);
    Batch<T> b;
    b.indices = indices;
    b.images = Tensor<T>({static_cast<int>(imgs.size()), 1, H, W});
    b.masks = Tensor<T>({static_cast<int>(imgs.size()), 1, H, W});
    T* ip = b.images.mutable_data();
    T* mp = b.masks.mutable_data();
    for (std::size_t k = 0; k < imgs.size(); ++k) {
        if (imgs[k].extent(1) != H || imgs[k].extent(2) != W)
            throw ShapeError("batch members have differing extents; configure a crop size");
        std::memcpy(ip + static_cast<std::int64_t>(k) * H * W, imgs[k].data(),
                    sizeof(T) * static_cast<std::size_t>(H) * W);
        std::memcpy(mp + static_cast<std::int64_t>(k) * H * W, masks[k].data(),
                    sizeof(T) * static_cast<std::size_t>(H) * W);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticTaskCfg {
    enum class Task { disks, membranes };
    Task task = Task::disks;
    int size = 64;
    int count = 12;
    int val_count = 0;  // when > 0, also writes manifest_train/manifest_val
    std::uint64_t seed = 1;
    double noise_sigma = 0.0;
    bool texture = true;
    bool antialias = true;
    // raw intensity windows; wide CT-like dynamic range by default
    double bg_lo = -3000.0, bg_hi = -2000.0;
    double fg_lo = 800.0, fg_hi = 1500.0;
    double clip_lo = -3000.0, clip_hi = 1500.0;
    int min_disks = 1, max_disks = 3;
    double min_radius_frac = 0.10, max_radius_frac = 0.22;
    int cells = 6;                    // membranes task
    double membrane_thickness = 1.5;  // pixels
};

struct SyntheticStats {
    double img_min = 0, img_max = 0;
    std::int64_t fg_pixels = 0, bg_pixels = 0;
    double fg_frac_min = 1.0, fg_frac_max = 0.0;
};

/// Write a synthetic dataset (SGT1 images + masks + manifests) and return
/// the generator's own intensity/coverage records, which downstream checks
/// use as the ground-truth oracle. The manifest embeds the same stats.
inline SyntheticStats generate_synthetic(const SyntheticTaskCfg& cfg, const fs::path& out_dir) {
    if (cfg.count < 1 || cfg.size < 8) throw ConfigError("synthetic config needs count >= 1, size >= 8");
    if (cfg.val_count >= cfg.count) throw ConfigError("val_count must be below count");
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");

    Rng root(cfg.seed);
    SyntheticStats stats;
    stats.img_min = std::numeric_limits<double>::infinity();
    stats.img_max = -std::numeric_limits<double>::infinity();
    const int S = cfg.size;

    json records = json::array();
    for (int n = 0; n < cfg.count; ++n) {
        Rng rng = root.stream("sample", static_cast<std::uint64_t>(n));
        std::vector<double> img(static_cast<std::size_t>(S) * S);
        std::vector<float> mask(static_cast<std::size_t>(S) * S, 0.0f);

        const double bg = rng.uniform(cfg.bg_lo, cfg.bg_hi);
        const double fg = rng.uniform(cfg.fg_lo, cfg.fg_hi);
        const double tex_amp = cfg.texture ? 0.10 * (cfg.bg_hi - cfg.bg_lo) : 0.0;
        const double tfy = rng.uniform(1.0, 3.0), tfx = rng.uniform(1.0, 3.0);
        const double tph = rng.uniform(0.0, 6.28);

        if (cfg.task == SyntheticTaskCfg::Task::disks) {
            // rejection-sample disk layouts until coverage lands in [1%, 40%]
            struct Disk { double cy, cx, r; };
            std::vector<Disk> disks;
            for (int attempt = 0; attempt < 50; ++attempt) {
                disks.clear();
                const int k = cfg.min_disks +
                              static_cast<int>(rng.below(static_cast<std::uint64_t>(
                                  cfg.max_disks - cfg.min_disks + 1)));
                for (int d = 0; d < k; ++d) {
                    const double r = rng.uniform(cfg.min_radius_frac, cfg.max_radius_frac) * S;
                    disks.push_back({rng.uniform(r, S - 1 - r), rng.uniform(r, S - 1 - r), r});
                }
                std::int64_t covered = 0;
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x)
                        for (const Disk& d : disks) {
                            const double dist = std::hypot(y - d.cy, x - d.cx);
                            if (dist <= d.r) { ++covered; break; }
                        }
                const double frac = static_cast<double>(covered) / (S * S);
                if (frac >= 0.01 && frac <= 0.40) break;
            }
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    double cov = 0.0;
                    for (const Disk& d : disks) {
                        const double dist = std::hypot(y - d.cy, x - d.cx);
                        const double c = cfg.antialias
                                             ? std::clamp(d.r - dist + 0.5, 0.0, 1.0)
                                             : (dist <= d.r ? 1.0 : 0.0);
                        cov = std::max(cov, c);
                    }
                    double v = bg + (fg - bg) * cov;
                    if (cfg.texture)
                        v += tex_amp * std::sin(tfy * y * 6.28 / S + tph) *
                             std::cos(tfx * x * 6.28 / S);
                    if (cfg.noise_sigma > 0) v += rng.normal(0.0, cfg.noise_sigma);
                    img[static_cast<std::size_t>(y) * S + x] = std::clamp(v, cfg.clip_lo, cfg.clip_hi);
                    mask[static_cast<std::size_t>(y) * S + x] = cov >= 0.5 ? 1.0f : 0.0f;
                }
        } else {
            // Voronoi cells: bright interiors (class 1) separated by dark
            // membranes (class 0)
            std::vector<std::pair<double, double>> seeds;
            for (int k = 0; k < cfg.cells; ++k)
                seeds.emplace_back(rng.uniform(0, S - 1), rng.uniform(0, S - 1));
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    double d1 = 1e30, d2 = 1e30;
                    for (const auto& [sy, sx] : seeds) {
                        const double d = std::hypot(y - sy, x - sx);
                        if (d < d1) { d2 = d1; d1 = d; }
                        else if (d < d2) d2 = d;
                    }
                    const bool membrane = (d2 - d1) < cfg.membrane_thickness;
                    double v = membrane ? bg : fg;
                    if (cfg.texture)
                        v += tex_amp * std::sin(tfy * y * 6.28 / S + tph) *
                             std::cos(tfx * x * 6.28 / S);
                    if (cfg.noise_sigma > 0) v += rng.normal(0.0, cfg.noise_sigma);
                    img[static_cast<std::size_t>(y) * S + x] = std::clamp(v, cfg.clip_lo, cfg.clip_hi);
                    mask[static_cast<std::size_t>(y) * S + x] = membrane ? 0.0f : 1.0f;
                }
        }

        std::int64_t fg_px = 0;
        Tensor<float> img_t({1, S, S});
        Tensor<float> mask_t({1, S, S});
        float* ip = img_t.mutable_data();
        float* mp = mask_t.mutable_data();
        for (std::size_t i = 0; i < img.size(); ++i) {
            ip[i] = static_cast<float>(img[i]);
            mp[i] = mask[i];
            stats.img_min = std::min(stats.img_min, static_cast<double>(ip[i]));
            stats.img_max = std::max(stats.img_max, static_cast<double>(ip[i]));
            fg_px += mask[i] != 0.0f;
        }
        stats.fg_pixels += fg_px;
        stats.bg_pixels += static_cast<std::int64_t>(img.size()) - fg_px;
        const double frac = static_cast<double>(fg_px) / static_cast<double>(img.size());
        stats.fg_frac_min = std::min(stats.fg_frac_min, frac);
        stats.fg_frac_max = std::max(stats.fg_frac_max, frac);

        char name[32];
        std::snprintf(name, sizeof(name), "%03d.sgt1", n);
        write_sgt1(out_dir / "images" / name, img_t);
        write_sgt1(out_dir / "masks" / name, mask_t);
        records.push_back({{"image", std::string("images/") + name},
                           {"mask", std::string("masks/") + name},
                           {"volume_id", nullptr},
                           {"slice_index", nullptr}});
    }

    json stats_j = {{"img_min", stats.img_min},
                    {"img_max", stats.img_max},
                    {"fg_pixels", stats.fg_pixels},
                    {"bg_pixels", stats.bg_pixels},
                    {"fg_frac_min", stats.fg_frac_min},
                    {"fg_frac_max", stats.fg_frac_max}};
    auto write_manifest = [&](const fs::path& p, const json& recs, const char* split) {
        json m = {{"void_label", kVoidLabel},
                  {"class_map", {{"background", 0}, {"foreground", 1}}},
                  {"split", split},
                  {"stats", stats_j},
                  {"records", recs}};
        std::ofstream os(p);
        os << m.dump(2) << "\n";
    };
    write_manifest(out_dir / "manifest.json", records, "all");
    if (cfg.val_count > 0) {
        json train = json::array(), val = json::array();
        for (int n = 0; n < cfg.count; ++n)
            (n < cfg.count - cfg.val_count ? train : val).push_back(records[static_cast<std::size_t>(n)]);
        write_manifest(out_dir / "manifest_train.json", train, "train");
        write_manifest(out_dir / "manifest_val.json", val, "val");
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Volume grouping
// ---------------------------------------------------------------------------

struct SliceRef {
    std::string volume_id;  // empty = standalone slice, keyed by id
    int slice_index = -1;
    std::string id;
};

/// Stack per-slice predictions into per-volume [D,H,W] tensors. Slice
/// indices within a volume must be contiguous.
template <class T>
std::map<std::string, Tensor<T>> group_slices_to_volume(const std::vector<Tensor<T>>& slices,
                                                        const std::vector<SliceRef>& refs) {
    if (slices.size() != refs.size()) throw ShapeError("slices/provenance count mismatch");
    std::map<std::string, std::map<int, const Tensor<T>*>> grouped;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const std::string key = refs[i].volume_id.empty() ? "slice:" + refs[i].id : refs[i].volume_id;
        const int idx = refs[i].volume_id.empty() ? 0 : refs[i].slice_index;
        if (!grouped[key].emplace(idx, &slices[i]).second)
            throw ConfigError("duplicate slice index " + std::to_string(idx) + " in volume " + key);
    }
    std::map<std::string, Tensor<T>> out;
    for (auto& [key, m] : grouped) {
        const int d = static_cast<int>(m.size());
        int expect = m.begin()->first;
        const Tensor<T>& first = *m.begin()->second;
        const int hh = first.extent(first.ndim() - 2);
        const int ww = first.extent(first.ndim() - 1);
        Tensor<T> vol({d, hh, ww});
        T* vp = vol.mutable_data();
        int z = 0;
        for (auto& [idx, t] : m) {
            if (idx != expect)
                throw ConfigError("missing slice index " + std::to_string(expect) + " in volume " + key);
            ++expect;
            if (t->numel() != static_cast<std::int64_t>(hh) * ww)
                throw ShapeError("slice extent mismatch in volume " + key);
            std::memcpy(vp + static_cast<std::int64_t>(z) * hh * ww, t->data(),
                        sizeof(T) * static_cast<std::size_t>(hh) * ww);
            ++z;
        }
        out.emplace(key, std::move(vol));
    }
    return out;
}

} // namespace segpipe

#endif
