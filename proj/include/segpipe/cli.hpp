#ifndef SEGPIPE_CLI_HPP
#define SEGPIPE_CLI_HPP

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <thread>

#include "segpipe/analysis.hpp"
#include "segpipe/gradcheck.hpp"
#include "segpipe/optim.hpp"
#include "segpipe/postprocess.hpp"

namespace segpipe::cli {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCheckFailed = 4;

struct RunConfig {
    std::string task = "synthetic";
    std::uint64_t seed = 1;

    double scale = 1.0;
    bool long_skips = true;
    double dropout = 0.0;

    std::string train_manifest, val_manifest, predict_manifest;
    double val_fraction = 0.2;

    AugmentConfig augment;
    bool augment_enabled = false;

    OptimConfig optim;
    int patience = 50;
    int max_epochs = 500;
    int ensemble = 1;

    int bins = 100;
    bool fit = true;

    SyntheticTaskCfg synth;

    double pp_threshold = 0.5;
    int pp_connectivity = 26;
};

/// Protocol presets; explicit config values override them.
inline void apply_preset(RunConfig& c) {
    if (c.task == "em") {
        c.scale = 1.0;
        c.optim.lr0 = 1e-3;
        c.optim.lr_decay = 1e-3;
        c.optim.batch_size = 8;
        c.optim.weight_decay = 1e-4;
        c.augment_enabled = true;
        c.augment.flip_h = c.augment.flip_v = true;
        c.augment.shear_max = 0.41;
        c.augment.rotation_max = 25.0;
        c.augment.crop_size = 256;
        c.augment.warp = true;
        c.synth.task = SyntheticTaskCfg::Task::membranes;
    } else if (c.task == "liver") {
        c.scale = 1.0;
        c.optim.lr0 = 1e-3;
        c.optim.lr_decay = 1e-3;
        c.optim.batch_size = 20;
        c.optim.weight_decay_fcn = 1e-4;
        c.optim.weight_decay_resnet = 5e-4;
        c.augment_enabled = true;
        c.augment.crop_size = 128;
        c.augment.crop_contains_foreground = true;
    } else if (c.task == "prostate") {
        c.scale = 1.0;
        c.optim.lr0 = 4e-4;
        c.optim.lr_decay = 1e-3;
        c.optim.batch_size = 24;
        c.optim.weight_decay = 1e-5;
        c.augment_enabled = true;
        c.augment.shear_max = 0.1;
        c.augment.rotation_max = 10.0;
        c.augment.crop_size = 256;
        c.augment.warp = true;
    } else if (c.task == "synthetic") {
        // desk scale: every layer kind exercised, CPU-trainable in minutes
        c.scale = 0.125;
        c.optim.lr0 = 2e-3;
        c.optim.lr_decay = 1e-3;
        c.optim.batch_size = 4;
        c.optim.weight_decay = 1e-4;
        c.max_epochs = 200;
        c.augment_enabled = false;
        c.synth.size = 64;
        c.synth.count = 12;
        c.synth.val_count = 4;
        c.synth.noise_sigma = 40.0;
    } else {
        throw ConfigError("unknown task preset: " + c.task);
    }
}

inline RunConfig parse_config_json(const json& j, const std::string& where) {
    reject_unknown_keys(j,
                        {"task", "seed", "arch", "data", "augment", "optim", "train", "analysis",
                         "synthetic", "postprocess"},
                        where);
    RunConfig c;
    if (j.contains("task")) c.task = j["task"].get<std::string>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    apply_preset(c);
    c.synth.seed = c.seed;

    if (j.contains("arch")) {
        const json& a = j["arch"];
        reject_unknown_keys(a, {"scale", "long_skips", "dropout"}, where + ".arch");
        if (a.contains("scale")) c.scale = a["scale"].get<double>();
        if (a.contains("long_skips")) c.long_skips = a["long_skips"].get<bool>();
        if (a.contains("dropout")) c.dropout = a["dropout"].get<double>();
    }
    if (j.contains("data")) {
        const json& d = j["data"];
        reject_unknown_keys(d, {"train_manifest", "val_manifest", "predict_manifest", "val_fraction"},
                            where + ".data");
        if (d.contains("train_manifest")) c.train_manifest = d["train_manifest"].get<std::string>();
        if (d.contains("val_manifest")) c.val_manifest = d["val_manifest"].get<std::string>();
        if (d.contains("predict_manifest"))
            c.predict_manifest = d["predict_manifest"].get<std::string>();
        if (d.contains("val_fraction")) c.val_fraction = d["val_fraction"].get<double>();
    }
    if (j.contains("augment")) {
        const json& a = j["augment"];
        reject_unknown_keys(a,
                            {"enabled", "flip_h", "flip_v", "shear_max", "rotation_max", "crop_size",
                             "warp", "warp_grid_spacing", "warp_sigma", "crop_contains_foreground",
                             "apply_prob"},
                            where + ".augment");
        if (a.contains("enabled")) c.augment_enabled = a["enabled"].get<bool>();
        if (a.contains("flip_h")) c.augment.flip_h = a["flip_h"].get<bool>();
        if (a.contains("flip_v")) c.augment.flip_v = a["flip_v"].get<bool>();
        if (a.contains("shear_max")) c.augment.shear_max = a["shear_max"].get<double>();
        if (a.contains("rotation_max")) c.augment.rotation_max = a["rotation_max"].get<double>();
        if (a.contains("crop_size")) c.augment.crop_size = a["crop_size"].get<int>();
        if (a.contains("warp")) c.augment.warp = a["warp"].get<bool>();
        if (a.contains("warp_grid_spacing"))
            c.augment.warp_grid_spacing = a["warp_grid_spacing"].get<int>();
        if (a.contains("warp_sigma")) c.augment.warp_sigma = a["warp_sigma"].get<double>();
        if (a.contains("crop_contains_foreground"))
            c.augment.crop_contains_foreground = a["crop_contains_foreground"].get<bool>();
        if (a.contains("apply_prob")) c.augment.apply_prob = a["apply_prob"].get<double>();
        if (c.augment.rotation_max < 0 || c.augment.rotation_max >= 180)
            throw ConfigError("rotation_max must lie in [0, 180)");
        if (c.augment.shear_max < 0) throw ConfigError("shear_max must be >= 0");
    }
    if (j.contains("optim")) {
        const json& o = j["optim"];
        reject_unknown_keys(o,
                            {"lr0", "lr_decay", "rho", "epsilon", "weight_decay",
                             "weight_decay_fcn", "weight_decay_resnet", "batch_size"},
                            where + ".optim");
        if (o.contains("lr0")) c.optim.lr0 = o["lr0"].get<double>();
        if (o.contains("lr_decay")) c.optim.lr_decay = o["lr_decay"].get<double>();
        if (o.contains("rho")) c.optim.rho = o["rho"].get<double>();
        if (o.contains("epsilon")) c.optim.epsilon = o["epsilon"].get<double>();
        if (o.contains("weight_decay")) c.optim.weight_decay = o["weight_decay"].get<double>();
        if (o.contains("weight_decay_fcn"))
            c.optim.weight_decay_fcn = o["weight_decay_fcn"].get<double>();
        if (o.contains("weight_decay_resnet"))
            c.optim.weight_decay_resnet = o["weight_decay_resnet"].get<double>();
        if (o.contains("batch_size")) c.optim.batch_size = o["batch_size"].get<int>();
        c.optim.validate();
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        reject_unknown_keys(t, {"patience", "max_epochs", "ensemble"}, where + ".train");
        if (t.contains("patience")) c.patience = t["patience"].get<int>();
        if (t.contains("max_epochs")) c.max_epochs = t["max_epochs"].get<int>();
        if (t.contains("ensemble")) c.ensemble = t["ensemble"].get<int>();
        if (c.patience < 0 || c.max_epochs < 1 || c.ensemble < 1)
            throw ConfigError("train section values out of range");
    }
    if (j.contains("analysis")) {
        const json& a = j["analysis"];
        reject_unknown_keys(a, {"bins", "fit"}, where + ".analysis");
        if (a.contains("bins")) c.bins = a["bins"].get<int>();
        if (a.contains("fit")) c.fit = a["fit"].get<bool>();
        if (c.bins < 1) throw ConfigError("analysis.bins must be >= 1");
    }
    if (j.contains("synthetic")) {
        const json& s = j["synthetic"];
        reject_unknown_keys(s,
                            {"task", "size", "count", "val_count", "noise_sigma", "texture",
                             "antialias", "intensity", "disks", "membranes"},
                            where + ".synthetic");
        if (s.contains("task")) {
            const std::string t = s["task"].get<std::string>();
            if (t == "disks")
                c.synth.task = SyntheticTaskCfg::Task::disks;
            else if (t == "membranes")
                c.synth.task = SyntheticTaskCfg::Task::membranes;
            else
                throw ConfigError("synthetic.task must be disks or membranes");
        }
        if (s.contains("size")) c.synth.size = s["size"].get<int>();
        if (s.contains("count")) c.synth.count = s["count"].get<int>();
        if (s.contains("val_count")) c.synth.val_count = s["val_count"].get<int>();
        if (s.contains("noise_sigma")) c.synth.noise_sigma = s["noise_sigma"].get<double>();
        if (s.contains("texture")) c.synth.texture = s["texture"].get<bool>();
        if (s.contains("antialias")) c.synth.antialias = s["antialias"].get<bool>();
        if (s.contains("intensity")) {
            const json& iv = s["intensity"];
            reject_unknown_keys(iv, {"bg", "fg", "clip"}, where + ".synthetic.intensity");
            auto pair = [&](const char* k, double& lo, double& hi) {
                if (!iv.contains(k)) return;
                lo = iv[k].at(0).get<double>();
                hi = iv[k].at(1).get<double>();
            };
            pair("bg", c.synth.bg_lo, c.synth.bg_hi);
            pair("fg", c.synth.fg_lo, c.synth.fg_hi);
            pair("clip", c.synth.clip_lo, c.synth.clip_hi);
        }
        if (s.contains("disks")) {
            const json& dv = s["disks"];
            reject_unknown_keys(dv, {"min_count", "max_count", "min_radius_frac", "max_radius_frac"},
                                where + ".synthetic.disks");
            if (dv.contains("min_count")) c.synth.min_disks = dv["min_count"].get<int>();
            if (dv.contains("max_count")) c.synth.max_disks = dv["max_count"].get<int>();
            if (dv.contains("min_radius_frac"))
                c.synth.min_radius_frac = dv["min_radius_frac"].get<double>();
            if (dv.contains("max_radius_frac"))
                c.synth.max_radius_frac = dv["max_radius_frac"].get<double>();
        }
        if (s.contains("membranes")) {
            const json& mv = s["membranes"];
            reject_unknown_keys(mv, {"cells", "thickness"}, where + ".synthetic.membranes");
            if (mv.contains("cells")) c.synth.cells = mv["cells"].get<int>();
            if (mv.contains("thickness")) c.synth.membrane_thickness = mv["thickness"].get<double>();
        }
        c.synth.seed = c.seed;
    }
    if (j.contains("postprocess")) {
        const json& p = j["postprocess"];
        reject_unknown_keys(p, {"threshold", "connectivity"}, where + ".postprocess");
        if (p.contains("threshold")) c.pp_threshold = p["threshold"].get<double>();
        if (p.contains("connectivity")) c.pp_connectivity = p["connectivity"].get<int>();
    }
    return c;
}

inline RunConfig parse_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_config_json(j, path.string());
}

inline int worker_threads() {
    unsigned n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("SEGPIPE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1 && static_cast<unsigned>(v) < n) n = static_cast<unsigned>(v);
    }
    return static_cast<int>(n);
}

/// Static round-robin fan-out; results land in caller-indexed slots so the
/// output never depends on the thread count.
template <class F>
void parallel_for(std::size_t n, F f) {
    const int threads = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t]() {
            for (std::size_t i = static_cast<std::size_t>(t); i < n;
                 i += static_cast<std::size_t>(threads))
                f(i);
        });
    for (auto& th : pool) th.join();
}

inline void write_outputs_manifest(const fs::path& out_dir, const std::vector<std::string>& files) {
    json j = {{"files", files}};
    const fs::path tmp = out_dir / "outputs.json.tmp";
    std::ofstream(tmp) << j.dump(2) << "\n";
    fs::rename(tmp, out_dir / "outputs.json");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_gen_synthetic(const RunConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    auto stats = generate_synthetic(cfg.synth, out_dir);
    std::vector<std::string> files = {"manifest.json"};
    if (cfg.synth.val_count > 0) {
        files.push_back("manifest_train.json");
        files.push_back("manifest_val.json");
    }
    for (int n = 0; n < cfg.synth.count; ++n) {
        char name[32];
        std::snprintf(name, sizeof(name), "%03d.sgt1", n);
        files.push_back(std::string("images/") + name);
        files.push_back(std::string("masks/") + name);
    }
    write_outputs_manifest(out_dir, files);
    std::cout << "generated " << cfg.synth.count << " samples, intensity range [" << stats.img_min
              << ", " << stats.img_max << "], foreground fraction [" << stats.fg_frac_min << ", "
              << stats.fg_frac_max << "]\n";
    return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, const fs::path& out_dir) {
    if (cfg.train_manifest.empty()) throw ConfigError("train needs data.train_manifest");
    fs::create_directories(out_dir);
    auto pool = Dataset<float>::load(cfg.train_manifest).load_all();
    std::vector<Sample<float>> fixed_val;
    if (!cfg.val_manifest.empty()) fixed_val = Dataset<float>::load(cfg.val_manifest).load_all();

    TrainConfig tc;
    tc.optim = cfg.optim;
    tc.augment = cfg.augment;
    tc.augment_enabled = cfg.augment_enabled;
    tc.patience = cfg.patience;
    tc.max_epochs = cfg.max_epochs;

    auto res = train_ensemble<float>(cfg.ensemble, cfg.seed, cfg.scale, cfg.long_skips, cfg.dropout,
                                     pool, fixed_val, cfg.val_fraction, tc, out_dir);
    std::vector<std::string> files;
    for (int m = 0; m < cfg.ensemble; ++m) {
        files.push_back("member_" + std::to_string(m) + "/best.sgc1");
        files.push_back("member_" + std::to_string(m) + "/history.csv");
        const auto& r = res.members[static_cast<std::size_t>(m)];
        std::cout << "member " << m << ": best val dice " << r.best_val_dice << " at epoch "
                  << r.best_epoch << " (" << r.history.size() << " epochs, final train dice "
                  << r.final_train_dice << ")\n";
    }
    write_outputs_manifest(out_dir, files);
    return kExitOk;
}

inline std::vector<fs::path> split_paths(const std::string& csv) {
    std::vector<fs::path> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string part = csv.substr(start, comma == std::string::npos ? std::string::npos
                                                                              : comma - start);
        if (!part.empty()) out.emplace_back(part);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Ensemble-averaged probability maps for every record of a manifest,
/// cropped back to the original extents.
inline std::vector<Tensor<float>> predict_records(const RunConfig& cfg,
                                                  const std::vector<fs::path>& checkpoints,
                                                  const Dataset<float>& ds) {
    if (checkpoints.empty()) throw ConfigError("predict needs at least one checkpoint");
    std::vector<std::unique_ptr<Pipeline<float>>> members;
    for (const auto& ck : checkpoints) {
        auto model = std::make_unique<Pipeline<float>>(
            build_pipeline<float>(cfg.scale, cfg.seed, cfg.long_skips, cfg.dropout));
        load_checkpoint(ck, *model);
        members.push_back(std::move(model));
    }
    std::vector<Tensor<float>> preds(ds.size());
    std::vector<Sample<float>> samples(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) samples[i] = ds.get(i);
    parallel_for(ds.size(), [&](std::size_t i) {
        std::vector<Tensor<float>> member_preds;
        for (auto& m : members) member_preds.push_back(predict_image(*m, samples[i].image));
        Tensor<float> mean = mean_predictions(member_preds);
        preds[i] = crop_back(mean, samples[i].orig_h, samples[i].orig_w);
    });
    return preds;
}

inline int cmd_predict(const RunConfig& cfg, const fs::path& out_dir,
                       const std::vector<fs::path>& checkpoints) {
    const std::string manifest =
        !cfg.predict_manifest.empty() ? cfg.predict_manifest : cfg.val_manifest;
    if (manifest.empty()) throw ConfigError("predict needs data.predict_manifest (or val_manifest)");
    fs::create_directories(out_dir);
    auto ds = Dataset<float>::load(manifest);
    auto preds = predict_records(cfg, checkpoints, ds);
    std::vector<std::string> files;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string name = "pred_" + ds.record(i).id + ".sgt1";
        write_sgt1(out_dir / name, preds[i]);
        files.push_back(name);
    }
    write_outputs_manifest(out_dir, files);
    std::cout << "wrote " << preds.size() << " probability maps\n";
    return kExitOk;
}

inline int cmd_evaluate(const RunConfig& cfg, const fs::path& out_dir,
                        const std::vector<fs::path>& checkpoints, const fs::path& pred_dir) {
    const std::string manifest =
        !cfg.val_manifest.empty() ? cfg.val_manifest : cfg.predict_manifest;
    if (manifest.empty()) throw ConfigError("evaluate needs data.val_manifest");
    fs::create_directories(out_dir);
    auto ds = Dataset<float>::load(manifest);

    std::vector<Tensor<float>> preds;
    if (!pred_dir.empty()) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const fs::path p = pred_dir / ("pred_" + ds.record(i).id + ".sgt1");
            preds.push_back(read_sgt1<float>(p));
        }
    } else {
        preds = predict_records(cfg, checkpoints, ds);
    }

    const fs::path csv = out_dir / "evaluation.csv";
    const fs::path tmp = csv.string() + ".tmp";
    double sum0 = 0, sum1 = 0;
    {
        std::ofstream os(tmp);
        os << "record,dice_class0,dice_class1\n";
        for (std::size_t i = 0; i < ds.size(); ++i) {
            auto s = ds.get(i);
            if (!s.has_mask()) throw ConfigError("evaluate: record " + s.id + " has no mask");
            Tensor<float> mask = crop_back(s.mask, s.orig_h, s.orig_w);
            if (!preds[i].same_shape(mask))
                throw ShapeError("prediction/mask extents differ for record " + s.id);
            const double d0 = dice_coefficient(preds[i], mask, 0.5, 0);
            const double d1 = dice_coefficient(preds[i], mask, 0.5, 1);
            sum0 += d0;
            sum1 += d1;
            os << ds.record(i).id << ',' << detail::csv_num(d0) << ',' << detail::csv_num(d1)
               << "\n";
        }
        os << "aggregate," << detail::csv_num(sum0 / static_cast<double>(ds.size())) << ','
           << detail::csv_num(sum1 / static_cast<double>(ds.size())) << "\n";
    }
    fs::rename(tmp, csv);
    write_outputs_manifest(out_dir, {"evaluation.csv"});
    std::cout << "mean dice: class0 " << sum0 / static_cast<double>(ds.size()) << ", class1 "
              << sum1 / static_cast<double>(ds.size()) << "\n";
    return kExitOk;
}

inline int cmd_gradcheck(const std::string& scope, std::uint64_t seed, bool inject_fault) {
    bool all_pass = true;
    auto report = [&](const std::vector<OpCheck>& checks) {
        for (const auto& c : checks) {
            std::printf("%-18s max_rel %.3e  tol %.0e  %s\n", c.op.c_str(), c.max_rel, c.tol,
                        c.pass() ? "PASS" : "FAIL");
            all_pass = all_pass && c.pass();
        }
    };
    if (scope == "ops" || scope == "all") report(gradcheck_ops(seed, inject_fault));
    if (scope == "blocks" || scope == "all") report(gradcheck_blocks(seed));
    if (scope == "pipeline" || scope == "all") {
        auto chk = gradcheck_pipeline(seed);
        std::printf("%-18s max_rel %.3e  tol %.0e  %s  (%d parameter probes)\n", "pipeline",
                    chk.max_rel, 1e-3, chk.pass() ? "PASS" : "FAIL", chk.probes);
        all_pass = all_pass && chk.pass();
    }
    return all_pass ? kExitOk : kExitCheckFailed;
}

inline int cmd_summary(const std::string& arch, double scale, const fs::path& csv_out) {
    std::vector<SummaryRow> rows;
    ConvLayerCount cc{};
    if (arch == "fcn") {
        auto m = build_fcn_preprocessor<float>(scale, 1);
        rows = m.summarize(512);
        cc = m.conv_layer_count();
    } else if (arch == "resnet") {
        auto m = build_fc_resnet<float>(scale, 1);
        rows = m.summarize(512);
        cc = m.conv_layer_count();
    } else if (arch == "pipeline") {
        auto p = build_pipeline<float>(scale, 1);
        rows = p.fcn.summarize(512);
        auto r2 = p.resnet.summarize(512);
        // separate tables joined; drop the second Input row
        rows.insert(rows.end(), r2.begin() + 1, r2.end());
        auto c1 = p.fcn.conv_layer_count();
        auto c2 = p.resnet.conv_layer_count();
        cc = {c1.functional + c2.functional, c1.projections + c2.projections};
    } else {
        throw ConfigError("summary arch must be fcn, resnet, or pipeline");
    }

    std::printf("%-22s %-14s %-12s %7s %6s %12s %12s\n", "Layer", "Type", "Resolution", "Width",
                "Rep", "Params", "Cumulative");
    std::int64_t total = 0;
    for (const auto& r : rows) {
        if (r.name == "Total") {
            total += r.params;
            continue;
        }
        char res[24];
        std::snprintf(res, sizeof(res), "%dx%d", r.res_h, r.res_w);
        std::printf("%-22s %-14s %-12s %7d %6d %12lld %12lld\n", r.name.c_str(),
                    r.block_type.c_str(), r.res_h ? res : "-", r.width, r.repetition,
                    static_cast<long long>(r.params), static_cast<long long>(r.cumulative));
    }
    std::printf("total trainable parameters: %lld\n", static_cast<long long>(total));
    std::printf("convolution layers: %d functional, %d projection\n", cc.functional,
                cc.projections);

    if (!csv_out.empty()) {
        const fs::path tmp = csv_out.string() + ".tmp";
        {
            std::ofstream os(tmp);
            os << "layer,type,res_h,res_w,width,repetition,params,cumulative\n";
            for (const auto& r : rows)
                os << r.name << ',' << r.block_type << ',' << r.res_h << ',' << r.res_w << ','
                   << r.width << ',' << r.repetition << ',' << r.params << ',' << r.cumulative
                   << "\n";
        }
        fs::rename(tmp, csv_out);
    }
    return kExitOk;
}

inline int cmd_postprocess(const RunConfig& cfg, const fs::path& out_dir, const fs::path& pred_dir) {
    const std::string manifest =
        !cfg.predict_manifest.empty() ? cfg.predict_manifest : cfg.val_manifest;
    if (manifest.empty()) throw ConfigError("postprocess needs data.predict_manifest");
    if (pred_dir.empty()) throw ConfigError("postprocess needs --pred-dir");
    fs::create_directories(out_dir);
    auto ds = Dataset<float>::load(manifest);

    std::vector<Tensor<float>> slices;
    std::vector<SliceRef> refs;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& rec = ds.record(i);
        slices.push_back(read_sgt1<float>(pred_dir / ("pred_" + rec.id + ".sgt1")));
        refs.push_back({rec.volume_id, rec.slice_index, rec.id});
    }
    auto volumes = group_slices_to_volume(slices, refs);
    std::vector<std::string> files;
    for (auto& [key, vol] : volumes) {
        auto kept = largest_component(vol, cfg.pp_threshold, cfg.pp_connectivity);
        std::string name = key;
        for (char& ch : name)
            if (ch == '/' || ch == ':') ch = '_';
        name = "post_" + name + ".sgt1";
        write_sgt1(out_dir / name, kept);
        files.push_back(name);
    }
    write_outputs_manifest(out_dir, files);
    std::cout << "post-processed " << volumes.size() << " volumes\n";
    return kExitOk;
}

inline int cmd_analyze(const RunConfig& cfg, const fs::path& out_dir,
                       const std::vector<fs::path>& checkpoints) {
    const std::string manifest =
        !cfg.val_manifest.empty() ? cfg.val_manifest : cfg.train_manifest;
    if (manifest.empty()) throw ConfigError("analyze needs data.val_manifest");
    if (checkpoints.size() != 1) throw ConfigError("analyze needs exactly one checkpoint");
    fs::create_directories(out_dir);

    auto model = build_pipeline<float>(cfg.scale, cfg.seed, cfg.long_skips, cfg.dropout);
    auto meta = load_checkpoint(checkpoints[0], model);
    const bool trained = meta.epoch > 0;
    if (!trained) std::cout << "warning: checkpoint looks untrained (epoch 0)\n";

    auto ds = Dataset<float>::load(manifest);
    auto rep = analyze_normalization(model, ds, cfg.bins, trained);
    write_histogram_csv(rep, out_dir / "histograms.csv");
    write_histogram_summary_csv(rep, out_dir / "histogram_summary.csv", cfg.fit);
    write_outputs_manifest(out_dir, {"histograms.csv", "histogram_summary.csv"});
    for (const auto& h : rep.entries)
        std::printf("%-13s class %d: n=%lld range [%.6g, %.6g] mu %.6g sigma %.6g\n",
                    h.stage.c_str(), h.cls, static_cast<long long>(h.total), h.min, h.max, h.mu,
                    h.sigma);
    return kExitOk;
}

} // namespace segpipe::cli

#endif
