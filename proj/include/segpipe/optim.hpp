#ifndef SEGPIPE_OPTIM_HPP
#define SEGPIPE_OPTIM_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "segpipe/blocks.hpp"
#include "segpipe/data.hpp"
#include "segpipe/detail/sha256.hpp"
#include "segpipe/loss.hpp"

namespace segpipe {

struct OptimConfig {
    double lr0 = 1e-3;
    double lr_decay = 1e-3;       // inverse-time: lr_t = lr0 / (1 + lr_decay * t)
    double rho = 0.9;             // RMS accumulator decay
    double epsilon = 1e-8;
    double weight_decay = 1e-4;   // L2 gradient augmentation, exempt params skipped
    double weight_decay_fcn = -1.0;     // per-submodel override, < 0 inherits
    double weight_decay_resnet = -1.0;
    int batch_size = 8;

    void validate() const {
        if (lr0 < 0 || lr_decay < 0 || epsilon < 0 || weight_decay < 0)
            throw ConfigError("optimizer values must be nonnegative");
        if (rho <= 0.0 || rho >= 1.0) throw ConfigError("rho must lie in (0, 1)");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    }
};

/// RMSprop with inverse-time learning-rate decay and coupled weight decay:
///   v <- rho*v + (1-rho)*g_total^2,  theta <- theta - lr_t * g_total/(sqrt(v)+eps)
/// where g_total = g + wd*theta (wd skipped for decay-exempt parameters) and
/// lr_t = lr0/(1 + lr_decay*t) with t counting completed update steps.
template <class T>
class Rmsprop {
public:
    std::int64_t steps() const { return t_; }

    double effective_lr(const OptimConfig& cfg) const {
        return cfg.lr0 / (1.0 + cfg.lr_decay * static_cast<double>(t_));
    }

    void step(std::vector<ParamStore<T>*> stores, const OptimConfig& cfg,
              const std::vector<double>& store_decay = {}) {
        cfg.validate();
        const double lr = effective_lr(cfg);
        for (std::size_t si = 0; si < stores.size(); ++si) {
            const double wd =
                si < store_decay.size() && store_decay[si] >= 0 ? store_decay[si] : cfg.weight_decay;
            stores[si]->for_each([&](Parameter<T>& p) {
                if (!p.trainable) return;
                auto [it, fresh] = accum_.try_emplace(p.name);
                if (fresh) it->second = Tensor<T>::zeros(p.value.shape());
                Tensor<T>& v = it->second;
                if (!v.same_shape(p.value))
                    throw ShapeError("optimizer accumulator shape mismatch for " + p.name);
                T* vp = v.mutable_data();
                T* th = p.value.mutable_data();
                const T* g = p.grad.data();
                const double decay = p.decay_exempt ? 0.0 : wd;
                for (std::int64_t i = 0; i < p.value.numel(); ++i) {
                    const double gt = static_cast<double>(g[i]) + decay * static_cast<double>(th[i]);
                    const double vn = cfg.rho * static_cast<double>(vp[i]) + (1.0 - cfg.rho) * gt * gt;
                    vp[i] = static_cast<T>(vn);
                    const double upd = lr * gt / (std::sqrt(vn) + cfg.epsilon);
                    th[i] = static_cast<T>(static_cast<double>(th[i]) - upd);
                    if (std::isnan(th[i]))
                        throw NumericError("NaN parameter update in " + p.name);
                }
            });
        }
        ++t_;
    }

    // serialization hooks
    const std::map<std::string, Tensor<T>>& accumulators() const { return accum_; }
    void restore(std::map<std::string, Tensor<T>> accum, std::int64_t t) {
        accum_ = std::move(accum);
        t_ = t;
    }

private:
    std::map<std::string, Tensor<T>> accum_;
    std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "SGC1", 32-byte config hash, u32 record count, then
// records of (u16 name length, name bytes, embedded SGT1 tensor).
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    std::int64_t epoch = 0;
    double val_dice = 0.0;
};

namespace detail {

template <class T>
void put_record(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    if (name.size() > 0xffff) throw Error("record name too long");
    const std::uint16_t n = static_cast<std::uint16_t>(name.size());
    os.put(static_cast<char>(n & 0xff));
    os.put(static_cast<char>(n >> 8));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_sgt1_stream(os, t);
}

} // namespace detail

template <class T>
void save_checkpoint(const fs::path& path, Pipeline<T>& model, const Rmsprop<T>* opt,
                     const CheckpointMeta& meta) {
    const auto hash = detail::sha256(model.config_json());
    std::uint32_t count = 2;  // meta records
    model.for_each_store([&](ParamStore<T>& s) { count += static_cast<std::uint32_t>(s.size()); });
    if (opt) count += static_cast<std::uint32_t>(opt->accumulators().size()) + 1;

    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw ConfigError("cannot write checkpoint: " + path.string());
        os.write("SGC1", 4);
        os.write(reinterpret_cast<const char*>(hash.data()), 32);
        detail::put_u32(os, count);
        model.for_each_store([&](ParamStore<T>& s) {
            s.for_each([&](Parameter<T>& p) { detail::put_record(os, "param/" + p.name, p.value); });
        });
        if (opt) {
            for (const auto& [name, v] : opt->accumulators())
                detail::put_record(os, "opt/v/" + name, v);
            detail::put_record(os, "opt/t",
                               Tensor<T>::scalar(static_cast<T>(opt->steps())));
        }
        detail::put_record(os, "meta/epoch", Tensor<T>::scalar(static_cast<T>(meta.epoch)));
        detail::put_record(os, "meta/val_dice", Tensor<T>::scalar(static_cast<T>(meta.val_dice)));
        if (!os) throw ConfigError("checkpoint write failed: " + path.string());
    }
    fs::rename(tmp, path);
}

/// Load a checkpoint into a freshly built model (the config hash must match)
/// and optionally restore the optimizer state.
template <class T>
CheckpointMeta load_checkpoint(const fs::path& path, Pipeline<T>& model, Rmsprop<T>* opt = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("missing checkpoint: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SGC1", 4) != 0)
        throw ConfigError("not an SGC1 checkpoint: " + path.string());
    std::array<std::uint8_t, 32> hash{};
    is.read(reinterpret_cast<char*>(hash.data()), 32);
    if (hash != detail::sha256(model.config_json()))
        throw ConfigError("checkpoint architecture hash does not match the configured model");
    const std::uint32_t count = detail::get_u32(is);

    std::map<std::string, Tensor<T>> opt_v;
    std::int64_t opt_t = 0;
    CheckpointMeta meta;
    std::size_t params_loaded = 0;
    for (std::uint32_t r = 0; r < count; ++r) {
        const int lo = is.get(), hi = is.get();
        if (lo < 0 || hi < 0) throw ConfigError("truncated checkpoint: " + path.string());
        std::string name(static_cast<std::size_t>(lo | (hi << 8)), '\0');
        is.read(name.data(), static_cast<std::streamsize>(name.size()));
        Tensor<T> t = detail::read_sgt1_stream<T>(is, path.string() + ":" + name);
        if (name.rfind("param/", 0) == 0) {
            const std::string pname = name.substr(6);
            bool found = false;
            model.for_each_store([&](ParamStore<T>& s) {
                if (found || !s.contains(pname)) return;
                Parameter<T>& p = s.at(pname);
                if (!p.value.same_shape(t))
                    throw ConfigError("checkpoint shape mismatch for " + pname);
                p.value = std::move(t);
                found = true;
            });
            if (!found) throw ConfigError("checkpoint has unknown parameter " + pname);
            ++params_loaded;
        } else if (name.rfind("opt/v/", 0) == 0) {
            opt_v.emplace(name.substr(6), std::move(t));
        } else if (name == "opt/t") {
            opt_t = static_cast<std::int64_t>(t[0]);
        } else if (name == "meta/epoch") {
            meta.epoch = static_cast<std::int64_t>(t[0]);
        } else if (name == "meta/val_dice") {
            meta.val_dice = static_cast<double>(t[0]);
        } else {
            throw ConfigError("unknown checkpoint record " + name);
        }
    }
    std::size_t expected = 0;
    model.for_each_store([&](ParamStore<T>& s) { expected += s.size(); });
    if (params_loaded != expected)
        throw ConfigError("checkpoint is missing parameters (" + std::to_string(params_loaded) +
                          " of " + std::to_string(expected) + ")");
    if (opt) opt->restore(std::move(opt_v), opt_t);
    return meta;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    OptimConfig optim;
    AugmentConfig augment;
    bool augment_enabled = false;
    int patience = 50;
    int max_epochs = 500;
    std::uint64_t seed = 1;
    double loss_smooth = 1e-5;  // training only; evaluation uses 0
    fs::path out_dir;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0, val_loss = 0, val_dice = 0, lr = 0;
};

struct TrainResult {
    fs::path best_checkpoint;
    fs::path history_csv;
    std::vector<EpochStats> history;
    double best_val_dice = -1.0;
    int best_epoch = -1;
    double final_train_dice = 0.0;
};

/// Evaluate one padded [1,H,W] image in eval mode (batch size 1).
template <class T>
Tensor<T> predict_image(Pipeline<T>& model, const Tensor<T>& image) {
    Graph<T> g(Mode::eval);
    auto out = model.forward(g, g.input(image.reshaped({1, 1, image.extent(1), image.extent(2)})));
    return g.value(out).clone();
}

/// Arithmetic mean of member probability maps.
template <class T>
Tensor<T> mean_predictions(const std::vector<Tensor<T>>& preds) {
    if (preds.empty()) throw Error("mean of zero predictions");
    Tensor<T> acc = preds[0].clone();
    T* a = acc.mutable_data();
    for (std::size_t k = 1; k < preds.size(); ++k) {
        if (!preds[k].same_shape(acc)) throw ShapeError("ensemble member shapes differ");
        for (std::int64_t i = 0; i < acc.numel(); ++i) a[i] += preds[k][i];
    }
    for (std::int64_t i = 0; i < acc.numel(); ++i) a[i] /= static_cast<T>(preds.size());
    return acc;
}

namespace detail {

inline std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

/// One training run: shuffled augmented epochs, per-epoch validation at
/// batch size 1 in eval mode, checkpoint on strict validation-Dice
/// improvement, early stop after `patience` epochs without improvement.
template <class T>
TrainResult train(Pipeline<T>& model, const std::vector<Sample<T>>& train_set,
                  const std::vector<Sample<T>>& val_set, const TrainConfig& cfg) {
    if (train_set.empty() || val_set.empty())
        throw ConfigError("training needs nonempty train and validation splits");
    cfg.optim.validate();
    fs::create_directories(cfg.out_dir);

    Rng root(cfg.seed);
    Rmsprop<T> opt;
    const std::vector<double> store_decay = {cfg.optim.weight_decay_fcn,
                                             cfg.optim.weight_decay_resnet};
    std::vector<ParamStore<T>*> stores;
    model.for_each_store([&](ParamStore<T>& s) { stores.push_back(&s); });

    TrainResult result;
    result.best_checkpoint = cfg.out_dir / "best.sgc1";
    result.history_csv = cfg.out_dir / "history.csv";
    int since_improve = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto plan = epoch_batches(train_set.size(), cfg.optim.batch_size, true,
                                  root.stream("shuffle", static_cast<std::uint64_t>(epoch)));
        double loss_sum = 0;
        std::int64_t loss_n = 0;
        Rng aug_root = root.stream("epoch", static_cast<std::uint64_t>(epoch));
        Rng drop_rng = root.stream("dropout", static_cast<std::uint64_t>(epoch));
        for (const auto& idx : plan) {
            Batch<T> batch = assemble_batch(train_set, idx, cfg.augment_enabled ? &cfg.augment : nullptr,
                                            &aug_root, static_cast<std::uint64_t>(epoch));
            Graph<T> g(Mode::train);
            auto out = model.forward(g, g.input(batch.images), &drop_rng);
            auto loss = dice_loss_node(g, out, batch.masks, static_cast<T>(cfg.loss_smooth));
            const double lval = g.value(loss)[0];
            if (std::isnan(lval)) throw NumericError("NaN training loss; aborting");
            for (auto* s : stores) s->zero_grads();
            g.backward(loss);
            opt.step(stores, cfg.optim, store_decay);
            loss_sum += lval * static_cast<double>(idx.size());
            loss_n += static_cast<std::int64_t>(idx.size());
        }

        double val_loss = 0, val_dice = 0;
        for (const Sample<T>& s : val_set) {
            Tensor<T> pred = predict_image(model, s.image);
            Tensor<T> mask4 = s.mask.reshaped({1, 1, s.mask.extent(1), s.mask.extent(2)});
            val_loss += dice_loss(pred, mask4, T(0)).loss;
            val_dice += dice_coefficient(pred, mask4);
        }
        val_loss /= static_cast<double>(val_set.size());
        val_dice /= static_cast<double>(val_set.size());

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / static_cast<double>(loss_n);
        st.val_loss = val_loss;
        st.val_dice = val_dice;
        st.lr = opt.effective_lr(cfg.optim);
        result.history.push_back(st);

        if (val_dice > result.best_val_dice) {
            result.best_val_dice = val_dice;
            result.best_epoch = epoch;
            since_improve = 0;
            save_checkpoint(result.best_checkpoint, model, &opt,
                            {epoch, val_dice});
        } else if (++since_improve > cfg.patience) {
            break;
        }
    }

    // train-split Dice of the final model state, for overfit checks
    double train_dice = 0;
    for (const Sample<T>& s : train_set) {
        Tensor<T> pred = predict_image(model, s.image);
        train_dice += dice_coefficient(pred, s.mask.reshaped({1, 1, s.mask.extent(1), s.mask.extent(2)}));
    }
    result.final_train_dice = train_dice / static_cast<double>(train_set.size());

    const fs::path tmp = result.history_csv.string() + ".tmp";
    {
        std::ofstream os(tmp);
        os << "epoch,train_loss,val_loss,val_dice,lr\n";
        for (const auto& st : result.history)
            os << st.epoch << ',' << detail::csv_num(st.train_loss) << ','
               << detail::csv_num(st.val_loss) << ',' << detail::csv_num(st.val_dice) << ','
               << detail::csv_num(st.lr) << "\n";
    }
    fs::rename(tmp, result.history_csv);
    return result;
}

/// Train n members, each with its own rng stream and (when no fixed
/// validation set is given) an independent random 80/20 split of the pool.
template <class T>
struct EnsembleResult {
    std::vector<TrainResult> members;
    std::vector<fs::path> checkpoints;
};

template <class T>
EnsembleResult<T> train_ensemble(int n, std::uint64_t base_seed, double scale, bool long_skips,
                                 double dropout, const std::vector<Sample<T>>& pool,
                                 const std::vector<Sample<T>>& fixed_val, double val_fraction,
                                 const TrainConfig& base_cfg, const fs::path& out_root) {
    if (n < 1) throw ConfigError("ensemble size must be >= 1");
    EnsembleResult<T> res;
    Rng root(base_seed);
    for (int m = 0; m < n; ++m) {
        Rng member = root.stream("member", static_cast<std::uint64_t>(m));
        std::vector<Sample<T>> tr, va;
        if (!fixed_val.empty()) {
            tr = pool;
            va = fixed_val;
        } else {
            std::vector<std::size_t> order(pool.size());
            for (std::size_t i = 0; i < pool.size(); ++i) order[i] = i;
            Rng split = member.stream("split");
            for (std::size_t i = pool.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<std::size_t>(split.below(i))]);
            std::size_t n_val = static_cast<std::size_t>(
                std::max<double>(1.0, std::llround(val_fraction * static_cast<double>(pool.size()))));
            if (n_val >= pool.size()) n_val = pool.size() - 1;
            for (std::size_t i = 0; i < pool.size(); ++i)
                (i < pool.size() - n_val ? tr : va).push_back(pool[order[i]]);
        }
        auto model = build_pipeline<T>(scale, member.stream("init").seed(), long_skips, dropout);
        TrainConfig cfg = base_cfg;
        cfg.seed = member.stream("train").seed();
        cfg.out_dir = out_root / ("member_" + std::to_string(m));
        res.members.push_back(train(model, tr, va, cfg));
        res.checkpoints.push_back(res.members.back().best_checkpoint);
    }
    return res;
}

} // namespace segpipe

#endif
