#ifndef SEGPIPE_BLOCKS_HPP
#define SEGPIPE_BLOCKS_HPP

#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "segpipe/autodiff.hpp"

namespace segpipe {

enum class LayerKind {
    conv3,
    conv2,
    conv1,
    simple_block,
    bottleneck_block,
    maxpool,
    upsample,
    concat_merge,
    classifier
};

enum class Resample { none, down, up };

/// One architecture-table row.
struct LayerSpec {
    std::string id;           // parameter prefix, e.g. "down1"
    std::string name;         // display name, e.g. "Down 1"
    LayerKind kind;
    int output_width = 1;     // base (unscaled) channel count
    int repetition = 1;
    Resample resample = Resample::none;
    bool relu_after = false;  // conv rows followed by ReLU
    bool preact = false;      // conv rows preceded by BN+ReLU
    std::string merge_source; // source row id for concat_merge
};

/// Long skip: source row output summed into the destination row input,
/// through a 1x1 projection when the widths differ.
struct SkipSpec {
    std::string src;
    std::string dst;
};

struct SummaryRow {
    std::string name;
    std::string block_type;
    int res_h = 0, res_w = 0;
    int width = 0;
    int repetition = 1;
    std::int64_t params = 0;
    std::int64_t cumulative = 0;
};

struct ConvLayerCount {
    int functional = 0;   // convolutions on the residual/function path
    int projections = 0;  // 1x1 shortcut and long-skip projections
};

namespace detail {

inline int scaled_width(int base, double scale) {
    const int w = static_cast<int>(std::llround(base * scale));
    if (w < 1)
        throw ConfigError("width scale " + std::to_string(scale) + " collapses a " +
                          std::to_string(base) + "-wide layer to zero");
    return w;
}

inline std::string kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv3: return "conv 3x3";
        case LayerKind::conv2: return "conv 2x2";
        case LayerKind::conv1: return "conv 1x1";
        case LayerKind::simple_block: return "simple block";
        case LayerKind::bottleneck_block: return "bottleneck";
        case LayerKind::maxpool: return "maxpooling";
        case LayerKind::upsample: return "upsampling";
        case LayerKind::concat_merge: return "concatenate";
        case LayerKind::classifier: return "conv 1x1";
    }
    return "?";
}

} // namespace detail

template <class T>
struct ConvUnit {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    int stride = 1;
    Padding pad = Padding::same;

    ValueRef apply(Graph<T>& g, ValueRef x) const {
        return g.conv2d(x, g.param(*w), b ? g.param(*b) : ValueRef{}, stride, pad);
    }
};

template <class T>
struct BnUnit {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    BatchNormState<T> state;

    ValueRef apply(Graph<T>& g, ValueRef x) {
        return g.batchnorm(x, g.param(*gamma), g.param(*beta), state);
    }
};

/// Residual block: out = shortcut(x) + H(x), H a chain of BN-ReLU-conv
/// stages (two 3x3 for the simple variant; 1x1 / 3x3 / 1x1 for the
/// bottleneck). Downsampling pools first in the simple variant and strides
/// the 3x3 in the bottleneck; upsampling repeats pixels before the block.
template <class T>
struct ResidualUnit {
    bool bottleneck = false;
    Resample resample = Resample::none;
    int in_width = 0, out_width = 0;
    double dropout_rate = 0.0;
    std::vector<BnUnit<T>> bns;
    std::vector<ConvUnit<T>> convs;
    std::optional<ConvUnit<T>> projection;

    ValueRef apply(Graph<T>& g, ValueRef x, Rng* dropout_rng) {
        ValueRef base = x;
        if (resample == Resample::up) base = g.upsample2(base);
        if (resample == Resample::down && !bottleneck) base = g.maxpool2(base);

        ValueRef h = base;
        const std::size_t dropout_after = bottleneck ? 1 : 0;
        for (std::size_t i = 0; i < convs.size(); ++i) {
            h = bns[i].apply(g, h);
            h = g.relu(h);
            h = convs[i].apply(g, h);
            if (i == dropout_after && dropout_rate > 0.0) {
                if (g.mode() == Mode::train && !dropout_rng)
                    throw Error("dropout-enabled block needs an rng stream in train mode");
                Rng fallback(0);
                h = g.dropout(h, static_cast<T>(dropout_rate), dropout_rng ? *dropout_rng : fallback);
            }
        }
        ValueRef s = projection ? projection->apply(g, base) : base;
        return g.add(s, h);
    }
};

/// Declarative architecture (ordered table rows plus skip wiring) compiled
/// into parameterized layers over a ParamStore.
template <class T>
class ModelGraph {
public:
    ModelGraph() = default;

    ModelGraph(std::string arch, double scale, int in_channels, std::vector<LayerSpec> rows,
               std::vector<SkipSpec> skips, double dropout_rate, std::uint64_t seed,
               const std::string& prefix = "")
        : arch_(std::move(arch)),
          scale_(scale),
          in_channels_(in_channels),
          dropout_rate_(dropout_rate),
          prefix_(prefix),
          rows_(std::move(rows)),
          skips_(std::move(skips)) {
        if (scale <= 0.0 || scale > 1.0) throw ConfigError("width scale must be in (0, 1]");
        build(seed);
    }

    const std::vector<LayerSpec>& rows() const { return rows_; }
    ParamStore<T>& params() { return params_; }
    const std::string& arch() const { return arch_; }
    double scale() const { return scale_; }
    int output_width() const { return impls_.empty() ? in_channels_ : impls_.back().out_width; }

    ValueRef forward(Graph<T>& g, ValueRef x, Rng* dropout_rng = nullptr) {
        if (g.value(x).ndim() != 4 || g.value(x).extent(1) != in_channels_)
            throw ShapeError(arch_ + ": expected input with " + std::to_string(in_channels_) +
                             " channels, got " + shape_str(g.value(x).shape()));
        std::map<std::string, ValueRef> row_out;
        ValueRef cur = x;
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            const LayerSpec& spec = rows_[r];
            RowImpl& impl = impls_[r];

            // long skips sum into this row's input
            for (std::size_t s = 0; s < skips_.size(); ++s) {
                if (skips_[s].dst != spec.id) continue;
                ValueRef src = row_out.at(skips_[s].src);
                if (skip_projs_[s].w) src = skip_projs_[s].apply(g, src);
                cur = g.add(cur, src);
            }

            switch (spec.kind) {
                case LayerKind::maxpool: cur = g.maxpool2(cur); break;
                case LayerKind::upsample: cur = g.upsample2(cur); break;
                case LayerKind::concat_merge:
                    cur = g.concat_channels(cur, row_out.at(spec.merge_source));
                    break;
                case LayerKind::simple_block:
                case LayerKind::bottleneck_block:
                    for (auto& blk : impl.blocks) cur = blk.apply(g, cur, dropout_rng);
                    break;
                case LayerKind::classifier:
                    cur = impl.convs[0].apply(g, cur);
                    cur = g.sigmoid(cur);
                    break;
                default:  // conv rows
                    for (std::size_t i = 0; i < impl.convs.size(); ++i) {
                        if (spec.preact) {
                            cur = impl.pre_bns[i].apply(g, cur);
                            cur = g.relu(cur);
                        }
                        cur = impl.convs[i].apply(g, cur);
                        if (spec.relu_after) cur = g.relu(cur);
                    }
            }
            row_out[spec.id] = cur;
        }
        return cur;
    }

    /// Analytic per-row table: resolution, width, and trainable parameter
    /// counts for a square input of extent `input_hw`, in table-row order,
    /// followed by long-skip projection rows and a total.
    std::vector<SummaryRow> summarize(int input_hw = 512) const {
        std::vector<SummaryRow> out;
        out.push_back({"Input", "-", input_hw, input_hw, in_channels_, 1, 0, 0});
        int res = input_hw;
        std::int64_t cum = 0;
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            const LayerSpec& spec = rows_[r];
            const RowImpl& impl = impls_[r];
            switch (spec.kind) {
                case LayerKind::maxpool: res /= 2; break;
                case LayerKind::upsample: res *= 2; break;
                case LayerKind::simple_block:
                case LayerKind::bottleneck_block:
                    if (spec.resample == Resample::down) res /= 2;
                    if (spec.resample == Resample::up) res *= 2;
                    break;
                default: break;
            }
            std::int64_t p = row_params_[r];
            cum += p;
            out.push_back({spec.name, detail::kind_name(spec.kind), res, res, impl.out_width,
                           spec.repetition, p, cum});
        }
        for (std::size_t s = 0; s < skips_.size(); ++s) {
            std::int64_t p = skip_params_[s];
            cum += p;
            out.push_back({"Skip " + skips_[s].src + "->" + skips_[s].dst,
                           skip_projs_[s].w ? "conv 1x1" : "identity", 0, 0, 0, 1, p, cum});
        }
        out.push_back({"Total", "-", 0, 0, 0, 1, cum, cum});
        return out;
    }

    std::int64_t trainable_params() { return params_.trainable_count(); }

    ConvLayerCount conv_layer_count() const {
        ConvLayerCount c;
        for (const auto& impl : impls_) {
            c.functional += static_cast<int>(impl.convs.size());
            for (const auto& blk : impl.blocks) {
                c.functional += static_cast<int>(blk.convs.size());
                if (blk.projection) ++c.projections;
            }
        }
        for (const auto& sp : skip_projs_)
            if (sp.w) ++c.projections;
        return c;
    }

    /// Zero the final convolution (weights and bias) of every residual
    /// function, turning each block into shortcut(x) + 0.
    void zero_residual_tails() {
        for (auto& impl : impls_)
            for (auto& blk : impl.blocks) {
                auto& w = *blk.convs.back().w;
                w.value = Tensor<T>::zeros(w.value.shape());
                auto& b = *blk.convs.back().b;
                b.value = Tensor<T>::zeros(b.value.shape());
            }
    }

private:
    struct RowImpl {
        int in_width = 0, out_width = 0;
        std::vector<BnUnit<T>> pre_bns;
        std::vector<ConvUnit<T>> convs;
        std::vector<ResidualUnit<T>> blocks;
    };

    void build(std::uint64_t seed) {
        Rng root(seed);
        int width = in_channels_;
        std::map<std::string, int> row_width;
        for (const LayerSpec& spec : rows_) {
            RowImpl impl;
            impl.in_width = width;
            const std::string rp = prefix_ + spec.id;
            switch (spec.kind) {
                case LayerKind::maxpool:
                case LayerKind::upsample:
                    impl.out_width = width;
                    break;
                case LayerKind::concat_merge: {
                    auto it = row_width.find(spec.merge_source);
                    if (it == row_width.end())
                        throw ConfigError("merge source row not built yet: " + spec.merge_source);
                    impl.out_width = width + it->second;
                    break;
                }
                case LayerKind::classifier:
                case LayerKind::conv1:
                case LayerKind::conv2:
                case LayerKind::conv3: {
                    const int w_out = spec.kind == LayerKind::classifier || spec.output_width == 1
                                          ? spec.output_width
                                          : detail::scaled_width(spec.output_width, scale_);
                    const int k = spec.kind == LayerKind::conv3 ? 3
                                  : spec.kind == LayerKind::conv2 ? 2 : 1;
                    int cin = width;
                    for (int i = 0; i < spec.repetition; ++i) {
                        const std::string up = rp + ".conv" + std::to_string(i);
                        if (spec.preact) impl.pre_bns.push_back(make_bn(up + ".bn", cin, root));
                        impl.convs.push_back(make_conv(up, cin, w_out, k, 1, root));
                        cin = w_out;
                    }
                    impl.out_width = w_out;
                    break;
                }
                case LayerKind::simple_block:
                case LayerKind::bottleneck_block: {
                    const bool bneck = spec.kind == LayerKind::bottleneck_block;
                    const int w_out = detail::scaled_width(spec.output_width, scale_);
                    if (bneck && w_out % 4 != 0)
                        throw ConfigError("bottleneck width " + std::to_string(w_out) +
                                          " not divisible by 4 (row " + spec.id + ", scale " +
                                          std::to_string(scale_) + ")");
                    int cin = width;
                    for (int i = 0; i < spec.repetition; ++i) {
                        const Resample rs = i == 0 ? spec.resample : Resample::none;
                        impl.blocks.push_back(make_block(rp + ".block" + std::to_string(i), bneck,
                                                         cin, w_out, rs, root));
                        cin = w_out;
                    }
                    impl.out_width = w_out;
                    break;
                }
            }
            width = impl.out_width;
            row_width[spec.id] = width;
            impls_.push_back(std::move(impl));
            row_params_.push_back(0);
        }
        // attribute parameter counts to rows (projections included)
        recount_rows();

        // long-skip projections
        for (const SkipSpec& sk : skips_) {
            int src_w = -1, dst_in_w = -1;
            for (std::size_t r = 0; r < rows_.size(); ++r) {
                if (rows_[r].id == sk.src) src_w = impls_[r].out_width;
                if (rows_[r].id == sk.dst) dst_in_w = impls_[r].in_width;
            }
            if (src_w < 0 || dst_in_w < 0)
                throw ConfigError("skip references unknown rows: " + sk.src + "->" + sk.dst);
            ConvUnit<T> proj;
            if (src_w != dst_in_w)
                proj = make_conv(prefix_ + sk.dst + ".skip_" + sk.src, src_w, dst_in_w, 1, 1, root);
            skip_projs_.push_back(proj);
            skip_params_.push_back(proj.w ? proj.w->value.numel() + proj.b->value.numel() : 0);
        }
    }

    void recount_rows() {
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            std::int64_t n = 0;
            const RowImpl& impl = impls_[r];
            auto count_conv = [&n](const ConvUnit<T>& c) {
                if (c.w) n += c.w->value.numel() + (c.b ? c.b->value.numel() : 0);
            };
            auto count_bn = [&n](const BnUnit<T>& b) {
                n += b.gamma->value.numel() + b.beta->value.numel();
            };
            for (const auto& c : impl.convs) count_conv(c);
            for (const auto& b : impl.pre_bns) count_bn(b);
            for (const auto& blk : impl.blocks) {
                for (const auto& c : blk.convs) count_conv(c);
                for (const auto& b : blk.bns) count_bn(b);
                if (blk.projection) count_conv(*blk.projection);
            }
            row_params_[r] = n;
        }
    }

    ConvUnit<T> make_conv(const std::string& name, int cin, int cout, int k, int stride, Rng& root) {
        ConvUnit<T> c;
        Rng wr = root.stream(name + ".weight");
        c.w = &params_.create(name + ".weight",
                              init_weights<T>(InitScheme::he_normal, {cout, cin, k, k}, wr));
        c.b = &params_.create(name + ".bias", Tensor<T>::zeros({cout}), true, true);
        c.stride = stride;
        c.pad = Padding::same;
        return c;
    }

    BnUnit<T> make_bn(const std::string& name, int c, Rng&) {
        BnUnit<T> bn;
        bn.gamma = &params_.create(name + ".gamma", Tensor<T>::ones({c}), true, true);
        bn.beta = &params_.create(name + ".beta", Tensor<T>::zeros({c}), true, true);
        bn.state.running_mean =
            &params_.create(name + ".running_mean", Tensor<T>::zeros({1, c, 1, 1}), false, true);
        bn.state.running_var =
            &params_.create(name + ".running_var", Tensor<T>::ones({1, c, 1, 1}), false, true);
        bn.state.batches_tracked =
            &params_.create(name + ".batches", Tensor<T>::zeros({1}), false, true);
        return bn;
    }

    ResidualUnit<T> make_block(const std::string& name, bool bottleneck, int cin, int cout,
                               Resample rs, Rng& root) {
        ResidualUnit<T> blk;
        blk.bottleneck = bottleneck;
        blk.resample = rs;
        blk.in_width = cin;
        blk.out_width = cout;
        blk.dropout_rate = dropout_rate_;
        if (bottleneck) {
            const int m = cout / 4;
            // stride-2 downsampling lives in the middle 3x3 convolution
            blk.bns.push_back(make_bn(name + ".bn0", cin, root));
            blk.convs.push_back(make_conv(name + ".conv0", cin, m, 1, 1, root));
            blk.bns.push_back(make_bn(name + ".bn1", m, root));
            blk.convs.push_back(make_conv(name + ".conv1", m, m, 3, rs == Resample::down ? 2 : 1, root));
            blk.bns.push_back(make_bn(name + ".bn2", m, root));
            blk.convs.push_back(make_conv(name + ".conv2", m, cout, 1, 1, root));
            if (cin != cout || rs == Resample::down)
                blk.projection =
                    make_conv(name + ".proj", cin, cout, 1, rs == Resample::down ? 2 : 1, root);
        } else {
            blk.bns.push_back(make_bn(name + ".bn0", cin, root));
            blk.convs.push_back(make_conv(name + ".conv0", cin, cout, 3, 1, root));
            blk.bns.push_back(make_bn(name + ".bn1", cout, root));
            blk.convs.push_back(make_conv(name + ".conv1", cout, cout, 3, 1, root));
            if (cin != cout) blk.projection = make_conv(name + ".proj", cin, cout, 1, 1, root);
        }
        return blk;
    }

    std::string arch_;
    double scale_ = 1.0;
    int in_channels_ = 1;
    double dropout_rate_ = 0.0;
    std::string prefix_;
    std::vector<LayerSpec> rows_;
    std::vector<SkipSpec> skips_;
    ParamStore<T> params_;
    std::vector<RowImpl> impls_;
    std::vector<std::int64_t> row_params_;
    std::vector<ConvUnit<T>> skip_projs_;
    std::vector<std::int64_t> skip_params_;
};

// ---------------------------------------------------------------------------
// Architecture tables
// ---------------------------------------------------------------------------

inline std::vector<LayerSpec> fcn_preprocessor_rows() {
    auto conv3 = [](const char* id, const char* name, int w, int rep, bool relu) {
        return LayerSpec{id, name, LayerKind::conv3, w, rep, Resample::none, relu, false, ""};
    };
    auto conv2 = [](const char* id, const char* name, int w) {
        return LayerSpec{id, name, LayerKind::conv2, w, 1, Resample::none, false, false, ""};
    };
    auto pool = [](const char* id, const char* name) {
        return LayerSpec{id, name, LayerKind::maxpool, 0, 1, Resample::none, false, false, ""};
    };
    auto up = [](const char* id, const char* name) {
        return LayerSpec{id, name, LayerKind::upsample, 0, 1, Resample::none, false, false, ""};
    };
    auto merge = [](const char* id, const char* name, const char* src) {
        return LayerSpec{id, name, LayerKind::concat_merge, 0, 1, Resample::none, false, false, src};
    };
    return {
        conv3("down1", "Down 1", 16, 2, true),
        pool("pool1", "Pooling 1"),
        conv3("down2", "Down 2", 32, 2, true),
        pool("pool2", "Pooling 2"),
        conv3("down3", "Down 3", 64, 2, true),
        pool("pool3", "Pooling 3"),
        conv3("down4", "Down 4", 128, 2, true),
        pool("pool4", "Pooling 4"),
        conv3("across", "Across", 256, 2, true),
        up("up1", "Up 1"),
        merge("merge1", "Merge 1", "down4"),
        conv2("up2", "Up 2", 128),
        conv3("up3", "Up 3", 128, 2, true),
        up("up4", "Up 4"),
        merge("merge2", "Merge 2", "down3"),
        conv2("up5", "Up 5", 64),
        conv3("up6", "Up 6", 64, 2, true),
        up("up7", "Up 7"),
        merge("merge3", "Merge 3", "down2"),
        conv2("up8", "Up 8", 32),
        conv3("up9", "Up 9", 32, 2, true),
        up("up10", "Up 10"),
        merge("merge4", "Merge 4", "down1"),
        conv2("up11", "Up 11", 16),
        conv3("up12", "Up 12", 16, 2, true),
        // single-channel linear output: no nonlinearity on the final conv
        LayerSpec{"output", "Output", LayerKind::conv3, 1, 1, Resample::none, false, false, ""},
    };
}

inline std::vector<LayerSpec> fc_resnet_rows() {
    auto block = [](const char* id, const char* name, bool bneck, int w, int rep, Resample rs) {
        return LayerSpec{id, name, bneck ? LayerKind::bottleneck_block : LayerKind::simple_block,
                         w, rep, rs, false, false, ""};
    };
    return {
        LayerSpec{"down1", "Down 1", LayerKind::conv3, 32, 1, Resample::none, false, false, ""},
        block("down2", "Down 2", false, 32, 1, Resample::down),
        block("down3", "Down 3", true, 128, 3, Resample::down),
        block("down4", "Down 4", true, 256, 8, Resample::down),
        block("down5", "Down 5", true, 512, 10, Resample::down),
        block("across", "Across", true, 1024, 3, Resample::none),
        block("up1", "Up 1", true, 512, 10, Resample::up),
        block("up2", "Up 2", true, 256, 8, Resample::up),
        block("up3", "Up 3", true, 128, 3, Resample::up),
        block("up4", "Up 4", false, 32, 1, Resample::up),
        LayerSpec{"up5", "Up 5", LayerKind::conv3, 32, 1, Resample::none, false, true, ""},
        LayerSpec{"classifier", "Classifier", LayerKind::classifier, 1, 1, Resample::none, false,
                  false, ""},
    };
}

/// Long skips between equal-resolution contracting outputs and expanding
/// inputs, crossing the U at the four recovered resolutions.
inline std::vector<SkipSpec> fc_resnet_skips() {
    return {{"down4", "up2"}, {"down3", "up3"}, {"down2", "up4"}, {"down1", "up5"}};
}

template <class T>
ModelGraph<T> build_fcn_preprocessor(double scale, std::uint64_t seed,
                                     const std::string& prefix = "") {
    return ModelGraph<T>("fcn", scale, 1, fcn_preprocessor_rows(), {}, 0.0, seed, prefix);
}

template <class T>
ModelGraph<T> build_fc_resnet(double scale, std::uint64_t seed, bool long_skips = true,
                              double dropout = 0.0, const std::string& prefix = "") {
    return ModelGraph<T>("fcresnet", scale, 1, fc_resnet_rows(),
                         long_skips ? fc_resnet_skips() : std::vector<SkipSpec>{}, dropout, seed,
                         prefix);
}

/// FCN pre-processor feeding the FC-ResNet; output is the per-pixel
/// foreground probability map.
template <class T>
struct Pipeline {
    double scale = 1.0;
    bool long_skips = true;
    double dropout = 0.0;
    ModelGraph<T> fcn;
    ModelGraph<T> resnet;

    ValueRef forward(Graph<T>& g, ValueRef x, Rng* dropout_rng = nullptr) {
        return resnet.forward(g, fcn.forward(g, x, dropout_rng), dropout_rng);
    }

    std::int64_t trainable_params() {
        return fcn.trainable_params() + resnet.trainable_params();
    }

    template <class F>
    void for_each_store(F f) {
        f(fcn.params());
        f(resnet.params());
    }

    std::string config_json() const {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "{\"arch\":\"pipeline\",\"scale\":%.9g,\"long_skips\":%s,\"dropout\":%.9g}",
                      scale, long_skips ? "true" : "false", dropout);
        return buf;
    }
};

template <class T>
Pipeline<T> build_pipeline(double scale, std::uint64_t seed, bool long_skips = true,
                           double dropout = 0.0) {
    Rng root(seed);
    Pipeline<T> p;
    p.scale = scale;
    p.long_skips = long_skips;
    p.dropout = dropout;
    p.fcn = build_fcn_preprocessor<T>(scale, root.stream("fcn").seed(), "fcn.");
    p.resnet = build_fc_resnet<T>(scale, root.stream("resnet").seed(), long_skips, dropout, "resnet.");
    return p;
}

/// Standalone residual block with its own parameters, for block-level tests
/// and gradient checks.
template <class T>
struct ResidualBlockHandle {
    ParamStore<T> store;
    ResidualUnit<T> unit;
};

template <class T>
ResidualBlockHandle<T> make_residual_block(bool bottleneck, int in_w, int out_w, Resample rs,
                                           double dropout, std::uint64_t seed) {
    ResidualBlockHandle<T> h;
    Rng root(seed);
    auto make_conv = [&](const std::string& name, int cin, int cout, int k, int stride) {
        ConvUnit<T> c;
        Rng wr = root.stream(name + ".weight");
        c.w = &h.store.create(name + ".weight",
                              init_weights<T>(InitScheme::he_normal, {cout, cin, k, k}, wr));
        c.b = &h.store.create(name + ".bias", Tensor<T>::zeros({cout}), true, true);
        c.stride = stride;
        return c;
    };
    auto make_bn = [&](const std::string& name, int c) {
        BnUnit<T> bn;
        bn.gamma = &h.store.create(name + ".gamma", Tensor<T>::ones({c}), true, true);
        bn.beta = &h.store.create(name + ".beta", Tensor<T>::zeros({c}), true, true);
        bn.state.running_mean =
            &h.store.create(name + ".running_mean", Tensor<T>::zeros({1, c, 1, 1}), false, true);
        bn.state.running_var =
            &h.store.create(name + ".running_var", Tensor<T>::ones({1, c, 1, 1}), false, true);
        bn.state.batches_tracked = &h.store.create(name + ".batches", Tensor<T>::zeros({1}), false, true);
        return bn;
    };
    ResidualUnit<T>& blk = h.unit;
    blk.bottleneck = bottleneck;
    blk.resample = rs;
    blk.in_width = in_w;
    blk.out_width = out_w;
    blk.dropout_rate = dropout;
    if (bottleneck) {
        if (out_w % 4 != 0) throw ConfigError("bottleneck width must be divisible by 4");
        const int m = out_w / 4;
        blk.bns.push_back(make_bn("bn0", in_w));
        blk.convs.push_back(make_conv("conv0", in_w, m, 1, 1));
        blk.bns.push_back(make_bn("bn1", m));
        blk.convs.push_back(make_conv("conv1", m, m, 3, rs == Resample::down ? 2 : 1));
        blk.bns.push_back(make_bn("bn2", m));
        blk.convs.push_back(make_conv("conv2", m, out_w, 1, 1));
        if (in_w != out_w || rs == Resample::down)
            blk.projection = make_conv("proj", in_w, out_w, 1, rs == Resample::down ? 2 : 1);
    } else {
        blk.bns.push_back(make_bn("bn0", in_w));
        blk.convs.push_back(make_conv("conv0", in_w, out_w, 3, 1));
        blk.bns.push_back(make_bn("bn1", out_w));
        blk.convs.push_back(make_conv("conv1", out_w, out_w, 3, 1));
        if (in_w != out_w) blk.projection = make_conv("proj", in_w, out_w, 1, 1);
    }
    return h;
}

} // namespace segpipe

#endif
