#ifndef SEGPIPE_AUTODIFF_HPP
#define SEGPIPE_AUTODIFF_HPP

#include <cassert>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "segpipe/tensor.hpp"

namespace segpipe {

enum class Mode { train, eval };
enum class Padding { same, valid };

/// Named trainable tensor plus its gradient accumulator.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool decay_exempt = false;
    bool grad_touched = false;

    void zero_grad() {
        grad = Tensor<T>::zeros(value.shape());
        grad_touched = false;
    }
};

/// Owns parameters in deterministic creation order with unique names.
template <class T>
class ParamStore {
public:
    Parameter<T>& create(const std::string& name, Tensor<T> init, bool trainable = true,
                         bool decay_exempt = false) {
        if (index_.count(name)) throw Error("duplicate parameter name: " + name);
        auto p = std::make_unique<Parameter<T>>();
        p->name = name;
        p->grad = Tensor<T>::zeros(init.shape());
        p->value = std::move(init);
        p->trainable = trainable;
        p->decay_exempt = decay_exempt;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return *params_[it->second];
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_)
            if (p->trainable) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p->zero_grad();
    }

    template <class F>
    void for_each(F f) {
        for (auto& p : params_) f(*p);
    }

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, std::size_t> index_;
};

struct ValueRef {
    int id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::int64_t>(i) * K;
        T* c = C + static_cast<std::int64_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + static_cast<std::int64_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[M,P] * B[N,P]^T
template <class T>
void gemm_nt(int M, int P, int N, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::int64_t>(i) * P;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<std::int64_t>(j) * P;
            T acc = 0;
            for (int p = 0; p < P; ++p) acc += a[p] * b[p];
            C[static_cast<std::int64_t>(i) * N + j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(int K, int M, int N, const T* A, const T* B, T* C) {
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::int64_t>(k) * M;
        const T* b = B + static_cast<std::int64_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + static_cast<std::int64_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

struct ConvGeom {
    int batch, cin, h, w;
    int cout, kh, kw;
    int stride;
    int pad_top, pad_left;
    int oh, ow;
};

// Output extent and padding per mode. `same` uses the asymmetric convention
// total = max((ceil(n/s)-1)*s + k - n, 0), split low/high as total/2 and the
// remainder, so stride-1 odd kernels pad symmetrically and stride-2 3x3
// halves even extents exactly.
inline std::pair<int, int> same_padding(int n, int k, int stride) {
    const int out = (n + stride - 1) / stride;
    const int total = std::max(0, (out - 1) * stride + k - n);
    return {total / 2, total - total / 2};
}

inline ConvGeom conv_geometry(const Shape& x, const Shape& w, int stride, Padding pad) {
    if (x.size() != 4 || w.size() != 4) throw ShapeError("conv2d expects 4-d input and weight");
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    if (w[1] != x[1])
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + " weight " + shape_str(w));
    ConvGeom g{};
    g.batch = x[0];
    g.cin = x[1];
    g.h = x[2];
    g.w = x[3];
    g.cout = w[0];
    g.kh = w[2];
    g.kw = w[3];
    g.stride = stride;
    int pb = 0, pr = 0;
    if (pad == Padding::same) {
        auto [pt, pb2] = same_padding(g.h, g.kh, stride);
        auto [pl, pr2] = same_padding(g.w, g.kw, stride);
        g.pad_top = pt;
        g.pad_left = pl;
        pb = pb2;
        pr = pr2;
    } else {
        g.pad_top = g.pad_left = 0;
    }
    const int eff_h = g.h + g.pad_top + pb;
    const int eff_w = g.w + g.pad_left + pr;
    if (g.kh > eff_h || g.kw > eff_w) throw ShapeError("conv2d kernel larger than padded input");
    g.oh = (eff_h - g.kh) / stride + 1;
    g.ow = (eff_w - g.kw) / stride + 1;
    return g;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const int ohw = g.oh * g.ow;
    for (int c = 0; c < g.cin; ++c) {
        const T* xc = x + static_cast<std::int64_t>(c) * g.h * g.w;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                T* row = col + static_cast<std::int64_t>((c * g.kh + ki) * g.kw + kj) * ohw;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.pad_top + ki;
                    T* r = row + static_cast<std::int64_t>(oy) * g.ow;
                    if (iy < 0 || iy >= g.h) {
                        for (int ox = 0; ox < g.ow; ++ox) r[ox] = T(0);
                        continue;
                    }
                    const T* xr = xc + static_cast<std::int64_t>(iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pad_left + kj;
                        r[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
    const int ohw = g.oh * g.ow;
    for (int c = 0; c < g.cin; ++c) {
        T* xc = x + static_cast<std::int64_t>(c) * g.h * g.w;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const T* row = col + static_cast<std::int64_t>((c * g.kh + ki) * g.kw + kj) * ohw;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.pad_top + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    const T* r = row + static_cast<std::int64_t>(oy) * g.ow;
                    T* xr = xc + static_cast<std::int64_t>(iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pad_left + kj;
                        if (ix >= 0 && ix < g.w) xr[ix] += r[ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

/// Direct triple-loop convolution, the semantic reference for the im2col path.
template <class T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                           int stride, Padding pad) {
    const auto g = detail::conv_geometry(x.shape(), w.shape(), stride, pad);
    Tensor<T> out = Tensor<T>::zeros({g.batch, g.cout, g.oh, g.ow});
    T* o = out.mutable_data();
    for (int b = 0; b < g.batch; ++b)
        for (int co = 0; co < g.cout; ++co)
            for (int oy = 0; oy < g.oh; ++oy)
                for (int ox = 0; ox < g.ow; ++ox) {
                    T acc = bias ? (*bias)[co] : T(0);
                    for (int ci = 0; ci < g.cin; ++ci)
                        for (int ki = 0; ki < g.kh; ++ki)
                            for (int kj = 0; kj < g.kw; ++kj) {
                                const int iy = oy * g.stride - g.pad_top + ki;
                                const int ix = ox * g.stride - g.pad_left + kj;
                                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                                acc += x.at4(b, ci, iy, ix) * w.at4(co, ci, ki, kj);
                            }
                    o[out.index4(b, co, oy, ox)] = acc;
                }
    return out;
}

/// Buffers a batch-normalization layer carries between batches.
template <class T>
struct BatchNormState {
    Parameter<T>* running_mean = nullptr;  // [1,C,1,1]
    Parameter<T>* running_var = nullptr;   // [1,C,1,1]
    Parameter<T>* batches_tracked = nullptr;  // [1]
};

/// Define-by-run reverse-mode graph: ops execute eagerly and record a
/// backward closure; `backward` walks nodes in reverse creation order, which
/// is a valid reverse topological order by construction.
template <class T>
class Graph {
    struct Node {
        Tensor<T> out;
        Tensor<T> grad;
        std::function<void(Graph&, int)> backward;
        Parameter<T>* param = nullptr;
    };

public:
    explicit Graph(Mode mode = Mode::train) : mode_(mode) {}

    Mode mode() const { return mode_; }

    const Tensor<T>& value(ValueRef v) const { return nodes_[check(v)].out; }
    const Tensor<T>& grad(ValueRef v) const { return nodes_[check(v)].grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // Accessors for externally defined ops built on make_node.
    const std::vector<int>& node_inputs(int id) const {
        return inputs_per_node_[static_cast<std::size_t>(id)];
    }
    const Tensor<T>& node_value(int id) const { return nodes_[static_cast<std::size_t>(id)].out; }
    const Tensor<T>& node_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    ValueRef input(Tensor<T> t) { return make_node(std::move(t), {}); }

    ValueRef param(Parameter<T>& p) {
        ValueRef v = make_node(p.value, {});
        nodes_[static_cast<std::size_t>(v.id)].param = &p;
        return v;
    }

    /// Generic extension point: eager output plus a custom backward.
    ValueRef make_node(Tensor<T> out, std::vector<int> inputs,
                       std::function<void(Graph&, int)> backward = nullptr) {
        Node n;
        n.out = std::move(out);
        n.backward = std::move(backward);
        inputs_per_node_.push_back(std::move(inputs));
        nodes_.push_back(std::move(n));
        return ValueRef{static_cast<int>(nodes_.size()) - 1};
    }

    /// Accumulate into a node's gradient (allocating it on first touch).
    void add_grad(int id, const Tensor<T>& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.out.same_shape(g))
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                             shape_str(n.out.shape()));
        if (n.grad.empty()) {
            n.grad = g.clone();
        } else {
            T* d = n.grad.mutable_data();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
    }

    // ---- operations ------------------------------------------------------

    ValueRef conv2d(ValueRef x, ValueRef w, ValueRef bias, int stride, Padding pad) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& wv = value(w);
        const auto g = detail::conv_geometry(xv.shape(), wv.shape(), stride, pad);
        const bool has_bias = bias.valid();
        if (has_bias) {
            const Tensor<T>& bv = value(bias);
            if (bv.numel() != g.cout) throw ShapeError("conv2d bias must have Cout elements");
        }

        Tensor<T> out({g.batch, g.cout, g.oh, g.ow});
        const int K = g.cin * g.kh * g.kw;
        const int ohw = g.oh * g.ow;
        std::vector<T> col(static_cast<std::size_t>(K) * ohw);
        T* o = out.mutable_data();
        for (int b = 0; b < g.batch; ++b) {
            T* ob = o + static_cast<std::int64_t>(b) * g.cout * ohw;
            if (has_bias) {
                const Tensor<T>& bv = value(bias);
                for (int c = 0; c < g.cout; ++c)
                    std::fill(ob + static_cast<std::int64_t>(c) * ohw,
                              ob + static_cast<std::int64_t>(c + 1) * ohw, bv[c]);
            }
            detail::im2col(xv.data() + static_cast<std::int64_t>(b) * g.cin * g.h * g.w, g, col.data());
            detail::gemm_nn(g.cout, K, ohw, wv.data(), col.data(), ob);
        }

        std::vector<int> ins = {x.id, w.id};
        if (has_bias) ins.push_back(bias.id);
        return make_node(std::move(out), std::move(ins), [g, has_bias](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const auto& ins2 = gr.inputs_per_node_[static_cast<std::size_t>(self)];
            const Tensor<T>& xv2 = gr.nodes_[static_cast<std::size_t>(ins2[0])].out;
            const Tensor<T>& wv2 = gr.nodes_[static_cast<std::size_t>(ins2[1])].out;
            const int K = g.cin * g.kh * g.kw;
            const int ohw = g.oh * g.ow;

            Tensor<T> dx = Tensor<T>::zeros(xv2.shape());
            Tensor<T> dw = Tensor<T>::zeros(wv2.shape());
            std::vector<T> col(static_cast<std::size_t>(K) * ohw);
            std::vector<T> colg(static_cast<std::size_t>(K) * ohw);
            T* dxp = dx.mutable_data();
            T* dwp = dw.mutable_data();
            for (int b = 0; b < g.batch; ++b) {
                const T* dyb = dy.data() + static_cast<std::int64_t>(b) * g.cout * ohw;
                // dW += dy_b * col_b^T
                detail::im2col(xv2.data() + static_cast<std::int64_t>(b) * g.cin * g.h * g.w, g,
                               col.data());
                detail::gemm_nt(g.cout, ohw, K, dyb, col.data(), dwp);
                // dcol = W^T * dy_b, scattered back through col2im
                std::fill(colg.begin(), colg.end(), T(0));
                detail::gemm_tn(g.cout, K, ohw, wv2.data(), dyb, colg.data());
                detail::col2im_add(colg.data(), g,
                                   dxp + static_cast<std::int64_t>(b) * g.cin * g.h * g.w);
            }
            gr.add_grad(ins2[0], dx);
            gr.add_grad(ins2[1], dw);
            if (has_bias) {
                Tensor<T> db = Tensor<T>::zeros(gr.nodes_[static_cast<std::size_t>(ins2[2])].out.shape());
                T* dbp = db.mutable_data();
                for (int b = 0; b < g.batch; ++b)
                    for (int c = 0; c < g.cout; ++c) {
                        const T* row = dy.data() + (static_cast<std::int64_t>(b) * g.cout + c) * ohw;
                        T acc = 0;
                        for (int i = 0; i < ohw; ++i) acc += row[i];
                        dbp[c] += acc;
                    }
                gr.add_grad(ins2[2], db);
            }
        });
    }

    ValueRef conv2d(ValueRef x, ValueRef w, int stride, Padding pad) {
        return conv2d(x, w, ValueRef{}, stride, pad);
    }

    /// 2x2 max pooling with stride 2; ties route to the first (row-major) max.
    ValueRef maxpool2(ValueRef x) {
        const Tensor<T>& xv = value(x);
        if (xv.ndim() != 4) throw ShapeError("maxpool2 expects 4-d input");
        const int B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
        if (H % 2 != 0 || W % 2 != 0)
            throw ShapeError("maxpool2 requires even spatial extents, got " + shape_str(xv.shape()));
        Tensor<T> out({B, C, H / 2, W / 2});
        auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
        T* o = out.mutable_data();
        const T* xp = xv.data();
        std::int64_t oi = 0;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * H * W;
                for (int oy = 0; oy < H / 2; ++oy)
                    for (int ox = 0; ox < W / 2; ++ox, ++oi) {
                        std::int64_t best = base + static_cast<std::int64_t>(2 * oy) * W + 2 * ox;
                        T bv = xp[best];
                        const std::int64_t cand[3] = {best + 1, best + W, best + W + 1};
                        for (std::int64_t ci : cand)
                            if (xp[ci] > bv) {
                                bv = xp[ci];
                                best = ci;
                            }
                        o[oi] = bv;
                        (*argmax)[static_cast<std::size_t>(oi)] = best;
                    }
            }
        return make_node(std::move(out), {x.id}, [argmax](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const int xid = gr.inputs_per_node_[static_cast<std::size_t>(self)][0];
            Tensor<T> dx = Tensor<T>::zeros(gr.nodes_[static_cast<std::size_t>(xid)].out.shape());
            T* d = dx.mutable_data();
            for (std::int64_t i = 0; i < dy.numel(); ++i)
                d[(*argmax)[static_cast<std::size_t>(i)]] += dy[i];
            gr.add_grad(xid, dx);
        });
    }

    /// Nearest-neighbor 2x upsampling (each pixel repeated into a 2x2 block).
    ValueRef upsample2(ValueRef x) {
        const Tensor<T>& xv = value(x);
        if (xv.ndim() != 4) throw ShapeError("upsample2 expects 4-d input");
        const int B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
        Tensor<T> out({B, C, H * 2, W * 2});
        T* o = out.mutable_data();
        const T* xp = xv.data();
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            const T* xc = xp + bc * H * W;
            T* oc = o + bc * 4 * H * W;
            for (int y = 0; y < H; ++y)
                for (int xcol = 0; xcol < W; ++xcol) {
                    const T v = xc[static_cast<std::int64_t>(y) * W + xcol];
                    T* t = oc + static_cast<std::int64_t>(2 * y) * 2 * W + 2 * xcol;
                    t[0] = v;
                    t[1] = v;
                    t[2 * W] = v;
                    t[2 * W + 1] = v;
                }
        }
        return make_node(std::move(out), {x.id}, [B, C, H, W](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const int xid = gr.inputs_per_node_[static_cast<std::size_t>(self)][0];
            Tensor<T> dx = Tensor<T>::zeros({B, C, H, W});
            T* d = dx.mutable_data();
            const T* dyp = dy.data();
            for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
                T* dc = d + bc * H * W;
                const T* gc = dyp + bc * 4 * H * W;
                for (int y = 0; y < H; ++y)
                    for (int x2 = 0; x2 < W; ++x2) {
                        const T* t = gc + static_cast<std::int64_t>(2 * y) * 2 * W + 2 * x2;
                        dc[static_cast<std::int64_t>(y) * W + x2] = t[0] + t[1] + t[2 * W] + t[2 * W + 1];
                    }
            }
            gr.add_grad(xid, dx);
        });
    }

    /// Per-channel batch normalization. Train mode normalizes with biased
    /// batch statistics and updates the running stats in place; eval mode
    /// uses the running stats and requires at least one tracked batch.
    ValueRef batchnorm(ValueRef x, ValueRef gamma, ValueRef beta, BatchNormState<T>& state,
                       T momentum = T(0.1), T eps = T(1e-5)) {
        const Tensor<T>& xv = value(x);
        if (xv.ndim() != 4) throw ShapeError("batchnorm expects 4-d input");
        const int B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
        if (value(gamma).numel() != C || value(beta).numel() != C)
            throw ShapeError("batchnorm gamma/beta must have C elements");
        const std::int64_t m = static_cast<std::int64_t>(B) * H * W;

        Tensor<T> mean({1, C, 1, 1}), invstd({1, C, 1, 1});
        if (mode_ == Mode::train) {
            if (m < 2) throw ShapeError("batchnorm train mode requires B*H*W >= 2");
            T* mu = mean.mutable_data();
            T* is = invstd.mutable_data();
            // exponential moving average, weight `momentum` on the new batch
            T* rm = state.running_mean->value.mutable_data();
            T* rv = state.running_var->value.mutable_data();
            const T* xp = xv.data();
            for (int c = 0; c < C; ++c) {
                double s = 0;
                for (int b = 0; b < B; ++b) {
                    const T* p = xp + (static_cast<std::int64_t>(b) * C + c) * H * W;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) s += p[i];
                }
                const double mc = s / static_cast<double>(m);
                double v = 0;
                for (int b = 0; b < B; ++b) {
                    const T* p = xp + (static_cast<std::int64_t>(b) * C + c) * H * W;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                        const double dlt = p[i] - mc;
                        v += dlt * dlt;
                    }
                }
                const double var = v / static_cast<double>(m);
                mu[c] = static_cast<T>(mc);
                is[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
                rm[c] = (T(1) - momentum) * rm[c] + momentum * static_cast<T>(mc);
                rv[c] = (T(1) - momentum) * rv[c] + momentum * static_cast<T>(var);
            }
            T* cnt = state.batches_tracked->value.mutable_data();
            cnt[0] += T(1);
        } else {
            if (state.batches_tracked->value[0] == T(0))
                throw Error("batchnorm eval mode before any running statistics were recorded");
            T* mu = mean.mutable_data();
            T* is = invstd.mutable_data();
            for (int c = 0; c < C; ++c) {
                mu[c] = state.running_mean->value[c];
                is[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var->value[c]) +
                                                       static_cast<double>(eps)));
            }
        }

        Tensor<T> out(xv.shape());
        T* o = out.mutable_data();
        const T* xp = xv.data();
        const Tensor<T>& gv = value(gamma);
        const Tensor<T>& bv = value(beta);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * H * W;
                const T mu_c = mean[c], is_c = invstd[c], g_c = gv[c], b_c = bv[c];
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
                    o[base + i] = g_c * (xp[base + i] - mu_c) * is_c + b_c;
            }

        const bool train = mode_ == Mode::train;
        return make_node(std::move(out), {x.id, gamma.id, beta.id},
                         [mean, invstd, m, B, C, H, W, train](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const auto& ins = gr.inputs_per_node_[static_cast<std::size_t>(self)];
            const Tensor<T>& xv2 = gr.nodes_[static_cast<std::size_t>(ins[0])].out;
            const Tensor<T>& gv2 = gr.nodes_[static_cast<std::size_t>(ins[1])].out;
            Tensor<T> dx = Tensor<T>::zeros(xv2.shape());
            Tensor<T> dgamma = Tensor<T>::zeros(gv2.shape());
            Tensor<T> dbeta = Tensor<T>::zeros(gv2.shape());
            T* dxp = dx.mutable_data();
            T* dgp = dgamma.mutable_data();
            T* dbp = dbeta.mutable_data();
            const T* xp = xv2.data();
            const T* dyp = dy.data();
            const std::int64_t hw = static_cast<std::int64_t>(H) * W;
            for (int c = 0; c < C; ++c) {
                const T mu_c = mean[c], is_c = invstd[c], g_c = gv2[c];
                double sum_dy = 0, sum_dy_xhat = 0;
                for (int b = 0; b < B; ++b) {
                    const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const double xhat = (xp[base + i] - mu_c) * is_c;
                        sum_dy += dyp[base + i];
                        sum_dy_xhat += dyp[base + i] * xhat;
                    }
                }
                dgp[c] += static_cast<T>(sum_dy_xhat);
                dbp[c] += static_cast<T>(sum_dy);
                if (train) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (int b = 0; b < B; ++b) {
                        const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const double xhat = (xp[base + i] - mu_c) * is_c;
                            const double dxhat = dyp[base + i] * g_c;
                            dxp[base + i] = static_cast<T>(
                                is_c * (dxhat - inv_m * (g_c * sum_dy + xhat * g_c * sum_dy_xhat)));
                        }
                    }
                } else {
                    for (int b = 0; b < B; ++b) {
                        const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i)
                            dxp[base + i] = dyp[base + i] * g_c * is_c;
                    }
                }
            }
            gr.add_grad(ins[0], dx);
            gr.add_grad(ins[1], dgamma);
            gr.add_grad(ins[2], dbeta);
        });
    }

    /// max(0, x); the subgradient at exactly 0 is defined as 0.
    ValueRef relu(ValueRef x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        T* o = out.mutable_data();
        for (std::int64_t i = 0; i < xv.numel(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
        return make_node(std::move(out), {x.id}, [](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const int xid = gr.inputs_per_node_[static_cast<std::size_t>(self)][0];
            const Tensor<T>& xv2 = gr.nodes_[static_cast<std::size_t>(xid)].out;
            Tensor<T> dx = Tensor<T>::zeros(xv2.shape());
            T* d = dx.mutable_data();
            for (std::int64_t i = 0; i < xv2.numel(); ++i) d[i] = xv2[i] > T(0) ? dy[i] : T(0);
            gr.add_grad(xid, dx);
        });
    }

    ValueRef sigmoid(ValueRef x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        T* o = out.mutable_data();
        for (std::int64_t i = 0; i < xv.numel(); ++i)
            o[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(xv[i]))));
        return make_node(std::move(out), {x.id}, [](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor<T>& y = gr.nodes_[static_cast<std::size_t>(self)].out;
            const int xid = gr.inputs_per_node_[static_cast<std::size_t>(self)][0];
            Tensor<T> dx = Tensor<T>::zeros(y.shape());
            T* d = dx.mutable_data();
            for (std::int64_t i = 0; i < y.numel(); ++i) d[i] = dy[i] * y[i] * (T(1) - y[i]);
            gr.add_grad(xid, dx);
        });
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate) in train mode; exact identity in eval mode or at rate 0.
    ValueRef dropout(ValueRef x, T rate, Rng& rng) {
        if (rate < T(0) || rate >= T(1)) throw Error("dropout rate must be in [0, 1)");
        const Tensor<T>& xv = value(x);
        if (mode_ == Mode::eval || rate == T(0)) {
            return make_node(xv, {x.id}, [](Graph& gr, int self) {
                gr.add_grad(gr.inputs_per_node_[static_cast<std::size_t>(self)][0],
                            gr.nodes_[static_cast<std::size_t>(self)].grad);
            });
        }
        auto mask = std::make_shared<Tensor<T>>(xv.shape());
        T* mp = mask->mutable_data();
        const T scale = T(1) / (T(1) - rate);
        for (std::int64_t i = 0; i < xv.numel(); ++i)
            mp[i] = rng.uniform() < static_cast<double>(rate) ? T(0) : scale;
        Tensor<T> out = mul(xv, *mask);
        return make_node(std::move(out), {x.id}, [mask](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            gr.add_grad(gr.inputs_per_node_[static_cast<std::size_t>(self)][0], mul(dy, *mask));
        });
    }

    ValueRef concat_channels(ValueRef a, ValueRef b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (av.ndim() != 4 || bv.ndim() != 4 || av.extent(0) != bv.extent(0) ||
            av.extent(2) != bv.extent(2) || av.extent(3) != bv.extent(3))
            throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(av.shape()) +
                             " vs " + shape_str(bv.shape()));
        const int B = av.extent(0), Ca = av.extent(1), Cb = bv.extent(1);
        const std::int64_t hw = static_cast<std::int64_t>(av.extent(2)) * av.extent(3);
        Tensor<T> out({B, Ca + Cb, av.extent(2), av.extent(3)});
        T* o = out.mutable_data();
        for (int bi = 0; bi < B; ++bi) {
            std::memcpy(o + static_cast<std::int64_t>(bi) * (Ca + Cb) * hw,
                        av.data() + static_cast<std::int64_t>(bi) * Ca * hw,
                        sizeof(T) * static_cast<std::size_t>(Ca * hw));
            std::memcpy(o + (static_cast<std::int64_t>(bi) * (Ca + Cb) + Ca) * hw,
                        bv.data() + static_cast<std::int64_t>(bi) * Cb * hw,
                        sizeof(T) * static_cast<std::size_t>(Cb * hw));
        }
        return make_node(std::move(out), {a.id, b.id}, [B, Ca, Cb, hw](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const auto& ins = gr.inputs_per_node_[static_cast<std::size_t>(self)];
            Tensor<T> da = Tensor<T>::zeros(gr.nodes_[static_cast<std::size_t>(ins[0])].out.shape());
            Tensor<T> db = Tensor<T>::zeros(gr.nodes_[static_cast<std::size_t>(ins[1])].out.shape());
            T* dap = da.mutable_data();
            T* dbp = db.mutable_data();
            for (int bi = 0; bi < B; ++bi) {
                std::memcpy(dap + static_cast<std::int64_t>(bi) * Ca * hw,
                            dy.data() + static_cast<std::int64_t>(bi) * (Ca + Cb) * hw,
                            sizeof(T) * static_cast<std::size_t>(Ca * hw));
                std::memcpy(dbp + static_cast<std::int64_t>(bi) * Cb * hw,
                            dy.data() + (static_cast<std::int64_t>(bi) * (Ca + Cb) + Ca) * hw,
                            sizeof(T) * static_cast<std::size_t>(Cb * hw));
            }
            gr.add_grad(ins[0], da);
            gr.add_grad(ins[1], db);
        });
    }

    ValueRef add(ValueRef a, ValueRef b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (!av.same_shape(bv))
            throw ShapeError("add: shape mismatch " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
        return make_node(segpipe::add(av, bv), {a.id, b.id}, [](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const auto& ins = gr.inputs_per_node_[static_cast<std::size_t>(self)];
            gr.add_grad(ins[0], dy);
            gr.add_grad(ins[1], dy);
        });
    }

    ValueRef sum(ValueRef x) {
        const Tensor<T>& xv = value(x);
        return make_node(Tensor<T>::scalar(sum_all(xv)), {x.id}, [](Graph& gr, int self) {
            const Tensor<T>& dy = gr.nodes_[static_cast<std::size_t>(self)].grad;
            const int xid = gr.inputs_per_node_[static_cast<std::size_t>(self)][0];
            gr.add_grad(xid, Tensor<T>::full(gr.nodes_[static_cast<std::size_t>(xid)].out.shape(), dy[0]));
        });
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse topological sweep from `root`. Node gradients are reset each
    /// call; parameter gradients accumulate across calls until zero_grads.
    void backward(ValueRef root, const Tensor<T>* seed = nullptr) {
        const int rid = check(root);
        for (auto& n : nodes_) n.grad = Tensor<T>();
        Node& r = nodes_[static_cast<std::size_t>(rid)];
        if (seed) {
            if (!seed->same_shape(r.out)) throw ShapeError("backward seed shape mismatch");
            r.grad = seed->clone();
        } else {
            if (r.out.numel() != 1)
                throw ShapeError("backward root must be scalar when no seed gradient is given");
            r.grad = Tensor<T>::ones(r.out.shape());
        }
        for (int id = rid; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
            if (n.param) {
                T* pg = n.param->grad.mutable_data();
                for (std::int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i];
                n.param->grad_touched = true;
            }
        }
    }

private:
    int check(ValueRef v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw Error("invalid graph value reference");
        return v.id;
    }

    Mode mode_;
    std::vector<Node> nodes_;
    std::vector<std::vector<int>> inputs_per_node_;
};

} // namespace segpipe

#endif
