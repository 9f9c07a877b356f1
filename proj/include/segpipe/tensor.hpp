#ifndef SEGPIPE_TENSOR_HPP
#define SEGPIPE_TENSOR_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "segpipe/error.hpp"
#include "segpipe/rng.hpp"

namespace segpipe {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline void validate_shape(const Shape& s) {
    if (s.empty() || s.size() > 4)
        throw ShapeError("tensor order must be between 1 and 4, got " + shape_str(s));
    for (int e : s)
        if (e < 1) throw ShapeError("all extents must be >= 1, got " + shape_str(s));
}

/// Dense row-major tensor of f32 or f64 scalars, order <= 4.
///
/// Axis convention for order-4 data is batch, channel, height, width with
/// index(b,c,h,w) = ((b*C + c)*H + h)*W + w. Copies share the underlying
/// buffer; mutable access copies on write, so tensors behave as immutable
/// values unless explicitly mutated by their single owner.
template <class T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape(shape_);
        buf_ = std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)) {
        validate_shape(shape_);
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape_))
            throw ShapeError("data length does not match shape " + shape_str(shape_));
        buf_ = std::make_shared<std::vector<T>>(std::move(data));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.buf_->begin(), t.buf_->end(), value);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T value) { return full({1}, value); }

    bool empty() const { return !buf_; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::int64_t numel() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }

    const T* data() const { return buf_->data(); }
    const T& operator[](std::int64_t i) const { return (*buf_)[static_cast<std::size_t>(i)]; }

    /// Writable pointer; clones the buffer first if it is shared.
    T* mutable_data() {
        if (buf_.use_count() > 1) buf_ = std::make_shared<std::vector<T>>(*buf_);
        return buf_->data();
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = std::make_shared<std::vector<T>>(*buf_);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    /// Flat offset of a 4-d index; tensor must be order 4.
    std::int64_t index4(int b, int c, int h, int w) const {
        return ((static_cast<std::int64_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    T at4(int b, int c, int h, int w) const { return (*buf_)[static_cast<std::size_t>(index4(b, c, h, w))]; }

    /// Same data viewed under a different shape with equal element count.
    Tensor reshaped(Shape shape) const {
        validate_shape(shape);
        if (shape_numel(shape) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = buf_;
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(static_cast<std::size_t>(numel()));
        for (std::int64_t i = 0; i < numel(); ++i) out[static_cast<std::size_t>(i)] = static_cast<U>((*buf_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> buf_;
};

// Multi-index <-> flat offset for arbitrary order (used by tests and reductions).
inline std::int64_t flat_index(const Shape& shape, const std::vector<int>& idx) {
    std::int64_t f = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) f = f * shape[d] + idx[d];
    return f;
}

inline std::vector<int> multi_index(const Shape& shape, std::int64_t flat) {
    std::vector<int> idx(shape.size());
    for (std::size_t d = shape.size(); d-- > 0;) {
        idx[d] = static_cast<int>(flat % shape[d]);
        flat /= shape[d];
    }
    return idx;
}

template <class T>
bool has_nan(const Tensor<T>& t) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
        if (std::isnan(t[i])) return true;
    return false;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Shapes must match exactly, or the right operand is
// a scalar, or a per-channel [1,C,1,1] tensor against an order-4 left operand.
// ---------------------------------------------------------------------------

enum class DivPolicy { strict, permissive };

namespace detail {

template <class T, class F>
Tensor<T> ew_map(const Tensor<T>& a, F f) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    T* o = out.mutable_data();
    const T* x = a.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = f(x[i]);
    return out;
}

template <class T>
bool channel_broadcastable(const Tensor<T>& a, const Tensor<T>& b) {
    return a.ndim() == 4 && b.ndim() == 4 && b.extent(0) == 1 && b.extent(2) == 1 &&
           b.extent(3) == 1 && b.extent(1) == a.extent(1);
}

template <class T, class F>
Tensor<T> ew_zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* op) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    T* o = out.mutable_data();
    const T* x = a.data();
    const T* y = b.data();
    if (a.same_shape(b)) {
        for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = f(x[i], y[i]);
    } else if (b.numel() == 1) {
        for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = f(x[i], y[0]);
    } else if (channel_broadcastable(a, b)) {
        const int C = a.extent(1);
        const std::int64_t hw = static_cast<std::int64_t>(a.extent(2)) * a.extent(3);
        std::int64_t i = 0;
        for (int bi = 0; bi < a.extent(0); ++bi)
            for (int c = 0; c < C; ++c) {
                const T v = y[c];
                for (std::int64_t k = 0; k < hw; ++k, ++i) o[i] = f(x[i], v);
            }
    } else {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    return out;
}

} // namespace detail

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_zip(a, b, [](T x, T y) { return x + y; }, "add");
}
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_zip(a, b, [](T x, T y) { return x - y; }, "sub");
}
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_zip(a, b, [](T x, T y) { return x * y; }, "mul");
}
template <class T> Tensor<T> ew_max(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_zip(a, b, [](T x, T y) { return std::max(x, y); }, "max");
}
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b,
                                 DivPolicy policy = DivPolicy::strict) {
    if (policy == DivPolicy::strict) {
        for (std::int64_t i = 0; i < b.numel(); ++i)
            if (b[i] == T(0)) throw NumericError("division by exact zero in strict mode");
    }
    return detail::ew_zip(a, b, [](T x, T y) { return x / y; }, "div");
}

template <class T> Tensor<T> add(const Tensor<T>& a, T s) { return detail::ew_map(a, [s](T x) { return x + s; }); }
template <class T> Tensor<T> sub(const Tensor<T>& a, T s) { return detail::ew_map(a, [s](T x) { return x - s; }); }
template <class T> Tensor<T> mul(const Tensor<T>& a, T s) { return detail::ew_map(a, [s](T x) { return x * s; }); }
template <class T> Tensor<T> div(const Tensor<T>& a, T s, DivPolicy policy = DivPolicy::strict) {
    if (s == T(0) && policy == DivPolicy::strict)
        throw NumericError("division by exact zero in strict mode");
    return detail::ew_map(a, [s](T x) { return x / s; });
}

template <class T> Tensor<T> ew_exp(const Tensor<T>& a) { return detail::ew_map(a, [](T x) { return std::exp(x); }); }
template <class T> Tensor<T> ew_log(const Tensor<T>& a) { return detail::ew_map(a, [](T x) { return std::log(x); }); }
template <class T> Tensor<T> neg(const Tensor<T>& a) { return detail::ew_map(a, [](T x) { return -x; }); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceOp { sum, mean, max };

template <class T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& a, std::vector<int> axes, bool keepdims = false) {
    const int nd = a.ndim();
    std::vector<bool> hit(static_cast<std::size_t>(nd), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= nd) throw ShapeError("reduce: axis out of range");
        if (hit[static_cast<std::size_t>(ax)]) throw ShapeError("reduce: duplicate axis");
        hit[static_cast<std::size_t>(ax)] = true;
    }
    if (axes.empty()) return a.clone();

    Shape out_shape;
    std::int64_t group = 1;
    for (int d = 0; d < nd; ++d) {
        if (hit[static_cast<std::size_t>(d)]) {
            group *= a.extent(d);
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.extent(d));
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    Tensor<T> out = (op == ReduceOp::max)
                        ? Tensor<T>::full(out_shape, std::numeric_limits<T>::lowest())
                        : Tensor<T>::zeros(out_shape);
    T* o = out.mutable_data();
    const T* x = a.data();

    // stride of each input axis within the output (0 for reduced axes),
    // walked with an odometer so no per-element index math is needed
    std::vector<std::int64_t> out_stride(static_cast<std::size_t>(nd), 0);
    std::int64_t os = 1;
    for (int d = nd - 1; d >= 0; --d)
        if (!hit[static_cast<std::size_t>(d)]) {
            out_stride[static_cast<std::size_t>(d)] = os;
            os *= a.extent(d);
        }
    std::vector<int> idx(static_cast<std::size_t>(nd), 0);
    std::int64_t oi = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (op == ReduceOp::max)
            o[oi] = std::max(o[oi], x[i]);
        else
            o[oi] += x[i];
        for (int d = nd - 1; d >= 0; --d) {
            const std::size_t du = static_cast<std::size_t>(d);
            ++idx[du];
            oi += out_stride[du];
            if (idx[du] < a.extent(d)) break;
            idx[du] = 0;
            oi -= static_cast<std::int64_t>(a.extent(d)) * out_stride[du];
        }
    }
    if (op == ReduceOp::mean)
        for (std::int64_t i = 0; i < out.numel(); ++i) o[i] /= static_cast<T>(group);
    return out;
}

template <class T>
std::vector<int> all_axes(const Tensor<T>& a) {
    std::vector<int> ax(static_cast<std::size_t>(a.ndim()));
    std::iota(ax.begin(), ax.end(), 0);
    return ax;
}

template <class T> T sum_all(const Tensor<T>& a) {
    T s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i];
    return s;
}

// ---------------------------------------------------------------------------
// Weight initialization
// ---------------------------------------------------------------------------

enum class InitScheme { he_normal, glorot_uniform, zeros };

// fan_in/fan_out follow the conv convention: for [Cout,Cin,kh,kw] the fan-in
// is Cin*kh*kw and the fan-out Cout*kh*kw; lower orders treat axis 0 as out.
inline std::pair<std::int64_t, std::int64_t> fan_in_out(const Shape& shape) {
    std::int64_t receptive = 1;
    for (std::size_t d = 2; d < shape.size(); ++d) receptive *= shape[d];
    std::int64_t fan_out = shape[0] * receptive;
    std::int64_t fan_in = (shape.size() >= 2 ? shape[1] : shape[0]) * receptive;
    return {fan_in, fan_out};
}

template <class T>
Tensor<T> init_weights(InitScheme scheme, Shape shape, Rng& rng) {
    validate_shape(shape);
    if (scheme == InitScheme::zeros) return Tensor<T>::zeros(std::move(shape));
    auto [fan_in, fan_out] = fan_in_out(shape);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    T* d = t.mutable_data();
    if (scheme == InitScheme::he_normal) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = static_cast<T>(rng.normal(0.0, stddev));
    } else {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    return t;
}

// ---------------------------------------------------------------------------
// SGT1 binary tensor file format.
//
// Layout: magic "SGT1", u8 dtype (0 = f32, 1 = f64), u8 ndim, ndim x u32
// little-endian extents, then row-major little-endian scalars.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t lo = get_u32(is);
    std::uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

template <class T>
void write_sgt1_stream(std::ostream& os, const Tensor<T>& t) {
    os.write("SGT1", 4);
    os.put(std::is_same_v<T, float> ? '\0' : '\x01');
    os.put(static_cast<char>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) put_u32(os, static_cast<std::uint32_t>(t.extent(d)));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if constexpr (std::is_same_v<T, float>)
            put_u32(os, std::bit_cast<std::uint32_t>(t[i]));
        else
            put_u64(os, std::bit_cast<std::uint64_t>(t[i]));
    }
}

template <class T>
Tensor<T> read_sgt1_stream(std::istream& is, const std::string& what) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SGT1", 4) != 0)
        throw ConfigError("not an SGT1 tensor file: " + what);
    const int dtype = is.get();
    const int ndim = is.get();
    if (dtype < 0 || dtype > 1 || ndim < 1 || ndim > 4)
        throw ConfigError("corrupt SGT1 header in " + what);
    Shape shape(static_cast<std::size_t>(ndim));
    for (int d = 0; d < ndim; ++d) {
        std::uint32_t e = get_u32(is);
        if (e == 0 || e > 0x7fffffffu) throw ConfigError("corrupt SGT1 extent in " + what);
        shape[static_cast<std::size_t>(d)] = static_cast<int>(e);
    }
    const std::int64_t n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        if (dtype == 0)
            data[static_cast<std::size_t>(i)] = static_cast<T>(std::bit_cast<float>(get_u32(is)));
        else
            data[static_cast<std::size_t>(i)] = static_cast<T>(std::bit_cast<double>(get_u64(is)));
    }
    if (!is) throw ConfigError("truncated SGT1 payload in " + what);
    return Tensor<T>(std::move(shape), std::move(data));
}

} // namespace detail

template <class T>
void write_sgt1(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path.string());
    detail::write_sgt1_stream(os, t);
    if (!os) throw ConfigError("write failed: " + path.string());
}

template <class T>
Tensor<T> read_sgt1(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("missing tensor file: " + path.string());
    return detail::read_sgt1_stream<T>(is, path.string());
}

} // namespace segpipe

#endif
