#ifndef SEGPIPE_AUGMENT_HPP
#define SEGPIPE_AUGMENT_HPP

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "segpipe/loss.hpp"
#include "segpipe/tensor.hpp"

namespace segpipe {

struct AugmentConfig {
    bool flip_h = false;
    bool flip_v = false;
    double shear_max = 0.0;     // bound on the shear matrix off-diagonal coefficient
    double rotation_max = 0.0;  // degrees
    int crop_size = 0;          // 0 keeps the full extent
    bool warp = false;
    int warp_grid_spacing = 64;  // pixels between displacement-grid nodes
    double warp_sigma = 10.0;    // stddev of node displacements, pixels
    bool crop_contains_foreground = false;
    double apply_prob = 0.5;  // chance each enabled transform triggers
};

/// Resolved random draws for one sample; the geometric core is a pure
/// function of these, which keeps augmentation testable and reproducible.
struct AugmentParams {
    bool flip_h = false, flip_v = false;
    double rotation_deg = 0.0;
    double shear = 0.0;
    bool shear_y_axis = false;
    int crop_row = 0, crop_col = 0, crop_size = 0;  // crop_size 0 = full
    int grid_spacing = 0, grid_rows = 0, grid_cols = 0;
    std::vector<double> disp_y, disp_x;  // per grid node, pixels

    bool has_warp() const { return grid_spacing > 0; }
};

namespace detail {

// Backward affine map src = A*dst + t in (x, y) with y pointing down.
struct Affine {
    double a = 1, b = 0, c = 0, d = 1;  // [a b; c d]
    double tx = 0, ty = 0;

    std::pair<double, double> operator()(double x, double y) const {
        return {a * x + b * y + tx, c * x + d * y + ty};
    }

    static Affine identity() { return {}; }

    Affine then(const Affine& o) const {  // apply *this first, then o
        Affine r;
        r.a = o.a * a + o.b * c;
        r.b = o.a * b + o.b * d;
        r.c = o.c * a + o.d * c;
        r.d = o.c * b + o.d * d;
        r.tx = o.a * tx + o.b * ty + o.tx;
        r.ty = o.c * tx + o.d * ty + o.ty;
        return r;
    }
};

inline Affine affine_from_params(const AugmentParams& p, int h, int w) {
    const double cx = (w - 1) / 2.0;
    const double cy = (h - 1) / 2.0;
    Affine m = Affine::identity();
    if (p.flip_h) {
        Affine f;
        f.a = -1;
        f.tx = w - 1.0;
        m = m.then(f);
    }
    if (p.flip_v) {
        Affine f;
        f.d = -1;
        f.ty = h - 1.0;
        m = m.then(f);
    }
    if (p.rotation_deg != 0.0) {
        const double th = p.rotation_deg * 3.14159265358979323846 / 180.0;
        Affine r;
        r.a = std::cos(th);
        r.b = -std::sin(th);
        r.c = std::sin(th);
        r.d = std::cos(th);
        r.tx = cx - r.a * cx - r.b * cy;
        r.ty = cy - r.c * cx - r.d * cy;
        m = m.then(r);
    }
    if (p.shear != 0.0) {
        Affine s;
        if (p.shear_y_axis) {
            s.c = p.shear;
            s.ty = -p.shear * cx;
        } else {
            s.b = p.shear;
            s.tx = -p.shear * cy;
        }
        m = m.then(s);
    }
    return m;
}

// Catmull-Rom cubic through four taps at parameter t in [0,1).
inline double catmull_rom(double p0, double p1, double p2, double p3, double t) {
    return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t +
                  (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t);
}

// Bicubic-spline upsampling of the coarse displacement grid at pixel (x, y).
inline double sample_grid(const std::vector<double>& g, int rows, int cols, int spacing, double x,
                          double y) {
    const double gx = x / spacing;
    const double gy = y / spacing;
    const int ix = static_cast<int>(std::floor(gx));
    const int iy = static_cast<int>(std::floor(gy));
    const double tx = gx - ix;
    const double ty = gy - iy;
    auto at = [&](int r, int c) {
        r = std::clamp(r, 0, rows - 1);
        c = std::clamp(c, 0, cols - 1);
        return g[static_cast<std::size_t>(r) * cols + c];
    };
    std::array<double, 4> col;
    for (int k = -1; k <= 2; ++k)
        col[static_cast<std::size_t>(k + 1)] =
            catmull_rom(at(iy + k, ix - 1), at(iy + k, ix), at(iy + k, ix + 1), at(iy + k, ix + 2), tx);
    return catmull_rom(col[0], col[1], col[2], col[3], ty);
}

template <class T>
T bilinear_clamped(const T* img, int h, int w, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double v00 = img[static_cast<std::int64_t>(y0) * w + x0];
    const double v01 = img[static_cast<std::int64_t>(y0) * w + x1];
    const double v10 = img[static_cast<std::int64_t>(y1) * w + x0];
    const double v11 = img[static_cast<std::int64_t>(y1) * w + x1];
    return static_cast<T>((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
}

} // namespace detail

/// Draw the per-sample random transform. Each enabled transform triggers
/// with cfg.apply_prob; magnitudes are uniform in +-max. Draw order is fixed
/// so a seed fully determines the result.
inline AugmentParams augment_draw(const AugmentConfig& cfg, int h, int w, Rng& rng) {
    AugmentParams p;
    if (cfg.flip_h) p.flip_h = rng.uniform() < cfg.apply_prob;
    if (cfg.flip_v) p.flip_v = rng.uniform() < cfg.apply_prob;
    if (cfg.rotation_max > 0.0 && rng.uniform() < cfg.apply_prob)
        p.rotation_deg = rng.uniform(-cfg.rotation_max, cfg.rotation_max);
    if (cfg.shear_max > 0.0 && rng.uniform() < cfg.apply_prob) {
        p.shear = rng.uniform(-cfg.shear_max, cfg.shear_max);
        p.shear_y_axis = rng.coin();
    }
    if (cfg.warp) {
        if (cfg.warp_grid_spacing < 2) throw ConfigError("warp grid spacing must be >= 2");
        p.grid_spacing = cfg.warp_grid_spacing;
        p.grid_rows = (h - 1) / cfg.warp_grid_spacing + 2;
        p.grid_cols = (w - 1) / cfg.warp_grid_spacing + 2;
        const std::size_t n = static_cast<std::size_t>(p.grid_rows) * p.grid_cols;
        p.disp_y.resize(n);
        p.disp_x.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            p.disp_y[i] = rng.normal(0.0, cfg.warp_sigma);
            p.disp_x[i] = rng.normal(0.0, cfg.warp_sigma);
        }
    }
    if (cfg.crop_size > h || cfg.crop_size > w)
        throw Error("crop size exceeds the image extent");
    if (cfg.crop_size > 0 && (cfg.crop_size < h || cfg.crop_size < w)) {
        p.crop_size = cfg.crop_size;
        p.crop_row = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - cfg.crop_size + 1)));
        p.crop_col = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - cfg.crop_size + 1)));
    }
    return p;
}

/// Apply a resolved transform to an image/mask pair of shape [C,H,W].
/// One backward-warp resampling pass: src = affine(dst) + displacement(dst).
/// The image samples bilinearly with edge replication; the mask samples by
/// nearest neighbor and becomes void outside the source domain.
template <class T>
std::pair<Tensor<T>, Tensor<T>> augment_apply_params(const Tensor<T>& image, const Tensor<T>& mask,
                                                     const AugmentParams& p) {
    if (image.ndim() != 3 || mask.ndim() != 3)
        throw ShapeError("augment expects [C,H,W] image and mask");
    if (image.extent(1) != mask.extent(1) || image.extent(2) != mask.extent(2))
        throw ShapeError("augment: image and mask extents differ");
    const int C = image.extent(0);
    const int H = image.extent(1);
    const int W = image.extent(2);
    const int out_h = p.crop_size > 0 ? p.crop_size : H;
    const int out_w = p.crop_size > 0 ? p.crop_size : W;
    const auto aff = detail::affine_from_params(p, H, W);
    const bool identity_affine = !p.flip_h && !p.flip_v && p.rotation_deg == 0.0 && p.shear == 0.0;

    Tensor<T> out_img({C, out_h, out_w});
    Tensor<T> out_mask({mask.extent(0), out_h, out_w});
    T* oi = out_img.mutable_data();
    T* om = out_mask.mutable_data();
    const T* mi = mask.data();

    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const double dx = x + p.crop_col;
            const double dy = y + p.crop_row;
            double sx = dx, sy = dy;
            if (!identity_affine) {
                auto [ax, ay] = aff(dx, dy);
                sx = ax;
                sy = ay;
            }
            if (p.has_warp()) {
                sx += detail::sample_grid(p.disp_x, p.grid_rows, p.grid_cols, p.grid_spacing, dx, dy);
                sy += detail::sample_grid(p.disp_y, p.grid_rows, p.grid_cols, p.grid_spacing, dx, dy);
            }
            for (int c = 0; c < C; ++c)
                oi[(static_cast<std::int64_t>(c) * out_h + y) * out_w + x] =
                    detail::bilinear_clamped(image.data() + static_cast<std::int64_t>(c) * H * W, H,
                                             W, sx, sy);
            const int ny = static_cast<int>(std::lround(sy));
            const int nx = static_cast<int>(std::lround(sx));
            om[(static_cast<std::int64_t>(0) * out_h + y) * out_w + x] =
                (ny < 0 || ny >= H || nx < 0 || nx >= W)
                    ? static_cast<T>(kVoidLabel)
                    : mi[static_cast<std::int64_t>(ny) * W + nx];
        }
    }
    return {std::move(out_img), std::move(out_mask)};
}

/// Draw-and-apply. When cfg asks for foreground-containing crops, crop
/// origins are rejection-sampled (up to 100 tries) until the transformed
/// mask crop contains at least one foreground pixel.
template <class T>
std::pair<Tensor<T>, Tensor<T>> augment_apply(const Tensor<T>& image, const Tensor<T>& mask,
                                              const AugmentConfig& cfg, Rng& rng) {
    const int H = image.extent(1);
    const int W = image.extent(2);
    AugmentParams p = augment_draw(cfg, H, W, rng);
    if (cfg.crop_contains_foreground && p.crop_size > 0) {
        const auto aff = detail::affine_from_params(p, H, W);
        auto crop_has_fg = [&](const AugmentParams& q) {
            for (int y = 0; y < q.crop_size; ++y)
                for (int x = 0; x < q.crop_size; ++x) {
                    const double dx = x + q.crop_col;
                    const double dy = y + q.crop_row;
                    auto [sx, sy] = aff(dx, dy);
                    if (q.has_warp()) {
                        sx += detail::sample_grid(q.disp_x, q.grid_rows, q.grid_cols,
                                                  q.grid_spacing, dx, dy);
                        sy += detail::sample_grid(q.disp_y, q.grid_rows, q.grid_cols,
                                                  q.grid_spacing, dx, dy);
                    }
                    const int ny = static_cast<int>(std::lround(sy));
                    const int nx = static_cast<int>(std::lround(sx));
                    if (ny >= 0 && ny < H && nx >= 0 && nx < W &&
                        static_cast<int>(mask[static_cast<std::int64_t>(ny) * W + nx]) == 1)
                        return true;
                }
            return false;
        };
        for (int tries = 0; tries < 100 && !crop_has_fg(p); ++tries) {
            p.crop_row = static_cast<int>(rng.below(static_cast<std::uint64_t>(H - p.crop_size + 1)));
            p.crop_col = static_cast<int>(rng.below(static_cast<std::uint64_t>(W - p.crop_size + 1)));
        }
    }
    return augment_apply_params(image, mask, p);
}

/// Elastic deformation alone: Gaussian displacements on a coarse grid,
/// bicubic-upsampled to a dense field, applied as a backward warp.
template <class T>
std::pair<Tensor<T>, Tensor<T>> spline_warp(const Tensor<T>& image, const Tensor<T>& mask,
                                            int grid_spacing, double sigma, Rng& rng) {
    if (grid_spacing < 2) throw ConfigError("warp grid spacing must be >= 2");
    if (sigma < 0.0) throw ConfigError("warp sigma must be >= 0");
    AugmentConfig cfg;
    cfg.warp = true;
    cfg.warp_grid_spacing = grid_spacing;
    cfg.warp_sigma = sigma;
    cfg.apply_prob = 1.0;
    AugmentParams p = augment_draw(cfg, image.extent(1), image.extent(2), rng);
    return augment_apply_params(image, mask, p);
}

} // namespace segpipe

#endif
