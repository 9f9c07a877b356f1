#ifndef SEGPIPE_POSTPROCESS_HPP
#define SEGPIPE_POSTPROCESS_HPP

#include <vector>

#include "segpipe/tensor.hpp"

namespace segpipe {

/// Binarize a [D,H,W] probability volume at `threshold` and keep only the
/// largest connected component (6- or 26-connectivity; with D=1 these reduce
/// to 4- and 8-connectivity in the plane). Ties go to the component whose
/// first voxel appears earliest in scan order. An empty thresholded volume
/// stays empty.
template <class T>
Tensor<T> largest_component(const Tensor<T>& volume, double threshold, int connectivity) {
    if (volume.ndim() != 3) throw ShapeError("largest_component expects a [D,H,W] volume");
    if (threshold <= 0.0 || threshold >= 1.0) throw Error("threshold must lie in (0, 1)");
    if (connectivity != 6 && connectivity != 26)
        throw Error("connectivity must be 6 or 26");
    const int D = volume.extent(0), H = volume.extent(1), W = volume.extent(2);
    const std::int64_t n = volume.numel();

    std::vector<std::int32_t> label(static_cast<std::size_t>(n), -1);
    auto fg = [&](std::int64_t i) { return static_cast<double>(volume[i]) >= threshold; };

    std::vector<std::array<int, 3>> offsets;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dz == 0 && dy == 0 && dx == 0) continue;
                const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (connectivity == 6 && manhattan != 1) continue;
                offsets.push_back({dz, dy, dx});
            }

    std::int32_t next = 0;
    std::int64_t best_size = 0;
    std::int32_t best_label = -1;
    std::vector<std::int64_t> stack;
    for (std::int64_t seed = 0; seed < n; ++seed) {
        if (!fg(seed) || label[static_cast<std::size_t>(seed)] >= 0) continue;
        const std::int32_t id = next++;
        std::int64_t count = 0;
        stack.assign(1, seed);
        label[static_cast<std::size_t>(seed)] = id;
        while (!stack.empty()) {
            const std::int64_t cur = stack.back();
            stack.pop_back();
            ++count;
            const int z = static_cast<int>(cur / (static_cast<std::int64_t>(H) * W));
            const int rem = static_cast<int>(cur % (static_cast<std::int64_t>(H) * W));
            const int y = rem / W;
            const int x = rem % W;
            for (const auto& [dz, dy, dx] : offsets) {
                const int nz = z + dz, ny = y + dy, nx = x + dx;
                if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                const std::int64_t ni = (static_cast<std::int64_t>(nz) * H + ny) * W + nx;
                if (!fg(ni) || label[static_cast<std::size_t>(ni)] >= 0) continue;
                label[static_cast<std::size_t>(ni)] = id;
                stack.push_back(ni);
            }
        }
        if (count > best_size) {  // strict: ties keep the earlier label
            best_size = count;
            best_label = id;
        }
    }

    Tensor<T> out = Tensor<T>::zeros(volume.shape());
    if (best_label >= 0) {
        T* o = out.mutable_data();
        for (std::int64_t i = 0; i < n; ++i)
            if (label[static_cast<std::size_t>(i)] == best_label) o[i] = T(1);
    }
    return out;
}

} // namespace segpipe

#endif
