#ifndef SEGPIPE_LOSS_HPP
#define SEGPIPE_LOSS_HPP

#include <cmath>

#include "segpipe/autodiff.hpp"
#include "segpipe/tensor.hpp"

namespace segpipe {

/// Mask pixels with this label are excluded from every loss/metric sum.
constexpr int kVoidLabel = 255;

template <class T>
struct DiceLossResult {
    T loss;
    Tensor<T> grad;  // d loss / d prediction, zero at void pixels
};

/// Soft Dice loss over the whole batch:
///   L = -2 sum(o*y) / (sum(o) + sum(y) + smooth)
/// with sums running over non-void pixels only. The minimum -1 is attained
/// at perfect overlap (smooth = 0); an all-zero prediction scores 0.
template <class T>
DiceLossResult<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& mask, T smooth = T(0)) {
    if (!pred.same_shape(mask))
        throw ShapeError("dice_loss: prediction " + shape_str(pred.shape()) + " vs mask " +
                         shape_str(mask.shape()));
    double inter = 0, sum_o = 0, sum_y = 0;
    std::int64_t valid = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const int label = static_cast<int>(mask[i]);
        if (label == kVoidLabel) continue;
        ++valid;
        const double o = pred[i];
        const double y = label;
        inter += o * y;
        sum_o += o;
        sum_y += y;
    }
    if (valid == 0) throw Error("dice_loss: mask is entirely void");

    const double N = 2.0 * inter;
    const double D = sum_o + sum_y + static_cast<double>(smooth);
    const double loss = (D == 0.0) ? 0.0 : -N / D;

    Tensor<T> grad = Tensor<T>::zeros(pred.shape());
    T* gp = grad.mutable_data();
    if (D != 0.0) {
        const double inv_d2 = 1.0 / (D * D);
        for (std::int64_t i = 0; i < pred.numel(); ++i) {
            const int label = static_cast<int>(mask[i]);
            if (label == kVoidLabel) continue;
            gp[i] = static_cast<T>((N - 2.0 * label * D) * inv_d2);
        }
    }
    return {static_cast<T>(loss), std::move(grad)};
}

/// Dice loss as a graph node (scalar output) for training.
template <class T>
ValueRef dice_loss_node(Graph<T>& g, ValueRef pred, Tensor<T> mask, T smooth) {
    auto r = dice_loss(g.value(pred), mask, smooth);
    auto grad = std::make_shared<Tensor<T>>(std::move(r.grad));
    return g.make_node(Tensor<T>::scalar(r.loss), {pred.id}, [grad](Graph<T>& gr, int self) {
        const T dy = gr.node_grad(self)[0];
        gr.add_grad(gr.node_inputs(self)[0], mul(*grad, dy));
    });
}

/// Hard Dice overlap after thresholding, in [0, 1]. Void pixels excluded;
/// returns 1 when prediction and ground truth are both empty.
template <class T>
double dice_coefficient(const Tensor<T>& pred, const Tensor<T>& mask, double threshold = 0.5,
                        int foreground = 1) {
    if (!pred.same_shape(mask))
        throw ShapeError("dice_coefficient: shape mismatch");
    std::int64_t np = 0, ng = 0, inter = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const int label = static_cast<int>(mask[i]);
        if (label == kVoidLabel) continue;
        const bool p = foreground == 1 ? (static_cast<double>(pred[i]) >= threshold)
                                       : (static_cast<double>(pred[i]) < threshold);
        const bool t = label == foreground;
        np += p;
        ng += t;
        inter += (p && t);
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

} // namespace segpipe

#endif
