#pragma once

#include "polypflow/autograd.hpp"

namespace pf {

// Boundary weight map W = 1 + gain * |AvgPool_{k x k, stride 1, zero-pad}(g) - g|.
// g: [B,1,H,W] binary. The pool divisor is k*k including padded zeros.
inline Tensor boundary_weights(const Tensor& g, int window = 31, double gain = 5.0) {
    const int B = g.dim(0), H = g.dim(2), W = g.dim(3);
    const int r = window / 2;
    const double inv = 1.0 / (static_cast<double>(window) * window);
    Tensor out(g.shape);
    std::vector<double> integral(static_cast<std::size_t>(H + 1) * (W + 1));
    for (int n = 0; n < B; ++n) {
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                integral[(h + 1) * (W + 1) + (w + 1)] = g.at4(n, 0, h, w) +
                                                        integral[h * (W + 1) + (w + 1)] +
                                                        integral[(h + 1) * (W + 1) + w] -
                                                        integral[h * (W + 1) + w];
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const int h0 = std::max(0, h - r), h1 = std::min(H - 1, h + r);
                const int w0 = std::max(0, w - r), w1 = std::min(W - 1, w + r);
                double acc = integral[(h1 + 1) * (W + 1) + (w1 + 1)] -
                             integral[h0 * (W + 1) + (w1 + 1)] -
                             integral[(h1 + 1) * (W + 1) + w0] + integral[h0 * (W + 1) + w0];
                out.at4(n, 0, h, w) = 1.0 + gain * std::abs(acc * inv - g.at4(n, 0, h, w));
            }
    }
    return out;
}

namespace loss_detail {
constexpr double kProbClamp = 1e-7;
}

// Weighted binary cross entropy: sum(w * bce(p,g)) / sum(w), p clamped away
// from {0,1}. Gradient flows to p only.
inline Var weighted_bce(const Var& p, const Tensor& g, const Tensor& w) {
    if (!p.val().same_shape(g) || !p.val().same_shape(w))
        throw std::invalid_argument("weighted_bce: shape mismatch");
    const std::size_t n = p.val().size();
    double wsum = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) wsum += w[i];
    auto pc = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double pi = std::clamp(p.val()[i], loss_detail::kProbClamp, 1.0 - loss_detail::kProbClamp);
        (*pc)[i] = pi;
        acc += w[i] * (-g[i] * std::log(pi) - (1.0 - g[i]) * std::log(1.0 - pi));
    }
    Tensor y({1});
    y[0] = acc / wsum;
    auto pn = p.node;
    auto gt = std::make_shared<Tensor>(g);
    auto wt = std::make_shared<Tensor>(w);
    auto node = make_op(std::move(y), {p}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(pn);
            const double gscale = self->grad[0] / wsum;
            for (std::size_t i = 0; i < n; ++i) {
                const double pi = (*pc)[i];
                const double raw = pn->value[i];
                if (raw <= loss_detail::kProbClamp || raw >= 1.0 - loss_detail::kProbClamp)
                    continue;  // clamped region, zero slope
                pn->grad[i] += gscale * (*wt)[i] * (-(*gt)[i] / pi + (1.0 - (*gt)[i]) / (1.0 - pi));
            }
        };
    });
    return Var(node);
}

// Weighted soft IoU loss: 1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1).
inline Var weighted_iou(const Var& p, const Tensor& g, const Tensor& w) {
    if (!p.val().same_shape(g) || !p.val().same_shape(w))
        throw std::invalid_argument("weighted_iou: shape mismatch");
    const std::size_t n = p.val().size();
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pi = p.val()[i], gi = g[i];
        inter += w[i] * pi * gi;
        uni += w[i] * (pi + gi - pi * gi);
    }
    const double num = inter + 1.0, den = uni + 1.0;
    Tensor y({1});
    y[0] = 1.0 - num / den;
    auto pn = p.node;
    auto gt = std::make_shared<Tensor>(g);
    auto wt = std::make_shared<Tensor>(w);
    auto node = make_op(std::move(y), {p}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(pn);
            const double gs = self->grad[0];
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = (*gt)[i], wi = (*wt)[i];
                // d/dp of -(num/den), with dnum/dp = w g, dden/dp = w (1 - g)
                pn->grad[i] += gs * (-(wi * gi * den - num * wi * (1.0 - gi)) / (den * den));
            }
        };
    });
    return Var(node);
}

// L = L^w_IoU + L^w_BCE with shared boundary weights.
inline Var segmentation_loss(const Var& p, const Tensor& g, int window = 31, double gain = 5.0) {
    Tensor w = boundary_weights(g, window, gain);
    return add(weighted_iou(p, g, w), weighted_bce(p, g, w));
}

// Flow-matching regression: mean squared error between the predicted velocity
// and the linear-path target x1 - x0.
inline Var fm_regression_loss(const Var& v_pred, const Var& x0, const Var& x1) {
    return mean_sq(sub(v_pred, sub(x1, x0)));
}

inline Var fm_regression_loss(const Var& v_pred, const Tensor& x0, const Tensor& x1) {
    return fm_regression_loss(v_pred, constant(x0), constant(x1));
}

}  // namespace pf
