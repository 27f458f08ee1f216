#pragma once

#include "polypflow/nn.hpp"

namespace pf {
namespace dct_detail {

// Orthonormal DCT-II matrix: row k is the k-th basis function sampled at
// half-integer grid points.
inline Tensor dct_matrix(int N) {
    Tensor C({N, N});
    const double pi = 3.14159265358979323846;
    for (int k = 0; k < N; ++k) {
        double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / N);
        for (int j = 0; j < N; ++j) C.at2(k, j) = scale * std::cos(pi * (2 * j + 1) * k / (2.0 * N));
    }
    return C;
}

// rows x cols matrix products for one channel plane held inside a larger tensor
inline void plane_transform(const Tensor& Ch, const Tensor& Cw, const double* in, double* out,
                            int H, int W, bool inverse) {
    // tmp = Ch (.T if inverse) * in
    std::vector<double> tmp(static_cast<std::size_t>(H) * W, 0.0);
    for (int i = 0; i < H; ++i)
        for (int k = 0; k < H; ++k) {
            const double c = inverse ? Ch.at2(k, i) : Ch.at2(i, k);
            if (c == 0.0) continue;
            for (int j = 0; j < W; ++j) tmp[i * W + j] += c * in[k * W + j];
        }
    // out = tmp * Cw^T (or tmp * Cw if inverse)
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double acc = 0.0;
            for (int k = 0; k < W; ++k)
                acc += tmp[i * W + k] * (inverse ? Cw.at2(k, j) : Cw.at2(j, k));
            out[i * W + j] = acc;
        }
}

inline Tensor transform_all(const Tensor& x, bool inverse) {
    if (x.ndim() != 3 && x.ndim() != 4)
        throw std::invalid_argument("dct2: expects CxHxW or NxCxHxW, got " + x.shape_str());
    const int H = x.dim(x.ndim() - 2), W = x.dim(x.ndim() - 1);
    const int planes = static_cast<int>(x.size()) / (H * W);
    Tensor Ch = dct_matrix(H);
    Tensor Cw = (W == H) ? Ch : dct_matrix(W);
    Tensor y(x.shape);
    for (int p = 0; p < planes; ++p)
        plane_transform(Ch, Cw, x.data.data() + static_cast<std::size_t>(p) * H * W,
                        y.data.data() + static_cast<std::size_t>(p) * H * W, H, W, inverse);
    return y;
}

}  // namespace dct_detail

// Per-channel full-frame orthonormal 2-D DCT-II.
inline Tensor dct2(const Tensor& x) { return dct_detail::transform_all(x, false); }
inline Tensor idct2(const Tensor& c) { return dct_detail::transform_all(c, true); }

// Differentiable version; the transform is orthonormal so the adjoint is the
// inverse transform.
inline Var dct2(const Var& x) {
    Tensor y = dct2(x.val());
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            Tensor gx = idct2(self->grad);
            for (std::size_t i = 0; i < gx.size(); ++i) xn->grad[i] += gx[i];
        };
    });
    return Var(node);
}

// Frequency-domain feature branch: per-channel DCT followed by a learnable 1x1
// projection from Cin to Cout channels.
class DctFeature {
public:
    Param w, b;

    DctFeature() = default;
    DctFeature(int cin, int cout, std::mt19937& rng, const std::string& prefix) {
        w.name = prefix + ".w";
        w.value = Tensor::randn({cout, cin, 1, 1}, rng, std::sqrt(2.0 / cin));
        b.name = prefix + ".b";
        b.value = Tensor::zeros({cout});
    }

    void register_params(ParamRegistry& reg) {
        reg.add(&w);
        reg.add(&b);
    }

    // x: [B,Cin,H,W] -> [B,Cout,H,W]
    Var forward(const Var& x) {
        Var coeffs = dct2(x);
        return conv2d(coeffs, use(w), use(b));
    }
};

inline Var dct_feature(const Var& x, DctFeature& proj) { return proj.forward(x); }

}  // namespace pf
