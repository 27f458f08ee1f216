#pragma once

#include "polypflow/autograd.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pf {

// 2-D convolution, NCHW. w: [Co,Ci,kh,kw], b: [Co].
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = 0) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.ndim() != 4 || wv.ndim() != 4)
        throw std::invalid_argument("conv2d: expects 4-d input and weight");
    const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != Ci)
        throw std::invalid_argument("conv2d: channel mismatch, input " + xv.shape_str() +
                                    " vs weight " + wv.shape_str());
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: kernel larger than input");

    Tensor y({B, Co, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < B; ++n)
        for (int co = 0; co < Co; ++co) {
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = b.val()[co];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int i = 0; i < kh; ++i) {
                            const int ih = oh * stride - pad + i;
                            if (ih < 0 || ih >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int iw = ow * stride - pad + j;
                                if (iw < 0 || iw >= W) continue;
                                acc += xv.at4(n, ci, ih, iw) * wv.at4(co, ci, i, j);
                            }
                        }
                    y.at4(n, co, oh, ow) = acc;
                }
        }

    auto xn = x.node, wn = w.node, bn = b.node;
    auto node = make_op(std::move(y), {x, w, b}, [=](Node* self) {
        self->backfn = [=]() {
            const Tensor& g = self->grad;
            const int Ho2 = self->value.dim(2), Wo2 = self->value.dim(3);
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int n = 0; n < B; ++n)
                        for (int oh = 0; oh < Ho2; ++oh)
                            for (int ow = 0; ow < Wo2; ++ow) acc += g.at4(n, co, oh, ow);
                    bn->grad[co] += acc;
                }
            }
            if (wn->needs_grad) {
                ensure_grad(wn);
#pragma omp parallel for collapse(2) schedule(static)
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                double acc = 0.0;
                                for (int n = 0; n < B; ++n)
                                    for (int oh = 0; oh < Ho2; ++oh) {
                                        const int ih = oh * stride - pad + i;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int ow = 0; ow < Wo2; ++ow) {
                                            const int iw = ow * stride - pad + j;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += xn->value.at4(n, ci, ih, iw) * g.at4(n, co, oh, ow);
                                        }
                                    }
                                wn->grad.at4(co, ci, i, j) += acc;
                            }
            }
            if (xn->needs_grad) {
                ensure_grad(xn);
#pragma omp parallel for collapse(2) schedule(static)
                for (int n = 0; n < B; ++n)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ih = 0; ih < H; ++ih)
                            for (int iw = 0; iw < W; ++iw) {
                                double acc = 0.0;
                                for (int co = 0; co < Co; ++co)
                                    for (int i = 0; i < kh; ++i) {
                                        const int num = ih + pad - i;
                                        if (num % stride != 0) continue;
                                        const int oh = num / stride;
                                        if (oh < 0 || oh >= Ho2) continue;
                                        for (int j = 0; j < kw; ++j) {
                                            const int numw = iw + pad - j;
                                            if (numw % stride != 0) continue;
                                            const int ow = numw / stride;
                                            if (ow < 0 || ow >= Wo2) continue;
                                            acc += wn->value.at4(co, ci, i, j) * g.at4(n, co, oh, ow);
                                        }
                                    }
                                xn->grad.at4(n, ci, ih, iw) += acc;
                            }
            }
        };
    });
    return Var(node);
}

// 2x2 stride-2 transposed convolution (exact 2x upsampling). w: [Ci,Co,2,2].
inline Var conv_transpose2x2(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(1);
    if (wv.dim(0) != Ci || wv.dim(2) != 2 || wv.dim(3) != 2)
        throw std::invalid_argument("conv_transpose2x2: bad weight shape " + wv.shape_str());
    Tensor y({B, Co, H * 2, W * 2});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < B; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < 2 * H; ++oh)
                for (int ow = 0; ow < 2 * W; ++ow) {
                    double acc = b.val()[co];
                    const int ih = oh >> 1, iw = ow >> 1, ki = oh & 1, kj = ow & 1;
                    for (int ci = 0; ci < Ci; ++ci)
                        acc += xv.at4(n, ci, ih, iw) * wv.at4(ci, co, ki, kj);
                    y.at4(n, co, oh, ow) = acc;
                }
    auto xn = x.node, wn = w.node, bn = b.node;
    auto node = make_op(std::move(y), {x, w, b}, [=](Node* self) {
        self->backfn = [=]() {
            const Tensor& g = self->grad;
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int n = 0; n < B; ++n)
                        for (int oh = 0; oh < 2 * H; ++oh)
                            for (int ow = 0; ow < 2 * W; ++ow) acc += g.at4(n, co, oh, ow);
                    bn->grad[co] += acc;
                }
            }
            if (wn->needs_grad) {
                ensure_grad(wn);
                for (int ci = 0; ci < Ci; ++ci)
                    for (int co = 0; co < Co; ++co)
                        for (int ki = 0; ki < 2; ++ki)
                            for (int kj = 0; kj < 2; ++kj) {
                                double acc = 0.0;
                                for (int n = 0; n < B; ++n)
                                    for (int ih = 0; ih < H; ++ih)
                                        for (int iw = 0; iw < W; ++iw)
                                            acc += xn->value.at4(n, ci, ih, iw) *
                                                   g.at4(n, co, 2 * ih + ki, 2 * iw + kj);
                                wn->grad.at4(ci, co, ki, kj) += acc;
                            }
            }
            if (xn->needs_grad) {
                ensure_grad(xn);
#pragma omp parallel for collapse(2) schedule(static)
                for (int n = 0; n < B; ++n)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ih = 0; ih < H; ++ih)
                            for (int iw = 0; iw < W; ++iw) {
                                double acc = 0.0;
                                for (int co = 0; co < Co; ++co)
                                    for (int ki = 0; ki < 2; ++ki)
                                        for (int kj = 0; kj < 2; ++kj)
                                            acc += wn->value.at4(ci, co, ki, kj) *
                                                   g.at4(n, co, 2 * ih + ki, 2 * iw + kj);
                                xn->grad.at4(n, ci, ih, iw) += acc;
                            }
            }
        };
    });
    return Var(node);
}

// 2x2 stride-2 max pooling.
inline Var maxpool2x2(const Var& x) {
    const Tensor& xv = x.val();
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 || W % 2) throw std::invalid_argument("maxpool2x2: odd spatial size " + xv.shape_str());
    Tensor y({B, C, H / 2, W / 2});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < H / 2; ++oh)
                for (int ow = 0; ow < W / 2; ++ow) {
                    double best = -1e300;
                    int bi = 0, bj = 0;
                    for (int i = 0; i < 2; ++i)
                        for (int j = 0; j < 2; ++j) {
                            double v = xv.at4(n, c, 2 * oh + i, 2 * ow + j);
                            if (v > best) {
                                best = v;
                                bi = 2 * oh + i;
                                bj = 2 * ow + j;
                            }
                        }
                    y.at4(n, c, oh, ow) = best;
                    (*argmax)[((static_cast<std::size_t>(n) * C + c) * (H / 2) + oh) * (W / 2) + ow] =
                        static_cast<std::uint32_t>(bi * W + bj);
                }
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            const int Ho = H / 2, Wo = W / 2;
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow) {
                            std::uint32_t idx =
                                (*argmax)[((static_cast<std::size_t>(n) * C + c) * Ho + oh) * Wo + ow];
                            xn->grad.at4(n, c, idx / W, idx % W) += self->grad.at4(n, c, oh, ow);
                        }
        };
    });
    return Var(node);
}

// Batch normalization over (N,H,W) per channel. gamma/beta: [C].
// In training mode batch statistics are used and running stats are updated in
// place; in eval mode running stats are used.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                      Tensor& running_var, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
    const Tensor& xv = x.val();
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const double cnt = static_cast<double>(B) * H * W;

    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto var = std::make_shared<std::vector<double>>(C, 0.0);
    if (training) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < B; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double v = xv.at4(n, c, h, w);
                        s += v;
                        s2 += v * v;
                    }
            (*mean)[c] = s / cnt;
            (*var)[c] = s2 / cnt - (*mean)[c] * (*mean)[c];
            if ((*var)[c] < 0) (*var)[c] = 0;
            running_mean[c] = (1 - momentum) * running_mean[c] + momentum * (*mean)[c];
            // unbiased variance for the running estimate
            double unbiased = cnt > 1 ? (*var)[c] * cnt / (cnt - 1) : (*var)[c];
            running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[c] = running_mean[c];
            (*var)[c] = running_var[c];
        }
    }

    Tensor y(xv.shape);
    auto xhat = std::make_shared<Tensor>(xv.shape);
    for (int c = 0; c < C; ++c) {
        const double inv_std = 1.0 / std::sqrt((*var)[c] + eps);
        const double g = gamma.val()[c], b = beta.val()[c], m = (*mean)[c];
        for (int n = 0; n < B; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double xh = (xv.at4(n, c, h, w) - m) * inv_std;
                    xhat->at4(n, c, h, w) = xh;
                    y.at4(n, c, h, w) = g * xh + b;
                }
    }

    auto xn = x.node, gn = gamma.node, bn = beta.node;
    auto node = make_op(std::move(y), {x, gamma, beta}, [=](Node* self) {
        self->backfn = [=]() {
            const Tensor& g = self->grad;
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int n = 0; n < B; ++n)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            sum_dy += g.at4(n, c, h, w);
                            sum_dy_xhat += g.at4(n, c, h, w) * xhat->at4(n, c, h, w);
                        }
                if (gn->needs_grad) {
                    ensure_grad(gn);
                    gn->grad[c] += sum_dy_xhat;
                }
                if (bn->needs_grad) {
                    ensure_grad(bn);
                    bn->grad[c] += sum_dy;
                }
                if (xn->needs_grad) {
                    ensure_grad(xn);
                    const double inv_std = 1.0 / std::sqrt((*var)[c] + eps);
                    const double gam = gn->value[c];
                    if (training) {
                        const double mdy = sum_dy / cnt, mdyx = sum_dy_xhat / cnt;
                        for (int n = 0; n < B; ++n)
                            for (int h = 0; h < H; ++h)
                                for (int w = 0; w < W; ++w)
                                    xn->grad.at4(n, c, h, w) +=
                                        gam * inv_std *
                                        (g.at4(n, c, h, w) - mdy - xhat->at4(n, c, h, w) * mdyx);
                    } else {
                        for (int n = 0; n < B; ++n)
                            for (int h = 0; h < H; ++h)
                                for (int w = 0; w < W; ++w)
                                    xn->grad.at4(n, c, h, w) += gam * inv_std * g.at4(n, c, h, w);
                    }
                }
            }
        };
    });
    return Var(node);
}

inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
    const int B = xs[0].val().dim(0), H = xs[0].val().dim(2), W = xs[0].val().dim(3);
    int Ctot = 0;
    for (const auto& x : xs) {
        if (x.val().dim(0) != B || x.val().dim(2) != H || x.val().dim(3) != W)
            throw std::invalid_argument("concat_channels: shape mismatch " + x.val().shape_str() +
                                        " vs " + xs[0].val().shape_str());
        Ctot += x.val().dim(1);
    }
    Tensor y({B, Ctot, H, W});
    int off = 0;
    for (const auto& x : xs) {
        const int C = x.val().dim(1);
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) y.at4(n, off + c, h, w) = x.val().at4(n, c, h, w);
        off += C;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& x : xs) nodes.push_back(x.node);
    auto node = make_op(std::move(y), xs, [=](Node* self) {
        self->backfn = [=]() {
            int off2 = 0;
            for (const auto& xn : nodes) {
                const int C = xn->value.dim(1);
                if (xn->needs_grad) {
                    ensure_grad(xn);
                    for (int n = 0; n < B; ++n)
                        for (int c = 0; c < C; ++c)
                            for (int h = 0; h < H; ++h)
                                for (int w = 0; w < W; ++w)
                                    xn->grad.at4(n, c, h, w) += self->grad.at4(n, off2 + c, h, w);
                }
                off2 += C;
            }
        };
    });
    return Var(node);
}

inline Var slice_batch(const Var& x, int n) {
    const Tensor& xv = x.val();
    const int C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y({1, C, H, W});
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) y.at4(0, c, h, w) = xv.at4(n, c, h, w);
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        xn->grad.at4(n, c, h, w) += self->grad.at4(0, c, h, w);
        };
    });
    return Var(node);
}

inline Var stack_batch(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack_batch: empty input");
    const int C = xs[0].val().dim(1), H = xs[0].val().dim(2), W = xs[0].val().dim(3);
    Tensor y({static_cast<int>(xs.size()), C, H, W});
    for (std::size_t n = 0; n < xs.size(); ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    y.at4(static_cast<int>(n), c, h, w) = xs[n].val().at4(0, c, h, w);
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& x : xs) nodes.push_back(x.node);
    auto node = make_op(std::move(y), xs, [=](Node* self) {
        self->backfn = [=]() {
            for (std::size_t n = 0; n < nodes.size(); ++n)
                if (nodes[n]->needs_grad) {
                    ensure_grad(nodes[n]);
                    for (int c = 0; c < C; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w)
                                nodes[n]->grad.at4(0, c, h, w) +=
                                    self->grad.at4(static_cast<int>(n), c, h, w);
                }
        };
    });
    return Var(node);
}

// Repeats a [1,C,H,W] map across the batch dimension.
inline Var repeat_batch(const Var& x, int B) {
    const Tensor& xv = x.val();
    const int C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y({B, C, H, W});
    for (int n = 0; n < B; ++n)
        for (std::size_t i = 0; i < xv.size(); ++i) y.data[n * xv.size() + i] = xv[i];
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            const std::size_t sz = xn->value.size();
            for (int n = 0; n < B; ++n)
                for (std::size_t i = 0; i < sz; ++i) xn->grad[i] += self->grad.data[n * sz + i];
        };
    });
    return Var(node);
}

// y[n,c,h,w] = x[n,c,h,w] * gate[n,0,h,w]
inline Var mul_gate(const Var& x, const Var& gate) {
    const Tensor& xv = x.val();
    const Tensor& gv = gate.val();
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (gv.dim(0) != B || gv.dim(1) != 1 || gv.dim(2) != H || gv.dim(3) != W)
        throw std::invalid_argument("mul_gate: gate shape " + gv.shape_str() + " vs input " +
                                    xv.shape_str());
    Tensor y(xv.shape);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    y.at4(n, c, h, w) = xv.at4(n, c, h, w) * gv.at4(n, 0, h, w);
    auto xn = x.node, gn = gate.node;
    auto node = make_op(std::move(y), {x, gate}, [=](Node* self) {
        self->backfn = [=]() {
            if (xn->needs_grad) {
                ensure_grad(xn);
                for (int n = 0; n < B; ++n)
                    for (int c = 0; c < C; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w)
                                xn->grad.at4(n, c, h, w) +=
                                    self->grad.at4(n, c, h, w) * gn->value.at4(n, 0, h, w);
            }
            if (gn->needs_grad) {
                ensure_grad(gn);
                for (int n = 0; n < B; ++n)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            double acc = 0.0;
                            for (int c = 0; c < C; ++c)
                                acc += self->grad.at4(n, c, h, w) * xn->value.at4(n, c, h, w);
                            gn->grad.at4(n, 0, h, w) += acc;
                        }
            }
        };
    });
    return Var(node);
}

// Nearest-neighbor upsampling by an integer factor.
inline Var upsample_nearest(const Var& x, int factor) {
    const Tensor& xv = x.val();
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y({B, C, H * factor, W * factor});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H * factor; ++h)
                for (int w = 0; w < W * factor; ++w)
                    y.at4(n, c, h, w) = xv.at4(n, c, h / factor, w / factor);
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H * factor; ++h)
                        for (int w = 0; w < W * factor; ++w)
                            xn->grad.at4(n, c, h / factor, w / factor) += self->grad.at4(n, c, h, w);
        };
    });
    return Var(node);
}

// Bilinear resize (half-pixel centers), differentiable. Identity when sizes match.
inline Var bilinear_resize(const Var& x, int Ho, int Wo) {
    const Tensor& xv = x.val();
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H == Ho && W == Wo) return x;

    struct Lerp {
        int i0, i1;
        double w0, w1;
    };
    auto axis = [](int in, int out) {
        std::vector<Lerp> m(out);
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
            if (src < 0) src = 0;
            if (src > in - 1) src = in - 1;
            int i0 = static_cast<int>(std::floor(src));
            int i1 = std::min(i0 + 1, in - 1);
            double f = src - i0;
            m[o] = {i0, i1, 1.0 - f, f};
        }
        return m;
    };
    auto my = std::make_shared<std::vector<Lerp>>(axis(H, Ho));
    auto mx = std::make_shared<std::vector<Lerp>>(axis(W, Wo));

    Tensor y({B, C, Ho, Wo});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh) {
                const Lerp& ly = (*my)[oh];
                for (int ow = 0; ow < Wo; ++ow) {
                    const Lerp& lx = (*mx)[ow];
                    y.at4(n, c, oh, ow) = ly.w0 * (lx.w0 * xv.at4(n, c, ly.i0, lx.i0) +
                                                   lx.w1 * xv.at4(n, c, ly.i0, lx.i1)) +
                                          ly.w1 * (lx.w0 * xv.at4(n, c, ly.i1, lx.i0) +
                                                   lx.w1 * xv.at4(n, c, ly.i1, lx.i1));
                }
            }
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int oh = 0; oh < Ho; ++oh) {
                        const Lerp& ly = (*my)[oh];
                        for (int ow = 0; ow < Wo; ++ow) {
                            const Lerp& lx = (*mx)[ow];
                            double g = self->grad.at4(n, c, oh, ow);
                            xn->grad.at4(n, c, ly.i0, lx.i0) += g * ly.w0 * lx.w0;
                            xn->grad.at4(n, c, ly.i0, lx.i1) += g * ly.w0 * lx.w1;
                            xn->grad.at4(n, c, ly.i1, lx.i0) += g * ly.w1 * lx.w0;
                            xn->grad.at4(n, c, ly.i1, lx.i1) += g * ly.w1 * lx.w1;
                        }
                    }
        };
    });
    return Var(node);
}

// [1,C,Ht,Wt] feature map -> [T,C] token matrix, T = Ht*Wt, row-major tokens.
inline Var chw_to_tokens(const Var& x) {
    const Tensor& xv = x.val();
    const int C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y({H * W, C});
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            for (int c = 0; c < C; ++c) y.at2(h * W + w, c) = xv.at4(0, c, h, w);
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    for (int c = 0; c < C; ++c)
                        xn->grad.at4(0, c, h, w) += self->grad.at2(h * W + w, c);
        };
    });
    return Var(node);
}

// [T] token vector -> [1,1,Ht,Wt] map (inverse spatial layout of chw_to_tokens)
inline Var tokens_to_map(const Var& x, int Ht, int Wt) {
    const Tensor& xv = x.val();
    if (static_cast<int>(xv.size()) != Ht * Wt)
        throw std::invalid_argument("tokens_to_map: token count mismatch");
    Tensor y({1, 1, Ht, Wt});
    for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = xv[i];
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self->grad.data[i];
        };
    });
    return Var(node);
}

// 2-D matrix product, optionally transposing b.
inline Var matmul(const Var& a, const Var& b, bool trans_b = false) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    const int M = av.dim(0), K = av.dim(1);
    const int N = trans_b ? bv.dim(0) : bv.dim(1);
    const int Kb = trans_b ? bv.dim(1) : bv.dim(0);
    if (K != Kb) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor y({M, N});
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += av.at2(i, k) * (trans_b ? bv.at2(j, k) : bv.at2(k, j));
            y.at2(i, j) = acc;
        }
    auto an = a.node, bn = b.node;
    auto node = make_op(std::move(y), {a, b}, [=](Node* self) {
        self->backfn = [=]() {
            const Tensor& g = self->grad;
            if (an->needs_grad) {
                ensure_grad(an);
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        double acc = 0.0;
                        for (int j = 0; j < N; ++j)
                            acc += g.at2(i, j) * (trans_b ? bn->value.at2(j, k) : bn->value.at2(k, j));
                        an->grad.at2(i, k) += acc;
                    }
            }
            if (bn->needs_grad) {
                ensure_grad(bn);
                if (trans_b) {
                    for (int j = 0; j < N; ++j)
                        for (int k = 0; k < K; ++k) {
                            double acc = 0.0;
                            for (int i = 0; i < M; ++i) acc += g.at2(i, j) * an->value.at2(i, k);
                            bn->grad.at2(j, k) += acc;
                        }
                } else {
                    for (int k = 0; k < K; ++k)
                        for (int j = 0; j < N; ++j) {
                            double acc = 0.0;
                            for (int i = 0; i < M; ++i) acc += g.at2(i, j) * an->value.at2(i, k);
                            bn->grad.at2(k, j) += acc;
                        }
                }
            }
        };
    });
    return Var(node);
}

// Row-wise softmax of a [M,N] matrix, numerically stabilized.
inline Var softmax_rows(const Var& x) {
    const Tensor& xv = x.val();
    const int M = xv.dim(0), N = xv.dim(1);
    Tensor y(xv.shape);
    for (int i = 0; i < M; ++i) {
        double mx = -1e300;
        for (int j = 0; j < N; ++j) mx = std::max(mx, xv.at2(i, j));
        double z = 0.0;
        for (int j = 0; j < N; ++j) z += std::exp(xv.at2(i, j) - mx);
        for (int j = 0; j < N; ++j) y.at2(i, j) = std::exp(xv.at2(i, j) - mx) / z;
    }
    auto xn = x.node;
    auto node = make_op(std::move(y), {x}, [=](Node* self) {
        self->backfn = [=]() {
            ensure_grad(xn);
            for (int i = 0; i < M; ++i) {
                double dot = 0.0;
                for (int j = 0; j < N; ++j) dot += self->grad.at2(i, j) * self->value.at2(i, j);
                for (int j = 0; j < N; ++j)
                    xn->grad.at2(i, j) += self->value.at2(i, j) * (self->grad.at2(i, j) - dot);
            }
        };
    });
    return Var(node);
}

// [T,d] x [d] + b -> [T]
inline Var linear_vec(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.val();
    const int T = xv.dim(0), d = xv.dim(1);
    if (w.val().dim(0) != d) throw std::invalid_argument("linear_vec: weight size mismatch");
    Tensor y({T});
    for (int i = 0; i < T; ++i) {
        double acc = b.val()[0];
        for (int j = 0; j < d; ++j) acc += xv.at2(i, j) * w.val()[j];
        y[i] = acc;
    }
    auto xn = x.node, wn = w.node, bn = b.node;
    auto node = make_op(std::move(y), {x, w, b}, [=](Node* self) {
        self->backfn = [=]() {
            const Tensor& g = self->grad;
            if (bn->needs_grad) {
                ensure_grad(bn);
                for (int i = 0; i < T; ++i) bn->grad[0] += g[i];
            }
            if (wn->needs_grad) {
                ensure_grad(wn);
                for (int j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < T; ++i) acc += g[i] * xn->value.at2(i, j);
                    wn->grad[j] += acc;
                }
            }
            if (xn->needs_grad) {
                ensure_grad(xn);
                for (int i = 0; i < T; ++i)
                    for (int j = 0; j < d; ++j) xn->grad.at2(i, j) += g[i] * wn->value[j];
            }
        };
    });
    return Var(node);
}

}  // namespace pf
