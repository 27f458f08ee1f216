#pragma once

#include "polypflow/nn.hpp"

namespace pf {

struct AttentionMaps {
    Var q, k, v;  // each [T,d]
};

// Spatial self-attention gate: Q/K/V come from the feature map through 7x7
// convolutions with a token stride, and the attended output is projected to a
// sigmoid-bounded per-pixel weight map.
class SelfAttention {
public:
    int head_dim = 64;
    int token_stride = 8;
    int kernel = 7;
    Param wq, bq, wk, bk, wv, bv;  // conv kernels [d,F,7,7]
    Param out_w, out_b;            // d -> 1 projection

    SelfAttention() = default;
    SelfAttention(int cin, int d, int stride, std::mt19937& rng, const std::string& prefix)
        : head_dim(d), token_stride(stride) {
        auto mk = [&](Param& p, const std::string& n, std::vector<int> s, double std) {
            p.name = prefix + "." + n;
            p.value = Tensor::randn(std::move(s), rng, std);
        };
        const double ws = std::sqrt(2.0 / (cin * kernel * kernel));
        mk(wq, "q.w", {d, cin, kernel, kernel}, ws);
        mk(wk, "k.w", {d, cin, kernel, kernel}, ws);
        mk(wv, "v.w", {d, cin, kernel, kernel}, ws);
        bq.name = prefix + ".q.b";
        bq.value = Tensor::zeros({d});
        bk.name = prefix + ".k.b";
        bk.value = Tensor::zeros({d});
        bv.name = prefix + ".v.b";
        bv.value = Tensor::zeros({d});
        mk(out_w, "out.w", {d}, std::sqrt(1.0 / d));
        out_b.name = prefix + ".out.b";
        out_b.value = Tensor::zeros({1});
    }

    void register_params(ParamRegistry& reg) {
        for (Param* p : {&wq, &bq, &wk, &bk, &wv, &bv, &out_w, &out_b}) reg.add(p);
    }

    // f: [1,F,H,W] -> Q,K,V each [T,d], T = (H/s)*(W/s)
    AttentionMaps qkv_project(const Var& f) {
        const Tensor& fv = f.val();
        const int H = fv.dim(2), W = fv.dim(3);
        if (H % token_stride != 0 || W % token_stride != 0)
            throw std::invalid_argument("qkv_project: spatial size " + fv.shape_str() +
                                        " not divisible by token stride");
        AttentionMaps m;
        m.q = chw_to_tokens(conv2d(f, use(wq), use(bq), token_stride));
        m.k = chw_to_tokens(conv2d(f, use(wk), use(bk), token_stride));
        m.v = chw_to_tokens(conv2d(f, use(wv), use(bv), token_stride));
        return m;
    }

    // Softmax(Q K^T / sqrt(d)) V
    static Var self_attention(const Var& q, const Var& k, const Var& v) {
        const int d = q.val().dim(1);
        Var scores = mul_scalar(matmul(q, k, /*trans_b=*/true), 1.0 / std::sqrt(double(d)));
        return matmul(softmax_rows(scores), v);
    }

    // [T,d] attention output -> bounded weight map broadcastable over the
    // gated operand: project to one value per token, sigmoid, nearest-neighbor
    // upsample back to H x W.
    Var weights_to_map(const Var& att_out, int H, int W) {
        const int Ht = H / token_stride, Wt = W / token_stride;
        Var tokens = linear_vec(att_out, use(out_w), use(out_b));
        Var map = tokens_to_map(sigmoid(tokens), Ht, Wt);
        return upsample_nearest(map, token_stride);
    }

    // full gate for one sample: [1,F,H,W] -> [1,1,H,W] weights in (0,1)
    Var gate(const Var& f) {
        AttentionMaps m = qkv_project(f);
        Var att = self_attention(m.q, m.k, m.v);
        return weights_to_map(att, f.val().dim(2), f.val().dim(3));
    }
};

}  // namespace pf
