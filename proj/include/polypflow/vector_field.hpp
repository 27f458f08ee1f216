#pragma once

#include "polypflow/attention.hpp"
#include "polypflow/dct.hpp"
#include "polypflow/unet.hpp"

namespace pf {

// Learned velocity for the refinement ODE:
//   v = A  (.)  ( UNet(z (+) x (+) m (+) t) + proj(DCT(x)) )
// where A is the sigmoid-bounded self-attention weight map derived from the
// U-Net branch output, and m is a shared learnable mask resized to the input.
class VectorField {
public:
    UNet trunk;            // 6 input channels: z(1) + image(3) + mask(1) + time(1)
    DctFeature dct_proj;   // 3 -> 1 channels, coefficient domain
    SelfAttention attn;    // gate from the 1-channel U-Net branch output
    Param mask;            // [1,1,S,S]
    bool use_attention = true;
    bool use_dct = true;

    VectorField() = default;
    VectorField(std::array<int, 4> widths, int attn_dim, int token_stride, int mask_size,
                std::mt19937& rng)
        : trunk(6, widths, rng, "field.trunk"),
          dct_proj(3, 1, rng, "field.dctproj"),
          attn(1, attn_dim, token_stride, rng, "field.attn") {
        mask.name = "field.mask";
        mask.value = Tensor::zeros({1, 1, mask_size, mask_size});
    }

    void register_params(ParamRegistry& reg) {
        trunk.register_params(reg);
        dct_proj.register_params(reg);
        attn.register_params(reg);
        reg.add(&mask);
    }

    void toggle_components(bool attention_on, bool dct_on) {
        use_attention = attention_on;
        use_dct = dct_on;
    }

    // z: [B,1,H,W] (logit-domain state), x: [B,3,H,W], t in [0,1]
    Var eval_velocity(const Var& z, const Var& x, double t, bool training) {
        const Tensor& zv = z.val();
        const int B = zv.dim(0), H = zv.dim(2), W = zv.dim(3);
        if (zv.dim(1) != 1)
            throw std::invalid_argument("eval_velocity: state must be single-channel, got " +
                                        zv.shape_str());
        if (x.val().dim(0) != B || x.val().dim(1) != 3 || x.val().dim(2) != H ||
            x.val().dim(3) != W)
            throw std::invalid_argument("eval_velocity: image shape " + x.val().shape_str() +
                                        " does not match state " + zv.shape_str());
        if (H % 8 != 0 || W % 8 != 0 || H % attn.token_stride != 0 || W % attn.token_stride != 0)
            throw std::invalid_argument("eval_velocity: spatial size must be divisible by 8 and "
                                        "by the token stride");

        Var m = repeat_batch(bilinear_resize(use(mask), H, W), B);
        Var tchan = constant(Tensor::full({B, 1, H, W}, t));
        Var trunk_out = trunk.forward(concat_channels({z, x, m, tchan}), training);

        Var branch_sum = use_dct ? add(trunk_out, dct_proj.forward(x)) : trunk_out;
        if (!use_attention) return branch_sum;

        std::vector<Var> gates;
        gates.reserve(B);
        for (int n = 0; n < B; ++n) gates.push_back(attn.gate(slice_batch(trunk_out, n)));
        return mul_gate(branch_sum, stack_batch(gates));
    }

    Var eval_velocity(const Var& z, const Tensor& x, double t, bool training) {
        return eval_velocity(z, constant(x), t, training);
    }
};

}  // namespace pf
