#pragma once

#include <array>

#include "polypflow/nn.hpp"

namespace pf {

// 3x3 conv + BN + ReLU
struct ConvBnRelu {
    Param w, b, gamma, beta, run_mean, run_var;

    ConvBnRelu() = default;
    ConvBnRelu(int cin, int cout, std::mt19937& rng, const std::string& prefix) {
        w.name = prefix + ".w";
        w.value = Tensor::randn({cout, cin, 3, 3}, rng, std::sqrt(2.0 / (cin * 9.0)));
        b.name = prefix + ".b";
        b.value = Tensor::zeros({cout});
        gamma.name = prefix + ".gamma";
        gamma.value = Tensor::full({cout}, 1.0);
        beta.name = prefix + ".beta";
        beta.value = Tensor::zeros({cout});
        run_mean.name = prefix + ".run_mean";
        run_mean.value = Tensor::zeros({cout});
        run_mean.trainable = false;
        run_var.name = prefix + ".run_var";
        run_var.value = Tensor::full({cout}, 1.0);
        run_var.trainable = false;
    }

    void register_params(ParamRegistry& reg) {
        reg.add(&w);
        reg.add(&b);
        reg.add(&gamma);
        reg.add(&beta);
        reg.add(&run_mean);
        reg.add(&run_var);
    }

    Var forward(const Var& x, bool training, double bn_momentum = 0.1) {
        Var c = conv2d(x, use(w), use(b), /*stride=*/1, /*pad=*/1);
        Var n = batch_norm(c, use(gamma), use(beta), run_mean.value, run_var.value, training,
                           bn_momentum);
        return relu(n);
    }
};

// two ConvBnRelu layers
struct ConvBlock {
    ConvBnRelu a, c;

    ConvBlock() = default;
    ConvBlock(int cin, int cout, std::mt19937& rng, const std::string& prefix)
        : a(cin, cout, rng, prefix + ".conv1"), c(cout, cout, rng, prefix + ".conv2") {}

    void register_params(ParamRegistry& reg) {
        a.register_params(reg);
        c.register_params(reg);
    }

    Var forward(const Var& x, bool training) {
        return c.forward(a.forward(x, training), training);
    }
};

struct UpConv {
    Param w, b;

    UpConv() = default;
    UpConv(int cin, int cout, std::mt19937& rng, const std::string& prefix) {
        w.name = prefix + ".w";
        w.value = Tensor::randn({cin, cout, 2, 2}, rng, std::sqrt(2.0 / (cin * 4.0)));
        b.name = prefix + ".b";
        b.value = Tensor::zeros({cout});
    }

    void register_params(ParamRegistry& reg) {
        reg.add(&w);
        reg.add(&b);
    }

    Var forward(const Var& x) { return conv_transpose2x2(x, use(w), use(b)); }
};

struct EncoderFeatures {
    Var e1, e2, e3, e4;  // strides 1, 2, 4, 8
};

struct DecoderFeatures {
    Var d3, d2, d1;  // d1 at full resolution
};

// Four-level encoder-decoder with skip connections and a 1x1 output head.
class UNet {
public:
    std::array<int, 4> widths;
    int cin = 3;
    ConvBlock enc1, enc2, enc3, enc4;
    UpConv up3, up2, up1;
    ConvBlock dec3, dec2, dec1;
    Param head_w, head_b;

    UNet() = default;
    UNet(int cin_, std::array<int, 4> w, std::mt19937& rng, const std::string& prefix)
        : widths(w),
          cin(cin_),
          enc1(cin_, w[0], rng, prefix + ".enc1"),
          enc2(w[0], w[1], rng, prefix + ".enc2"),
          enc3(w[1], w[2], rng, prefix + ".enc3"),
          enc4(w[2], w[3], rng, prefix + ".enc4"),
          up3(w[3], w[2], rng, prefix + ".dec3.up"),
          up2(w[2], w[1], rng, prefix + ".dec2.up"),
          up1(w[1], w[0], rng, prefix + ".dec1.up"),
          dec3(2 * w[2], w[2], rng, prefix + ".dec3"),
          dec2(2 * w[1], w[1], rng, prefix + ".dec2"),
          dec1(2 * w[0], w[0], rng, prefix + ".dec1") {
        head_w.name = prefix + ".head.w";
        head_w.value = Tensor::randn({1, w[0], 1, 1}, rng, std::sqrt(2.0 / w[0]));
        head_b.name = prefix + ".head.b";
        head_b.value = Tensor::zeros({1});
    }

    void register_params(ParamRegistry& reg) {
        enc1.register_params(reg);
        enc2.register_params(reg);
        enc3.register_params(reg);
        enc4.register_params(reg);
        up3.register_params(reg);
        up2.register_params(reg);
        up1.register_params(reg);
        dec3.register_params(reg);
        dec2.register_params(reg);
        dec1.register_params(reg);
        reg.add(&head_w);
        reg.add(&head_b);
    }

    EncoderFeatures encode(const Var& x, bool training) {
        const Tensor& xv = x.val();
        if (xv.dim(2) % 8 != 0 || xv.dim(3) % 8 != 0)
            throw std::invalid_argument("unet: spatial size must be divisible by 8, got " +
                                        xv.shape_str());
        EncoderFeatures f;
        f.e1 = enc1.forward(x, training);
        f.e2 = enc2.forward(maxpool2x2(f.e1), training);
        f.e3 = enc3.forward(maxpool2x2(f.e2), training);
        f.e4 = enc4.forward(maxpool2x2(f.e3), training);
        return f;
    }

    DecoderFeatures decode(const EncoderFeatures& f, bool training) {
        DecoderFeatures d;
        d.d3 = dec3.forward(concat_channels({up3.forward(f.e4), f.e3}), training);
        d.d2 = dec2.forward(concat_channels({up2.forward(d.d3), f.e2}), training);
        d.d1 = dec1.forward(concat_channels({up1.forward(d.d2), f.e1}), training);
        return d;
    }

    Var head(const Var& d1) { return conv2d(d1, use(head_w), use(head_b)); }

    // full forward to single-channel logits
    Var forward(const Var& x, bool training) {
        EncoderFeatures f = encode(x, training);
        DecoderFeatures d = decode(f, training);
        return head(d.d1);
    }
};

}  // namespace pf
