#pragma once

#include "polypflow/checkpoint.hpp"
#include "polypflow/config.hpp"
#include "polypflow/losses.hpp"
#include "polypflow/metrics.hpp"
#include "polypflow/ode.hpp"
#include "polypflow/vector_field.hpp"

namespace pf {

// Coarse segmenter plus refinement field, built from one config.
class Model {
public:
    TrainConfig config;
    UNet backbone;
    VectorField field;
    ParamRegistry params;

    // The registry holds pointers into the module members, so a Model must
    // stay where it was constructed.
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    explicit Model(const TrainConfig& cfg) : config(cfg) {
        cfg.validate();
        std::mt19937 rng(cfg.seed);
        backbone = UNet(3, cfg.widths, rng, "backbone");
        field = VectorField(cfg.widths, cfg.attn_dim, cfg.token_stride, cfg.image_size, rng);
        field.toggle_components(cfg.use_attention, cfg.use_dct);
        backbone.register_params(params);
        field.register_params(params);
    }

    // Full refinement forward: coarse logits, then n Euler steps.
    Trajectory forward(const Tensor& image_batch, int n_steps, bool training) {
        Var x = constant(image_batch);
        FlowState s0 = initial_state(x, backbone, training);
        auto field_fn = [&](const Var& z, double t) {
            return field.eval_velocity(z, x, t, training);
        };
        return euler_integrate(field_fn, s0.z, n_steps);
    }
};

// AdamW with decoupled weight decay.
class AdamW {
public:
    double lr = 1e-4;
    double weight_decay = 1e-2;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t step_count = 0;

    AdamW(double lr_, double wd) : lr(lr_), weight_decay(wd) {}

    void step(ParamRegistry& params) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (Param* p : params.items) {
            if (!p->trainable || p->frozen) continue;
            if (p->grad.shape.empty()) continue;
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                double g = p->grad[i];
                p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
                p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
                const double mhat = p->adam_m[i] / bc1;
                const double vhat = p->adam_v[i] / bc2;
                p->value[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value[i]);
            }
        }
    }
};

struct StepLog {
    std::uint64_t step = 0;
    int epoch = 0;
    double loss_seg = 0.0;
    double loss_fm = 0.0;
    double probe_mdice = -1.0;  // -1 when not measured this step
};

struct TrainResult {
    std::vector<StepLog> log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    bool aborted_nan = false;
};

// One optimizer step over a batch; returns (seg loss, fm loss).
inline std::pair<double, double> train_step(Model& model, AdamW& opt, const Tensor& images,
                                            const Tensor& masks, std::mt19937& rng) {
    const TrainConfig& cfg = model.config;
    model.params.zero_grads();

    Var x = constant(images);
    FlowState s0 = initial_state(x, model.backbone, /*training=*/true);
    auto field_fn = [&](const Var& z, double t) {
        return model.field.eval_velocity(z, x, t, /*training=*/true);
    };

    double seg_val = 0.0;
    Var total;
    if (!cfg.detach_trajectory) {
        Trajectory traj = euler_integrate(field_fn, s0.z, cfg.n_steps);
        Var p = sigmoid(traj.final_state().z);
        Var seg = segmentation_loss(p, masks, cfg.weight_window, cfg.weight_gain);
        seg_val = seg.val()[0];
        total = seg;
    } else {
        // log-only segmentation loss on a detached rollout
        NoGradGuard ng;
        Var z0d = constant(s0.z.val());
        Trajectory traj = euler_integrate(
            [&](const Var& z, double t) {
                return model.field.eval_velocity(z, constant(images), t, /*training=*/true);
            },
            z0d, cfg.n_steps);
        seg_val = segmentation_loss(sigmoid(traj.final_state().z), masks, cfg.weight_window,
                                    cfg.weight_gain)
                      .val()[0];
    }

    // flow-matching regression at one sampled t with the linear path between
    // z0 and the clamped logit target
    double fm_val = 0.0;
    if (cfg.lambda_fm > 0.0 || cfg.detach_trajectory) {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double t = unif(rng);
        Tensor target(masks.shape);
        for (std::size_t i = 0; i < masks.size(); ++i)
            target[i] = logit_scalar(std::clamp(masks[i], 0.05, 0.95));
        Var tgt = constant(target);
        Var xt = add_weighted(s0.z, tgt, 1.0 - t, t);
        Var v_pred = model.field.eval_velocity(xt, x, t, /*training=*/true);
        Var fm = fm_regression_loss(v_pred, s0.z, tgt);
        fm_val = fm.val()[0];
        const double lam = cfg.detach_trajectory ? std::max(cfg.lambda_fm, 1.0) : cfg.lambda_fm;
        total = total.defined() ? add(total, mul_scalar(fm, lam)) : mul_scalar(fm, lam);
    }

    if (!std::isfinite(seg_val) || !std::isfinite(fm_val))
        throw std::runtime_error("train_step: non-finite loss");
    backward(total);
    opt.step(model.params);
    if (!model.params.all_finite())
        throw std::runtime_error("train_step: non-finite parameter after optimizer step");
    return {seg_val, fm_val};
}

inline double probe_mdice(Model& model, const std::vector<std::pair<Tensor, Tensor>>& probe,
                          int n_steps) {
    NoGradGuard ng;
    double acc = 0.0;
    for (const auto& [img, mask] : probe) {
        Tensor batch({1, 3, img.dim(1), img.dim(2)});
        batch.data = img.data;
        Trajectory traj = model.forward(batch, n_steps, /*training=*/false);
        Tensor pred = final_mask(traj);
        Tensor p2({mask.dim(1), mask.dim(2)}), g2({mask.dim(1), mask.dim(2)});
        p2.data = pred.data;
        g2.data = mask.data;
        acc += metrics::dice(p2, g2);
    }
    return probe.empty() ? 0.0 : acc / static_cast<double>(probe.size());
}

// In-memory training loop over preloaded (image, mask) pairs. Dataset-backed
// training in the CLI assembles the same pair list through the data pipeline.
// A NaN loss aborts, keeping the last finished checkpoint on disk.
inline TrainResult train(Model& model, const std::vector<std::pair<Tensor, Tensor>>& samples,
                         int total_steps, const std::string& ckpt_dir = "",
                         std::ostream* log_csv = nullptr, int probe_every = 0) {
    if (samples.empty()) throw std::invalid_argument("train: empty sample list");
    const TrainConfig& cfg = model.config;
    AdamW opt(cfg.lr, cfg.weight_decay);
    std::mt19937 rng(cfg.seed + 1);

    const int S = cfg.image_size;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<std::pair<Tensor, Tensor>> probe(
        samples.begin(), samples.begin() + std::min<std::size_t>(samples.size(), 8));

    TrainResult res;
    if (log_csv) *log_csv << "step,epoch,loss_seg,loss_fm,probe_mdice\n";
    std::size_t cursor = order.size();  // force initial shuffle
    int epoch = 0;
    for (int step = 0; step < total_steps; ++step) {
        const int B = std::min<int>(cfg.batch_size, static_cast<int>(samples.size()));
        Tensor images({B, 3, S, S}), masks({B, 1, S, S});
        for (int b = 0; b < B; ++b) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
                if (step > 0) {
                    ++epoch;
                    if (!ckpt_dir.empty())
                        checkpoint::save(ckpt_dir + "/epoch_" + std::to_string(epoch) + ".ckpt",
                                         model.params, cfg, epoch, opt.step_count);
                }
            }
            const auto& [img, mask] = samples[order[cursor++]];
            std::copy(img.data.begin(), img.data.end(), images.data.begin() + b * img.size());
            std::copy(mask.data.begin(), mask.data.end(), masks.data.begin() + b * mask.size());
        }
        double seg, fm;
        try {
            std::tie(seg, fm) = train_step(model, opt, images, masks, rng);
        } catch (const std::runtime_error&) {
            res.aborted_nan = true;
            break;
        }
        StepLog entry{static_cast<std::uint64_t>(step + 1), epoch, seg, fm, -1.0};
        if (probe_every > 0 && (step + 1) % probe_every == 0)
            entry.probe_mdice = probe_mdice(model, probe, cfg.n_steps);
        if (step == 0) res.initial_loss = seg + cfg.lambda_fm * fm;
        res.final_loss = seg + cfg.lambda_fm * fm;
        res.log.push_back(entry);
        if (log_csv) {
            *log_csv << entry.step << "," << entry.epoch << "," << entry.loss_seg << ","
                     << entry.loss_fm << "," << entry.probe_mdice << "\n";
        }
    }
    if (!ckpt_dir.empty() && !res.aborted_nan)
        checkpoint::save(ckpt_dir + "/final.ckpt", model.params, cfg, epoch, opt.step_count);
    return res;
}

// Inference on one preprocessed image tensor [3,S,S].
inline std::pair<Tensor, Trajectory> infer(Model& model, const Tensor& image, int n_steps) {
    NoGradGuard ng;
    Tensor batch({1, 3, image.dim(1), image.dim(2)});
    batch.data = image.data;
    Trajectory traj = model.forward(batch, n_steps, /*training=*/false);
    return {final_mask(traj), std::move(traj)};
}

// ---------------------------------------------------------------------------
// Ablation harness

struct AblationRow {
    std::string setting;
    double mdice = 0.0;
    double miou = 0.0;
};

inline AblationRow evaluate_configuration(Model& model, const std::string& name,
                                          const std::vector<std::pair<Tensor, Tensor>>& eval_set,
                                          int n_steps) {
    NoGradGuard ng;
    AblationRow row{name, 0.0, 0.0};
    for (const auto& [img, mask] : eval_set) {
        Tensor batch({1, 3, img.dim(1), img.dim(2)});
        batch.data = img.data;
        Trajectory traj = model.forward(batch, n_steps, /*training=*/false);
        Tensor pred = final_mask(traj);
        Tensor p2({mask.dim(1), mask.dim(2)}), g2({mask.dim(1), mask.dim(2)});
        p2.data = pred.data;
        g2.data = mask.data;
        row.mdice += metrics::dice(p2, g2);
        row.miou += metrics::iou(p2, g2);
    }
    if (!eval_set.empty()) {
        row.mdice /= static_cast<double>(eval_set.size());
        row.miou /= static_cast<double>(eval_set.size());
    }
    return row;
}

// Component grid (the four attention/DCT combinations) and step-count grid.
// Toggles are restored afterwards.
inline std::vector<AblationRow> ablate_components(
    Model& model, const std::vector<std::pair<Tensor, Tensor>>& eval_set, int n_steps,
    const std::vector<std::pair<bool, bool>>& grid) {
    const bool attn0 = model.field.use_attention, dct0 = model.field.use_dct;
    std::vector<AblationRow> rows;
    for (auto [sa, dct] : grid) {
        std::string name = sa && dct   ? "SA+DCT+Backbone"
                           : sa        ? "SA+Backbone"
                           : dct       ? "DCT+Backbone"
                                       : "Backbone";
        model.field.toggle_components(sa, dct);
        rows.push_back(evaluate_configuration(model, name, eval_set, n_steps));
    }
    model.field.toggle_components(attn0, dct0);
    return rows;
}

inline std::vector<AblationRow> ablate_steps(Model& model,
                                             const std::vector<std::pair<Tensor, Tensor>>& eval_set,
                                             const std::vector<int>& step_counts) {
    std::vector<AblationRow> rows;
    for (int n : step_counts)
        rows.push_back(
            evaluate_configuration(model, "N=" + std::to_string(n), eval_set, n));
    return rows;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckRow {
    std::string group;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Compares analytic gradients of a scalar-producing forward against central
// finite differences, sampling up to `samples` entries per parameter.
inline std::vector<GradCheckRow> grad_check(ParamRegistry& params,
                                            const std::function<double()>& scalar_fn,
                                            const std::function<Var()>& graph_fn,
                                            double tolerance, double fd_eps = 1e-3,
                                            int samples = 4, unsigned seed = 7) {
    params.zero_grads();
    backward(graph_fn());
    const double f0 = scalar_fn();

    std::mt19937 rng(seed);
    std::vector<GradCheckRow> rows;
    for (Param* p : params.items) {
        if (!p->trainable) continue;
        GradCheckRow row{p->name, 0.0, false};
        if (p->frozen) {
            row.max_rel_err = p->grad.shape.empty() ? 0.0 : p->grad.max_abs();
            row.pass = row.max_rel_err == 0.0;
            rows.push_back(row);
            continue;
        }
        const int n = static_cast<int>(p->value.size());
        const int k = std::min(samples, n);
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        for (int s = 0; s < k; ++s) {
            const int i = idx[s];
            const double orig = p->value[i];
            p->value[i] = orig + fd_eps;
            const double up = scalar_fn();
            p->value[i] = orig - fd_eps;
            const double down = scalar_fn();
            p->value[i] = orig;
            // One-sided consistency: at a ReLU / max-pool kink (zero-initialized
            // biases make exact zeros reachable) the forward and backward
            // quotients disagree by the slope jump and the central quotient is
            // not a derivative estimate, so such samples are skipped.
            const double dplus = (up - f0) / fd_eps;
            const double dminus = (f0 - down) / fd_eps;
            if (std::abs(dplus - dminus) >
                0.5 * tolerance * std::max(1e-6, std::abs(dplus) + std::abs(dminus)))
                continue;
            const double numeric = (up - down) / (2.0 * fd_eps);
            const double analytic = p->grad.shape.empty() ? 0.0 : p->grad[i];
            const double denom = std::max(1e-6, std::abs(numeric) + std::abs(analytic));
            row.max_rel_err = std::max(row.max_rel_err, std::abs(numeric - analytic) / denom);
        }
        row.pass = row.max_rel_err < tolerance;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace pf
