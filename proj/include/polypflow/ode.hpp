#pragma once

#include "polypflow/unet.hpp"

namespace pf {

struct FlowState {
    Var z;       // [B,1,H,W], logit domain
    double t = 0.0;
};

struct Trajectory {
    std::vector<FlowState> states;      // N+1 entries at t_n = n/N
    std::vector<Var> velocities;        // N entries

    const FlowState& final_state() const { return states.back(); }
    int n_steps() const { return static_cast<int>(velocities.size()); }
};

// Fixed-step Euler integration of dz/dt = field(z, t) over [0,1].
// field is called with (state, t_n); every intermediate state is retained.
inline Trajectory euler_integrate(const std::function<Var(const Var&, double)>& field,
                                  const Var& z0, int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("euler_integrate: n_steps >= 1 required");
    if (!z0.val().all_finite())
        throw std::invalid_argument("euler_integrate: non-finite initial state");
    const double dt = 1.0 / n_steps;
    Trajectory traj;
    traj.states.push_back({z0, 0.0});
    for (int n = 0; n < n_steps; ++n) {
        const double t = static_cast<double>(n) / n_steps;
        Var v = field(traj.states.back().z, t);
        Var next = add(traj.states.back().z, mul_scalar(v, dt));
        if (!next.val().all_finite())
            throw std::runtime_error("euler_integrate: non-finite state at step " +
                                     std::to_string(n + 1));
        traj.velocities.push_back(v);
        traj.states.push_back({next, static_cast<double>(n + 1) / n_steps});
    }
    return traj;
}

// Data-dependent prior: the coarse backbone logits at t = 0. Optional Gaussian
// perturbation is off by default.
inline FlowState initial_state(const Var& image, UNet& backbone, bool training = false,
                               double noise_std = 0.0, std::mt19937* rng = nullptr) {
    Var z0 = backbone.forward(image, training);
    if (noise_std > 0.0 && rng) {
        Tensor noise = Tensor::randn(z0.val().shape, *rng, noise_std);
        z0 = add(z0, constant(std::move(noise)));
    }
    return {z0, 0.0};
}

// Final binary mask: sigmoid of the last state thresholded at 0.5, ties to
// background.
inline Tensor final_mask(const Trajectory& traj) {
    Tensor prob = sigmoid_tensor(traj.final_state().z.val());
    Tensor out(prob.shape);
    for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] > 0.5 ? 1.0 : 0.0;
    return out;
}

}  // namespace pf
