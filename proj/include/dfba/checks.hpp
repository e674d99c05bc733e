#pragma once

#include <cstdint>

#include "dfba/model.hpp"
#include "dfba/tensor.hpp"

namespace dfba {

struct GradCheck {
    /// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-2).
    double worst = 0.0;
    std::size_t checked = 0;
    /// Coordinates whose perturbation flips a ReLU or pooling decision.
    std::size_t skipped = 0;
};

/// Central differences of the cross-entropy, evaluated by a separate
/// double-precision forward pass, against backward() for one sample.
GradCheck gradient_check(const Model& model, const Tensor& x, std::size_t label, double h = 1e-3);

/// conv(2x3x3) -> ReLU -> conv(3x2x2) -> ReLU -> pool -> flatten -> dense(5) -> ReLU -> dense(3) on 1x8x8,
/// with nonzero biases.
Model random_check_net(std::uint64_t seed);

/// Checks the conv net above and a 7-6-5-4 MLP for every seed in [first, first + count).
GradCheck gradient_check_sweep(std::uint64_t first, std::size_t count);

struct GridCheck {
    std::size_t points = 0;
    std::size_t mismatches = 0;
    /// Grid points where the switch fires.
    std::size_t activating = 0;
};

/// Installs a switch on a random two-pixel neuron and compares the predicate
/// sum |w_n (x_n - delta_n)| < lambda with the neuron output on a steps x steps grid over [0,1]^2.
GridCheck switch_grid_check(std::uint64_t seed, float lambda = 0.1f, std::size_t steps = 101);

/// Counts grid points over [0,1]^e (points per axis) whose weighted sum beats the closed-form pattern.
GridCheck closed_form_grid_check(std::uint64_t seed, std::size_t e = 3, std::size_t points = 11);

} // namespace dfba
