#pragma once

#include <cstdint>
#include <span>

#include "dfba/trigger.hpp"

namespace dfba {

/// (2 lambda)^e / (alpha^e e!), unclipped.
double activation_bound(double lambda, double alpha, std::size_t e);

struct McResult {
    std::size_t samples = 0;
    std::size_t activations = 0;
    double frequency = 0.0;
    /// min(bound, 1)
    double bound = 0.0;
    double raw_bound = 0.0;
    /// sqrt(p (1 - p) / n) at p = frequency
    double std_error = 0.0;
};

/// Draws inputs uniformly from the trigger bounds on Gamma(m) and counts how
/// often the switch predicate fires. The result does not depend on `workers`.
McResult monte_carlo_activation(const TriggerSpec& trigger, float lambda, std::span<const float> w, double alpha,
                                std::size_t samples, std::uint64_t seed, unsigned workers = 1);

} // namespace dfba
