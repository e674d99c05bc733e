#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dfba/dataset.hpp"

namespace dfba {

struct Rect {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    friend bool operator==(const Rect&, const Rect&) = default;
};

/// Rectangle placements used by the ablations: "bottom-right", "top-left",
/// "top-right", "bottom-left", "center".
Rect place_rect(const Shape& image_shape, std::size_t height, std::size_t width, const std::string& placement);

/// Binary mask m, pattern delta and the support set Gamma(m) = {n : m_n = 1}.
/// The rectangle covers every channel.
struct TriggerSpec {
    Shape image_shape;
    std::vector<std::uint8_t> mask;
    std::vector<float> pattern;
    std::vector<std::size_t> support;
    Rect geometry;
    std::string placement;
    FeatureBounds bounds;

    /// Checks mask/support agreement and that the pattern lies within bounds on the support.
    void validate() const;
};

/// Rectangular trigger with the pattern at the lower bound until optimised.
TriggerSpec make_trigger(const Shape& image_shape, const Rect& rect, std::string placement,
                         FeatureBounds bounds = {});

/// x' = x * (1 - m) + delta * m
std::vector<float> apply_trigger(std::span<const float> x, const TriggerSpec& t);
void apply_trigger_in_place(std::span<float> x, const TriggerSpec& t);
Dataset apply_trigger(const Dataset& data, const TriggerSpec& t);

} // namespace dfba
