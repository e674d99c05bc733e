#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dfba/model.hpp"
#include "dfba/tensor.hpp"

namespace dfba {

/// Output of a forward pass. `activations[i]` is the output of `layers[i]`
/// (so a Dense output is pre-ReLU and the following ReLU entry is post-ReLU).
struct ForwardResult {
    Tensor logits;
    std::vector<Tensor> activations;
};

/// Accepts a single sample (shape == model.input_shape) or a batch
/// ({N} + input_shape). Logits are {C} or {N, C} accordingly.
ForwardResult forward(const Model& model, const Tensor& input, bool record = false);

/// Output of layers[last_layer] only, skipping everything after it.
Tensor forward_to(const Model& model, const Tensor& input, std::size_t last_layer);

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const float> values);

/// Predicted classes for a batch (or a single sample).
std::vector<std::size_t> predict(const Model& model, const Tensor& input);

struct LayerGrad {
    std::vector<float> weight;
    std::vector<float> bias;
};

struct Gradients {
    /// One entry per layer; empty vectors for non-parametric layers.
    std::vector<LayerGrad> layers;
    /// Same shape as the input passed to backward.
    Tensor input_grad;
    /// Mean softmax cross-entropy over the batch.
    double loss = 0.0;
};

/// Softmax cross-entropy gradients, averaged over the batch.
Gradients backward(const Model& model, const Tensor& input, std::span<const std::size_t> labels);
Gradients backward(const Model& model, const Tensor& input, std::size_t label);

/// Mean softmax cross-entropy without gradients.
double loss(const Model& model, const Tensor& input, std::span<const std::size_t> labels);

/// Where a unit's output is consumed by the next parametric layer.
struct Fanout {
    std::size_t layer = 0;
    /// Dense consumer: columns reading the unit. Empty for a conv consumer.
    std::vector<std::size_t> columns;
    /// Conv consumer: the input channel reading the unit.
    std::optional<std::size_t> channel;
};

/// Returns nullopt for units of the output layer.
std::optional<Fanout> fanout(const Model& model, std::size_t layer_index, std::size_t unit);

/// Zeroes each referenced unit: incoming weights, bias and every outgoing
/// weight in the next parametric layer. Shapes are unchanged.
void prune_neurons_in_place(Model& model, std::span<const NeuronRef> refs);
Model prune_neurons(const Model& model, std::span<const NeuronRef> refs);

/// Boolean masks over every parameter, one entry per layer (empty for
/// non-parametric layers).
struct ParamSlots {
    std::vector<std::vector<std::uint8_t>> weight;
    std::vector<std::vector<std::uint8_t>> bias;

    static ParamSlots empty_for(const Model& model);
    std::size_t count() const;
};

/// Parameters owned by or reading from the given units: incoming weights,
/// bias, and outgoing weights in the next parametric layer.
ParamSlots neuron_parameters(const Model& model, std::span<const NeuronRef> refs);

/// Per-unit L2 norm of the flattened incoming weights of a Dense/Conv2D layer.
struct LipschitzStats {
    std::vector<double> constants;
    double mean = 0.0;
    double stddev = 0.0;
};

LipschitzStats lipschitz_stats(const Model& model, std::size_t layer_index);

} // namespace dfba
