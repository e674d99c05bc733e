#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dfba/tensor.hpp"

namespace dfba {

class Rng;

/// Raised for malformed models, shape mismatches and invalid references.
class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fully connected layer; weight is out_dim x in_dim, row-major.
struct Dense {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::vector<float> weight;
    std::vector<float> bias;

    float& w(std::size_t out, std::size_t in) { return weight[out * in_dim + in]; }
    float w(std::size_t out, std::size_t in) const { return weight[out * in_dim + in]; }
};

/// Valid (unpadded) stride-1 convolution; weight is out x in x kh x kw.
struct Conv2D {
    std::size_t out_channels = 0;
    std::size_t in_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::vector<float> weight;
    std::vector<float> bias;

    std::size_t filter_size() const { return in_channels * kernel_h * kernel_w; }
    float& w(std::size_t oc, std::size_t ic, std::size_t i, std::size_t j)
    {
        return weight[((oc * in_channels + ic) * kernel_h + i) * kernel_w + j];
    }
    float w(std::size_t oc, std::size_t ic, std::size_t i, std::size_t j) const
    {
        return weight[((oc * in_channels + ic) * kernel_h + i) * kernel_w + j];
    }
};

struct ReLU {};
/// 2x2 window, stride 2, floor semantics on odd extents.
struct MaxPool2D {};
struct Flatten {};

using Layer = std::variant<Dense, Conv2D, ReLU, MaxPool2D, Flatten>;

bool is_parametric(const Layer& layer);
std::string layer_kind(const Layer& layer);
/// Output shape of `layer` for a single-sample input shape; throws ModelError.
Shape layer_output_shape(const Layer& layer, const Shape& input);

enum class Provenance { clean, backdoored, pruned, defended };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct ModelInfo {
    std::string name;
    std::uint64_t seed = 0;
    Provenance provenance = Provenance::clean;
    /// Free-form key/value annotations (trigger, path, attack parameters).
    std::map<std::string, std::string> extra;

    friend bool operator==(const ModelInfo&, const ModelInfo&) = default;
};

struct Model {
    std::vector<Layer> layers;
    std::size_t num_classes = 0;
    Shape input_shape;
    ModelInfo info;

    /// Per-layer single-sample output shapes; throws if adjacent layers do not compose.
    std::vector<Shape> output_shapes() const;
    /// Checks parameter buffer sizes, shape composition and the C-way output.
    void validate() const;
    /// Indices into `layers` of Dense/Conv2D layers, in order.
    std::vector<std::size_t> parametric_layers() const;
    std::size_t parameter_count() const;

    Dense& dense(std::size_t layer_index);
    const Dense& dense(std::size_t layer_index) const;
    Conv2D& conv(std::size_t layer_index);
    const Conv2D& conv(std::size_t layer_index) const;
};

bool operator==(const Dense& a, const Dense& b);
bool operator==(const Conv2D& a, const Conv2D& b);
inline bool operator==(const ReLU&, const ReLU&) { return true; }
inline bool operator==(const MaxPool2D&, const MaxPool2D&) { return true; }
inline bool operator==(const Flatten&, const Flatten&) { return true; }
/// Parameter equality is bitwise.
bool operator==(const Model& a, const Model& b);

struct Site {
    std::size_t row = 0;
    std::size_t col = 0;
    friend bool operator==(const Site&, const Site&) = default;
};

/// A neuron of a parametric layer: a dense output unit, or a conv filter with
/// an optional spatial site in its output map.
struct NeuronRef {
    std::size_t layer = 0;
    std::size_t unit = 0;
    std::optional<Site> site;
    friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
};

/// Throws ModelError unless `ref` names an in-bounds unit of a parametric layer.
void check_ref(const Model& model, const NeuronRef& ref);

/// Number of units (dense outputs or conv filters) of a parametric layer.
std::size_t unit_count(const Model& model, std::size_t layer_index);

// Builders. Weights use He-uniform initialisation, biases start at zero.
Dense make_dense(std::size_t in, std::size_t out, Rng& rng);
Conv2D make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw, Rng& rng);

/// 784 -> hidden -> classes with ReLU.
Model make_fcn(std::size_t input_dim, std::size_t hidden, std::size_t classes, std::uint64_t seed);
/// Same, preceded by Flatten so it reads CxHxW images directly.
Model make_fcn(const Shape& image_shape, std::size_t hidden, std::size_t classes, std::uint64_t seed);
/// Arbitrary-depth ReLU MLP over a flat input; dims = {in, h1, ..., classes}.
Model make_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed);
/// conv16x5x5 -> ReLU -> conv32x5x5 -> ReLU -> maxpool2 -> flatten -> dense(dense_units) -> ReLU -> dense(classes).
Model make_small_cnn(const Shape& input_shape, std::size_t classes, std::uint64_t seed,
                     std::size_t conv1 = 16, std::size_t conv2 = 32, std::size_t kernel = 5,
                     std::size_t dense_units = 1024);

} // namespace dfba
