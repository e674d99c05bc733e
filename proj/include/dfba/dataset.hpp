#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfba/tensor.hpp"

namespace dfba {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-feature value range [lower_n, upper_n].
struct FeatureBounds {
    std::vector<float> lower;
    std::vector<float> upper;

    static FeatureBounds uniform(std::size_t features, float lo = 0.0f, float hi = 1.0f);
    std::size_t size() const { return lower.size(); }
    bool contains(std::span<const float> x) const;
};

/// N images of shape CxHxW (row-major, contiguous) with class labels.
struct Dataset {
    std::string name;
    Shape image_shape;
    std::size_t num_classes = 0;
    std::vector<float> images;
    std::vector<std::size_t> labels;
    FeatureBounds bounds;

    std::size_t size() const { return labels.size(); }
    std::size_t features() const { return shape_size(image_shape); }
    std::span<const float> image(std::size_t i) const;
    std::span<float> image(std::size_t i);

    /// Samples [begin, end) as a batch tensor {n} + image_shape.
    Tensor batch(std::size_t begin, std::size_t end) const;
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;

    Dataset subset(std::span<const std::size_t> indices) const;
    /// Throws DataError if pixels leave their bounds or labels exceed num_classes.
    void validate() const;
};

/// Reads an IDX image file (magic 0x00000803, unsigned bytes) and label file
/// (0x00000801). Pixels are scaled from [0,255] to [0,1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes = 10);

/// Writes the dataset in IDX form, quantising pixels to round(255 * x).
/// Single-channel images only.
void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

/// Deterministic synthetic benchmark: each class is a fixed arrangement of
/// Gaussian blobs and one stroke inside a central box, jittered per sample and
/// clipped to [0,1]. The border (including every corner) stays exactly zero,
/// as in MNIST.
Dataset synth_dataset(std::size_t num_classes, std::size_t per_class, const Shape& image_shape, std::uint64_t seed);

/// Train/test pair sharing class prototypes (seeded by `seed`) but drawing
/// disjoint samples.
struct DataSplit {
    Dataset train;
    Dataset test;
};
DataSplit synth_split(std::size_t num_classes, std::size_t train_per_class, std::size_t test_per_class,
                      const Shape& image_shape, std::uint64_t seed);

} // namespace dfba
