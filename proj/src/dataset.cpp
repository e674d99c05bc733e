#include <algorithm>

#include "dfba/dataset.hpp"

namespace dfba {

FeatureBounds FeatureBounds::uniform(std::size_t features, float lo, float hi)
{
    return {std::vector<float>(features, lo), std::vector<float>(features, hi)};
}

bool FeatureBounds::contains(std::span<const float> x) const
{
    if (x.size() != lower.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!(x[i] >= lower[i] && x[i] <= upper[i])) return false;
    return true;
}

std::span<const float> Dataset::image(std::size_t i) const
{
    const std::size_t f = features();
    return std::span<const float>(images).subspan(i * f, f);
}

std::span<float> Dataset::image(std::size_t i)
{
    const std::size_t f = features();
    return std::span<float>(images).subspan(i * f, f);
}

Tensor Dataset::batch(std::size_t begin, std::size_t end) const
{
    if (begin > end || end > size()) throw DataError("batch range out of bounds");
    const std::size_t f = features();
    Shape s{end - begin};
    s.insert(s.end(), image_shape.begin(), image_shape.end());
    return Tensor(std::move(s), std::vector<float>(images.begin() + static_cast<std::ptrdiff_t>(begin * f),
                                                   images.begin() + static_cast<std::ptrdiff_t>(end * f)));
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const
{
    const std::size_t f = features();
    std::vector<float> data(indices.size() * f);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto img = image(indices[k]);
        std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(k * f));
    }
    Shape s{indices.size()};
    s.insert(s.end(), image_shape.begin(), image_shape.end());
    return Tensor(std::move(s), std::move(data));
}

std::vector<std::size_t> Dataset::batch_labels(std::span<const std::size_t> indices) const
{
    std::vector<std::size_t> out(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) out[k] = labels[indices[k]];
    return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const
{
    Dataset out;
    out.name = name;
    out.image_shape = image_shape;
    out.num_classes = num_classes;
    out.bounds = bounds;
    const Tensor b = batch(indices);
    out.images.assign(b.values().begin(), b.values().end());
    out.labels = batch_labels(indices);
    return out;
}

void Dataset::validate() const
{
    const std::size_t f = features();
    if (images.size() != labels.size() * f)
        throw DataError("dataset '" + name + "' holds " + std::to_string(images.size()) + " pixels for " +
                        std::to_string(labels.size()) + " images of " + std::to_string(f));
    if (bounds.size() != f) throw DataError("dataset '" + name + "' bounds do not match the image size");
    for (std::size_t i = 0; i < size(); ++i) {
        if (labels[i] >= num_classes)
            throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                            " exceeds class count " + std::to_string(num_classes));
        if (!bounds.contains(image(i))) throw DataError("image " + std::to_string(i) + " leaves its feature bounds");
    }
}

} // namespace dfba
