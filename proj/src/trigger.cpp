#include "dfba/trigger.hpp"

namespace dfba {

Rect place_rect(const Shape& image_shape, std::size_t height, std::size_t width, const std::string& placement)
{
    if (image_shape.size() != 3) throw DataError("triggers need a CxHxW image shape");
    const std::size_t h = image_shape[1], w = image_shape[2];
    if (height == 0 || width == 0 || height > h || width > w)
        throw DataError("trigger " + std::to_string(height) + "x" + std::to_string(width) + " does not fit image " +
                        shape_to_string(image_shape));
    if (placement == "bottom-right") return {h - height, w - width, height, width};
    if (placement == "top-left") return {0, 0, height, width};
    if (placement == "top-right") return {0, w - width, height, width};
    if (placement == "bottom-left") return {h - height, 0, height, width};
    if (placement == "center") return {(h - height) / 2, (w - width) / 2, height, width};
    throw DataError("unknown trigger placement '" + placement + "'");
}

TriggerSpec make_trigger(const Shape& image_shape, const Rect& rect, std::string placement, FeatureBounds bounds)
{
    if (image_shape.size() != 3) throw DataError("triggers need a CxHxW image shape");
    const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
    if (rect.top + rect.height > h || rect.left + rect.width > w)
        throw DataError("trigger rectangle exceeds image " + shape_to_string(image_shape));
    const std::size_t d = c * h * w;
    if (bounds.size() == 0) bounds = FeatureBounds::uniform(d);
    if (bounds.size() != d) throw DataError("trigger bounds do not match the image size");

    TriggerSpec t;
    t.image_shape = image_shape;
    t.mask.assign(d, 0);
    t.pattern.assign(d, 0.0f);
    t.geometry = rect;
    t.placement = std::move(placement);
    t.bounds = std::move(bounds);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = rect.top; r < rect.top + rect.height; ++r)
            for (std::size_t q = rect.left; q < rect.left + rect.width; ++q) {
                const std::size_t n = (ch * h + r) * w + q;
                t.mask[n] = 1;
                t.support.push_back(n);
                t.pattern[n] = t.bounds.lower[n];
            }
    return t;
}

void TriggerSpec::validate() const
{
    const std::size_t d = shape_size(image_shape);
    if (mask.size() != d || pattern.size() != d || bounds.size() != d)
        throw DataError("trigger buffers do not match image shape " + shape_to_string(image_shape));
    std::size_t k = 0;
    for (std::size_t n = 0; n < d; ++n) {
        if (mask[n] > 1) throw DataError("trigger mask must be binary");
        if (mask[n] == 1) {
            if (k >= support.size() || support[k] != n) throw DataError("trigger support disagrees with its mask");
            if (!(pattern[n] >= bounds.lower[n] && pattern[n] <= bounds.upper[n]))
                throw DataError("trigger pattern leaves feature bounds at index " + std::to_string(n));
            ++k;
        }
    }
    if (k != support.size()) throw DataError("trigger support disagrees with its mask");
}

void apply_trigger_in_place(std::span<float> x, const TriggerSpec& t)
{
    if (x.size() != t.mask.size())
        throw DataError("trigger for " + shape_to_string(t.image_shape) + " applied to input of " +
                        std::to_string(x.size()) + " values");
    for (auto n : t.support) x[n] = t.pattern[n];
}

std::vector<float> apply_trigger(std::span<const float> x, const TriggerSpec& t)
{
    std::vector<float> out(x.begin(), x.end());
    apply_trigger_in_place(out, t);
    return out;
}

Dataset apply_trigger(const Dataset& data, const TriggerSpec& t)
{
    if (data.image_shape != t.image_shape)
        throw DataError("trigger shape " + shape_to_string(t.image_shape) + " does not match dataset " +
                        shape_to_string(data.image_shape));
    Dataset out = data;
    out.name = data.name + "+trigger";
    for (std::size_t i = 0; i < out.size(); ++i) apply_trigger_in_place(out.image(i), t);
    return out;
}

} // namespace dfba
