#include <algorithm>
#include <cmath>

#include "dfba/dataset.hpp"
#include "dfba/rng.hpp"

namespace dfba {

namespace {

struct Blob {
    double cy, cx, sigma, amp;
};

struct Stroke {
    double y0, x0, y1, x1, width, amp;
};

struct Prototype {
    std::vector<Blob> blobs;
    Stroke stroke;
};

struct Canvas {
    std::size_t h, w;
    std::size_t lo_r, hi_r, lo_c, hi_c; // content box, inclusive-exclusive
};

Canvas canvas_for(const Shape& s)
{
    if (s.size() != 3 || s[1] < 12 || s[2] < 12) throw DataError("synthetic images need CxHxW with H,W >= 12");
    const std::size_t mr = std::max<std::size_t>(2, s[1] / 7);
    const std::size_t mc = std::max<std::size_t>(2, s[2] / 7);
    return {s[1], s[2], mr, s[1] - mr, mc, s[2] - mc};
}

std::vector<Prototype> make_prototypes(std::size_t classes, const Canvas& cv, Rng& rng)
{
    const double r0 = static_cast<double>(cv.lo_r) + 2.5, r1 = static_cast<double>(cv.hi_r) - 3.5;
    const double c0 = static_cast<double>(cv.lo_c) + 2.5, c1 = static_cast<double>(cv.hi_c) - 3.5;
    std::vector<Prototype> out(classes);
    for (auto& p : out) {
        for (int b = 0; b < 3; ++b)
            p.blobs.push_back({rng.uniform(r0, r1), rng.uniform(c0, c1), rng.uniform(1.2, 2.4), rng.uniform(0.8, 1.0)});
        p.stroke = {rng.uniform(r0, r1), rng.uniform(c0, c1), rng.uniform(r0, r1), rng.uniform(c0, c1),
                    rng.uniform(0.7, 1.1), rng.uniform(0.85, 1.0)};
    }
    return out;
}

double segment_distance(double py, double px, const Stroke& s)
{
    const double dy = s.y1 - s.y0, dx = s.x1 - s.x0;
    const double len2 = dy * dy + dx * dx;
    double t = len2 > 0 ? ((py - s.y0) * dy + (px - s.x0) * dx) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ey = s.y0 + t * dy - py, ex = s.x0 + t * dx - px;
    return std::sqrt(ey * ey + ex * ex);
}

void render(const Prototype& proto, const Shape& shape, const Canvas& cv, Rng& rng, float* out)
{
    const double sy = static_cast<double>(static_cast<int>(rng.index(5)) - 2);
    const double sx = static_cast<double>(static_cast<int>(rng.index(5)) - 2);
    const double gain = rng.uniform(0.75, 1.05);
    std::vector<Blob> blobs = proto.blobs;
    for (auto& b : blobs) {
        b.cy += sy + rng.normal(0.0, 0.6);
        b.cx += sx + rng.normal(0.0, 0.6);
        b.sigma *= rng.uniform(0.85, 1.15);
        b.amp *= gain;
    }
    Stroke st = proto.stroke;
    st.y0 += sy + rng.normal(0.0, 0.5);
    st.y1 += sy + rng.normal(0.0, 0.5);
    st.x0 += sx + rng.normal(0.0, 0.5);
    st.x1 += sx + rng.normal(0.0, 0.5);
    st.amp *= gain;

    const std::size_t plane = cv.h * cv.w;
    for (std::size_t r = 0; r < cv.h; ++r)
        for (std::size_t c = 0; c < cv.w; ++c) {
            double v = 0.0;
            if (r >= cv.lo_r && r < cv.hi_r && c >= cv.lo_c && c < cv.hi_c) {
                const double y = static_cast<double>(r), x = static_cast<double>(c);
                for (const auto& b : blobs) {
                    const double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
                    v = std::max(v, b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma)));
                }
                const double ds = segment_distance(y, x, st);
                v = std::max(v, st.amp * std::exp(-ds * ds / (2.0 * st.width * st.width)));
                if (v > 0.05) v += rng.normal(0.0, 0.04);
                if (v < 0.05) v = 0.0;
            }
            const float px = static_cast<float>(std::clamp(v, 0.0, 1.0));
            for (std::size_t ch = 0; ch < shape[0]; ++ch)
                out[ch * plane + r * cv.w + c] = ch == 0 ? px : px * (0.6f + 0.2f * static_cast<float>(ch % 3));
        }
}

Dataset generate(const std::vector<Prototype>& protos, std::size_t per_class, const Shape& shape, const Canvas& cv,
                 Rng& rng, std::string name)
{
    Dataset d;
    d.name = std::move(name);
    d.image_shape = shape;
    d.num_classes = protos.size();
    const std::size_t f = shape_size(shape);
    d.images.assign(protos.size() * per_class * f, 0.0f);
    d.labels.reserve(protos.size() * per_class);
    std::size_t i = 0;
    for (std::size_t k = 0; k < per_class; ++k)
        for (std::size_t c = 0; c < protos.size(); ++c, ++i) {
            render(protos[c], shape, cv, rng, d.images.data() + i * f);
            d.labels.push_back(c);
        }
    d.bounds = FeatureBounds::uniform(f);
    return d;
}

} // namespace

Dataset synth_dataset(std::size_t num_classes, std::size_t per_class, const Shape& image_shape, std::uint64_t seed)
{
    if (num_classes == 0) throw DataError("synthetic dataset needs at least one class");
    const Canvas cv = canvas_for(image_shape);
    Rng proto_rng(seed);
    const auto protos = make_prototypes(num_classes, cv, proto_rng);
    Rng rng(seed ^ 0x5851f42d4c957f2dULL);
    return generate(protos, per_class, image_shape, cv, rng, "synth-" + std::to_string(seed));
}

DataSplit synth_split(std::size_t num_classes, std::size_t train_per_class, std::size_t test_per_class,
                      const Shape& image_shape, std::uint64_t seed)
{
    if (num_classes == 0) throw DataError("synthetic dataset needs at least one class");
    const Canvas cv = canvas_for(image_shape);
    Rng proto_rng(seed);
    const auto protos = make_prototypes(num_classes, cv, proto_rng);
    Rng train_rng(seed ^ 0x5851f42d4c957f2dULL);
    Rng test_rng(seed ^ 0x14057b7ef767814fULL);
    return {generate(protos, train_per_class, image_shape, cv, train_rng, "synth-" + std::to_string(seed) + "-train"),
            generate(protos, test_per_class, image_shape, cv, test_rng, "synth-" + std::to_string(seed) + "-test")};
}

} // namespace dfba
