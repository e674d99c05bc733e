#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "dfba/dataset.hpp"

namespace dfba {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open IDX file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::filesystem::path& path)
{
    if (b.size() < off + 4) throw DataError("truncated IDX header in " + path.string());
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

std::string hex32(std::uint32_t v)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

void put_be32(std::ofstream& out, std::uint32_t v)
{
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                           static_cast<char>(v)};
    out.write(bytes, 4);
}

} // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes)
{
    const auto ib = read_file(images);
    const auto lb = read_file(labels);

    const auto im = read_be32(ib, 0, images);
    if (im != kImageMagic)
        throw DataError("bad IDX image magic " + hex32(im) + " in " + images.string() + " (expected 0x00000803)");
    const auto lm = read_be32(lb, 0, labels);
    if (lm != kLabelMagic)
        throw DataError("bad IDX label magic " + hex32(lm) + " in " + labels.string() + " (expected 0x00000801)");

    const std::size_t n = read_be32(ib, 4, images);
    const std::size_t rows = read_be32(ib, 8, images);
    const std::size_t cols = read_be32(ib, 12, images);
    const std::size_t nl = read_be32(lb, 4, labels);
    if (n != nl)
        throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (ib.size() < 16 + n * rows * cols) throw DataError("truncated IDX image payload in " + images.string());
    if (lb.size() < 8 + n) throw DataError("truncated IDX label payload in " + labels.string());

    Dataset d;
    d.name = images.stem().string();
    d.image_shape = {1, rows, cols};
    d.num_classes = num_classes;
    d.images.resize(n * rows * cols);
    for (std::size_t i = 0; i < d.images.size(); ++i) d.images[i] = static_cast<float>(ib[16 + i]) / 255.0f;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = lb[8 + i];
    d.bounds = FeatureBounds::uniform(rows * cols);
    d.validate();
    return d;
}

void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels)
{
    if (data.image_shape.size() != 3 || data.image_shape[0] != 1)
        throw DataError("IDX export supports single-channel images only");
    std::ofstream io(images, std::ios::binary);
    std::ofstream lo(labels, std::ios::binary);
    if (!io || !lo) throw DataError("cannot open IDX output files");
    put_be32(io, kImageMagic);
    put_be32(io, static_cast<std::uint32_t>(data.size()));
    put_be32(io, static_cast<std::uint32_t>(data.image_shape[1]));
    put_be32(io, static_cast<std::uint32_t>(data.image_shape[2]));
    for (float v : data.images) {
        const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
        io.put(static_cast<char>(static_cast<std::uint8_t>(q)));
    }
    put_be32(lo, kLabelMagic);
    put_be32(lo, static_cast<std::uint32_t>(data.size()));
    for (auto y : data.labels) {
        if (y > 255) throw DataError("IDX labels are single bytes");
        lo.put(static_cast<char>(static_cast<std::uint8_t>(y)));
    }
    if (!io || !lo) throw DataError("failed writing IDX files");
}

} // namespace dfba
