#include "dfba/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dfba {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'B', 'A'};

enum class Tag : std::uint8_t { dense = 1, conv2d = 2, relu = 3, maxpool2d = 4, flatten = 5 };

template <typename T>
T to_little(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

class Writer {
public:
    template <typename T>
    void put(T v)
    {
        v = to_little(v);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void put_u32(std::size_t v)
    {
        if (v > 0xffffffffu) throw FormatError("value too large for u32 field");
        put(static_cast<std::uint32_t>(v));
    }
    void put_string(const std::string& s)
    {
        put_u32(s.size());
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void put_floats(const std::vector<float>& v)
    {
        for (float f : v) put(std::bit_cast<std::uint32_t>(f));
    }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <typename T>
    T get(const char* what)
    {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return to_little(v);
    }
    std::size_t get_u32(const char* what) { return get<std::uint32_t>(what); }
    std::string get_string(const char* what)
    {
        const std::size_t n = get_u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<float> get_floats(std::size_t n, const char* what)
    {
        if (n > (bytes_.size() - pos_) / 4) fail(what);
        std::vector<float> v(n);
        for (auto& f : v) f = std::bit_cast<float>(get<std::uint32_t>(what));
        return v;
    }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n) fail(what);
    }
    [[noreturn]] void fail(const char* what)
    {
        throw FormatError(std::string("truncated model file while reading ") + what + " at byte " +
                          std::to_string(pos_));
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> serialize(const Model& model)
{
    Writer w;
    for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
    w.put(kModelFormatVersion);

    w.put_u32(3 + model.info.extra.size());
    w.put_string("name");
    w.put_string(model.info.name);
    w.put_string("seed");
    w.put_string(std::to_string(model.info.seed));
    w.put_string("provenance");
    w.put_string(to_string(model.info.provenance));
    for (const auto& [k, v] : model.info.extra) {
        w.put_string(k);
        w.put_string(v);
    }

    w.put_u32(model.num_classes);
    w.put_u32(model.input_shape.size());
    for (auto d : model.input_shape) w.put_u32(d);

    w.put_u32(model.layers.size());
    for (const auto& layer : model.layers) {
        if (const auto* d = std::get_if<Dense>(&layer)) {
            w.put(static_cast<std::uint8_t>(Tag::dense));
            w.put_u32(d->in_dim);
            w.put_u32(d->out_dim);
            w.put_floats(d->weight);
            w.put_floats(d->bias);
        } else if (const auto* c = std::get_if<Conv2D>(&layer)) {
            w.put(static_cast<std::uint8_t>(Tag::conv2d));
            w.put_u32(c->out_channels);
            w.put_u32(c->in_channels);
            w.put_u32(c->kernel_h);
            w.put_u32(c->kernel_w);
            w.put_floats(c->weight);
            w.put_floats(c->bias);
        } else if (std::holds_alternative<ReLU>(layer)) {
            w.put(static_cast<std::uint8_t>(Tag::relu));
        } else if (std::holds_alternative<MaxPool2D>(layer)) {
            w.put(static_cast<std::uint8_t>(Tag::maxpool2d));
            w.put_u32(2);
        } else {
            w.put(static_cast<std::uint8_t>(Tag::flatten));
        }
    }
    return w.take();
}

Model deserialize(std::span<const std::uint8_t> bytes)
{
    Reader r(bytes);
    for (char c : kMagic)
        if (r.get<std::uint8_t>("magic") != static_cast<std::uint8_t>(c))
            throw FormatError("bad magic: not a DFBA model container");
    const auto version = r.get<std::uint16_t>("version");
    if (version != kModelFormatVersion)
        throw FormatError("unsupported model format version " + std::to_string(version) + " (expected " +
                          std::to_string(kModelFormatVersion) + ")");

    Model m;
    const std::size_t entries = r.get_u32("metadata count");
    for (std::size_t i = 0; i < entries; ++i) {
        std::string key = r.get_string("metadata key");
        std::string value = r.get_string("metadata value");
        if (key == "name") {
            m.info.name = std::move(value);
        } else if (key == "seed") {
            try {
                m.info.seed = std::stoull(value);
            } catch (const std::exception&) {
                throw FormatError("metadata seed is not an integer: '" + value + "'");
            }
        } else if (key == "provenance") {
            try {
                m.info.provenance = provenance_from_string(value);
            } catch (const ModelError& e) {
                throw FormatError(e.what());
            }
        } else {
            m.info.extra.emplace(std::move(key), std::move(value));
        }
    }

    m.num_classes = r.get_u32("num_classes");
    const std::size_t rank = r.get_u32("input rank");
    if (rank == 0 || rank > 8) throw FormatError("implausible input rank " + std::to_string(rank));
    for (std::size_t i = 0; i < rank; ++i) m.input_shape.push_back(r.get_u32("input shape"));

    const std::size_t count = r.get_u32("layer count");
    for (std::size_t i = 0; i < count; ++i) {
        const auto tag = static_cast<Tag>(r.get<std::uint8_t>("layer tag"));
        switch (tag) {
        case Tag::dense: {
            Dense d;
            d.in_dim = r.get_u32("dense in");
            d.out_dim = r.get_u32("dense out");
            d.weight = r.get_floats(d.in_dim * d.out_dim, "dense weights");
            d.bias = r.get_floats(d.out_dim, "dense bias");
            m.layers.emplace_back(std::move(d));
            break;
        }
        case Tag::conv2d: {
            Conv2D c;
            c.out_channels = r.get_u32("conv out");
            c.in_channels = r.get_u32("conv in");
            c.kernel_h = r.get_u32("conv kh");
            c.kernel_w = r.get_u32("conv kw");
            c.weight = r.get_floats(c.out_channels * c.filter_size(), "conv weights");
            c.bias = r.get_floats(c.out_channels, "conv bias");
            m.layers.emplace_back(std::move(c));
            break;
        }
        case Tag::relu: m.layers.emplace_back(ReLU{}); break;
        case Tag::maxpool2d:
            if (r.get_u32("pool window") != 2) throw FormatError("only 2x2 max pooling is supported");
            m.layers.emplace_back(MaxPool2D{});
            break;
        case Tag::flatten: m.layers.emplace_back(Flatten{}); break;
        default: throw FormatError("unknown layer tag " + std::to_string(static_cast<int>(tag)));
        }
    }
    if (!r.at_end()) throw FormatError("trailing bytes after last layer");
    try {
        m.validate();
    } catch (const ModelError& e) {
        throw FormatError(std::string("inconsistent model: ") + e.what());
    }
    return m;
}

void save_model(const Model& model, const std::filesystem::path& path)
{
    const auto bytes = serialize(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open model file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

} // namespace dfba
