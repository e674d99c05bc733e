#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dfba/dataset.hpp"
#include "dfba/trainer.hpp"
#include "dfba/trigger.hpp"

using namespace dfba;

namespace {

std::filesystem::path scratch(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / "dfba_test_data";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b)
{
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

} // namespace

TEST_CASE("empty mask leaves the image unchanged")
{
    auto t = make_trigger({1, 4, 4}, Rect{0, 0, 0, 0}, "bottom-right");
    std::vector<float> x(16, 0.3f);
    CHECK(apply_trigger(x, t) == x);
}

TEST_CASE("full mask replaces the image with the pattern")
{
    auto t = make_trigger({1, 3, 3}, Rect{0, 0, 3, 3}, "center");
    for (std::size_t i = 0; i < 9; ++i) t.pattern[i] = i % 2 ? 1.0f : 0.0f;
    std::vector<float> x(9, 0.4f);
    CHECK(apply_trigger(x, t) == t.pattern);
}

TEST_CASE("4x4 bottom-right trigger on a zero image")
{
    const Shape s{1, 28, 28};
    auto t = make_trigger(s, place_rect(s, 4, 4, "bottom-right"), "bottom-right");
    CHECK(t.geometry == Rect{24, 24, 4, 4});
    CHECK(t.support.size() == 16);
    for (auto n : t.support) t.pattern[n] = 1.0f;
    const auto y = apply_trigger(std::vector<float>(784, 0.0f), t);
    std::size_t ones = 0;
    for (std::size_t n = 0; n < y.size(); ++n) {
        const bool inside = n / 28 >= 24 && n % 28 >= 24;
        CHECK(y[n] == (inside ? 1.0f : 0.0f));
        ones += y[n] == 1.0f;
    }
    CHECK(ones == 16);
}

TEST_CASE("apply_trigger is idempotent and stays within bounds")
{
    const Shape s{2, 5, 5};
    auto t = make_trigger(s, Rect{1, 2, 2, 3}, "custom", FeatureBounds::uniform(50, -1.0f, 2.0f));
    for (std::size_t i = 0; i < t.support.size(); ++i) t.pattern[t.support[i]] = i % 3 == 0 ? 2.0f : -1.0f;
    t.validate();
    CHECK(t.support.size() == 12);
    std::vector<float> x(50);
    for (std::size_t i = 0; i < 50; ++i) x[i] = -1.0f + 0.06f * static_cast<float>(i);
    const auto once = apply_trigger(x, t);
    CHECK(apply_trigger(once, t) == once);
    CHECK(t.bounds.contains(once));
}

TEST_CASE("trigger validation rejects patterns outside bounds")
{
    auto t = make_trigger({1, 4, 4}, Rect{0, 0, 2, 2}, "top-left");
    t.pattern[t.support[0]] = 1.5f;
    CHECK_THROWS_AS(t.validate(), DataError);
    CHECK_THROWS_AS(make_trigger({1, 4, 4}, Rect{3, 3, 2, 2}, "x"), DataError);
    CHECK_THROWS(apply_trigger(std::vector<float>(15), make_trigger({1, 4, 4}, Rect{0, 0, 1, 1}, "x")));
}

TEST_CASE("synthetic dataset is deterministic and balanced")
{
    const auto a = synth_dataset(10, 100, {1, 28, 28}, 5);
    const auto b = synth_dataset(10, 100, {1, 28, 28}, 5);
    const auto c = synth_dataset(10, 100, {1, 28, 28}, 6);
    CHECK(a.size() == 1000);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    CHECK(a.images != c.images);
    std::vector<std::size_t> counts(10);
    for (auto y : a.labels) ++counts[y];
    for (auto n : counts) CHECK(n == 100);
    a.validate();
    // Corners stay exactly zero.
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.image(i)[27 * 28 + 27] == 0.0f);
}

TEST_CASE("a 2-layer mlp learns the synthetic benchmark")
{
    const auto split = synth_split(10, 200, 50, {1, 28, 28}, 1);
    Model m = make_fcn(784, 32, 10, 2);
    m.input_shape = {1, 28, 28};
    m.layers.insert(m.layers.begin(), Flatten{});
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.learning_rate = 0.05f;
    cfg.seed = 3;
    const auto r = train(m, split.train, cfg);
    const double acc = accuracy(r.model, split.test);
    MESSAGE("test accuracy " << acc);
    CHECK(acc >= 0.90);
}

TEST_CASE("idx round trip and error reporting")
{
    auto d = synth_dataset(3, 4, {1, 12, 13}, 1);
    for (auto& v : d.images) v = std::round(v * 255.0f) / 255.0f;
    const auto img = scratch("img.idx"), lab = scratch("lab.idx");
    write_idx(d, img, lab);
    const auto back = load_idx(img, lab, 3);
    CHECK(back.image_shape == Shape{1, 12, 13});
    CHECK(back.labels == d.labels);
    for (std::size_t i = 0; i < d.images.size(); ++i) CHECK(back.images[i] == doctest::Approx(d.images[i]).epsilon(1e-6));

    // magic 0x00000803, 1 image of 2x2, pixels 0 and 255
    write_bytes(scratch("ok.idx"), {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 0});
    write_bytes(scratch("ok_lab.idx"), {0, 0, 8, 1, 0, 0, 0, 1, 7});
    const auto one = load_idx(scratch("ok.idx"), scratch("ok_lab.idx"));
    CHECK(one.images == std::vector<float>{0.0f, 1.0f, 128.0f / 255.0f, 0.0f});
    CHECK(one.labels[0] == 7);

    write_bytes(scratch("bad.idx"), {0, 0, 8, 4, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(load_idx(scratch("bad.idx"), scratch("ok_lab.idx")), doctest::Contains("magic"), DataError);
    write_bytes(scratch("short.idx"), {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0});
    CHECK_THROWS_WITH_AS(load_idx(scratch("short.idx"), scratch("ok_lab.idx")), doctest::Contains("truncated"), DataError);
    write_bytes(scratch("two_lab.idx"), {0, 0, 8, 1, 0, 0, 0, 2, 7, 1});
    CHECK_THROWS_WITH_AS(load_idx(scratch("ok.idx"), scratch("two_lab.idx")), doctest::Contains("count"), DataError);
}
