#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dfba/nn.hpp"
#include "dfba/rng.hpp"
#include "dfba/serialize.hpp"
#include "support/reference.hpp"

using namespace dfba;

namespace {

Model tiny_dense(std::vector<float> w, std::vector<float> b, std::size_t in, std::size_t out)
{
    Model m;
    Dense d;
    d.in_dim = in;
    d.out_dim = out;
    d.weight = std::move(w);
    d.bias = std::move(b);
    m.layers = {d};
    m.num_classes = out;
    m.input_shape = {in};
    return m;
}

Tensor random_input(const Shape& shape, Rng& rng)
{
    Tensor t(shape);
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(0.0, 1.0));
    return t;
}

Model random_conv_net(std::uint64_t seed)
{
    Rng rng(seed);
    Model m;
    m.input_shape = {1, 8, 8};
    m.num_classes = 3;
    m.layers.push_back(make_conv(2, 1, 3, 3, rng));
    m.layers.push_back(ReLU{});
    m.layers.push_back(make_conv(3, 2, 2, 2, rng));
    m.layers.push_back(ReLU{});
    m.layers.push_back(MaxPool2D{});
    m.layers.push_back(Flatten{});
    m.layers.push_back(make_dense(12, 5, rng));
    m.layers.push_back(ReLU{});
    m.layers.push_back(make_dense(5, 3, rng));
    for (auto& l : m.layers) {
        // Nonzero biases so the check also covers them.
        if (auto* d = std::get_if<Dense>(&l))
            for (auto& b : d->bias) b = static_cast<float>(rng.uniform(-0.1, 0.1));
        if (auto* c = std::get_if<Conv2D>(&l))
            for (auto& b : c->bias) b = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
    m.validate();
    return m;
}

struct FdOutcome {
    double worst = 0.0;
    std::size_t checked = 0;
};

// Central differences in double precision against the float backward pass.
// Coordinates whose perturbation changes a ReLU or pooling decision are skipped.
FdOutcome fd_check(const Model& m, const Tensor& x, std::size_t label)
{
    const double h = 1e-3;
    const Gradients g = backward(m, x, label);
    ref::Params p(m);
    const std::vector<double> xin(x.values().begin(), x.values().end());
    const auto base = ref::run(m, p, xin).kinks;
    FdOutcome out;
    auto compare = [&](double analytic, double plus_loss, double minus_loss) {
        const double fd = (plus_loss - minus_loss) / (2 * h);
        const double err = std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), 1e-2});
        out.worst = std::max(out.worst, err);
        ++out.checked;
    };
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        for (int which = 0; which < 2; ++which) {
            auto& vec = which == 0 ? p.w[li] : p.b[li];
            const auto& an = which == 0 ? g.layers[li].weight : g.layers[li].bias;
            REQUIRE(an.size() == vec.size());
            for (std::size_t k = 0; k < vec.size(); ++k) {
                const double keep = vec[k];
                vec[k] = keep + h;
                const auto ep = ref::run(m, p, xin);
                vec[k] = keep - h;
                const auto em = ref::run(m, p, xin);
                vec[k] = keep;
                if (ep.kinks != base || em.kinks != base) continue;
                compare(an[k], ref::xent(ep.logits, label), ref::xent(em.logits, label));
            }
        }
    }
    std::vector<double> xs = xin;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const double keep = xs[k];
        xs[k] = keep + h;
        const auto ep = ref::run(m, p, xs);
        xs[k] = keep - h;
        const auto em = ref::run(m, p, xs);
        xs[k] = keep;
        if (ep.kinks != base || em.kinks != base) continue;
        compare(g.input_grad.values()[k], ref::xent(ep.logits, label), ref::xent(em.logits, label));
    }
    return out;
}

} // namespace

TEST_CASE("negative pre-activation is cut by relu")
{
    Model m = tiny_dense({1.0f, -1.0f}, {0.0f}, 2, 1);
    m.layers.push_back(ReLU{});
    m.layers.push_back(Dense{1, 1, {1.0f}, {0.0f}});
    const auto r = forward(m, Tensor({2}, {0.3f, 0.5f}), true);
    CHECK(r.activations[0].values()[0] == doctest::Approx(-0.2));
    CHECK(r.activations[1].values()[0] == 0.0f);
}

TEST_CASE("identity dense on zero input gives zero logits")
{
    Model m = tiny_dense({1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}, 3, 3);
    const auto r = forward(m, Tensor({3}));
    for (float v : r.logits.values()) CHECK(v == 0.0f);
}

TEST_CASE("two layer mlp matches hand expansion")
{
    // h = relu(W1 x + b1), y = W2 h + b2 with W1 = [[1,2],[-3,1],[0.5,0.5]], b1 = [0.1,0.2,-0.3]
    Model m = tiny_dense({1, 2, -3, 1, 0.5f, 0.5f}, {0.1f, 0.2f, -0.3f}, 2, 3);
    m.layers.push_back(ReLU{});
    m.layers.push_back(Dense{3, 2, {1, -1, 2, 0.5f, 0.25f, -1}, {0.0f, 1.0f}});
    m.num_classes = 2;
    const float x0 = 0.4f, x1 = 0.7f;
    const double h0 = std::max(0.0, 1.0 * x0 + 2.0 * x1 + 0.1);
    const double h1 = std::max(0.0, -3.0 * x0 + 1.0 * x1 + 0.2);
    const double h2 = std::max(0.0, 0.5 * x0 + 0.5 * x1 - 0.3);
    const auto r = forward(m, Tensor({2}, {x0, x1}));
    CHECK(r.logits.values()[0] == doctest::Approx(h0 - h1 + 2 * h2).epsilon(1e-6));
    CHECK(r.logits.values()[1] == doctest::Approx(0.5 * h0 + 0.25 * h1 - h2 + 1.0).epsilon(1e-6));
}

TEST_CASE("forward rejects a wrong input shape")
{
    Model m = make_fcn(4, 3, 2, 1);
    CHECK_THROWS_AS(forward(m, Tensor({5})), ModelError);
}

TEST_CASE("forward is deterministic and relu outputs are non-negative")
{
    Model m = random_conv_net(3);
    Rng rng(9);
    const Tensor x = random_input({4, 1, 8, 8}, rng);
    const auto a = forward(m, x, true);
    const auto b = forward(m, x, true);
    CHECK(a.logits == b.logits);
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        if (std::holds_alternative<ReLU>(m.layers[i]))
            for (float v : a.activations[i].values()) CHECK(v >= 0.0f);
}

TEST_CASE("batched forward equals per-sample forward bitwise")
{
    Model m = random_conv_net(4);
    Rng rng(1);
    const Tensor x = random_input({3, 1, 8, 8}, rng);
    const auto batch = forward(m, x);
    for (std::size_t n = 0; n < 3; ++n) {
        Tensor one({1, 8, 8}, std::vector<float>(x.values().begin() + n * 64, x.values().begin() + (n + 1) * 64));
        const auto single = forward(m, one);
        CHECK(bitwise_equal(single.logits.values(), std::span(batch.logits.values()).subspan(n * 3, 3)));
    }
}

TEST_CASE("dense gradients match finite differences on a 3-layer mlp")
{
    Model m = make_mlp({6, 5, 4, 3}, 11);
    Rng rng(2);
    const auto r = fd_check(m, random_input({6}, rng), 1);
    CHECK(r.checked > 50);
    CHECK(r.worst <= 1e-4);
}

TEST_CASE("conv gradients match finite differences on a 6x6 input with two filters")
{
    Rng rng(5);
    Model m;
    m.input_shape = {1, 6, 6};
    m.num_classes = 2;
    m.layers = {make_conv(2, 1, 3, 3, rng), ReLU{}, Flatten{}, make_dense(32, 2, rng)};
    m.validate();
    const auto r = fd_check(m, random_input({1, 6, 6}, rng), 0);
    CHECK(r.checked > 50);
    CHECK(r.worst <= 1e-4);
}

TEST_CASE("gradients match finite differences across seeds")
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        Rng rng(seed + 100);
        const auto conv = fd_check(random_conv_net(seed), random_input({1, 8, 8}, rng), seed % 3);
        CHECK(conv.worst <= 1e-4);
        const auto mlp = fd_check(make_mlp({7, 6, 5, 4}, seed), random_input({7}, rng), seed % 4);
        CHECK(mlp.worst <= 1e-4);
    }
}

TEST_CASE("batch gradient is the mean of per-sample gradients")
{
    Model m = make_mlp({5, 4, 3}, 2);
    Rng rng(3);
    const Tensor x = random_input({2, 5}, rng);
    const std::vector<std::size_t> y{0, 2};
    const auto g = backward(m, x, y);
    const auto g0 = backward(m, Tensor({5}, std::vector<float>(x.values().begin(), x.values().begin() + 5)), 0);
    const auto g1 = backward(m, Tensor({5}, std::vector<float>(x.values().begin() + 5, x.values().end())), 2);
    for (std::size_t k = 0; k < g.layers[0].weight.size(); ++k)
        CHECK(g.layers[0].weight[k] == doctest::Approx(0.5 * (g0.layers[0].weight[k] + g1.layers[0].weight[k])).epsilon(1e-5));
}

TEST_CASE("saturated softmax gives a vanishing gradient")
{
    double previous = 1e9;
    for (float margin : {1.0f, 5.0f, 20.0f, 60.0f}) {
        Model m = tiny_dense({margin, 0, 0, 0}, {0, 0}, 2, 2);
        const auto g = backward(m, Tensor({2}, {1.0f, 0.0f}), 0);
        double norm = 0.0;
        for (float v : g.layers[0].weight) norm += double(v) * v;
        norm = std::sqrt(norm);
        CHECK(norm <= previous);
        previous = norm;
    }
    CHECK(previous < 1e-20);
}

TEST_CASE("backward rejects a label outside the class range")
{
    Model m = make_fcn(4, 3, 2, 1);
    CHECK_THROWS_AS(backward(m, Tensor({4}), 2), ModelError);
}

TEST_CASE("pruning an inactive neuron leaves logits bitwise unchanged")
{
    Model m = make_mlp({4, 6, 3}, 21);
    const Tensor x({4}, {0.2f, 0.9f, 0.1f, 0.5f});
    const auto r = forward(m, x, true);
    std::size_t dead = 6;
    for (std::size_t u = 0; u < 6; ++u)
        if (r.activations[1].values()[u] == 0.0f) dead = u;
    if (dead == 6) {
        // Force one inactive unit.
        m.dense(0).bias[2] = -100.0f;
        dead = 2;
    }
    const auto before = forward(m, x).logits;
    const std::vector<NeuronRef> refs{{0, dead, std::nullopt}};
    const auto after = forward(prune_neurons(m, refs), x).logits;
    CHECK(bitwise_equal(before.values(), after.values()));
}

TEST_CASE("pruning every hidden unit leaves only output biases")
{
    Model m = make_mlp({4, 5, 3}, 2);
    m.dense(2).bias = {0.25f, -0.5f, 1.5f};
    std::vector<NeuronRef> refs;
    for (std::size_t u = 0; u < 5; ++u) refs.push_back({0, u, std::nullopt});
    const Model p = prune_neurons(m, refs);
    const auto r = forward(p, Tensor({4}, {0.3f, 0.1f, 0.7f, 0.9f}));
    const std::vector<float> want{0.25f, -0.5f, 1.5f};
    CHECK(bitwise_equal(r.logits.values(), want));
}

TEST_CASE("pruning is idempotent and order independent")
{
    Model m = random_conv_net(8);
    const std::vector<NeuronRef> a{{0, 1, std::nullopt}}, b{{6, 3, std::nullopt}};
    const Model ab = prune_neurons(prune_neurons(m, a), b);
    const Model ba = prune_neurons(prune_neurons(m, b), a);
    CHECK(ab == ba);
    CHECK(prune_neurons(ab, a) == ab);
}

TEST_CASE("conv pruning zeroes the filter and every downstream slice")
{
    Model m = random_conv_net(8);
    const Model p = prune_neurons(m, std::vector<NeuronRef>{{0, 1, std::nullopt}});
    const auto& c0 = p.conv(0);
    for (std::size_t k = 0; k < c0.filter_size(); ++k) CHECK(c0.weight[c0.filter_size() + k] == 0.0f);
    CHECK(c0.bias[1] == 0.0f);
    const auto& c2 = p.conv(2);
    for (std::size_t oc = 0; oc < 3; ++oc)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) CHECK(c2.w(oc, 1, i, j) == 0.0f);
}

TEST_CASE("pruning a non-parametric layer fails")
{
    Model m = make_fcn(4, 3, 2, 1);
    CHECK_THROWS_AS(prune_neurons(m, std::vector<NeuronRef>{{1, 0, std::nullopt}}), ModelError);
}

TEST_CASE("lipschitz constants")
{
    Model m = tiny_dense({3, 4, 1, 0}, {0, 0}, 2, 2);
    const auto s = lipschitz_stats(m, 0);
    CHECK(s.constants[0] == doctest::Approx(5.0));
    CHECK(s.constants[1] == doctest::Approx(1.0));

    Model eq = tiny_dense({1, 2, 1, 2, 1, 2}, {0, 0, 0}, 2, 3);
    CHECK(lipschitz_stats(eq, 0).stddev == 0.0);

    // One amplified unit with weight 10 among O(1) rows is above mean + stddev.
    Model amp = make_mlp({8, 12, 3}, 4);
    auto& d = amp.dense(0);
    std::fill_n(d.weight.begin() + 5 * 8, 8, 0.0f);
    d.weight[5 * 8 + 3] = 10.0f;
    const auto st = lipschitz_stats(amp, 0);
    CHECK(st.constants[5] == doctest::Approx(10.0));
    CHECK(st.constants[5] > st.mean + st.stddev);
}

TEST_CASE("serialization round trip is exact")
{
    Model m = random_conv_net(5);
    m.info.name = "probe";
    m.info.seed = 77;
    m.info.provenance = Provenance::backdoored;
    m.info.extra["note"] = "x=1;y=\xc3\xa9";
    m.dense(6).weight[0] = -0.0f;
    m.dense(6).weight[1] = std::nextafter(0.0f, 1.0f);
    const auto bytes = serialize(m);
    CHECK(std::memcmp(bytes.data(), "DFBA", 4) == 0);
    const Model back = deserialize(bytes);
    CHECK(back == m);
    CHECK(back.info.extra == m.info.extra);
    CHECK(std::signbit(back.dense(6).weight[0]));
    CHECK(serialize(back) == bytes);
}

TEST_CASE("deserialization reports bad input")
{
    const auto bytes = serialize(make_fcn(4, 3, 2, 1));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(deserialize(bad_magic), doctest::Contains("magic"), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_WITH_AS(deserialize(bad_version), doctest::Contains("version"), FormatError);
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        CHECK_THROWS_AS(deserialize(part), FormatError);
    }
}
