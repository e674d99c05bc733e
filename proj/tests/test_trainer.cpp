#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <limits>

#include "dfba/trainer.hpp"

using namespace dfba;

namespace {

struct Fixture {
    DataSplit data = synth_split(4, 40, 10, {1, 12, 12}, 3);
    Model model = [] {
        Model m = make_mlp({144, 16, 4}, 5);
        m.input_shape = {1, 12, 12};
        m.layers.insert(m.layers.begin(), Flatten{});
        return m;
    }();
    TrainConfig cfg = [] {
        TrainConfig c;
        c.epochs = 4;
        c.batch_size = 16;
        c.learning_rate = 0.05f;
        c.seed = 11;
        return c;
    }();
};

} // namespace

TEST_CASE("training is deterministic and lowers the loss")
{
    Fixture f;
    const auto a = train(f.model, f.data.train, f.cfg);
    const auto b = train(f.model, f.data.train, f.cfg);
    CHECK(a.model == b.model);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.loss_curve.size() == 4);
    CHECK(a.loss_curve.back() < a.initial_loss);
    CHECK(dataset_loss(a.model, f.data.train) < a.initial_loss);
}

TEST_CASE("zero learning rate is rejected and invalid configs fail")
{
    Fixture f;
    f.cfg.learning_rate = 0.0f;
    CHECK_THROWS_AS(f.cfg.validate(), std::invalid_argument);
    f.cfg.learning_rate = 0.1f;
    f.cfg.epochs = 0;
    CHECK_THROWS_AS(train(f.model, f.data.train, f.cfg), std::invalid_argument);
}

TEST_CASE("fine-tuning with a vanishing step leaves the delta at zero")
{
    // The smallest positive rate cannot move any float parameter of this size.
    Fixture f;
    f.cfg.learning_rate = std::numeric_limits<float>::denorm_min();
    const auto r = fine_tune(f.model, f.data.train, f.cfg);
    CHECK(r.delta.max_abs() == 0.0);
    CHECK(r.delta.changed() == 0);
    CHECK(r.model == f.model);
}

TEST_CASE("fine-tuning a trained model does not increase its loss")
{
    Fixture f;
    const auto base = train(f.model, f.data.train, f.cfg);
    TrainConfig ft = f.cfg;
    ft.learning_rate = 0.01f;
    ft.epochs = 2;
    const auto r = fine_tune(base.model, f.data.train, ft);
    CHECK(dataset_loss(r.model, f.data.train) <= dataset_loss(base.model, f.data.train) + 1e-6);
    CHECK(r.delta.max_abs() > 0.0);
}

TEST_CASE("parameter delta restricted to a neuron set")
{
    Fixture f;
    Model changed = f.model;
    std::get<Dense>(changed.layers[1]).weight[3 * 144 + 5] += 0.5f;
    std::get<Dense>(changed.layers[3]).weight[2 * 16 + 7] -= 0.25f;
    const auto d = ParamDelta::between(f.model, changed);
    CHECK(d.changed() == 2);
    CHECK(d.max_abs() == doctest::Approx(0.5));
    const std::vector<NeuronRef> unit3{{1, 3, std::nullopt}}, unit7{{1, 7, std::nullopt}}, unit0{{1, 0, std::nullopt}};
    CHECK(d.max_abs(neuron_parameters(f.model, unit3)) == doctest::Approx(0.5));
    CHECK(d.max_abs(neuron_parameters(f.model, unit7)) == doctest::Approx(0.25));
    CHECK(d.max_abs(neuron_parameters(f.model, unit0)) == 0.0);
    CHECK(neuron_parameters(f.model, unit0).count() == 144 + 1 + 4);
}

TEST_CASE("divergence is reported with its epoch")
{
    Fixture f;
    f.cfg.learning_rate = 1e30f;
    try {
        (void)train(f.model, f.data.train, f.cfg);
        FAIL("expected divergence");
    } catch (const TrainError& e) {
        CHECK(e.epoch() < f.cfg.epochs);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("accuracy is a fraction and ties go to the lowest index")
{
    Fixture f;
    const double acc = accuracy(f.model, f.data.test);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    Model flat = f.model;
    for (auto& l : flat.layers)
        if (auto* d = std::get_if<Dense>(&l)) {
            std::fill(d->weight.begin(), d->weight.end(), 0.0f);
            std::fill(d->bias.begin(), d->bias.end(), 0.0f);
        }
    for (auto p : predictions(flat, f.data.test)) CHECK(p == 0);
}
