#pragma once

#include "dfba/dataset.hpp"
#include "dfba/model.hpp"
#include "dfba/trainer.hpp"

namespace fixture {

inline const dfba::DataSplit& digits()
{
    static const dfba::DataSplit d = dfba::synth_split(10, 60, 20, {1, 28, 28}, 7);
    return d;
}

// 784-32-10 trained briefly; good enough to have non-trivial biases and accuracy.
inline const dfba::Model& fcn()
{
    static const dfba::Model m = [] {
        dfba::TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 20;
        cfg.learning_rate = 0.05f;
        cfg.seed = 1;
        return dfba::train(dfba::make_fcn(dfba::Shape{1, 28, 28}, 32, 10, 3), digits().train, cfg).model;
    }();
    return m;
}

// Same layer layout as the full CNN with fewer channels.
inline const dfba::Model& cnn()
{
    static const dfba::Model m = [] {
        dfba::TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = 20;
        cfg.learning_rate = 0.02f;
        cfg.seed = 2;
        return dfba::train(dfba::make_small_cnn({1, 28, 28}, 10, 4, 4, 6, 5, 48), digits().train, cfg).model;
    }();
    return m;
}

} // namespace fixture
