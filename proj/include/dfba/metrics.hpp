#pragma once

#include <stdexcept>

#include "dfba/dataset.hpp"
#include "dfba/model.hpp"
#include "dfba/trigger.hpp"

namespace dfba {

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fraction of triggered inputs predicted as `target`, over inputs whose true
/// label is not `target`. Throws MetricError("no eligible inputs") if none remain.
double metric_asr(const Model& model, const Dataset& data, const TriggerSpec& trigger, std::size_t target);

struct CaBa {
    double ca = 0.0;
    double ba = 0.0;
    /// ca - ba
    double gap = 0.0;
};

CaBa metric_ca_ba(const Model& clean, const Model& backdoored, const Dataset& test);

} // namespace dfba
