#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "mmsde/errors.hpp"

namespace mmsde {

/// Uniform time grid on [0, T] with count steps of size h, count*h = T
/// within 1e-12.
struct TimeGrid {
    double horizon = 0.0;
    double step = 0.0;
    std::int64_t count = 0;

    double node(std::int64_t i) const { return step * static_cast<double>(i); }

    static TimeGrid from_step(double horizon, double step) {
        if (!(step > 0.0)) throw ParameterError("TimeGrid: step must be positive");
        if (horizon < 0.0) throw ParameterError("TimeGrid: horizon must be nonnegative");
        const auto count = static_cast<std::int64_t>(std::llround(horizon / step));
        if (horizon > 0.0 && count == 0)
            throw ParameterError("TimeGrid: step " + std::to_string(step) +
                                 " exceeds horizon " + std::to_string(horizon));
        if (std::abs(static_cast<double>(count) * step - horizon) > 1e-12)
            throw ParameterError("TimeGrid: step does not divide horizon (|count*h - T| > 1e-12)");
        return TimeGrid{horizon, step, count};
    }

    static TimeGrid from_count(double horizon, std::int64_t count) {
        if (count < 0) throw ParameterError("TimeGrid: count must be nonnegative");
        if (horizon < 0.0) throw ParameterError("TimeGrid: horizon must be nonnegative");
        if (count == 0) {
            if (horizon != 0.0) throw ParameterError("TimeGrid: zero steps need zero horizon");
            return TimeGrid{0.0, 1.0, 0};
        }
        const double h = horizon / static_cast<double>(count);
        if (!(h > 0.0)) throw ParameterError("TimeGrid: degenerate step");
        if (std::abs(static_cast<double>(count) * h - horizon) > 1e-12)
            throw ParameterError("TimeGrid: count*h drifts from horizon by more than 1e-12");
        return TimeGrid{horizon, h, count};
    }
};

}  // namespace mmsde
