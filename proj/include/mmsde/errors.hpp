#pragma once

#include <stdexcept>
#include <string>

namespace mmsde {

/// Bad argument values: non-positive step sizes, malformed sets, shape
/// mismatches.
struct ParameterError : std::invalid_argument {
    explicit ParameterError(const std::string& what) : std::invalid_argument(what) {}
};

/// Requests the library refuses by design (unsupported prox compositions,
/// y-dependent sigma1 in the LDP toolkit).
struct CapabilityError : std::runtime_error {
    explicit CapabilityError(const std::string& what) : std::runtime_error(what) {}
};

/// Declared coefficient constants violate a structural assumption
/// (e.g. alpha = beta - 2*L <= 0).
struct AssumptionError : std::runtime_error {
    explicit AssumptionError(const std::string& what) : std::runtime_error(what) {}
};

/// Scale parameters outside the supported regime (gamma/eps must decrease
/// strictly toward zero along an eps list).
struct RegimeError : std::runtime_error {
    explicit RegimeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mmsde
