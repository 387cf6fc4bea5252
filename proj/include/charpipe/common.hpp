#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace charpipe {

// All model math runs in double precision. The finite-difference gradient
// checks in the test suite assume ~1e-12 relative accuracy of the loss.
using real = double;

// Invalid arguments, malformed inputs, contract violations. CLI exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required upstream artifact (checkpoint, dataset) is missing. CLI exit code 3.
struct DependencyError : std::runtime_error {
    explicit DependencyError(const std::string& msg) : std::runtime_error(msg) {}
};

// A trained-model trend assertion failed. CLI exit code 4.
struct TrendError : std::runtime_error {
    explicit TrendError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

} // namespace charpipe
