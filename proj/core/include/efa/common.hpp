#pragma once

#include <stdexcept>
#include <string>

namespace efa {

// Library-wide error type. Precondition violations and malformed inputs
// throw this; callers that want exit codes catch at the CLI boundary.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace efa
