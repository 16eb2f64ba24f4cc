#pragma once

#include <stdexcept>
#include <string>

namespace msil {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A non-finite value appeared where training or verification needs finite numbers.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, long step = -1)
        : std::runtime_error(what), step_(step) {}
    [[nodiscard]] long step() const { return step_; }

private:
    long step_;
};

}  // namespace msil
