#pragma once

#include <stdexcept>
#include <string>

namespace tabdeco {

// Error taxonomy mirrored by the CLI exit codes:
//   ConfigError -> 1, DataError -> 2, everything else -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace tabdeco
