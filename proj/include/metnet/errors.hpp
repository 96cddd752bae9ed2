#pragma once

#include <stdexcept>
#include <string>

namespace metnet {

// Error taxonomy maps 1:1 onto CLI exit codes:
//   ConfigError -> 1, DataError -> 2, NumericError -> 3.
// ShapeError is a programming/config fault and exits like ConfigError.

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace metnet
