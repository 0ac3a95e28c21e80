#pragma once

#include <stdexcept>
#include <string>

namespace volcast {

// Bad shapes or incompatible tensor dimensions.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or insufficient input data (CLI exit code 3).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Training loss became non-finite (CLI exit code 4).
class TrainingDiverged : public std::runtime_error {
public:
    explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

} // namespace volcast
