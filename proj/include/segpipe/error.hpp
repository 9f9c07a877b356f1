#ifndef SEGPIPE_ERROR_HPP
#define SEGPIPE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace segpipe {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed configuration, manifest, or file input. CLI exit code 2.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// NaN or other numeric failure under the strict policy. CLI exit code 3.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Shape or argument contract violation between library components.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

} // namespace segpipe

#endif
