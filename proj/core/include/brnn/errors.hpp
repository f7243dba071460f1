#pragma once

#include <stdexcept>
#include <string>

namespace brnn {

// Raised when a numerical routine cannot produce a usable result even after
// its documented recovery steps (e.g. a covariance that stays non-PD after
// jitter, or moment refits fed all-zero weights).
class NumericalError : public std::runtime_error {
  public:
    explicit NumericalError(const std::string& what)
        : std::runtime_error(what) {}
};

// Raised for malformed configuration or serialized artifacts.
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace brnn
