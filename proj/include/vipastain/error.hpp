#pragma once

#include <stdexcept>
#include <string>

namespace vipastain {

// Base for all library failures; the CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad arguments or invalid configuration (CLI exit code 2).
class UsageError : public Error {
public:
    using Error::Error;
};

class PlacementError : public Error {
public:
    using Error::Error;
};

class DegenerateHistogramError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace vipastain
