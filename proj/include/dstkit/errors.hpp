#pragma once

#include <stdexcept>
#include <string>

namespace dstkit {

// Bad invocation: unknown flag, missing input, wrong argument shape.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input data that fails validation (schema, dialogues, predictions, samples).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Failures that happen while doing the work: I/O, network, numerics.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dstkit
