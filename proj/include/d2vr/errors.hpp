// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace d2vr {

// Shape/rank disagreement between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Mathematically invalid operand (log of nonpositive value, division by zero).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

// Non-finite intermediate where the contract requires finite values.
struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& msg) : std::runtime_error("numerics error: " + msg) {}
};

// backward() on a graph that was already consumed (or never built).
struct GraphConsumedError : std::runtime_error {
    explicit GraphConsumedError(const std::string& msg) : std::runtime_error("graph error: " + msg) {}
};

// Optimizer misuse, e.g. stepping a parameter whose gradient was never populated.
struct OptimError : std::runtime_error {
    explicit OptimError(const std::string& msg) : std::runtime_error("optimizer error: " + msg) {}
};

// Invalid configuration value or violated staging precondition.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Unreadable or corrupt on-disk artifact.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace d2vr
