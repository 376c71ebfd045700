// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <stdexcept>
#include <string>

namespace qexit {

// Shape, arity or precondition violations. Maps to CLI exit code 1.
class StructuralError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent input data (files, maps, codes). Exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values during a forward or training pass. Exit code 3.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, int layer = -1)
        : std::runtime_error(what), layer_(layer) {}
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

}  // namespace qexit
