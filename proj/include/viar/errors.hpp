#pragma once

#include <stdexcept>
#include <string>

namespace viar {

// Base for everything thrown by the library. CLI maps these to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Token / row / class index out of range.
struct IndexError : Error {
    using Error::Error;
};

// API precondition violated (non-scalar loss, empty trace, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad data content (non-finite features, too few samples, ...).
struct DataError : Error {
    using Error::Error;
};

// Scalar argument outside its valid range (scale index, slice bounds).
struct RangeError : Error {
    using Error::Error;
};

// KV cache inconsistent with the requested generation step.
struct CacheError : Error {
    using Error::Error;
};

// Invalid schedule / config / edit specification.
struct SpecError : Error {
    using Error::Error;
};

// Infeasible compute budget.
struct BudgetError : Error {
    using Error::Error;
};

// Filesystem / serialization failure.
struct IoError : Error {
    using Error::Error;
};

} // namespace viar
