#pragma once

#include <stdexcept>
#include <string>

namespace tlin {

// One exception family; the CLI maps these onto exit codes.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or axis misuse (empty rows, mismatched operands, bad head split).
struct dim_error : error {
    using error::error;
};

// Rejected configuration or arguments.
struct config_error : error {
    using error::error;
};

// Cache protocol violations (step on a full window, prefill on a warm store, ...).
struct state_error : error {
    using error::error;
};

// NaN/Inf escaped an operation, or the training loss went non-finite.
struct numeric_error : error {
    using error::error;
};

struct io_error : error {
    using error::error;
};

// A measured quantity disagreed with its closed-form prediction mid-run.
struct verify_error : error {
    using error::error;
};

} // namespace tlin
