#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

namespace tlin {

inline uint64_t now_nanos() {
    return static_cast<uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

// Writes via a temp file in the same directory, then renames over the target.
void atomic_write_file(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

// Upper median of an unsorted sample. Empty input is a dim_error.
uint64_t median_u64(std::vector<uint64_t> xs);

// Least-squares slope of log(y) against log(x); inputs must be positive.
double log_log_slope(const std::vector<double>& xs, const std::vector<double>& ys);

} // namespace tlin
