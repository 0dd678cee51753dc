#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tlin {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyOptions {
    // Corrupts the history K/V cache after prefill; the equivalence check
    // must then report a failure. Exists to prove the checks can fail.
    bool inject_cache_bug = false;
    uint64_t seed = 11;
};

// Fast end-to-end self-checks: closed forms, ledger equalities, cached vs
// uncached decode, gradients, memory ratio. Runs in seconds.
std::vector<CheckResult> run_verification(const VerifyOptions& opts);

bool all_passed(const std::vector<CheckResult>& results);
std::string verification_json(const std::vector<CheckResult>& results);

} // namespace tlin
