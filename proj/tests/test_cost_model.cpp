#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tlin/cost_model.hpp"
#include "tlin/errors.hpp"

#include <cstdint>
#include <random>

using namespace tlin;

namespace {

struct WindowShape {
    int64_t d, woh, wog, h;
};

WindowShape random_shape(std::mt19937_64& rng) {
    auto pick = [&](int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
    };
    return {pick(1, 64), pick(0, 32), pick(1, 32), pick(0, 8)};
}

} // namespace

TEST_CASE("the worked example lands on the frozen numbers") {
    // d=4, woh=wog=2, h=1, n=8. Small enough to check digit by digit by hand.
    const CostBreakdown c = cost_cache_miss(4, 8, 2, 2, 1);
    CHECK(c.c_left == 112);
    CHECK(c.c_right == 128);
    CHECK(c.total == 240);
    CHECK(c.c1 == 4 * (2 * 2 + 2));
    CHECK(c.total == c.c1 * 8 + c.c0);
    CHECK(cost_cache_hit(4, 8, 2, 2, 1) == 88);
}

TEST_CASE("the split and the affine form agree everywhere") {
    std::mt19937_64 rng{401};
    for (int rep = 0; rep < 1000; ++rep) {
        const WindowShape s = random_shape(rng);
        const int64_t n =
            s.wog + std::uniform_int_distribution<int64_t>(0, 4096)(rng);
        const CostBreakdown c = cost_cache_miss(s.d, n, s.woh, s.wog, s.h);
        CHECK(c.total == c.c_left + c.c_right);
        CHECK(c.total == c.c1 * n + c.c0);
        CHECK(c.c1 == s.d * (2 * s.woh + s.wog));
        // The slope and intercept never depend on n.
        const CostBreakdown c2 = cost_cache_miss(s.d, n + 17 * s.wog, s.woh, s.wog, s.h);
        CHECK(c2.c1 == c.c1);
        CHECK(c2.c0 == c.c0);
    }
}

TEST_CASE("a warm step is cheaper than a rebuild") {
    std::mt19937_64 rng{409};
    for (int rep = 0; rep < 500; ++rep) {
        WindowShape s = random_shape(rng);
        if (s.woh == 0) s.woh = 1;
        const int64_t n = s.woh + s.wog +
                          std::uniform_int_distribution<int64_t>(1, 2048)(rng);
        CHECK(cost_cache_hit(s.d, n, s.woh, s.wog, s.h) <
              cost_cache_miss(s.d, n, s.woh, s.wog, s.h).total);
    }
}

TEST_CASE("window cost is linear in n, the baseline is not") {
    const int64_t d = 16, woh = 8, wog = 4, h = 2;
    for (int64_t n = wog; n < wog + 64; ++n) {
        const int64_t f0 = cost_cache_miss(d, n, woh, wog, h).total;
        const int64_t f1 = cost_cache_miss(d, n + 1, woh, wog, h).total;
        const int64_t f2 = cost_cache_miss(d, n + 2, woh, wog, h).total;
        CHECK(f2 - 2 * f1 + f0 == 0);
        const int64_t g0 = baseline_cost(n, d, 3);
        const int64_t g1 = baseline_cost(n + 1, d, 3);
        const int64_t g2 = baseline_cost(n + 2, d, 3);
        CHECK(g2 - 2 * g1 + g0 == 2 * d * 3); // constant positive curvature
    }
}

TEST_CASE("the baseline charge is layers times n squared times d") {
    CHECK(baseline_cost(8, 4, 1) == 256);
    CHECK(baseline_cost(0, 4, 1) == 0);
    // Long-context point, checked against the closed product; stays in int64.
    CHECK(baseline_cost(32768, 512, 6) == int64_t{3298534883328});
    CHECK(baseline_cost_hit(100, 4, 2) == 800);
}

TEST_CASE("the speedup over the baseline grows with n") {
    const int64_t d = 64, woh = 32, wog = 32, h = 2, layers = 8;
    int64_t prev_b = 0, prev_t = 1;
    for (int64_t n = 128; n <= 8192; n *= 2) {
        const int64_t b = baseline_cost(n, d, layers);
        const int64_t t = cost_cache_miss(d, n, woh, wog, h).total;
        // b/t > prev_b/prev_t, compared in exact integer arithmetic.
        CHECK(b * prev_t > prev_b * t);
        prev_b = b;
        prev_t = t;
    }
}

TEST_CASE("large arguments stay inside int64") {
    const CostBreakdown c = cost_cache_miss(4096, 1'000'000, 4096, 4096, 8);
    CHECK(c.total > 0);
    CHECK(c.total == c.c1 * 1'000'000 + c.c0);
}

TEST_CASE("cached memory shrinks by one over h plus two") {
    const MemoryEval m8 = memory_eval(1, 4096, 512, 2, 6, 8);
    CHECK(m8.ratio == 0.1);
    const MemoryEval m98 = memory_eval(1, 4096, 512, 2, 6, 98);
    CHECK(m98.ratio == 0.01);
    const MemoryEval tiny = memory_eval(2, 8, 4, 2, 3, 0);
    CHECK(tiny.m_transformer == 2 * 2 * 8 * 4 * 2 * 3);
    CHECK(tiny.ratio == 0.5);
    CHECK(tiny.m_tlinformer == static_cast<double>(tiny.m_transformer) * 0.5);
}

TEST_CASE("argument validation") {
    CHECK_THROWS_AS(cost_cache_miss(0, 8, 2, 2, 1), config_error);
    CHECK_THROWS_AS(cost_cache_miss(4, 8, -1, 2, 1), config_error);
    CHECK_THROWS_AS(cost_cache_miss(4, 8, 2, 0, 1), config_error);
    CHECK_THROWS_AS(cost_cache_miss(4, 8, 2, 2, -1), config_error);
    CHECK_THROWS_AS(cost_cache_miss(4, 1, 2, 2, 1), config_error); // n < wog
    CHECK_NOTHROW(cost_cache_miss(4, 8, 0, 2, 1));                 // woh may be zero
    CHECK_THROWS_AS(cost_cache_hit(4, 1, 2, 2, 1), config_error);
    CHECK_THROWS_AS(baseline_cost(-1, 4, 1), config_error);
    CHECK_THROWS_AS(baseline_cost(8, 4, 0), config_error);
    CHECK_THROWS_AS(baseline_cost_hit(0, 4, 1), config_error);
    CHECK_THROWS_AS(memory_eval(0, 4096, 512, 2, 6, 8), config_error);
    CHECK_THROWS_AS(memory_eval(1, 4096, 512, 2, 6, -1), config_error);
}
