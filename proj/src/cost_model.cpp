#include "tlin/cost_model.hpp"

#include "tlin/errors.hpp"

namespace tlin {

namespace {

void check_window_args(int64_t d, int64_t n, int64_t woh, int64_t wog, int64_t h) {
    if (d < 1) throw config_error("cost model: d must be >= 1");
    if (wog < 1) throw config_error("cost model: wog must be >= 1");
    if (woh < 0) throw config_error("cost model: woh must be >= 0");
    if (h < 0) throw config_error("cost model: h must be >= 0");
    if (n < wog) throw config_error("cost model: n must be >= wog");
}

} // namespace

CostBreakdown cost_cache_miss(int64_t d, int64_t n, int64_t woh, int64_t wog, int64_t h) {
    check_window_args(d, n, woh, wog, h);
    const int64_t hist = n - wog;
    CostBreakdown c;
    c.c_left = 2 * d * hist * woh + h * d * woh * woh;
    c.c_right = d * wog * hist + (h + 1) * d * wog * woh + (h + 2) * d * wog * wog;
    c.total = c.c_left + c.c_right;
    c.c1 = d * (2 * woh + wog);
    c.c0 = d * (h * (woh * woh + wog * wog + wog * woh) + wog * wog - wog * woh);
    return c;
}

int64_t cost_cache_hit(int64_t d, int64_t n, int64_t woh, int64_t wog, int64_t h) {
    check_window_args(d, n, woh, wog, h);
    return d * (n - wog) + (h + 1) * d * woh + (h + 2) * d * wog * wog;
}

int64_t baseline_cost(int64_t n, int64_t d, int64_t n_layers) {
    if (n < 0 || d < 1 || n_layers < 1) throw config_error("baseline_cost: bad arguments");
    return n_layers * n * n * d;
}

int64_t baseline_cost_hit(int64_t n_after, int64_t d, int64_t n_layers) {
    if (n_after < 1 || d < 1 || n_layers < 1)
        throw config_error("baseline_cost_hit: bad arguments");
    return n_layers * d * n_after;
}

MemoryEval memory_eval(int64_t batch, int64_t seq, int64_t d_model, int64_t p_bytes,
                       int64_t n_layers, int64_t h) {
    if (batch < 1 || seq < 1 || d_model < 1 || p_bytes < 1 || n_layers < 1 || h < 0)
        throw config_error("memory_eval: bad arguments");
    MemoryEval m;
    m.m_transformer = 2 * batch * seq * d_model * p_bytes * n_layers;
    m.ratio = 1.0 / static_cast<double>(h + 2);
    m.m_tlinformer = static_cast<double>(m.m_transformer) * m.ratio;
    return m;
}

} // namespace tlin
