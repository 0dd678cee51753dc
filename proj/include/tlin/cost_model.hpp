#pragma once

#include <cstdint>

namespace tlin {

// Interaction-unit prices for one window block, in D multiply-accumulates per
// scored query-key pair. All arithmetic is 64-bit integer; desk-scale inputs
// stay far from overflow.
//
//   c_left   history side: compress attention over the full history, h inner
//            self-attention layers at window width, restore attention back to
//            full length
//   c_right  window side: cross-attention of the window against raw history,
//            cross-attention against each inner layer, causal self-attention
//            inside the window at every depth
//   total == c1 * n + c0 for every input (the linear-in-n identity)
struct CostBreakdown {
    int64_t c_left = 0;
    int64_t c_right = 0;
    int64_t total = 0;
    int64_t c1 = 0; // per-token slope
    int64_t c0 = 0; // fixed window overhead
};

// Full (cold) forward at sequence length n with window split (woh, wog) and h
// inner layers. Requires d >= 1, wog >= 1, woh >= 0, h >= 0, n >= wog.
CostBreakdown cost_cache_miss(int64_t d, int64_t n, int64_t woh, int64_t wog, int64_t h);

// One generated token with warm caches: the token's cross-attention rows plus
// a full window-causal recompute padded to wog^2 per depth.
int64_t cost_cache_hit(int64_t d, int64_t n, int64_t woh, int64_t wog, int64_t h);

// Dense causal decoder, full forward: n_layers * n^2 * d (masked pairs are
// charged; the window area is what is priced).
int64_t baseline_cost(int64_t n, int64_t d, int64_t n_layers);

// Dense decoder appending one token with a KV cache: the new row costs
// n_after keys at every layer.
int64_t baseline_cost_hit(int64_t n_after, int64_t d, int64_t n_layers);

struct MemoryEval {
    int64_t m_transformer = 0;  // bytes: 2 * batch * seq * d_model * p_bytes * n_layers
    double m_tlinformer = 0;    // asymptotic bytes; ratio of the two below
    double ratio = 0;           // 1 / (h + 2)
};

MemoryEval memory_eval(int64_t batch, int64_t seq, int64_t d_model, int64_t p_bytes,
                       int64_t n_layers, int64_t h);

} // namespace tlin
