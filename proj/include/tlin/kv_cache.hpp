#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tlin/model.hpp"

namespace tlin {

enum class CacheState { Empty, Warm };
enum class CacheEventKind { Miss, Hit, Slide };

const char* cache_event_name(CacheEventKind k);

// One ledger row per cache transition. n counts tokens held after the event,
// g the open-window fill. interaction_units is the delta charged by this
// event alone; bytes_cached is the K/V payload total after it.
struct CacheEvent {
    CacheEventKind kind = CacheEventKind::Miss;
    int64_t n = 0;
    int64_t g = 0;
    uint64_t interaction_units = 0;
    uint64_t bytes_cached = 0;
    uint64_t wall_nanos = 0;
};

std::string cache_events_csv(const std::vector<CacheEvent>& events);

// Per-block buffers. hist_kv and ctx_kv stay fixed between slides; gen_kv and
// gen_inputs grow one row per step and empty at a slide. Every gen_kv entry
// holds exactly fill() rows.
struct BlockCache {
    LayerKV hist_kv;
    std::vector<LayerKV> ctx_kv;
    std::vector<LayerKV> gen_kv;
    std::vector<Tensor> gen_inputs;
};

// Incremental-decode state for one model. History length is always a multiple
// of wog; the remaining tokens live in the open window.
class KVCacheStore {
  public:
    explicit KVCacheStore(const TLinFormer& model) : m_(&model), graph_(/*grad_enabled=*/false) {}
    KVCacheStore(const KVCacheStore&) = delete;
    KVCacheStore& operator=(const KVCacheStore&) = delete;

    const TLinFormer& model() const { return *m_; }
    Graph& graph() { return graph_; }
    CacheState state() const { return state_; }
    int64_t hist_len() const { return static_cast<int64_t>(hist_tokens_.size()); }
    int64_t fill() const { return static_cast<int64_t>(window_tokens_.size()); }
    int64_t total_tokens() const { return hist_len() + fill(); }

    std::vector<BlockCache>& blocks() { return blocks_; }
    const std::vector<BlockCache>& blocks() const { return blocks_; }
    const std::vector<CacheEvent>& events() const { return events_; }

    // K/V payload bytes across every block; window input rows not included.
    uint64_t bytes_cached() const;

  private:
    const TLinFormer* m_;
    Graph graph_;
    CacheState state_ = CacheState::Empty;
    std::vector<int64_t> hist_tokens_;
    std::vector<int64_t> window_tokens_;
    std::vector<BlockCache> blocks_;
    std::vector<CacheEvent> events_;

    friend Tensor cache_prefill(KVCacheStore&, std::span<const int64_t>);
    friend Tensor cache_step(KVCacheStore&, int64_t);
    friend void cache_slide(KVCacheStore&);
};

// Discards any held state and ingests the whole sequence in one forward.
// History takes the largest multiple of wog below n; the rest opens the
// window. Returns logits over the window rows. Emits one Miss event.
Tensor cache_prefill(KVCacheStore& store, std::span<const int64_t> tokens);

// Appends one token to the open window and returns its logits row. The window
// must have room; slide first when fill() == wog. The causal sites recompute
// over the occupied window rows and the charge is topped up to the full wog
// extent, so every step costs the same regardless of fill. Emits a Hit event.
Tensor cache_step(KVCacheStore& store, int64_t token);

// Absorbs the full window into history, drops the window buffers, and
// recomputes the context-side caches over the grown history. Emits a Slide
// marker followed by a Miss event carrying the rebuild charge.
void cache_slide(KVCacheStore& store);

struct CacheReport {
    uint64_t bytes_cached = 0;
    int64_t hist_kv_elems = 0;
    int64_t ctx_kv_elems = 0;
    int64_t gen_kv_elems = 0;
    int64_t window_input_elems = 0; // activation rows, kept outside bytes_cached
    std::string to_string() const;
};

CacheReport cache_report(const KVCacheStore& store);

// Greedy decode through the store: prefill the prompt, then step a token at a
// time, sliding whenever the window fills. Returns the n_tokens new tokens.
std::vector<int64_t> generate_cached(KVCacheStore& store, std::span<const int64_t> prompt,
                                     int64_t n_tokens);

// Reference decode without any cache: one full forward per emitted token,
// with the same history/window split the store would use.
std::vector<int64_t> generate_uncached(const TLinFormer& m, std::span<const int64_t> prompt,
                                       int64_t n_tokens);

// ---------------------------------------------------------------------------
// Dense baseline cache
// ---------------------------------------------------------------------------

// Standard per-layer K/V append cache for the dense decoder. Appending copies
// the layer's K/V into a one-row-longer tensor.
class BaselineCacheStore {
  public:
    explicit BaselineCacheStore(const BaselineModel& model)
        : m_(&model), graph_(/*grad_enabled=*/false) {}
    BaselineCacheStore(const BaselineCacheStore&) = delete;
    BaselineCacheStore& operator=(const BaselineCacheStore&) = delete;

    const BaselineModel& model() const { return *m_; }
    Graph& graph() { return graph_; }
    CacheState state() const { return state_; }
    int64_t total_tokens() const { return static_cast<int64_t>(tokens_.size()); }
    const std::vector<CacheEvent>& events() const { return events_; }
    uint64_t bytes_cached() const;

  private:
    const BaselineModel* m_;
    Graph graph_;
    CacheState state_ = CacheState::Empty;
    std::vector<int64_t> tokens_;
    std::vector<LayerKV> layers_;
    std::vector<CacheEvent> events_;

    friend Tensor baseline_cache_prefill(BaselineCacheStore&, std::span<const int64_t>);
    friend Tensor baseline_cache_step(BaselineCacheStore&, int64_t);
};

Tensor baseline_cache_prefill(BaselineCacheStore& store, std::span<const int64_t> tokens);
Tensor baseline_cache_step(BaselineCacheStore& store, int64_t token);

std::vector<int64_t> generate_baseline_cached(BaselineCacheStore& store,
                                              std::span<const int64_t> prompt, int64_t n_tokens);
std::vector<int64_t> generate_baseline_uncached(const BaselineModel& m,
                                                std::span<const int64_t> prompt,
                                                int64_t n_tokens);

} // namespace tlin
