#include "tlin/kv_cache.hpp"

#include <sstream>

#include "tlin/util.hpp"

namespace tlin {

const char* cache_event_name(CacheEventKind k) {
    switch (k) {
    case CacheEventKind::Miss: return "miss";
    case CacheEventKind::Hit: return "hit";
    case CacheEventKind::Slide: return "slide";
    }
    return "?";
}

std::string cache_events_csv(const std::vector<CacheEvent>& events) {
    std::ostringstream os;
    os << "event_kind,N,g,interaction_units,bytes_cached,wall_nanos\n";
    for (const CacheEvent& e : events) {
        os << cache_event_name(e.kind) << ',' << e.n << ',' << e.g << ',' << e.interaction_units
           << ',' << e.bytes_cached << ',' << e.wall_nanos << '\n';
    }
    return os.str();
}

namespace {

uint64_t kv_elems(const LayerKV& kv) {
    if (!kv.k.defined()) return 0;
    return static_cast<uint64_t>(kv.k.numel() + kv.v.numel());
}

// Largest multiple of wog strictly below n; at least one token stays in the
// window.
int64_t aligned_hist(int64_t n, int64_t wog) { return ((n - 1) / wog) * wog; }

} // namespace

uint64_t KVCacheStore::bytes_cached() const {
    uint64_t elems = 0;
    for (const BlockCache& bc : blocks_) {
        elems += kv_elems(bc.hist_kv);
        for (const LayerKV& kv : bc.ctx_kv) elems += kv_elems(kv);
        for (const LayerKV& kv : bc.gen_kv) elems += kv_elems(kv);
    }
    return elems * static_cast<uint64_t>(dtype_bytes(m_->cfg.dtype));
}

Tensor cache_prefill(KVCacheStore& store, std::span<const int64_t> tokens) {
    const int64_t n = std::ssize(tokens);
    if (n < 1) throw dim_error("cache_prefill: at least one token required");
    const TLinFormer& m = store.model();
    const int64_t hist = aligned_hist(n, m.cfg.wog);

    Graph& G = store.graph_;
    const uint64_t u0 = G.ledger().interaction_units;
    const uint64_t t0 = now_nanos();

    store.hist_tokens_.assign(tokens.begin(), tokens.begin() + hist);
    store.window_tokens_.assign(tokens.begin() + hist, tokens.end());
    store.events_.clear();

    std::vector<BlockCapture> caps;
    Tensor logits = forward_window(G, m, tokens, hist, &caps);

    store.blocks_.assign(static_cast<size_t>(m.cfg.n_blocks), BlockCache{});
    for (size_t b = 0; b < caps.size(); ++b) {
        BlockCache& bc = store.blocks_[b];
        bc.hist_kv = caps[b].hist_kv;
        bc.ctx_kv = std::move(caps[b].ctx_kv);
        bc.gen_kv = std::move(caps[b].gen_kv);
        bc.gen_inputs = std::move(caps[b].gen_inputs);
    }
    store.state_ = CacheState::Warm;

    CacheEvent ev;
    ev.kind = CacheEventKind::Miss;
    ev.n = store.total_tokens();
    ev.g = store.fill();
    ev.interaction_units = G.ledger().interaction_units - u0;
    ev.bytes_cached = store.bytes_cached();
    ev.wall_nanos = now_nanos() - t0;
    store.events_.push_back(ev);
    return logits;
}

Tensor cache_step(KVCacheStore& store, int64_t token) {
    if (store.state() != CacheState::Warm)
        throw state_error("cache_step: store holds nothing, prefill first");
    const TLinFormer& m = store.model();
    const ModelConfig& cfg = m.cfg;
    if (store.fill() >= cfg.wog) throw state_error("cache_step: window is full, slide first");

    Graph& G = store.graph_;
    const uint64_t u0 = G.ledger().interaction_units;
    const uint64_t t0 = now_nanos();

    store.window_tokens_.push_back(token);
    const int64_t g = store.fill();
    const int64_t hist = store.hist_len();
    const int64_t pos = hist + g - 1;

    AttentionPattern causal;
    causal.kind = AttnKind::Causal;
    AttentionPattern cross;
    cross.kind = AttnKind::Cross;
    const std::vector<int64_t> last_row{g - 1};

    const int64_t one[] = {token};
    Tensor row = embed_tokens(G, m.embed, one, pos);

    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
        BlockCache& bc = store.blocks_[static_cast<size_t>(b)];
        const Block& blk = m.blocks[static_cast<size_t>(b)];
        for (size_t l = 0; l < blk.gen.size(); ++l) {
            const GenLayer& gl = blk.gen[l];
            Tensor& input_cache = bc.gen_inputs[l];
            input_cache = input_cache.defined() ? G.concat_rows({input_cache, row}) : row;

            Tensor u_all = gl.ln_attn.forward(G, input_cache);
            Tensor u_new = g > 1 ? G.select_rows(u_all, last_row) : u_all;

            LayerKV kv_new = gl.self_attn.project_kv(G, u_new);
            LayerKV& kv = bc.gen_kv[l];
            kv.k = kv.k.defined() ? G.concat_rows({kv.k, kv_new.k}) : kv_new.k;
            kv.v = kv.v.defined() ? G.concat_rows({kv.v, kv_new.v}) : kv_new.v;

            // Recompute over the occupied window rows; rows before the last
            // reproduce their earlier values and only the last is kept.
            Tensor a_all = gl.self_attn.forward_with_kv(G, u_all, kv, causal);
            Tensor a_new = g > 1 ? G.select_rows(a_all, last_row) : a_all;

            Tensor y = G.add(row, a_new);
            if (hist > 0) {
                const LayerKV& src = (l == 0) ? bc.hist_kv : bc.ctx_kv[l - 1];
                Tensor cr = gl.cross_attn.forward_with_kv(G, u_new, src, cross);
                y = G.add(y, cr);
            }
            row = G.add(y, gl.ffn.forward(G, gl.ln_ffn.forward(G, y)));
        }
    }

    Tensor u = m.final_ln.forward(G, row);
    Tensor logits = G.matmul_nt(u, m.embed);

    // The window buffer is charged at its reserved extent: empty rows cost
    // like occupied ones, so every step charges the same total.
    const int64_t levels = cfg.inner_depth + 2;
    const uint64_t topup = static_cast<uint64_t>(cfg.n_blocks * levels * cfg.d_model *
                                                 (cfg.wog * cfg.wog - g * g));
    G.ledger().interaction_units += topup;

    CacheEvent ev;
    ev.kind = CacheEventKind::Hit;
    ev.n = store.total_tokens();
    ev.g = g;
    ev.interaction_units = G.ledger().interaction_units - u0;
    ev.bytes_cached = store.bytes_cached();
    ev.wall_nanos = now_nanos() - t0;
    store.events_.push_back(ev);
    return logits;
}

void cache_slide(KVCacheStore& store) {
    if (store.state() != CacheState::Warm)
        throw state_error("cache_slide: store holds nothing, prefill first");
    const TLinFormer& m = store.model();
    const ModelConfig& cfg = m.cfg;
    if (store.fill() != cfg.wog) throw state_error("cache_slide: window is not full");

    const uint64_t t0 = now_nanos();
    store.hist_tokens_.insert(store.hist_tokens_.end(), store.window_tokens_.begin(),
                              store.window_tokens_.end());
    store.window_tokens_.clear();
    const size_t levels = static_cast<size_t>(cfg.inner_depth + 2);
    for (BlockCache& bc : store.blocks_) {
        bc.gen_kv.assign(levels, LayerKV{});
        bc.gen_inputs.assign(levels, Tensor{});
    }

    CacheEvent slide_ev;
    slide_ev.kind = CacheEventKind::Slide;
    slide_ev.n = store.total_tokens();
    slide_ev.g = 0;
    slide_ev.interaction_units = 0;
    slide_ev.bytes_cached = store.bytes_cached();
    slide_ev.wall_nanos = now_nanos() - t0;
    store.events_.push_back(slide_ev);

    // Rebuild the context side over the grown history.
    Graph& G = store.graph_;
    const uint64_t u0 = G.ledger().interaction_units;
    const uint64_t t1 = now_nanos();

    Tensor x = embed_tokens(G, m.embed, store.hist_tokens_, 0);
    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
        BlockCache& bc = store.blocks_[static_cast<size_t>(b)];
        const Block& blk = m.blocks[static_cast<size_t>(b)];
        bc.hist_kv = blk.gen[0].cross_attn.project_kv(G, x);
        ContextResult ctx = context_path_forward(G, blk, x, cfg.woh, /*restore=*/true);
        bc.ctx_kv.assign(levels - 1, LayerKV{});
        for (size_t l = 1; l < levels; ++l)
            bc.ctx_kv[l - 1] = blk.gen[l].cross_attn.project_kv(G, ctx.states[l - 1]);
        x = ctx.restored;
    }

    CacheEvent miss_ev;
    miss_ev.kind = CacheEventKind::Miss;
    miss_ev.n = store.total_tokens();
    miss_ev.g = 0;
    miss_ev.interaction_units = G.ledger().interaction_units - u0;
    miss_ev.bytes_cached = store.bytes_cached();
    miss_ev.wall_nanos = now_nanos() - t1;
    store.events_.push_back(miss_ev);
}

std::string CacheReport::to_string() const {
    std::ostringstream os;
    os << "bytes_cached=" << bytes_cached << " hist_kv_elems=" << hist_kv_elems
       << " ctx_kv_elems=" << ctx_kv_elems << " gen_kv_elems=" << gen_kv_elems
       << " window_input_elems=" << window_input_elems;
    return os.str();
}

CacheReport cache_report(const KVCacheStore& store) {
    CacheReport r;
    for (const BlockCache& bc : store.blocks()) {
        r.hist_kv_elems += static_cast<int64_t>(kv_elems(bc.hist_kv));
        for (const LayerKV& kv : bc.ctx_kv) r.ctx_kv_elems += static_cast<int64_t>(kv_elems(kv));
        for (const LayerKV& kv : bc.gen_kv) r.gen_kv_elems += static_cast<int64_t>(kv_elems(kv));
        for (const Tensor& t : bc.gen_inputs)
            if (t.defined()) r.window_input_elems += t.numel();
    }
    r.bytes_cached = store.bytes_cached();
    return r;
}

std::vector<int64_t> generate_cached(KVCacheStore& store, std::span<const int64_t> prompt,
                                     int64_t n_tokens) {
    if (n_tokens < 1) throw config_error("generate: n_tokens must be positive");
    Tensor logits = cache_prefill(store, prompt);
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    int64_t tok = argmax_row(logits, logits.rows() - 1);
    out.push_back(tok);
    while (std::ssize(out) < n_tokens) {
        if (store.fill() == store.model().cfg.wog) cache_slide(store);
        logits = cache_step(store, tok);
        tok = argmax_row(logits, 0);
        out.push_back(tok);
    }
    return out;
}

std::vector<int64_t> generate_uncached(const TLinFormer& m, std::span<const int64_t> prompt,
                                       int64_t n_tokens) {
    if (n_tokens < 1) throw config_error("generate: n_tokens must be positive");
    if (prompt.empty()) throw dim_error("generate: empty prompt");
    std::vector<int64_t> toks(prompt.begin(), prompt.end());
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    for (int64_t i = 0; i < n_tokens; ++i) {
        Graph G(/*grad_enabled=*/false);
        const int64_t hist = aligned_hist(std::ssize(toks), m.cfg.wog);
        Tensor logits = forward_window(G, m, toks, hist);
        const int64_t tok = argmax_row(logits, logits.rows() - 1);
        out.push_back(tok);
        toks.push_back(tok);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense baseline cache
// ---------------------------------------------------------------------------

uint64_t BaselineCacheStore::bytes_cached() const {
    uint64_t elems = 0;
    for (const LayerKV& kv : layers_) elems += kv_elems(kv);
    return elems * static_cast<uint64_t>(dtype_bytes(m_->cfg.dtype));
}

Tensor baseline_cache_prefill(BaselineCacheStore& store, std::span<const int64_t> tokens) {
    const int64_t n = std::ssize(tokens);
    if (n < 1) throw dim_error("baseline prefill: at least one token required");
    const BaselineModel& m = store.model();

    Graph& G = store.graph_;
    const uint64_t u0 = G.ledger().interaction_units;
    const uint64_t t0 = now_nanos();

    store.tokens_.assign(tokens.begin(), tokens.end());
    store.events_.clear();
    Tensor logits = baseline_forward(G, m, tokens, &store.layers_);
    store.state_ = CacheState::Warm;

    CacheEvent ev;
    ev.kind = CacheEventKind::Miss;
    ev.n = n;
    ev.g = 0;
    ev.interaction_units = G.ledger().interaction_units - u0;
    ev.bytes_cached = store.bytes_cached();
    ev.wall_nanos = now_nanos() - t0;
    store.events_.push_back(ev);
    return logits;
}

Tensor baseline_cache_step(BaselineCacheStore& store, int64_t token) {
    if (store.state() != CacheState::Warm)
        throw state_error("baseline step: store holds nothing, prefill first");
    const BaselineModel& m = store.model();
    const int64_t pos = store.total_tokens();
    if (pos + 1 > m.cfg.max_seq)
        throw config_error("baseline step: position table exhausted at max_seq " +
                           std::to_string(m.cfg.max_seq));

    Graph& G = store.graph_;
    const uint64_t u0 = G.ledger().interaction_units;
    const uint64_t t0 = now_nanos();

    store.tokens_.push_back(token);
    const int64_t one[] = {token};
    Tensor row = embed_tokens(G, m.embed, one, pos);

    // The newest query sees every key, so the single-row pass uses the
    // unmasked pattern over the appended K/V.
    AttentionPattern all;
    all.kind = AttnKind::Cross;
    for (int64_t l = 0; l < m.n_layers; ++l) {
        const BaselineLayer& L = m.layers[static_cast<size_t>(l)];
        Tensor u = L.ln_attn.forward(G, row);
        LayerKV kv_new = L.attn.project_kv(G, u);
        LayerKV& kv = store.layers_[static_cast<size_t>(l)];
        kv.k = G.concat_rows({kv.k, kv_new.k});
        kv.v = G.concat_rows({kv.v, kv_new.v});
        Tensor a = L.attn.forward_with_kv(G, u, kv, all);
        row = G.add(row, a);
        row = G.add(row, L.ffn.forward(G, L.ln_ffn.forward(G, row)));
    }
    Tensor u = m.final_ln.forward(G, row);
    Tensor logits = G.matmul_nt(u, m.embed);

    CacheEvent ev;
    ev.kind = CacheEventKind::Hit;
    ev.n = store.total_tokens();
    ev.g = 0;
    ev.interaction_units = G.ledger().interaction_units - u0;
    ev.bytes_cached = store.bytes_cached();
    ev.wall_nanos = now_nanos() - t0;
    store.events_.push_back(ev);
    return logits;
}

std::vector<int64_t> generate_baseline_cached(BaselineCacheStore& store,
                                              std::span<const int64_t> prompt, int64_t n_tokens) {
    if (n_tokens < 1) throw config_error("generate: n_tokens must be positive");
    Tensor logits = baseline_cache_prefill(store, prompt);
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    int64_t tok = argmax_row(logits, logits.rows() - 1);
    out.push_back(tok);
    while (std::ssize(out) < n_tokens) {
        logits = baseline_cache_step(store, tok);
        tok = argmax_row(logits, 0);
        out.push_back(tok);
    }
    return out;
}

std::vector<int64_t> generate_baseline_uncached(const BaselineModel& m,
                                                std::span<const int64_t> prompt,
                                                int64_t n_tokens) {
    if (n_tokens < 1) throw config_error("generate: n_tokens must be positive");
    if (prompt.empty()) throw dim_error("generate: empty prompt");
    std::vector<int64_t> toks(prompt.begin(), prompt.end());
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    for (int64_t i = 0; i < n_tokens; ++i) {
        Graph G(/*grad_enabled=*/false);
        Tensor logits = baseline_forward(G, m, toks);
        const int64_t tok = argmax_row(logits, logits.rows() - 1);
        out.push_back(tok);
        toks.push_back(tok);
    }
    return out;
}

} // namespace tlin
