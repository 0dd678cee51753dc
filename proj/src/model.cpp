#include "tlin/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "json.hpp"

#include "tlin/util.hpp"

namespace tlin {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (vocab_size < 2) throw config_error("vocab_size must be at least 2");
    if (d_model < 1) throw config_error("d_model must be positive");
    if (n_head < 1 || d_model % n_head != 0)
        throw config_error("n_head must be positive and divide d_model");
    if (inner_depth < 0) throw config_error("inner_depth must be non-negative");
    if (n_blocks < 1) throw config_error("n_blocks must be positive");
    if (woh < 1) throw config_error("woh must be positive");
    if (wog < 1) throw config_error("wog must be positive");
    if (ffn_mult < 1) throw config_error("ffn_mult must be positive");
    if (max_seq < 1) throw config_error("max_seq must be positive");
}

WindowLayout WindowLayout::make(int64_t n, int64_t woh, int64_t wog) {
    if (wog < 1) throw config_error("window layout: wog must be positive");
    if (woh < 0) throw config_error("window layout: woh must be non-negative");
    if (n < wog)
        throw config_error("window layout: sequence of " + std::to_string(n) +
                           " tokens cannot fill a generation window of " + std::to_string(wog));
    WindowLayout w;
    w.n = n;
    w.woh = woh;
    w.wog = wog;
    return w;
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

Tensor LayerNormParams::forward(Graph& g, const Tensor& x) const {
    return g.layer_norm(x, gain, bias);
}

Tensor FeedForward::forward(Graph& g, const Tensor& x) const {
    Tensor h = g.add_bias(g.matmul(x, w1), b1);
    h = g.gelu(h);
    return g.add_bias(g.matmul(h, w2), b2);
}

LayerKV AttentionSiteParams::project_kv(Graph& g, const Tensor& kv_in) const {
    LayerKV kv;
    kv.k = g.matmul(kv_in, wk);
    kv.v = g.matmul(kv_in, wv);
    return kv;
}

Tensor AttentionSiteParams::forward(Graph& g, const Tensor& q_in, const Tensor& kv_in,
                                    const AttentionPattern& pattern, LayerKV* kv_out) const {
    Tensor q = g.matmul(q_in, wq);
    LayerKV kv = project_kv(g, kv_in);
    if (kv_out) *kv_out = kv;
    AttentionInputs in;
    in.q = q;
    in.k = kv.k;
    in.v = kv.v;
    in.n_head = n_head;
    in.w_out = wo;
    return attend(g, in, pattern);
}

Tensor AttentionSiteParams::forward_with_kv(Graph& g, const Tensor& q_in, const LayerKV& kv,
                                            const AttentionPattern& pattern) const {
    if (!kv.k.defined() || !kv.v.defined())
        throw state_error("attention site: cached K/V is not populated");
    Tensor q = g.matmul(q_in, wq);
    AttentionInputs in;
    in.q = q;
    in.k = kv.k;
    in.v = kv.v;
    in.n_head = n_head;
    in.w_out = wo;
    return attend(g, in, pattern);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

constexpr double kInitStd = 0.02;

LayerNormParams init_ln(int64_t d, Dtype dt) {
    LayerNormParams p;
    p.gain = Tensor::full({d}, 1.0, dt);
    p.bias = Tensor::zeros({d}, dt);
    return p;
}

AttentionSiteParams init_site(std::mt19937_64& rng, int64_t d, int64_t n_head, Dtype dt) {
    AttentionSiteParams s;
    s.wq = Tensor::randn({d, d}, rng, kInitStd, dt);
    s.wk = Tensor::randn({d, d}, rng, kInitStd, dt);
    s.wv = Tensor::randn({d, d}, rng, kInitStd, dt);
    s.wo = Tensor::randn({d, d}, rng, kInitStd, dt);
    s.n_head = n_head;
    return s;
}

FeedForward init_ffn(std::mt19937_64& rng, int64_t d, int64_t mult, Dtype dt) {
    FeedForward f;
    f.w1 = Tensor::randn({d, mult * d}, rng, kInitStd, dt);
    f.b1 = Tensor::zeros({mult * d}, dt);
    f.w2 = Tensor::randn({mult * d, d}, rng, kInitStd, dt);
    f.b2 = Tensor::zeros({d}, dt);
    return f;
}

void push_ln(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
             const LayerNormParams& ln) {
    out.emplace_back(prefix + ".gain", ln.gain);
    out.emplace_back(prefix + ".bias", ln.bias);
}

void push_site(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const AttentionSiteParams& s) {
    out.emplace_back(prefix + ".wq", s.wq);
    out.emplace_back(prefix + ".wk", s.wk);
    out.emplace_back(prefix + ".wv", s.wv);
    out.emplace_back(prefix + ".wo", s.wo);
}

void push_ffn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
              const FeedForward& f) {
    out.emplace_back(prefix + ".w1", f.w1);
    out.emplace_back(prefix + ".b1", f.b1);
    out.emplace_back(prefix + ".w2", f.w2);
    out.emplace_back(prefix + ".b2", f.b2);
}

int64_t count_params(const std::vector<std::pair<std::string, Tensor>>& ps) {
    int64_t n = 0;
    for (const auto& [name, t] : ps) n += t.numel();
    return n;
}

void mark_trainable(const std::vector<std::pair<std::string, Tensor>>& ps) {
    for (const auto& [name, t] : ps) const_cast<Tensor&>(t).set_requires_grad(true);
}

} // namespace

TLinFormer TLinFormer::init(const ModelConfig& cfg) {
    cfg.validate();
    TLinFormer m;
    m.cfg = cfg;
    std::mt19937_64 rng(cfg.seed);
    m.embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, kInitStd, cfg.dtype);
    const int64_t levels = cfg.inner_depth + 2;
    m.blocks.resize(static_cast<size_t>(cfg.n_blocks));
    for (auto& blk : m.blocks) {
        blk.ctx.resize(static_cast<size_t>(levels));
        blk.gen.resize(static_cast<size_t>(levels));
        for (auto& l : blk.ctx) {
            l.ln_attn = init_ln(cfg.d_model, cfg.dtype);
            l.attn = init_site(rng, cfg.d_model, cfg.n_head, cfg.dtype);
            l.ln_ffn = init_ln(cfg.d_model, cfg.dtype);
            l.ffn = init_ffn(rng, cfg.d_model, cfg.ffn_mult, cfg.dtype);
        }
        for (auto& l : blk.gen) {
            l.ln_attn = init_ln(cfg.d_model, cfg.dtype);
            l.self_attn = init_site(rng, cfg.d_model, cfg.n_head, cfg.dtype);
            l.cross_attn = init_site(rng, cfg.d_model, cfg.n_head, cfg.dtype);
            l.ln_ffn = init_ln(cfg.d_model, cfg.dtype);
            l.ffn = init_ffn(rng, cfg.d_model, cfg.ffn_mult, cfg.dtype);
        }
    }
    m.final_ln = init_ln(cfg.d_model, cfg.dtype);
    mark_trainable(m.named_params());
    return m;
}

std::vector<std::pair<std::string, Tensor>> TLinFormer::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed", embed);
    for (size_t b = 0; b < blocks.size(); ++b) {
        const std::string bp = "block" + std::to_string(b);
        const Block& blk = blocks[b];
        for (size_t l = 0; l < blk.ctx.size(); ++l) {
            const std::string p = bp + ".ctx" + std::to_string(l);
            push_ln(out, p + ".ln_attn", blk.ctx[l].ln_attn);
            push_site(out, p + ".attn", blk.ctx[l].attn);
            push_ln(out, p + ".ln_ffn", blk.ctx[l].ln_ffn);
            push_ffn(out, p + ".ffn", blk.ctx[l].ffn);
        }
        for (size_t l = 0; l < blk.gen.size(); ++l) {
            const std::string p = bp + ".gen" + std::to_string(l);
            push_ln(out, p + ".ln_attn", blk.gen[l].ln_attn);
            push_site(out, p + ".self_attn", blk.gen[l].self_attn);
            push_site(out, p + ".cross_attn", blk.gen[l].cross_attn);
            push_ln(out, p + ".ln_ffn", blk.gen[l].ln_ffn);
            push_ffn(out, p + ".ffn", blk.gen[l].ffn);
        }
    }
    push_ln(out, "final_ln", final_ln);
    return out;
}

int64_t TLinFormer::param_count() const { return count_params(named_params()); }

BaselineModel BaselineModel::init(const ModelConfig& cfg) {
    cfg.validate();
    BaselineModel m;
    m.cfg = cfg;
    m.n_layers = cfg.equivalent_depth();
    std::mt19937_64 rng(cfg.seed);
    m.embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, kInitStd, cfg.dtype);
    m.layers.resize(static_cast<size_t>(m.n_layers));
    for (auto& l : m.layers) {
        l.ln_attn = init_ln(cfg.d_model, cfg.dtype);
        l.attn = init_site(rng, cfg.d_model, cfg.n_head, cfg.dtype);
        l.ln_ffn = init_ln(cfg.d_model, cfg.dtype);
        l.ffn = init_ffn(rng, cfg.d_model, cfg.ffn_mult, cfg.dtype);
    }
    m.final_ln = init_ln(cfg.d_model, cfg.dtype);
    mark_trainable(m.named_params());
    return m;
}

std::vector<std::pair<std::string, Tensor>> BaselineModel::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed", embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l);
        push_ln(out, p + ".ln_attn", layers[l].ln_attn);
        push_site(out, p + ".attn", layers[l].attn);
        push_ln(out, p + ".ln_ffn", layers[l].ln_ffn);
        push_ffn(out, p + ".ffn", layers[l].ffn);
    }
    push_ln(out, "final_ln", final_ln);
    return out;
}

int64_t BaselineModel::param_count() const { return count_params(named_params()); }

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

Tensor positional_rows(int64_t len, int64_t pos0, int64_t d, Dtype dt) {
    if (len < 0 || pos0 < 0 || d < 1) throw dim_error("positional_rows: bad arguments");
    std::vector<double> v(static_cast<size_t>(len * d));
    for (int64_t p = 0; p < len; ++p) {
        for (int64_t c = 0; c < d; ++c) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(c / 2) /
                                                      static_cast<double>(d));
            const double ang = static_cast<double>(pos0 + p) * freq;
            v[static_cast<size_t>(p * d + c)] = (c % 2 == 0) ? std::sin(ang) : std::cos(ang);
        }
    }
    return Tensor::from({len, d}, v, dt);
}

Tensor embed_tokens(Graph& g, const Tensor& embed, std::span<const int64_t> ids, int64_t pos0) {
    if (!embed.defined() || embed.rank() != 2)
        throw dim_error("embed_tokens: table must be rank-2");
    const int64_t vocab = embed.rows();
    std::vector<int64_t> idx(ids.begin(), ids.end());
    for (int64_t t : idx) {
        if (t < 0 || t >= vocab)
            throw config_error("token id " + std::to_string(t) + " outside vocab of " +
                               std::to_string(vocab));
    }
    Tensor rows = g.select_rows(embed, std::move(idx));
    Tensor pe = positional_rows(std::ssize(ids), pos0, embed.cols(), embed.dtype());
    return g.add(rows, pe);
}

ContextResult context_path_forward(Graph& g, const Block& blk, const Tensor& x_hist,
                                   int64_t woh, bool restore) {
    if (!x_hist.defined() || x_hist.rank() != 2 || x_hist.rows() < 1)
        throw dim_error("context path: history rows required");
    if (blk.ctx.size() < 2) throw dim_error("context path: block holds fewer than two layers");
    const int64_t hist = x_hist.rows();
    const int64_t wc = std::min(woh, hist); // short histories shrink the context width

    // Compress: queries are the trailing wc history positions, keys the whole
    // history. The residual stream is those selected rows.
    const ContextLayer& l0 = blk.ctx.front();
    std::vector<int64_t> sel(static_cast<size_t>(wc));
    for (int64_t i = 0; i < wc; ++i) sel[static_cast<size_t>(i)] = hist - wc + i;
    validate_query_selection(sel, hist);
    AttentionPattern focused;
    focused.kind = AttnKind::Focused;
    focused.query_selection = sel;

    Tensor u0 = l0.ln_attn.forward(g, x_hist);
    Tensor q0 = g.select_rows(u0, sel);
    Tensor a0 = l0.attn.forward(g, q0, u0, focused);
    Tensor c = g.add(g.select_rows(x_hist, sel), a0);
    c = g.add(c, l0.ffn.forward(g, l0.ln_ffn.forward(g, c)));

    ContextResult res;
    res.states.push_back(c);

    AttentionPattern self_full; // SelfFull, no selection
    const size_t inner = blk.ctx.size() - 2;
    for (size_t i = 1; i <= inner; ++i) {
        const ContextLayer& li = blk.ctx[i];
        Tensor u = li.ln_attn.forward(g, c);
        Tensor a = li.attn.forward(g, u, u, self_full);
        c = g.add(c, a);
        c = g.add(c, li.ffn.forward(g, li.ln_ffn.forward(g, c)));
        res.states.push_back(c);
    }

    if (restore) {
        // Expand back to full history length: queries are the normalized
        // history stream, keys the final context state (used raw).
        const ContextLayer& lr = blk.ctx.back();
        AttentionPattern cross;
        cross.kind = AttnKind::Cross;
        Tensor uq = lr.ln_attn.forward(g, x_hist);
        Tensor a = lr.attn.forward(g, uq, res.states.back(), cross);
        Tensor r = g.add(x_hist, a);
        r = g.add(r, lr.ffn.forward(g, lr.ln_ffn.forward(g, r)));
        res.restored = r;
    }
    return res;
}

std::vector<Tensor> generation_path_forward(Graph& g, const Block& blk, const Tensor& x_gen,
                                            const Tensor& x_hist,
                                            const std::vector<Tensor>& ctx_states,
                                            BlockCapture* cap) {
    if (!x_gen.defined() || x_gen.rank() != 2 || x_gen.rows() < 1)
        throw dim_error("generation path: window rows required");
    const size_t n_layers = blk.gen.size();
    const bool with_hist = x_hist.defined() && x_hist.rows() > 0;
    if (with_hist && ctx_states.size() != n_layers - 1)
        throw dim_error("generation path: expected one context state per layer past the first");
    if (cap) {
        cap->ctx_kv.assign(n_layers - 1, LayerKV{});
        cap->gen_kv.assign(n_layers, LayerKV{});
        cap->gen_inputs.assign(n_layers, Tensor{});
    }

    AttentionPattern causal;
    causal.kind = AttnKind::Causal;
    AttentionPattern cross;
    cross.kind = AttnKind::Cross;

    std::vector<Tensor> states;
    states.reserve(n_layers + 1);
    states.push_back(x_gen);
    Tensor h = x_gen;
    for (size_t l = 0; l < n_layers; ++l) {
        const GenLayer& gl = blk.gen[l];
        if (cap) cap->gen_inputs[l] = h;
        Tensor u = gl.ln_attn.forward(g, h);
        Tensor a = gl.self_attn.forward(g, u, u, causal, cap ? &cap->gen_kv[l] : nullptr);
        Tensor y = g.add(h, a);
        if (with_hist) {
            const Tensor& src = (l == 0) ? x_hist : ctx_states[l - 1];
            LayerKV* kv_out = cap ? (l == 0 ? &cap->hist_kv : &cap->ctx_kv[l - 1]) : nullptr;
            Tensor b = gl.cross_attn.forward(g, u, src, cross, kv_out);
            y = g.add(y, b);
        }
        h = g.add(y, gl.ffn.forward(g, gl.ln_ffn.forward(g, y)));
        states.push_back(h);
    }
    return states;
}

Tensor forward_window(Graph& g, const TLinFormer& m, std::span<const int64_t> tokens,
                      int64_t hist_len, std::vector<BlockCapture>* capture) {
    const ModelConfig& cfg = m.cfg;
    const int64_t n = std::ssize(tokens);
    if (hist_len < 0 || hist_len > n) throw dim_error("forward_window: hist_len out of range");
    const int64_t w = n - hist_len;
    if (w < 1 || w > cfg.wog)
        throw dim_error("forward_window: window must hold between 1 and wog tokens");
    if (capture) capture->assign(static_cast<size_t>(cfg.n_blocks), BlockCapture{});

    Tensor x_hist;
    if (hist_len > 0) x_hist = embed_tokens(g, m.embed, tokens.first(hist_len), 0);
    Tensor x_gen = embed_tokens(g, m.embed, tokens.subspan(hist_len), hist_len);

    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
        const Block& blk = m.blocks[static_cast<size_t>(b)];
        BlockCapture* cap = capture ? &(*capture)[static_cast<size_t>(b)] : nullptr;
        ContextResult ctx;
        if (x_hist.defined())
            ctx = context_path_forward(g, blk, x_hist, cfg.woh, /*restore=*/true);
        auto states = generation_path_forward(g, blk, x_gen, x_hist, ctx.states, cap);
        if (cap) cap->restored = ctx.restored;
        x_gen = states.back();
        x_hist = ctx.restored; // next block reads the restored history
    }
    Tensor u = m.final_ln.forward(g, x_gen);
    return g.matmul_nt(u, m.embed);
}

Tensor tlinformer_forward(Graph& g, const TLinFormer& m, std::span<const int64_t> tokens) {
    const WindowLayout lay = WindowLayout::make(std::ssize(tokens), m.cfg.woh, m.cfg.wog);
    return forward_window(g, m, tokens, lay.hist_len(), nullptr);
}

Tensor baseline_forward(Graph& g, const BaselineModel& m, std::span<const int64_t> tokens,
                        std::vector<LayerKV>* capture) {
    const int64_t n = std::ssize(tokens);
    if (n < 1) throw dim_error("baseline_forward: empty sequence");
    if (n > m.cfg.max_seq)
        throw config_error("sequence of " + std::to_string(n) +
                           " tokens exceeds the position table (max_seq " +
                           std::to_string(m.cfg.max_seq) + ")");
    if (capture) capture->assign(static_cast<size_t>(m.n_layers), LayerKV{});

    AttentionPattern causal;
    causal.kind = AttnKind::Causal;
    Tensor x = embed_tokens(g, m.embed, tokens, 0);
    for (int64_t l = 0; l < m.n_layers; ++l) {
        const BaselineLayer& L = m.layers[static_cast<size_t>(l)];
        Tensor u = L.ln_attn.forward(g, x);
        Tensor a =
            L.attn.forward(g, u, u, causal, capture ? &(*capture)[static_cast<size_t>(l)] : nullptr);
        x = g.add(x, a);
        x = g.add(x, L.ffn.forward(g, L.ln_ffn.forward(g, x)));
    }
    Tensor u = m.final_ln.forward(g, x);
    return g.matmul_nt(u, m.embed);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'L', 'C', 'P'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& s, uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i64(std::string& s, int64_t v) { put_u64(s, static_cast<uint64_t>(v)); }

void put_f64(std::string& s, double v) { put_u64(s, std::bit_cast<uint64_t>(v)); }

struct ByteReader {
    const std::string& s;
    size_t off = 0;

    void need(size_t n) const {
        if (off + n > s.size()) throw io_error("checkpoint truncated");
    }
    std::string get_bytes(size_t n) {
        need(n);
        std::string out = s.substr(off, n);
        off += n;
        return out;
    }
    uint32_t get_u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<uint8_t>(s[off + static_cast<size_t>(i)]))
                 << (8 * i);
        off += 4;
        return v;
    }
    uint64_t get_u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<uint8_t>(s[off + static_cast<size_t>(i)]))
                 << (8 * i);
        off += 8;
        return v;
    }
    int64_t get_i64() { return static_cast<int64_t>(get_u64()); }
    double get_f64() { return std::bit_cast<double>(get_u64()); }
};

json cfg_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_head", c.n_head},         {"inner_depth", c.inner_depth},
                {"n_blocks", c.n_blocks},     {"woh", c.woh},
                {"wog", c.wog},               {"ffn_mult", c.ffn_mult},
                {"max_seq", c.max_seq},       {"dtype", dtype_name(c.dtype)},
                {"seed", c.seed}};
}

ModelConfig cfg_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_head = j.at("n_head").get<int64_t>();
    c.inner_depth = j.at("inner_depth").get<int64_t>();
    c.n_blocks = j.at("n_blocks").get<int64_t>();
    c.woh = j.at("woh").get<int64_t>();
    c.wog = j.at("wog").get<int64_t>();
    c.ffn_mult = j.at("ffn_mult").get<int64_t>();
    c.max_seq = j.at("max_seq").get<int64_t>();
    const std::string dt = j.at("dtype").get<std::string>();
    if (dt == "f64") {
        c.dtype = Dtype::f64;
    } else if (dt == "f32") {
        c.dtype = Dtype::f32;
    } else {
        throw io_error("checkpoint names unknown dtype " + dt);
    }
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

void copy_named(const std::vector<std::pair<std::string, Tensor>>& dst,
                const std::map<std::string, Tensor>& src) {
    if (dst.size() != src.size())
        throw io_error("checkpoint holds " + std::to_string(src.size()) + " tensors, model has " +
                       std::to_string(dst.size()));
    for (const auto& [name, t] : dst) {
        auto it = src.find(name);
        if (it == src.end()) throw io_error("checkpoint is missing tensor " + name);
        const Tensor& s = it->second;
        if (s.shape() != t.shape()) throw io_error("checkpoint tensor " + name + " has the wrong shape");
        Tensor& mut = const_cast<Tensor&>(t);
        for (int64_t i = 0; i < s.numel(); ++i) mut.set(i, s.at(i));
    }
}

} // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::string& kind,
                     const std::vector<uint8_t>& token_bytes,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    json meta = {{"kind", kind}, {"config", cfg_to_json(cfg)}, {"tokenizer", token_bytes}};
    const std::string mtxt = meta.dump();
    put_u64(buf, mtxt.size());
    buf += mtxt;
    put_u64(buf, params.size());
    for (const auto& [name, t] : params) {
        if (!t.defined()) throw io_error("checkpoint: tensor " + name + " is undefined");
        put_u64(buf, name.size());
        buf += name;
        put_u64(buf, static_cast<uint64_t>(t.rank()));
        for (int64_t s : t.shape()) put_i64(buf, s);
        for (double x : t.to_vector()) put_f64(buf, x);
    }
    atomic_write_file(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string s = read_file(path);
    ByteReader r{s};
    if (r.get_bytes(4) != std::string(kMagic, 4))
        throw io_error(path + ": not a checkpoint file");
    const uint32_t ver = r.get_u32();
    if (ver != kVersion)
        throw io_error(path + ": unsupported checkpoint version " + std::to_string(ver) +
                       " (expected " + std::to_string(kVersion) + ")");
    const uint64_t mlen = r.get_u64();
    const std::string mtxt = r.get_bytes(mlen);
    const json meta = json::parse(mtxt, nullptr, /*allow_exceptions=*/false);
    if (meta.is_discarded()) throw io_error(path + ": checkpoint config record is not valid JSON");

    Checkpoint ck;
    try {
        ck.kind = meta.at("kind").get<std::string>();
        ck.cfg = cfg_from_json(meta.at("config"));
        ck.token_bytes = meta.at("tokenizer").get<std::vector<uint8_t>>();
    } catch (const json::exception& e) {
        throw io_error(path + ": checkpoint config record is incomplete: " + e.what());
    }

    const uint64_t n_tensors = r.get_u64();
    for (uint64_t i = 0; i < n_tensors; ++i) {
        const uint64_t nlen = r.get_u64();
        const std::string name = r.get_bytes(nlen);
        const uint64_t rank = r.get_u64();
        if (rank > 8) throw io_error(path + ": tensor " + name + " has implausible rank");
        std::vector<int64_t> shape(rank);
        int64_t numel = 1;
        for (uint64_t k = 0; k < rank; ++k) {
            shape[k] = r.get_i64();
            if (shape[k] < 0) throw io_error(path + ": tensor " + name + " has a negative dim");
            numel *= shape[k];
        }
        r.need(static_cast<size_t>(numel) * 8);
        std::vector<double> vals(static_cast<size_t>(numel));
        for (auto& v : vals) v = r.get_f64();
        ck.tensors.emplace(name, Tensor::from(std::move(shape), vals, ck.cfg.dtype));
    }
    return ck;
}

TLinFormer tlinformer_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "tlinformer")
        throw io_error("checkpoint holds a " + ck.kind + " model, not a tlinformer");
    TLinFormer m = TLinFormer::init(ck.cfg);
    copy_named(m.named_params(), ck.tensors);
    return m;
}

BaselineModel baseline_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "baseline")
        throw io_error("checkpoint holds a " + ck.kind + " model, not a baseline");
    BaselineModel m = BaselineModel::init(ck.cfg);
    copy_named(m.named_params(), ck.tensors);
    return m;
}

// ---------------------------------------------------------------------------
// Parameter parity
// ---------------------------------------------------------------------------

ParityManifest parity_manifest(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model;
    const int64_t f = cfg.ffn_mult;
    const int64_t site = 4 * d * d;
    const int64_t ffn = d * (f * d) + f * d + (f * d) * d + d;
    const int64_t ln = 2 * d;
    const int64_t levels = cfg.equivalent_depth();
    const int64_t shared = cfg.vocab_size * d + ln; // embedding table + final norm

    ParityManifest pm;
    pm.baseline_params = shared + levels * (site + ffn + 2 * ln);
    pm.tlin_params = shared + levels * (3 * site + 2 * ffn + 4 * ln);
    pm.delta = pm.tlin_params - pm.baseline_params;
    pm.extra_attention_site_params = levels * 2 * site; // context site + window cross site
    pm.extra_context_ffn_params = levels * ffn;
    pm.extra_context_ln_params = levels * 2 * ln;
    return pm;
}

std::string ParityManifest::to_string() const {
    std::ostringstream os;
    os << "params: tlinformer=" << tlin_params << " baseline=" << baseline_params
       << " delta=" << delta << " (extra attention sites=" << extra_attention_site_params
       << ", context ffn=" << extra_context_ffn_params
       << ", context ln=" << extra_context_ln_params << ")";
    return os.str();
}

} // namespace tlin
