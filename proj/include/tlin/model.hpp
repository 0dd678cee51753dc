#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tlin/attention.hpp"
#include "tlin/tensor.hpp"

namespace tlin {

struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 0;
    int64_t n_head = 1;
    int64_t inner_depth = 0; // self-attention layers between compress and restore
    int64_t n_blocks = 1;
    int64_t woh = 1; // history window width
    int64_t wog = 1; // generation window width
    int64_t ffn_mult = 4;
    int64_t max_seq = 16384; // baseline position-table bound
    Dtype dtype = Dtype::f64;
    uint64_t seed = 1;

    // One block spans inner_depth + 2 attention levels; a stack of n_blocks
    // matches a dense decoder of this many layers.
    int64_t equivalent_depth() const { return n_blocks * (inner_depth + 2); }
    void validate() const;
};

// How a sequence of length n splits into history and the generation window.
struct WindowLayout {
    int64_t n = 0;
    int64_t woh = 0;
    int64_t wog = 1;

    int64_t w_total() const { return woh + wog; }
    int64_t hist_len() const { return n - wog; }
    int64_t stride() const { return wog; } // chunked training advances by this
    double ratio() const { return static_cast<double>(wog) / static_cast<double>(w_total()); }

    static WindowLayout make(int64_t n, int64_t woh, int64_t wog);
};

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct LayerKV {
    Tensor k;
    Tensor v;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
    Tensor forward(Graph& g, const Tensor& x) const;
};

struct FeedForward {
    Tensor w1, b1, w2, b2; // d -> ffn_mult*d -> d, GELU between
    Tensor forward(Graph& g, const Tensor& x) const;
};

// One attention site with its own projections. q_in is the (already
// normalized) stream being updated; kv_in is the source sequence, used raw.
struct AttentionSiteParams {
    Tensor wq, wk, wv, wo;
    int64_t n_head = 1;

    LayerKV project_kv(Graph& g, const Tensor& kv_in) const;
    Tensor forward(Graph& g, const Tensor& q_in, const Tensor& kv_in,
                   const AttentionPattern& pattern, LayerKV* kv_out = nullptr) const;
    Tensor forward_with_kv(Graph& g, const Tensor& q_in, const LayerKV& kv,
                           const AttentionPattern& pattern) const;
};

struct ContextLayer {
    LayerNormParams ln_attn, ln_ffn;
    AttentionSiteParams attn;
    FeedForward ffn;
};

struct GenLayer {
    LayerNormParams ln_attn, ln_ffn;
    AttentionSiteParams self_attn;  // causal inside the window
    AttentionSiteParams cross_attn; // against history / context states
    FeedForward ffn;
};

// ctx holds inner_depth + 2 layers: compress, inner self layers, restore.
// gen holds inner_depth + 2 layers.
struct Block {
    std::vector<ContextLayer> ctx;
    std::vector<GenLayer> gen;
};

struct TLinFormer {
    ModelConfig cfg;
    Tensor embed; // [vocab, d]; also the output head (tied)
    std::vector<Block> blocks;
    LayerNormParams final_ln;

    static TLinFormer init(const ModelConfig& cfg);
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    int64_t param_count() const;
};

struct BaselineLayer {
    LayerNormParams ln_attn, ln_ffn;
    AttentionSiteParams attn;
    FeedForward ffn;
};

// Dense pre-norm causal decoder at the window model's equivalent depth.
struct BaselineModel {
    ModelConfig cfg;
    int64_t n_layers = 0;
    Tensor embed;
    std::vector<BaselineLayer> layers;
    LayerNormParams final_ln;

    static BaselineModel init(const ModelConfig& cfg);
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    int64_t param_count() const;
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Sinusoidal rows for absolute positions pos0 .. pos0+len-1.
Tensor positional_rows(int64_t len, int64_t pos0, int64_t d, Dtype dt);

// Token rows + positional rows. Validates ids against the table height.
Tensor embed_tokens(Graph& g, const Tensor& embed, std::span<const int64_t> ids, int64_t pos0);

struct ContextResult {
    std::vector<Tensor> states; // C_0..C_inner, width min(woh, hist_len)
    Tensor restored;            // full history length; defined iff restore ran
};

ContextResult context_path_forward(Graph& g, const Block& blk, const Tensor& x_hist,
                                   int64_t woh, bool restore);

// Per-block buffers the cache keeps. Filled during a capturing forward.
struct BlockCapture {
    LayerKV hist_kv;                // window layer-0 cross K/V over raw history
    std::vector<LayerKV> ctx_kv;    // window layer 1.. cross K/V, width min(woh, hist)
    std::vector<LayerKV> gen_kv;    // causal K/V rows per window layer
    std::vector<Tensor> gen_inputs; // rows entering each window layer
    Tensor restored;                // context output handed to the next block
};

// Returns H_0..H_{inner_depth+2}, H_0 = x_gen. x_hist may be undefined (cold
// start inside the first window); then the cross terms are skipped.
std::vector<Tensor> generation_path_forward(Graph& g, const Block& blk, const Tensor& x_gen,
                                            const Tensor& x_hist,
                                            const std::vector<Tensor>& ctx_states,
                                            BlockCapture* cap = nullptr);

// Window forward over tokens split at hist_len; the window may be partially
// filled (1 <= len - hist_len <= wog). Logits cover the window rows only.
Tensor forward_window(Graph& g, const TLinFormer& m, std::span<const int64_t> tokens,
                      int64_t hist_len, std::vector<BlockCapture>* capture = nullptr);

// Full-window layout: history = all but the trailing wog tokens.
Tensor tlinformer_forward(Graph& g, const TLinFormer& m, std::span<const int64_t> tokens);

// Logits for every position. capture, when set, receives per-layer K/V.
Tensor baseline_forward(Graph& g, const BaselineModel& m, std::span<const int64_t> tokens,
                        std::vector<LayerKV>* capture = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig cfg;
    std::string kind; // "tlinformer" | "baseline"
    std::vector<uint8_t> token_bytes; // tokenizer table, id -> byte
    std::map<std::string, Tensor> tensors;
};

// Self-describing container: magic, format version, JSON config record, then
// named tensors as 64-bit little-endian floats. Written atomically.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::string& kind,
                     const std::vector<uint8_t>& token_bytes,
                     const std::vector<std::pair<std::string, Tensor>>& params);

Checkpoint load_checkpoint(const std::string& path);

TLinFormer tlinformer_from_checkpoint(const Checkpoint& ck);
BaselineModel baseline_from_checkpoint(const Checkpoint& ck);

// ---------------------------------------------------------------------------
// Parameter parity
// ---------------------------------------------------------------------------

// The window model carries more parameters than a dense decoder of equal
// equivalent depth: every level adds one context layer and one extra cross
// site. Nothing here asserts the counts match; the delta is reported and its
// decomposition must account for it exactly.
struct ParityManifest {
    int64_t tlin_params = 0;
    int64_t baseline_params = 0;
    int64_t delta = 0;
    int64_t extra_attention_site_params = 0;
    int64_t extra_context_ffn_params = 0;
    int64_t extra_context_ln_params = 0;
    std::string to_string() const;
};

ParityManifest parity_manifest(const ModelConfig& cfg);

} // namespace tlin
