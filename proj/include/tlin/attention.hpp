#pragma once

#include <functional>
#include <vector>

#include "tlin/tensor.hpp"

namespace tlin {

// The four wiring patterns one window block uses.
//   SelfFull  every query row sees every key row
//   Causal    key j visible to query i iff j <= i (square only)
//   Focused   queries are a row subset of the source; keys/values are the
//             whole source; the subset is taken before projection, so the
//             mask itself is all-allowed
//   Cross     queries from one sequence, keys/values from another
enum class AttnKind { SelfFull, Causal, Focused, Cross };

const char* attn_kind_name(AttnKind k);

struct AttentionPattern {
    AttnKind kind = AttnKind::SelfFull;
    std::vector<int64_t> query_selection; // Focused only
};

// Focused row picks must be strictly increasing and inside [0, lx).
void validate_query_selection(const std::vector<int64_t>& sel, int64_t lx);

constexpr double kMaskOff = -1e9;

// Additive mask entry for (query i, key j): 0 when visible, kMaskOff when not.
std::function<double(int64_t, int64_t)> mask_fn(const AttentionPattern& p, int64_t lq,
                                                int64_t lk);

// Materialized [lq, lk] mask tensor. attend() itself evaluates the mask on the
// fly (same arithmetic, no lq*lk buffer); this form exists for inspection.
Tensor attention_mask(const AttentionPattern& p, int64_t lq, int64_t lk,
                      Dtype dt = Dtype::f64);

// Projected inputs. q: [lq, D], k/v: [lk, D]. w_out, when defined, is the
// [D, D] output projection applied after head concatenation.
struct AttentionInputs {
    Tensor q;
    Tensor k;
    Tensor v;
    int64_t n_head = 1;
    Tensor w_out;
};

// Scaled dot-product attention per head, softmax with additive masking, heads
// concatenated, then output-projected. Charges lq*lk*D interaction units on
// the graph's ledger, exactly once, masked pairs included.
Tensor attend(Graph& g, const AttentionInputs& in, const AttentionPattern& pattern);

} // namespace tlin
