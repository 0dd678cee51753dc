#include "tlin/attention.hpp"

#include <cmath>
#include <string>

namespace tlin {

const char* attn_kind_name(AttnKind k) {
    switch (k) {
        case AttnKind::SelfFull: return "self_full";
        case AttnKind::Causal: return "causal";
        case AttnKind::Focused: return "focused";
        case AttnKind::Cross: return "cross";
    }
    return "?";
}

void validate_query_selection(const std::vector<int64_t>& sel, int64_t lx) {
    int64_t prev = -1;
    for (int64_t i : sel) {
        if (i < 0 || i >= lx)
            throw dim_error("query_selection: index " + std::to_string(i) + " outside [0, " +
                            std::to_string(lx) + ")");
        if (i <= prev) throw dim_error("query_selection: indices must be strictly increasing");
        prev = i;
    }
}

std::function<double(int64_t, int64_t)> mask_fn(const AttentionPattern& p, int64_t lq,
                                                int64_t lk) {
    (void)lq;
    (void)lk;
    if (p.kind == AttnKind::Causal)
        return [](int64_t i, int64_t j) { return j <= i ? 0.0 : kMaskOff; };
    // SelfFull, Focused, Cross: everything visible.
    return [](int64_t, int64_t) { return 0.0; };
}

Tensor attention_mask(const AttentionPattern& p, int64_t lq, int64_t lk, Dtype dt) {
    if (lq < 0 || lk < 0) throw dim_error("attention_mask: negative extent");
    if (p.kind == AttnKind::Causal && lq != lk)
        throw dim_error("attention_mask: causal pattern needs lq == lk");
    auto f = mask_fn(p, lq, lk);
    Tensor m = Tensor::zeros({lq, lk}, dt);
    for (int64_t i = 0; i < lq; ++i)
        for (int64_t j = 0; j < lk; ++j) m.set(i * lk + j, f(i, j));
    return m;
}

Tensor attend(Graph& g, const AttentionInputs& in, const AttentionPattern& pattern) {
    if (!in.q.defined() || !in.k.defined() || !in.v.defined())
        throw dim_error("attend: undefined input tensor");
    if (in.q.rank() != 2 || in.k.rank() != 2 || in.v.rank() != 2)
        throw dim_error("attend: q/k/v must be rank-2");
    const int64_t lq = in.q.rows(), lk = in.k.rows(), d = in.q.cols();
    if (in.k.cols() != d || in.v.cols() != d)
        throw dim_error("attend: q/k/v feature widths disagree");
    if (in.v.rows() != lk) throw dim_error("attend: k/v row counts disagree");
    if (in.n_head < 1 || d % in.n_head != 0)
        throw dim_error("attend: n_head must divide the feature width");
    if (pattern.kind == AttnKind::Causal && lq != lk)
        throw dim_error("attend: causal pattern needs lq == lk");
    if (lk == 0) throw dim_error("attend: degenerate mask, no keys to attend to");
    if (lq == 0) throw dim_error("attend: no query rows");

    g.ledger().interaction_units += static_cast<uint64_t>(lq) * static_cast<uint64_t>(lk) *
                                    static_cast<uint64_t>(d);

    const int64_t dk = d / in.n_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    auto mask = mask_fn(pattern, lq, lk);

    Tensor ctx;
    if (in.n_head == 1) {
        Tensor scores = g.scale(g.matmul_nt(in.q, in.k), scale);
        Tensor probs = g.softmax_rows_masked(scores, mask);
        ctx = g.matmul(probs, in.v);
    } else {
        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(in.n_head));
        for (int64_t h = 0; h < in.n_head; ++h) {
            Tensor qh = g.slice_cols(in.q, h * dk, (h + 1) * dk);
            Tensor kh = g.slice_cols(in.k, h * dk, (h + 1) * dk);
            Tensor vh = g.slice_cols(in.v, h * dk, (h + 1) * dk);
            Tensor scores = g.scale(g.matmul_nt(qh, kh), scale);
            Tensor probs = g.softmax_rows_masked(scores, mask);
            heads.push_back(g.matmul(probs, vh));
        }
        ctx = g.concat_cols(heads);
    }
    if (in.w_out.defined()) return g.matmul(ctx, in.w_out);
    return ctx;
}

} // namespace tlin
