#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tlin/attention.hpp"
#include "tlin/errors.hpp"
#include "tlin/tensor.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

using namespace tlin;

namespace {

// Per-head attention written as bare loops: split columns, score, stable
// softmax over the additive mask, weighted sum, concat, optional projection.
// Shares no code with the library kernel.
std::vector<double> attend_ref(const Tensor& q, const Tensor& k, const Tensor& v, int64_t n_head,
                               const Tensor& w_out, AttnKind kind) {
    const int64_t lq = q.rows(), lk = k.rows(), d = q.cols();
    const int64_t hd = d / n_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> ctx(static_cast<size_t>(lq * d), 0.0);
    for (int64_t h = 0; h < n_head; ++h) {
        const int64_t c0 = h * hd;
        for (int64_t i = 0; i < lq; ++i) {
            std::vector<double> z(static_cast<size_t>(lk));
            double mx = -1e300;
            for (int64_t j = 0; j < lk; ++j) {
                double dot = 0.0;
                for (int64_t p = 0; p < hd; ++p)
                    dot += q.at(i * d + c0 + p) * k.at(j * d + c0 + p);
                double m = 0.0;
                if (kind == AttnKind::Causal && j > i) m = kMaskOff;
                z[static_cast<size_t>(j)] = dot * scale + m;
                mx = std::max(mx, z[static_cast<size_t>(j)]);
            }
            double denom = 0.0;
            for (double& e : z) {
                e = std::exp(e - mx);
                denom += e;
            }
            for (int64_t j = 0; j < lk; ++j) {
                const double p = z[static_cast<size_t>(j)] / denom;
                for (int64_t c = 0; c < hd; ++c)
                    ctx[static_cast<size_t>(i * d + c0 + c)] += p * v.at(j * d + c0 + c);
            }
        }
    }
    if (!w_out.defined()) return ctx;
    std::vector<double> out(static_cast<size_t>(lq * d), 0.0);
    for (int64_t i = 0; i < lq; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < d; ++p)
                acc += ctx[static_cast<size_t>(i * d + p)] * w_out.at(p * d + j);
            out[static_cast<size_t>(i * d + j)] = acc;
        }
    return out;
}

double worst_vs(const Tensor& t, const std::vector<double>& ref) {
    REQUIRE(t.numel() == static_cast<int64_t>(ref.size()));
    double w = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i)
        w = std::max(w, std::abs(t.at(i) - ref[static_cast<size_t>(i)]));
    return w;
}

} // namespace

TEST_CASE("attend matches a per-head brute force") {
    std::mt19937_64 rng{301};
    const int64_t d = 8;
    for (AttnKind kind : {AttnKind::SelfFull, AttnKind::Causal, AttnKind::Cross, AttnKind::Focused})
        for (int64_t n_head : {int64_t{1}, int64_t{2}, int64_t{4}}) {
            const int64_t lk = 5;
            const int64_t lq = kind == AttnKind::Causal ? lk : 3;
            Tensor q = Tensor::randn({lq, d}, rng, 1.0);
            Tensor k = Tensor::randn({lk, d}, rng, 1.0);
            Tensor v = Tensor::randn({lk, d}, rng, 1.0);
            Tensor w_out = Tensor::randn({d, d}, rng, 0.5);
            AttentionPattern p{kind, {}};
            Graph g;
            CAPTURE(attn_kind_name(kind));
            CAPTURE(n_head);
            Tensor bare = attend(g, {q, k, v, n_head, Tensor{}}, p);
            CHECK(worst_vs(bare, attend_ref(q, k, v, n_head, Tensor{}, kind)) < 1e-12);
            Tensor projected = attend(g, {q, k, v, n_head, w_out}, p);
            CHECK(worst_vs(projected, attend_ref(q, k, v, n_head, w_out, kind)) < 1e-12);
        }
}

TEST_CASE("causal rows only see their prefix") {
    std::mt19937_64 rng{317};
    const int64_t l = 6, d = 4;
    Tensor q = Tensor::randn({l, d}, rng, 1.0);
    Tensor k = Tensor::randn({l, d}, rng, 1.0);
    Tensor v = Tensor::randn({l, d}, rng, 1.0);
    AttentionPattern causal{AttnKind::Causal, {}};
    Graph g;
    Tensor full = attend(g, {q, k, v, 2, Tensor{}}, causal);
    for (int64_t t = 1; t <= l; ++t) {
        // Truncate everything to the first t rows; earlier outputs must not move.
        Tensor qt = g.select_rows(q, [&] {
            std::vector<int64_t> idx(static_cast<size_t>(t));
            std::iota(idx.begin(), idx.end(), 0);
            return idx;
        }());
        Tensor kt = g.select_rows(k, [&] {
            std::vector<int64_t> idx(static_cast<size_t>(t));
            std::iota(idx.begin(), idx.end(), 0);
            return idx;
        }());
        Tensor vt = g.select_rows(v, [&] {
            std::vector<int64_t> idx(static_cast<size_t>(t));
            std::iota(idx.begin(), idx.end(), 0);
            return idx;
        }());
        Tensor part = attend(g, {qt, kt, vt, 2, Tensor{}}, causal);
        double worst = 0.0;
        for (int64_t i = 0; i < t * d; ++i)
            worst = std::max(worst, std::abs(part.at(i) - full.at(i)));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("jointly permuting keys and values leaves unmasked attention unchanged") {
    std::mt19937_64 rng{331};
    const int64_t lq = 3, lk = 6, d = 8;
    Tensor q = Tensor::randn({lq, d}, rng, 1.0);
    Tensor k = Tensor::randn({lk, d}, rng, 1.0);
    Tensor v = Tensor::randn({lk, d}, rng, 1.0);
    const std::vector<int64_t> perm{4, 0, 5, 2, 1, 3};
    Graph g;
    Tensor kp = g.select_rows(k, perm);
    Tensor vp = g.select_rows(v, perm);
    for (AttnKind kind : {AttnKind::SelfFull, AttnKind::Cross}) {
        AttentionPattern p{kind, {}};
        Tensor a = attend(g, {q, k, v, 2, Tensor{}}, p);
        Tensor b = attend(g, {q, kp, vp, 2, Tensor{}}, p);
        CHECK(max_abs_diff(a, b) < 1e-12);
    }
}

TEST_CASE("the materialized mask agrees with the fused path") {
    std::mt19937_64 rng{347};
    const int64_t l = 5;
    Tensor scores = Tensor::randn({l, l}, rng, 1.0);
    AttentionPattern causal{AttnKind::Causal, {}};
    Tensor m = attention_mask(causal, l, l);
    for (int64_t i = 0; i < l; ++i)
        for (int64_t j = 0; j < l; ++j)
            CHECK(m.at(i * l + j) == (j <= i ? 0.0 : kMaskOff));
    Graph g;
    Tensor fused = g.softmax_rows_masked(scores, mask_fn(causal, l, l));
    Tensor additive = g.softmax_rows(g.add(scores, m));
    CHECK(max_abs_diff(fused, additive) == 0.0);

    // Every non-causal pattern sees the whole key range.
    for (AttnKind kind : {AttnKind::SelfFull, AttnKind::Focused, AttnKind::Cross}) {
        Tensor open = attention_mask({kind, {}}, 2, 7);
        for (int64_t i = 0; i < open.numel(); ++i) CHECK(open.at(i) == 0.0);
    }
}

TEST_CASE("the ledger charges every scored pair exactly once") {
    std::mt19937_64 rng{353};
    const int64_t d = 8;
    Graph g;
    Tensor q = Tensor::randn({3, d}, rng, 1.0);
    Tensor k = Tensor::randn({5, d}, rng, 1.0);
    Tensor v = Tensor::randn({5, d}, rng, 1.0);
    attend(g, {q, k, v, 2, Tensor{}}, {AttnKind::Cross, {}});
    CHECK(g.ledger().interaction_units == 3 * 5 * 8);

    // Masked pairs are charged too: a causal call adds the full lq*lk*d.
    Tensor s = Tensor::randn({4, d}, rng, 1.0);
    attend(g, {s, s, s, 1, Tensor{}}, {AttnKind::Causal, {}});
    CHECK(g.ledger().interaction_units == 3 * 5 * 8 + 4 * 4 * 8);

    // Head count does not change the charge.
    Graph g2;
    attend(g2, {q, k, v, 4, Tensor{}}, {AttnKind::Cross, {}});
    CHECK(g2.ledger().interaction_units == 3 * 5 * 8);
}

TEST_CASE("attend validates its inputs") {
    std::mt19937_64 rng{359};
    const int64_t d = 8;
    Tensor q = Tensor::randn({3, d}, rng, 1.0);
    Tensor k = Tensor::randn({5, d}, rng, 1.0);
    Tensor v = Tensor::randn({5, d}, rng, 1.0);
    Graph g;
    AttentionPattern open{AttnKind::Cross, {}};
    CHECK_THROWS_AS(attend(g, {q, Tensor::zeros({0, d}), Tensor::zeros({0, d}), 1, Tensor{}}, open),
                    dim_error);
    CHECK_THROWS_AS(attend(g, {Tensor::zeros({0, d}), k, v, 1, Tensor{}}, open), dim_error);
    CHECK_THROWS_AS(attend(g, {q, Tensor::randn({5, d + 2}, rng, 1.0), v, 1, Tensor{}}, open),
                    dim_error);
    CHECK_THROWS_AS(attend(g, {q, k, Tensor::randn({4, d}, rng, 1.0), 1, Tensor{}}, open),
                    dim_error);
    CHECK_THROWS_AS(attend(g, {q, k, v, 3, Tensor{}}, open), dim_error);
    CHECK_THROWS_AS(attend(g, {q, k, v, 1, Tensor{}}, {AttnKind::Causal, {}}), dim_error);
    CHECK_THROWS_AS(attend(g, {Tensor{}, k, v, 1, Tensor{}}, open), dim_error);
}

TEST_CASE("a single query-key pair returns the value row") {
    Tensor q = Tensor::from({1, 4}, {4.0, -3.0, 2.0, 1.0});
    Tensor k = Tensor::from({1, 4}, {0.5, 0.5, 0.5, 0.5});
    Tensor v = Tensor::from({1, 4}, {7.0, -8.0, 9.0, 10.0});
    Graph g;
    Tensor out = attend(g, {q, k, v, 1, Tensor{}}, {AttnKind::SelfFull, {}});
    for (int64_t i = 0; i < 4; ++i) CHECK(out.at(i) == v.at(i));
}

TEST_CASE("query selection accepts strictly increasing picks only") {
    CHECK_NOTHROW(validate_query_selection({0, 2, 5}, 6));
    CHECK_NOTHROW(validate_query_selection({}, 6));
    CHECK_THROWS_AS(validate_query_selection({2, 2}, 6), dim_error);
    CHECK_THROWS_AS(validate_query_selection({3, 1}, 6), dim_error);
    CHECK_THROWS_AS(validate_query_selection({-1}, 6), dim_error);
    CHECK_THROWS_AS(validate_query_selection({6}, 6), dim_error);
    CHECK_THROWS_AS(attention_mask({AttnKind::Causal, {}}, 3, 5), dim_error);
}

TEST_CASE("pattern kinds carry stable names") {
    CHECK(std::string(attn_kind_name(AttnKind::SelfFull)) == "self_full");
    CHECK(std::string(attn_kind_name(AttnKind::Causal)) == "causal");
    CHECK(std::string(attn_kind_name(AttnKind::Focused)) == "focused");
    CHECK(std::string(attn_kind_name(AttnKind::Cross)) == "cross");
}
