#include "tlin/verify.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "json.hpp"

#include "tlin/cost_model.hpp"
#include "tlin/kv_cache.hpp"
#include "tlin/train.hpp"

namespace tlin {

namespace {

ModelConfig micro_config() {
    ModelConfig c;
    c.vocab_size = 17;
    c.d_model = 16;
    c.n_head = 2;
    c.inner_depth = 1;
    c.n_blocks = 2;
    c.woh = 4;
    c.wog = 4;
    c.ffn_mult = 4;
    c.max_seq = 256;
    c.seed = 5;
    return c;
}

CheckResult check_cost_closed_form(std::mt19937_64& rng) {
    CheckResult r{"cost_closed_form", true, ""};
    const CostBreakdown ex = cost_cache_miss(4, 8, 2, 2, 1);
    if (ex.c_left != 112 || ex.c_right != 128 || ex.total != 240) {
        r.pass = false;
        r.detail = "worked example gave " + std::to_string(ex.c_left) + "/" +
                   std::to_string(ex.c_right) + "/" + std::to_string(ex.total);
        return r;
    }
    if (cost_cache_hit(4, 8, 2, 2, 1) != 88) {
        r.pass = false;
        r.detail = "worked hit example gave " + std::to_string(cost_cache_hit(4, 8, 2, 2, 1));
        return r;
    }
    std::uniform_int_distribution<int64_t> small(1, 24);
    for (int i = 0; i < 200; ++i) {
        const int64_t d = small(rng), woh = small(rng), wog = small(rng), h = small(rng) % 5;
        const int64_t n = wog + small(rng) * wog;
        const CostBreakdown c = cost_cache_miss(d, n, woh, wog, h);
        if (c.c_left + c.c_right != c.total || c.c1 * n + c.c0 != c.total) {
            r.pass = false;
            r.detail = "linear identity broke at d=" + std::to_string(d) +
                       " n=" + std::to_string(n) + " woh=" + std::to_string(woh) +
                       " wog=" + std::to_string(wog) + " h=" + std::to_string(h);
            return r;
        }
    }
    r.detail = "worked example and 200 random tuples hold";
    return r;
}

CheckResult check_ledgers(const TLinFormer& m, std::mt19937_64& rng) {
    CheckResult r{"ledger_equalities", true, ""};
    const ModelConfig& cfg = m.cfg;
    const int64_t n = 4 * cfg.wog; // history holds woh after alignment
    std::uniform_int_distribution<int64_t> tok(0, cfg.vocab_size - 1);
    std::vector<int64_t> prompt(static_cast<size_t>(n));
    for (auto& t : prompt) t = tok(rng);

    KVCacheStore store(m);
    cache_prefill(store, prompt);
    const uint64_t expect_miss =
        static_cast<uint64_t>(cfg.n_blocks *
                              cost_cache_miss(cfg.d_model, n, cfg.woh, cfg.wog, cfg.inner_depth)
                                  .total);
    if (store.events().back().interaction_units != expect_miss) {
        r.pass = false;
        r.detail = "prefill charged " + std::to_string(store.events().back().interaction_units) +
                   ", closed form gives " + std::to_string(expect_miss);
        return r;
    }

    cache_slide(store);
    const uint64_t expect_hit = static_cast<uint64_t>(
        cfg.n_blocks * cost_cache_hit(cfg.d_model, n + cfg.wog, cfg.woh, cfg.wog, cfg.inner_depth));
    for (int64_t i = 0; i < cfg.wog; ++i) {
        cache_step(store, tok(rng));
        const uint64_t got = store.events().back().interaction_units;
        if (got != expect_hit) {
            r.pass = false;
            r.detail = "step at fill " + std::to_string(store.fill()) + " charged " +
                       std::to_string(got) + ", closed form gives " + std::to_string(expect_hit);
            return r;
        }
    }
    r.detail = "prefill and every window step match the closed forms";
    return r;
}

CheckResult check_cache_equivalence(const TLinFormer& m, bool inject, std::mt19937_64& rng) {
    CheckResult r{"cache_equivalence", true, ""};
    const ModelConfig& cfg = m.cfg;
    const int64_t n_prompt = 2 * cfg.wog + 1;
    const int64_t n_tokens = 2 * cfg.wog + 1;
    std::uniform_int_distribution<int64_t> tok(0, cfg.vocab_size - 1);
    std::vector<int64_t> prompt(static_cast<size_t>(n_prompt));
    for (auto& t : prompt) t = tok(rng);

    const std::vector<int64_t> want = generate_uncached(m, prompt, n_tokens);

    KVCacheStore store(m);
    Tensor logits = cache_prefill(store, prompt);
    if (inject) {
        // One element, not a uniform shift: adding the same value to every
        // entry of K moves all scores together and softmax cancels it.
        LayerKV& kv = store.blocks()[0].hist_kv;
        Tensor bad = kv.k.clone();
        bad.set(0, bad.at(0) + 0.5);
        kv.k = bad;
    }
    std::vector<int64_t> got;
    int64_t t = argmax_row(logits, logits.rows() - 1);
    got.push_back(t);
    double worst_row_diff = 0.0;
    while (std::ssize(got) < n_tokens) {
        if (store.fill() == cfg.wog) cache_slide(store);
        logits = cache_step(store, t);

        // same position, full recompute
        std::vector<int64_t> all(prompt);
        all.insert(all.end(), got.begin(), got.end());
        Graph G(/*grad_enabled=*/false);
        const int64_t hist = ((std::ssize(all) - 1) / cfg.wog) * cfg.wog;
        Tensor ref = forward_window(G, m, all, hist);
        const std::vector<int64_t> last{ref.rows() - 1};
        Tensor ref_row = G.select_rows(ref, last);
        worst_row_diff = std::max(worst_row_diff, max_abs_diff(logits, ref_row));

        t = argmax_row(logits, 0);
        got.push_back(t);
    }
    if (got != want || worst_row_diff > 1e-9) {
        r.pass = false;
        r.detail = std::string(got == want ? "tokens match" : "tokens diverge") +
                   ", worst logits gap " + std::to_string(worst_row_diff);
        return r;
    }
    r.detail = "cached decode reproduces full recompute, worst logits gap " +
               std::to_string(worst_row_diff);
    return r;
}

CheckResult check_gradients(std::mt19937_64& rng) {
    CheckResult r{"gradient_check", true, ""};
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 8;
    cfg.n_head = 2;
    cfg.inner_depth = 1;
    cfg.n_blocks = 1;
    cfg.woh = 4;
    cfg.wog = 4;
    cfg.max_seq = 64;
    cfg.seed = 3;
    TLinFormer m = TLinFormer::init(cfg);

    std::uniform_int_distribution<int64_t> tok(0, cfg.vocab_size - 1);
    std::vector<int64_t> sample(9);
    for (auto& t : sample) t = tok(rng);

    Graph g;
    Tensor loss = tlin_sample_loss(g, m, sample);
    g.backward(loss);

    auto params = m.named_params();
    std::uniform_int_distribution<size_t> pick_param(0, params.size() - 1);
    const double h = 1e-5;
    double worst = 0.0;
    for (int c = 0; c < 12; ++c) {
        auto& [name, p] = params[pick_param(rng)];
        std::uniform_int_distribution<int64_t> pick_i(0, p.numel() - 1);
        const int64_t i = pick_i(rng);
        const double analytic = p.has_grad() ? p.grad_at(i) : 0.0;
        const double orig = p.at(i);

        p.set(i, orig + h);
        Graph gp(/*grad_enabled=*/false);
        const double up = tlin_sample_loss(gp, m, sample).item();
        p.set(i, orig - h);
        Graph gm(/*grad_enabled=*/false);
        const double dn = tlin_sample_loss(gm, m, sample).item();
        p.set(i, orig);

        const double numeric = (up - dn) / (2.0 * h);
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-2});
        const double rel = std::fabs(numeric - analytic) / denom;
        worst = std::max(worst, rel);
        if (rel > 1e-4) {
            r.pass = false;
            r.detail = name + "[" + std::to_string(i) + "]: analytic " +
                       std::to_string(analytic) + " vs numeric " + std::to_string(numeric);
            return r;
        }
    }
    std::ostringstream os;
    os << "12 coordinates, worst relative gap " << worst;
    r.detail = os.str();
    return r;
}

CheckResult check_memory_ratio(const TLinFormer& m, std::mt19937_64& rng) {
    CheckResult r{"memory_ratio", true, ""};
    const ModelConfig& cfg = m.cfg;

    const MemoryEval me = memory_eval(1, 4096, cfg.d_model, 8, cfg.equivalent_depth(),
                                      cfg.inner_depth);
    const double want = 1.0 / static_cast<double>(cfg.inner_depth + 2);
    if (std::fabs(me.ratio - want) > 1e-12) {
        r.pass = false;
        r.detail = "analytic ratio " + std::to_string(me.ratio) + ", expected " +
                   std::to_string(want);
        return r;
    }

    const int64_t n = 16 * cfg.wog;
    std::uniform_int_distribution<int64_t> tok(0, cfg.vocab_size - 1);
    std::vector<int64_t> prompt(static_cast<size_t>(n));
    for (auto& t : prompt) t = tok(rng);

    KVCacheStore store(m);
    cache_prefill(store, prompt);
    BaselineModel bm = BaselineModel::init(cfg);
    BaselineCacheStore bstore(bm);
    baseline_cache_prefill(bstore, prompt);

    const double measured = static_cast<double>(store.bytes_cached()) /
                            static_cast<double>(bstore.bytes_cached());
    if (std::fabs(measured - want) / want > 0.5) {
        r.pass = false;
        r.detail = "measured byte ratio " + std::to_string(measured) + " far from " +
                   std::to_string(want);
        return r;
    }
    std::ostringstream os;
    os << "analytic " << me.ratio << ", measured at N=" << n << ": " << measured;
    r.detail = os.str();
    return r;
}

CheckResult check_linearity(const TLinFormer& m) {
    CheckResult r{"cost_linearity", true, ""};
    const ModelConfig& cfg = m.cfg;
    std::vector<int64_t> totals, base;
    for (int64_t k = 4; k <= 14; ++k) {
        const int64_t n = k * cfg.wog;
        totals.push_back(cost_cache_miss(cfg.d_model, n, cfg.woh, cfg.wog, cfg.inner_depth).total);
        base.push_back(baseline_cost(n, cfg.d_model, cfg.equivalent_depth()));
    }
    for (size_t i = 2; i < totals.size(); ++i) {
        const int64_t dd = totals[i] - 2 * totals[i - 1] + totals[i - 2];
        if (dd != 0) {
            r.pass = false;
            r.detail = "window-model cost is not linear at grid index " + std::to_string(i);
            return r;
        }
        const int64_t bdd = base[i] - 2 * base[i - 1] + base[i - 2];
        if (bdd <= 0) {
            r.pass = false;
            r.detail = "baseline cost is not superlinear at grid index " + std::to_string(i);
            return r;
        }
    }
    r.detail = "second differences: zero for the window model, positive for the baseline";
    return r;
}

} // namespace

std::vector<CheckResult> run_verification(const VerifyOptions& opts) {
    std::mt19937_64 rng(opts.seed);
    const TLinFormer m = TLinFormer::init(micro_config());

    std::vector<CheckResult> results;
    results.push_back(check_cost_closed_form(rng));
    results.push_back(check_ledgers(m, rng));
    results.push_back(check_cache_equivalence(m, opts.inject_cache_bug, rng));
    results.push_back(check_gradients(rng));
    results.push_back(check_memory_ratio(m, rng));
    results.push_back(check_linearity(m));
    return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
    for (const CheckResult& r : results)
        if (!r.pass) return false;
    return true;
}

std::string verification_json(const std::vector<CheckResult>& results) {
    nlohmann::json checks = nlohmann::json::array();
    for (const CheckResult& r : results)
        checks.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    nlohmann::json j{{"all_passed", all_passed(results)}, {"checks", checks}};
    return j.dump(2) + "\n";
}

} // namespace tlin
