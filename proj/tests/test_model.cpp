#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tlin/cost_model.hpp"
#include "tlin/errors.hpp"
#include "tlin/model.hpp"
#include "tlin/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

using namespace tlin;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.vocab_size = 13;
    cfg.d_model = 8;
    cfg.n_head = 2;
    cfg.inner_depth = 1;
    cfg.n_blocks = 2;
    cfg.woh = 4;
    cfg.wog = 4;
    cfg.max_seq = 128;
    cfg.seed = 9;
    return cfg;
}

std::vector<int64_t> token_ramp(int64_t n, int64_t vocab) {
    std::vector<int64_t> t(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) t[static_cast<size_t>(i)] = (i * 5 + 3) % vocab;
    return t;
}

} // namespace

TEST_CASE("config validation catches each bad field") {
    ModelConfig cfg = micro_config();
    CHECK_NOTHROW(cfg.validate());
    auto broken = [&](auto&& tweak) {
        ModelConfig c = micro_config();
        tweak(c);
        CHECK_THROWS_AS(c.validate(), config_error);
    };
    broken([](ModelConfig& c) { c.vocab_size = 1; });
    broken([](ModelConfig& c) { c.d_model = 0; });
    broken([](ModelConfig& c) { c.n_head = 3; }); // 8 % 3 != 0
    broken([](ModelConfig& c) { c.n_head = 0; });
    broken([](ModelConfig& c) { c.inner_depth = -1; });
    broken([](ModelConfig& c) { c.n_blocks = 0; });
    broken([](ModelConfig& c) { c.woh = 0; });
    broken([](ModelConfig& c) { c.wog = 0; });
    broken([](ModelConfig& c) { c.ffn_mult = 0; });
    broken([](ModelConfig& c) { c.max_seq = 0; });
    CHECK(cfg.equivalent_depth() == 2 * (1 + 2));
}

TEST_CASE("window layout splits n into history and window") {
    const WindowLayout lay = WindowLayout::make(20, 8, 4);
    CHECK(lay.hist_len() == 16);
    CHECK(lay.w_total() == 12);
    CHECK(lay.stride() == 4);
    CHECK_THROWS_AS(WindowLayout::make(3, 8, 4), config_error); // n < wog
    CHECK_THROWS_AS(WindowLayout::make(20, -1, 4), config_error);
    CHECK_THROWS_AS(WindowLayout::make(20, 8, 0), config_error);
    CHECK_NOTHROW(WindowLayout::make(4, 8, 4)); // empty history is a valid layout
}

TEST_CASE("initialization is reproducible and seed-sensitive") {
    const ModelConfig cfg = micro_config();
    TLinFormer a = TLinFormer::init(cfg);
    TLinFormer b = TLinFormer::init(cfg);
    const auto tokens = token_ramp(12, cfg.vocab_size);
    Graph ga(false), gb(false);
    Tensor la = tlinformer_forward(ga, a, tokens);
    Tensor lb = tlinformer_forward(gb, b, tokens);
    CHECK(max_abs_diff(la, lb) == 0.0);

    ModelConfig other = cfg;
    other.seed = 10;
    TLinFormer c = TLinFormer::init(other);
    Graph gc(false);
    CHECK(max_abs_diff(la, tlinformer_forward(gc, c, tokens)) > 0.0);
}

TEST_CASE("logits cover the window rows only") {
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    const auto tokens = token_ramp(12, cfg.vocab_size);
    Graph g(false);
    Tensor logits = forward_window(g, m, tokens, 8);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == cfg.vocab_size);

    // Partial windows run; empty or oversized ones do not.
    Tensor part = forward_window(g, m, std::span(tokens).first(10), 8);
    CHECK(part.rows() == 2);
    CHECK_THROWS_AS(forward_window(g, m, std::span(tokens).first(8), 8), dim_error);
    CHECK_THROWS_AS(forward_window(g, m, tokens, 2), dim_error); // window of 10 > wog
    CHECK_THROWS_AS(forward_window(g, m, tokens, -1), dim_error);
    CHECK_THROWS_AS(forward_window(g, m, tokens, 13), dim_error);
}

TEST_CASE("window rows never look ahead") {
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    const int64_t n = 12, hist = 8;
    const auto base = token_ramp(n, cfg.vocab_size);
    Graph g0(false);
    Tensor ref = forward_window(g0, m, base, hist);
    for (int64_t t = 1; t < cfg.wog; ++t) {
        auto bumped = base;
        bumped[static_cast<size_t>(hist + t)] =
            (bumped[static_cast<size_t>(hist + t)] + 1) % cfg.vocab_size;
        Graph g(false);
        Tensor out = forward_window(g, m, bumped, hist);
        // Rows before the edited position are reproduced bit for bit.
        double before = 0.0, after = 0.0;
        for (int64_t i = 0; i < ref.rows(); ++i)
            for (int64_t j = 0; j < ref.cols(); ++j) {
                const double d = std::abs(out.at(i * ref.cols() + j) - ref.at(i * ref.cols() + j));
                (i < t ? before : after) = std::max(i < t ? before : after, d);
            }
        CHECK(before == 0.0);
        CHECK(after > 0.0);
    }
}

TEST_CASE("every history position reaches the window") {
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    const int64_t n = 16, hist = 12; // hist exceeds woh, so the compressor must carry it
    const auto base = token_ramp(n, cfg.vocab_size);
    Graph g0(false);
    Tensor ref = forward_window(g0, m, base, hist);
    for (int64_t p : {int64_t{0}, int64_t{5}, hist - 1}) {
        auto bumped = base;
        bumped[static_cast<size_t>(p)] = (bumped[static_cast<size_t>(p)] + 1) % cfg.vocab_size;
        Graph g(false);
        CHECK(max_abs_diff(forward_window(g, m, bumped, hist), ref) > 0.0);
    }
}

TEST_CASE("the ledger matches the closed form in every layout regime") {
    ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    const int64_t d = cfg.d_model, h = cfg.inner_depth;

    SUBCASE("aligned history") {
        const int64_t n = cfg.wog + 2 * cfg.woh;
        Graph g(false);
        forward_window(g, m, token_ramp(n, cfg.vocab_size), n - cfg.wog);
        CHECK(g.ledger().interaction_units ==
              static_cast<uint64_t>(cfg.n_blocks) *
                  static_cast<uint64_t>(cost_cache_miss(d, n, cfg.woh, cfg.wog, h).total));
    }
    SUBCASE("short history narrows the compressor") {
        const int64_t hist = 3; // below woh = 4
        const int64_t n = cfg.wog + hist;
        Graph g(false);
        forward_window(g, m, token_ramp(n, cfg.vocab_size), hist);
        const int64_t wc = hist;
        const int64_t left = 2 * d * hist * wc + h * d * wc * wc;
        const int64_t right = d * cfg.wog * hist + (h + 1) * d * cfg.wog * wc +
                              (h + 2) * d * cfg.wog * cfg.wog;
        CHECK(g.ledger().interaction_units ==
              static_cast<uint64_t>(cfg.n_blocks) * static_cast<uint64_t>(left + right));
    }
    SUBCASE("no history at all") {
        Graph g(false);
        forward_window(g, m, token_ramp(cfg.wog, cfg.vocab_size), 0);
        CHECK(g.ledger().interaction_units ==
              static_cast<uint64_t>(cfg.n_blocks * (h + 2) * d * cfg.wog * cfg.wog));
    }
    SUBCASE("single-token window, no history") {
        ModelConfig one = cfg;
        one.wog = 1;
        TLinFormer m1 = TLinFormer::init(one);
        Graph g(false);
        forward_window(g, m1, token_ramp(1, one.vocab_size), 0);
        CHECK(g.ledger().interaction_units ==
              static_cast<uint64_t>(one.n_blocks * (h + 2) * d));
    }
}

TEST_CASE("positions are absolute") {
    const int64_t d = 8;
    Tensor block = positional_rows(6, 10, d, Dtype::f64);
    for (int64_t p = 0; p < 6; ++p) {
        Tensor one = positional_rows(1, 10 + p, d, Dtype::f64);
        for (int64_t c = 0; c < d; ++c) CHECK(block.at(p * d + c) == one.at(c));
    }
    // Direct trig oracle.
    for (int64_t p = 0; p < 6; ++p)
        for (int64_t c = 0; c < d; ++c) {
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(c / 2) / static_cast<double>(d));
            const double ang = static_cast<double>(10 + p) * freq;
            const double want = (c % 2 == 0) ? std::sin(ang) : std::cos(ang);
            CHECK(block.at(p * d + c) == doctest::Approx(want).epsilon(1e-15));
        }
    CHECK_THROWS_AS(positional_rows(4, -1, d, Dtype::f64), dim_error);
}

TEST_CASE("embedding rejects out-of-vocab ids") {
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    Graph g(false);
    const std::vector<int64_t> bad{0, 13};
    CHECK_THROWS_AS(embed_tokens(g, m.embed, bad, 0), config_error);
    const std::vector<int64_t> neg{-1};
    CHECK_THROWS_AS(embed_tokens(g, m.embed, neg, 0), config_error);
}

TEST_CASE("the baseline respects its position table bound") {
    ModelConfig cfg = micro_config();
    cfg.max_seq = 10;
    BaselineModel m = BaselineModel::init(cfg);
    Graph g(false);
    CHECK_NOTHROW(baseline_forward(g, m, token_ramp(10, cfg.vocab_size)));
    CHECK_THROWS_AS(baseline_forward(g, m, token_ramp(11, cfg.vocab_size)), config_error);
    const std::vector<int64_t> empty;
    CHECK_THROWS_AS(baseline_forward(g, m, empty), dim_error);

    // One logits row per token, and the ledger carries layers * n^2 * d.
    Graph g2(false);
    Tensor logits = baseline_forward(g2, m, token_ramp(10, cfg.vocab_size));
    CHECK(logits.rows() == 10);
    CHECK(g2.ledger().interaction_units ==
          static_cast<uint64_t>(baseline_cost(10, cfg.d_model, m.n_layers)));
}

TEST_CASE("checkpoints round-trip bit for bit") {
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    const std::vector<uint8_t> table{9, 32, 97, 98};
    const std::string path = "tmp_model_roundtrip.tlcp";
    save_checkpoint(path, cfg, "tlinformer", table, m.named_params());

    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.kind == "tlinformer");
    CHECK(ck.token_bytes == table);
    CHECK(ck.cfg.vocab_size == cfg.vocab_size);
    CHECK(ck.cfg.woh == cfg.woh);
    CHECK(ck.cfg.seed == cfg.seed);
    for (const auto& [name, t] : m.named_params()) {
        REQUIRE(ck.tensors.count(name) == 1);
        CHECK(max_abs_diff(ck.tensors.at(name), t) == 0.0);
    }

    TLinFormer restored = tlinformer_from_checkpoint(ck);
    const auto tokens = token_ramp(12, cfg.vocab_size);
    Graph ga(false), gb(false);
    CHECK(max_abs_diff(tlinformer_forward(ga, m, tokens),
                       tlinformer_forward(gb, restored, tokens)) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are refused") {
    const std::string path = "tmp_model_corrupt.tlcp";
    {
        std::ofstream out(path, std::ios::binary);
        out << "XXXX not a checkpoint";
    }
    CHECK_THROWS_AS(load_checkpoint(path), io_error);

    // Valid prefix, then cut off mid-tensor.
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    save_checkpoint(path, cfg, "tlinformer", {}, m.named_params());
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    {
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
    CHECK_THROWS_AS(load_checkpoint("no_such_dir/nothing.tlcp"), io_error);
    std::remove(path.c_str());
}

TEST_CASE("a baseline checkpoint restores a baseline") {
    ModelConfig cfg = micro_config();
    cfg.max_seq = 64;
    BaselineModel m = BaselineModel::init(cfg);
    const std::string path = "tmp_model_baseline.tlcp";
    save_checkpoint(path, cfg, "baseline", {}, m.named_params());
    const Checkpoint ck = load_checkpoint(path);
    BaselineModel restored = baseline_from_checkpoint(ck);
    const auto tokens = token_ramp(12, cfg.vocab_size);
    Graph ga(false), gb(false);
    CHECK(max_abs_diff(baseline_forward(ga, m, tokens),
                       baseline_forward(gb, restored, tokens)) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("the parity manifest accounts for every parameter") {
    for (int64_t inner : {int64_t{0}, int64_t{1}, int64_t{3}}) {
        ModelConfig cfg = micro_config();
        cfg.inner_depth = inner;
        const ParityManifest p = parity_manifest(cfg);
        TLinFormer tl = TLinFormer::init(cfg);
        BaselineModel bl = BaselineModel::init(cfg);
        CHECK(p.tlin_params == tl.param_count());
        CHECK(p.baseline_params == bl.param_count());
        CHECK(p.delta == p.tlin_params - p.baseline_params);
        CHECK(p.delta == p.extra_attention_site_params + p.extra_context_ffn_params +
                             p.extra_context_ln_params);
        CHECK(p.delta > 0);
        CHECK(p.to_string().find("delta") != std::string::npos);
    }
}

TEST_CASE("named parameters are distinct and complete") {
    const ModelConfig cfg = micro_config();
    TLinFormer m = TLinFormer::init(cfg);
    const auto params = m.named_params();
    std::set<std::string> names;
    int64_t counted = 0;
    for (const auto& [name, t] : params) {
        CHECK(names.insert(name).second); // no duplicates
        counted += t.numel();
    }
    CHECK(counted == m.param_count());
    // One context stack and one window stack per block show up by name.
    CHECK(names.count("embed") == 1);
    CHECK(names.count("final_ln.gain") == 1);
    CHECK(names.count("block0.ctx0.attn.wq") == 1);
    CHECK(names.count("block1.gen2.cross_attn.wo") == 1);
}
