#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tlin/errors.hpp"
#include "tlin/model.hpp"
#include "tlin/tensor.hpp"
#include "tlin/train.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

using namespace tlin;

namespace {

ModelConfig tiny_config(int64_t vocab) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 8;
    cfg.n_head = 2;
    cfg.inner_depth = 1;
    cfg.n_blocks = 1;
    cfg.woh = 4;
    cfg.wog = 4;
    cfg.max_seq = 512;
    cfg.seed = 21;
    return cfg;
}

Corpus periodic_corpus(const Tokenizer& tok, const std::string& motif, int64_t repeats,
                       double eval_fraction) {
    std::string text;
    for (int64_t i = 0; i < repeats; ++i) text += motif;
    const auto ids = tok.encode(text);
    return make_corpus(ids, eval_fraction);
}

} // namespace

TEST_CASE("the tokenizer maps bytes to dense ascending ids") {
    const Tokenizer tok = Tokenizer::from_corpus("abab");
    CHECK(tok.vocab() == 2);
    const auto ids = tok.encode("abab");
    CHECK(ids == std::vector<int64_t>{0, 1, 0, 1});
    CHECK(tok.decode(ids) == "abab");
    CHECK_THROWS_AS(tok.encode("abz"), config_error);
    const std::vector<int64_t> bad{2};
    CHECK_THROWS_AS(tok.decode(bad), config_error);
    const std::vector<int64_t> neg{-1};
    CHECK_THROWS_AS(tok.decode(neg), config_error);

    // A table with duplicates and arbitrary order collapses to sorted unique bytes.
    const Tokenizer tab = Tokenizer::from_table({98, 97, 98});
    CHECK(tab.vocab() == 2);
    CHECK(tab.table() == std::vector<uint8_t>{97, 98});
    CHECK(tab.encode("ba") == std::vector<int64_t>{1, 0});

    CHECK(Tokenizer::from_corpus("").vocab() == 0);
}

TEST_CASE("make_corpus splits off the eval tail") {
    std::vector<int64_t> toks(100);
    for (size_t i = 0; i < toks.size(); ++i) toks[i] = static_cast<int64_t>(i % 7);
    const Corpus c = make_corpus(toks, 0.1);
    CHECK(c.train_end == 90);
    CHECK(c.train_span().size() == 90);
    CHECK(c.eval_span().size() == 10);
    CHECK(c.eval_span()[0] == toks[90]);
    CHECK(make_corpus(toks, 0.0).train_end == 100);
    CHECK_THROWS_AS(make_corpus(toks, 1.0), config_error);
    CHECK_THROWS_AS(make_corpus(toks, -0.1), config_error);
}

TEST_CASE("the chunked window loss equals independently summed chunks") {
    const ModelConfig cfg = tiny_config(13);
    TLinFormer m = TLinFormer::init(cfg);
    std::vector<int64_t> sample(13); // 12 scored positions = 3 chunks of wog
    for (size_t i = 0; i < sample.size(); ++i)
        sample[i] = static_cast<int64_t>((i * 5 + 2) % 13);

    Graph g;
    const double chained = tlin_sample_loss(g, m, sample).item();

    double summed = 0.0;
    for (int64_t j = 0; j < 3; ++j) {
        Graph gj(false);
        const auto prefix = std::span(sample).first(static_cast<size_t>((j + 1) * cfg.wog + 1));
        // Score window rows against the next token each: the window covers
        // positions [j*wog+1, (j+1)*wog], so feed one extra token and split.
        Tensor logits = forward_window(gj, m, prefix.first(prefix.size() - 1),
                                       j * cfg.wog);
        std::vector<int64_t> targets(prefix.begin() + j * cfg.wog + 1, prefix.end());
        summed += gj.cross_entropy_sum(logits, targets).item();
    }
    CHECK(std::abs(chained - summed) < 1e-9);
}

TEST_CASE("the window loss rejects misaligned samples") {
    const ModelConfig cfg = tiny_config(13);
    TLinFormer m = TLinFormer::init(cfg);
    Graph g;
    const std::vector<int64_t> short_sample{1};
    CHECK_THROWS_AS(tlin_sample_loss(g, m, short_sample), config_error);
    const std::vector<int64_t> misaligned{1, 2, 3, 4, 5, 6}; // 5 scored, wog 4
    CHECK_THROWS_AS(tlin_sample_loss(g, m, misaligned), config_error);
}

TEST_CASE("an untrained model scores near the uniform floor") {
    const ModelConfig cfg = tiny_config(13);
    TLinFormer m = TLinFormer::init(cfg);
    std::vector<int64_t> sample(13);
    for (size_t i = 0; i < sample.size(); ++i)
        sample[i] = static_cast<int64_t>((i * 7 + 1) % 13);
    Graph g(false);
    const double per_token = tlin_sample_loss(g, m, sample).item() / 12.0;
    CHECK(per_token == doctest::Approx(std::log(13.0)).epsilon(0.1));
}

TEST_CASE("the baseline loss matches a direct sum over rows") {
    ModelConfig cfg = tiny_config(13);
    BaselineModel m = BaselineModel::init(cfg);
    std::vector<int64_t> sample(9);
    for (size_t i = 0; i < sample.size(); ++i)
        sample[i] = static_cast<int64_t>((i * 4 + 3) % 13);
    Graph g(false);
    const double got = baseline_sample_loss(g, m, sample).item();
    Graph go(false);
    Tensor logits = baseline_forward(go, m, std::span(sample).first(8));
    const std::vector<int64_t> targets(sample.begin() + 1, sample.end());
    const double want = go.cross_entropy_sum(logits, targets).item();
    CHECK(std::abs(got - want) < 1e-12);
}

TEST_CASE("adam follows the closed-form update") {
    Tensor p = Tensor::from({1, 2}, {1.0, -2.0});
    p.set_requires_grad(true);
    const double lr = 0.1, b1 = 0.9, b2 = 0.95, eps = 1e-8;
    Adam opt({{"p", p}}, lr, b1, b2, eps);
    const Tensor coeff = Tensor::from({1, 2}, {0.5, -1.5});

    // Two steps under a constant gradient; bias correction cancels exactly, so
    // each step moves by lr * g / (|g| + eps).
    std::vector<double> want{1.0, -2.0};
    for (int step = 1; step <= 2; ++step) {
        Graph g;
        g.backward(g.sum(g.mul(p, coeff)));
        opt.step();
        for (int64_t i = 0; i < 2; ++i) {
            const double grad = coeff.at(i);
            want[static_cast<size_t>(i)] -= lr * grad / (std::abs(grad) + eps);
            CHECK(p.at(i) == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-12));
        }
        CHECK(opt.steps_taken() == step);
        CHECK(p.grad_at(0) == 0.0); // step() leaves the grads cleared
    }

    // A parameter that never enters the graph is left untouched.
    Tensor idle = Tensor::from({1, 1}, {7.0});
    idle.set_requires_grad(true);
    Adam opt2({{"p", p}, {"idle", idle}}, lr, b1, b2, eps);
    {
        Graph g;
        g.backward(g.sum(g.mul(p, coeff)));
    }
    opt2.step();
    CHECK(idle.at(0) == 7.0);

    Tensor f32 = Tensor::zeros({1, 1}, Dtype::f32);
    CHECK_THROWS_AS(Adam({{"w", f32}}, lr, b1, b2, eps), config_error);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    tc.seq_len = 8;
    CHECK_NOTHROW(tc.validate());
    auto broken = [&](auto&& tweak) {
        TrainConfig c = tc;
        tweak(c);
        CHECK_THROWS_AS(c.validate(), config_error);
    };
    broken([](TrainConfig& c) { c.seq_len = 0; });
    broken([](TrainConfig& c) { c.batch_size = 0; });
    broken([](TrainConfig& c) { c.grad_accum = 0; });
    broken([](TrainConfig& c) { c.steps = 0; });
    broken([](TrainConfig& c) { c.lr = 0.0; });
    broken([](TrainConfig& c) { c.beta1 = 1.0; });
    broken([](TrainConfig& c) { c.beta2 = -0.1; });
    broken([](TrainConfig& c) { c.adam_eps = 0.0; });
    broken([](TrainConfig& c) { c.eval_fraction = 1.0; });
}

TEST_CASE("training steps are deterministic for a fixed seed") {
    const Tokenizer tok = Tokenizer::from_corpus("abcdefgh");
    const Corpus corpus = periodic_corpus(tok, "abcdefgh", 32, 0.0);
    const ModelConfig cfg = tiny_config(tok.vocab());
    TrainConfig tc;
    tc.seq_len = 8;
    tc.batch_size = 2;
    tc.steps = 3;
    tc.lr = 1e-3;

    TLinFormer m1 = TLinFormer::init(cfg);
    TLinFormer m2 = TLinFormer::init(cfg);
    Adam o1(m1.named_params(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    Adam o2(m2.named_params(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    std::mt19937_64 r1{tc.seed}, r2{tc.seed};
    for (int i = 0; i < 3; ++i) {
        const StepStats s1 = train_step_tlin(m1, o1, corpus, tc, r1);
        const StepStats s2 = train_step_tlin(m2, o2, corpus, tc, r2);
        CHECK(s1.loss == s2.loss);
        CHECK(s1.tokens == tc.batch_size * tc.seq_len);
    }
    const auto p1 = m1.named_params();
    const auto p2 = m2.named_params();
    for (size_t i = 0; i < p1.size(); ++i)
        CHECK(max_abs_diff(p1[i].second, p2[i].second) == 0.0);
}

TEST_CASE("a short run brings the loss down on a periodic corpus") {
    const Tokenizer tok = Tokenizer::from_corpus("abcd");
    const Corpus corpus = periodic_corpus(tok, "abcd", 64, 0.0);
    const ModelConfig cfg = tiny_config(tok.vocab());
    TLinFormer m = TLinFormer::init(cfg);
    TrainConfig tc;
    tc.seq_len = 8;
    tc.batch_size = 4;
    tc.lr = 1e-2;
    Adam opt(m.named_params(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    std::mt19937_64 rng{tc.seed};
    std::vector<double> losses;
    for (int i = 0; i < 30; ++i) losses.push_back(train_step_tlin(m, opt, corpus, tc, rng).loss);
    const double first = (losses[0] + losses[1] + losses[2]) / 3.0;
    const double last = (losses[27] + losses[28] + losses[29]) / 3.0;
    CHECK(last < first);
    CHECK(last < std::log(4.0)); // beats the uniform guess
}

TEST_CASE("the full training loop logs and evaluates") {
    const Tokenizer tok = Tokenizer::from_corpus("abcdefgh");
    const Corpus corpus = periodic_corpus(tok, "abcdefgh", 40, 0.1);
    const ModelConfig cfg = tiny_config(tok.vocab());
    TLinFormer m = TLinFormer::init(cfg);
    TrainConfig tc;
    tc.seq_len = 8;
    tc.batch_size = 2;
    tc.steps = 5;
    tc.lr = 1e-3;
    const TrainRunResult res = train_tlinformer(m, corpus, tc);
    CHECK(std::isfinite(res.final_loss));
    CHECK(res.final_loss < 10.0);
    CHECK(res.eval_ppl > 0.0);
    CHECK(res.log_csv.rfind("step,loss,tokens_seen,wall_nanos\n", 0) == 0);
    // Header plus one line per step.
    CHECK(std::count(res.log_csv.begin(), res.log_csv.end(), '\n') == 6);

    // Same shape for the dense reference model.
    BaselineModel bl = BaselineModel::init(cfg);
    const TrainRunResult bres = train_baseline(bl, corpus, tc);
    CHECK(std::isfinite(bres.final_loss));
    CHECK(bres.eval_ppl > 0.0);
}

TEST_CASE("training requires f64 weights and enough data") {
    const Tokenizer tok = Tokenizer::from_corpus("abcd");
    const Corpus corpus = periodic_corpus(tok, "abcd", 64, 0.0);
    ModelConfig cfg = tiny_config(tok.vocab());
    cfg.dtype = Dtype::f32;
    TLinFormer f32_model = TLinFormer::init(cfg);
    TrainConfig tc;
    tc.seq_len = 8;
    CHECK_THROWS_AS(train_tlinformer(f32_model, corpus, tc), config_error);

    const ModelConfig ok = tiny_config(tok.vocab());
    TLinFormer m = TLinFormer::init(ok);
    std::vector<int64_t> few(tc.seq_len, 0); // one short of a full sample
    const Corpus starved = make_corpus(few, 0.0);
    CHECK_THROWS_AS(train_tlinformer(m, starved, tc), config_error);
}

TEST_CASE("perplexity evaluation is deterministic and guarded") {
    const Tokenizer tok = Tokenizer::from_corpus("abcdefgh");
    const Corpus corpus = periodic_corpus(tok, "abcdefgh", 16, 0.0);
    const ModelConfig cfg = tiny_config(tok.vocab());
    TLinFormer m = TLinFormer::init(cfg);
    const double a = evaluate_ppl_tlin(m, corpus.train_span(), 8);
    const double b = evaluate_ppl_tlin(m, corpus.train_span(), 8);
    CHECK(a == b);
    CHECK(a > 1.0);
    CHECK(a == doctest::Approx(8.0).epsilon(0.25)); // untrained, near uniform over 8 symbols

    const std::vector<int64_t> tiny(4, 0);
    CHECK_THROWS_AS(evaluate_ppl_tlin(m, tiny, 8), config_error);

    BaselineModel bl = BaselineModel::init(cfg);
    CHECK(evaluate_ppl_baseline(bl, corpus.train_span(), 8) > 1.0);
}
