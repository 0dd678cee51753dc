#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "tlin/bench.hpp"
#include "tlin/cost_model.hpp"
#include "tlin/kv_cache.hpp"
#include "tlin/model.hpp"
#include "tlin/train.hpp"
#include "tlin/util.hpp"
#include "tlin/verify.hpp"

namespace {

struct ShapeFlags {
    int64_t d_model = 64;
    int64_t n_head = 4;
    int64_t inner_depth = 2;
    int64_t n_blocks = 2;
    int64_t woh = 32;
    int64_t wog = 32;
    int64_t ffn_mult = 4;
    int64_t max_seq = 16384;

    void attach(CLI::App* cmd) {
        cmd->add_option("--d-model", d_model, "model width");
        cmd->add_option("--n-head", n_head, "attention heads");
        cmd->add_option("--inner-depth", inner_depth, "self-attention layers inside the context path");
        cmd->add_option("--n-blocks", n_blocks, "stacked blocks");
        cmd->add_option("--woh", woh, "history window width");
        cmd->add_option("--wog", wog, "generation window width");
        cmd->add_option("--ffn-mult", ffn_mult, "feed-forward expansion");
        cmd->add_option("--max-seq", max_seq, "baseline position-table bound");
    }

    tlin::ModelConfig to_config(int64_t vocab, tlin::Dtype dt, uint64_t seed) const {
        tlin::ModelConfig c;
        c.vocab_size = vocab;
        c.d_model = d_model;
        c.n_head = n_head;
        c.inner_depth = inner_depth;
        c.n_blocks = n_blocks;
        c.woh = woh;
        c.wog = wog;
        c.ffn_mult = ffn_mult;
        c.max_seq = max_seq;
        c.dtype = dt;
        c.seed = seed;
        return c;
    }
};

int run_cost(const ShapeFlags& shape, const std::vector<int64_t>& n_list,
             const std::string& out_path) {
    std::string csv = "N,window_prefill_units,window_hit_units,baseline_prefill_units,"
                      "baseline_hit_units,prefill_ratio\n";
    const int64_t layers = shape.n_blocks * (shape.inner_depth + 2);
    for (int64_t n : n_list) {
        const auto c =
            tlin::cost_cache_miss(shape.d_model, n, shape.woh, shape.wog, shape.inner_depth);
        const int64_t wm = shape.n_blocks * c.total;
        const int64_t wh = shape.n_blocks * tlin::cost_cache_hit(shape.d_model, n + shape.wog,
                                                                 shape.woh, shape.wog,
                                                                 shape.inner_depth);
        const int64_t bm = tlin::baseline_cost(n, shape.d_model, layers);
        const int64_t bh = tlin::baseline_cost_hit(n + 1, shape.d_model, layers);
        csv += std::to_string(n) + "," + std::to_string(wm) + "," + std::to_string(wh) + "," +
               std::to_string(bm) + "," + std::to_string(bh) + "," +
               std::to_string(static_cast<double>(bm) / static_cast<double>(wm)) + "\n";
    }
    if (out_path.empty()) {
        std::fputs(csv.c_str(), stdout);
    } else {
        tlin::atomic_write_file(out_path, csv);
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

int run_verify(bool inject, uint64_t seed, const std::string& json_path) {
    tlin::VerifyOptions opts;
    opts.inject_cache_bug = inject;
    opts.seed = seed;
    const auto results = tlin::run_verification(opts);
    for (const auto& r : results)
        std::printf("check %-18s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.detail.c_str());
    if (!json_path.empty()) tlin::atomic_write_file(json_path, tlin::verification_json(results));
    return tlin::all_passed(results) ? 0 : 1;
}

struct TrainFlags {
    std::string corpus_path;
    std::string model_kind = "tlinformer";
    std::string out_path = "out/model.tlcp";
    std::string log_path = "out/train_log.csv";
    int64_t seq_len = 32;
    int64_t batch_size = 4;
    int64_t grad_accum = 1;
    int64_t steps = 200;
    double lr = 3e-4;
    uint64_t seed = 1;
    double eval_fraction = 0.1;
};

int run_train(const ShapeFlags& shape, const TrainFlags& tf) {
    const std::string text = tlin::read_file(tf.corpus_path);
    const tlin::Tokenizer tk = tlin::Tokenizer::from_corpus(text);
    if (tk.vocab() < 2) throw tlin::config_error("corpus has fewer than two distinct bytes");
    const tlin::Corpus corpus = tlin::make_corpus(tk.encode(text), tf.eval_fraction);

    tlin::TrainConfig tc;
    tc.seq_len = tf.seq_len;
    tc.batch_size = tf.batch_size;
    tc.grad_accum = tf.grad_accum;
    tc.steps = tf.steps;
    tc.lr = tf.lr;
    tc.seed = tf.seed;
    tc.eval_fraction = tf.eval_fraction;
    tc.validate();

    const tlin::ModelConfig cfg = shape.to_config(tk.vocab(), tlin::Dtype::f64, tf.seed);
    tlin::TrainRunResult res;
    if (tf.model_kind == "tlinformer") {
        if (tf.seq_len % shape.wog != 0)
            throw tlin::config_error("seq_len must be a multiple of wog for window training");
        tlin::TLinFormer m = tlin::TLinFormer::init(cfg);
        res = tlin::train_tlinformer(m, corpus, tc);
        tlin::save_checkpoint(tf.out_path, cfg, "tlinformer", tk.table(), m.named_params());
    } else if (tf.model_kind == "baseline") {
        if (tf.seq_len >= shape.max_seq)
            throw tlin::config_error("seq_len must stay below max_seq for the baseline");
        tlin::BaselineModel m = tlin::BaselineModel::init(cfg);
        res = tlin::train_baseline(m, corpus, tc);
        tlin::save_checkpoint(tf.out_path, cfg, "baseline", tk.table(), m.named_params());
    } else {
        throw tlin::config_error("unknown --model " + tf.model_kind);
    }
    tlin::atomic_write_file(tf.log_path, res.log_csv);
    std::printf("trained %s for %lld steps: final loss %.4f, eval ppl %.3f\n",
                tf.model_kind.c_str(), static_cast<long long>(tf.steps), res.final_loss,
                res.eval_ppl);
    std::printf("checkpoint: %s\nlog: %s\n", tf.out_path.c_str(), tf.log_path.c_str());
    return 0;
}

int run_eval(const std::string& ck_path, const std::string& corpus_path, int64_t seq_len) {
    const tlin::Checkpoint ck = tlin::load_checkpoint(ck_path);
    const tlin::Tokenizer tk = tlin::Tokenizer::from_table(ck.token_bytes);
    const auto tokens = tk.encode(tlin::read_file(corpus_path));
    double ppl = 0.0;
    if (ck.kind == "tlinformer") {
        const tlin::TLinFormer m = tlin::tlinformer_from_checkpoint(ck);
        if (seq_len % m.cfg.wog != 0)
            throw tlin::config_error("seq_len must be a multiple of wog");
        ppl = tlin::evaluate_ppl_tlin(m, tokens, seq_len);
    } else {
        const tlin::BaselineModel m = tlin::baseline_from_checkpoint(ck);
        ppl = tlin::evaluate_ppl_baseline(m, tokens, seq_len);
    }
    std::printf("ppl %.6f over %zu tokens at seq_len %lld\n", ppl, tokens.size(),
                static_cast<long long>(seq_len));
    return 0;
}

int run_generate(const std::string& ck_path, const std::string& prompt, int64_t n_tokens,
                 const std::string& events_path) {
    const tlin::Checkpoint ck = tlin::load_checkpoint(ck_path);
    const tlin::Tokenizer tk = tlin::Tokenizer::from_table(ck.token_bytes);
    const auto prompt_ids = tk.encode(prompt);
    if (prompt_ids.empty()) throw tlin::config_error("prompt is empty");

    std::vector<int64_t> out_ids;
    std::string events_csv;
    if (ck.kind == "tlinformer") {
        const tlin::TLinFormer m = tlin::tlinformer_from_checkpoint(ck);
        tlin::KVCacheStore store(m);
        out_ids = tlin::generate_cached(store, prompt_ids, n_tokens);
        events_csv = tlin::cache_events_csv(store.events());
    } else {
        const tlin::BaselineModel m = tlin::baseline_from_checkpoint(ck);
        tlin::BaselineCacheStore store(m);
        out_ids = tlin::generate_baseline_cached(store, prompt_ids, n_tokens);
        events_csv = tlin::cache_events_csv(store.events());
    }
    if (!events_path.empty()) tlin::atomic_write_file(events_path, events_csv);
    std::printf("%s%s\n", prompt.c_str(), tk.decode(out_ids).c_str());
    return 0;
}

struct BenchFlags {
    std::string out_dir = "out/bench";
    std::vector<int64_t> n_list;
    int64_t repeats = 5;
    int64_t warmup = 2;
    int64_t tokens = 6;
    bool no_baseline = false;
    bool f32 = false;
    uint64_t seed = 7;
};

int run_bench(ShapeFlags shape, const BenchFlags& bf, bool shape_given) {
    tlin::SweepConfig sc;
    if (!bf.n_list.empty()) sc.n_list = bf.n_list;
    sc.repeats = bf.repeats;
    sc.warmup = bf.warmup;
    sc.tokens_per_point = bf.tokens;
    sc.run_baseline = !bf.no_baseline;
    sc.seed = bf.seed;
    int64_t n_max = 0;
    for (int64_t n : sc.n_list) n_max = std::max(n_max, n);
    const tlin::Dtype dt = bf.f32 ? tlin::Dtype::f32 : tlin::Dtype::f64;
    if (shape_given) {
        shape.max_seq = std::max(shape.max_seq, n_max + bf.tokens + 1);
        sc.model = shape.to_config(256, dt, bf.seed);
    } else {
        sc.model = tlin::desk_bench_model(n_max, dt);
    }

    const auto rows = tlin::run_sweep(sc);
    tlin::emit_outputs(bf.out_dir, rows);
    std::fputs(tlin::sweep_csv(rows).c_str(), stdout);
    const auto tl = tlin::rows_for_model(rows, "tlinformer");
    const auto bl = tlin::rows_for_model(rows, "baseline");
    if (!tl.empty() && !bl.empty() && tl.size() == bl.size())
        std::fputs(tlin::speedup_csv(tlin::speedup_table(bl, tl)).c_str(), stdout);
    std::printf("outputs in %s\n", bf.out_dir.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"window-attention language model: train, decode, benchmark"};
    app.require_subcommand(1);
    int rc = 0;

    // cost
    auto* cost = app.add_subcommand("cost", "print closed-form interaction-unit costs");
    ShapeFlags cost_shape;
    cost_shape.attach(cost);
    std::vector<int64_t> cost_ns{128, 1024, 2048, 4096, 8192};
    std::string cost_out;
    cost->add_option("-n,--n", cost_ns, "sequence lengths");
    cost->add_option("--out", cost_out, "write CSV here instead of stdout");
    cost->callback([&] { rc = run_cost(cost_shape, cost_ns, cost_out); });

    // verify
    auto* verify = app.add_subcommand("verify", "run fast self-checks");
    bool inject = false;
    uint64_t verify_seed = 11;
    std::string verify_json;
    verify->add_flag("--inject-cache-bug", inject,
                     "corrupt the cache after prefill; the checks must catch it");
    verify->add_option("--seed", verify_seed, "rng seed");
    verify->add_option("--json", verify_json, "write results as JSON here");
    verify->callback([&] { rc = run_verify(inject, verify_seed, verify_json); });

    // train
    auto* train = app.add_subcommand("train", "fit a model on a byte corpus");
    ShapeFlags train_shape;
    train_shape.d_model = 32;
    train_shape.n_head = 2;
    train_shape.inner_depth = 1;
    train_shape.n_blocks = 1;
    train_shape.woh = 24;
    train_shape.wog = 8;
    train_shape.attach(train);
    TrainFlags tf;
    train->add_option("--corpus", tf.corpus_path, "input text file")->required();
    train->add_option("--model", tf.model_kind, "tlinformer | baseline");
    train->add_option("--out", tf.out_path, "checkpoint path");
    train->add_option("--log", tf.log_path, "training log CSV path");
    train->add_option("--seq-len", tf.seq_len, "tokens per sample");
    train->add_option("--batch-size", tf.batch_size, "samples per pass");
    train->add_option("--grad-accum", tf.grad_accum, "passes per optimizer step");
    train->add_option("--steps", tf.steps, "optimizer steps");
    train->add_option("--lr", tf.lr, "learning rate");
    train->add_option("--seed", tf.seed, "rng seed");
    train->add_option("--eval-fraction", tf.eval_fraction, "held-out tail share");
    train->callback([&] { rc = run_train(train_shape, tf); });

    // eval
    auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a text file");
    std::string eval_ck, eval_corpus;
    int64_t eval_seq = 32;
    eval->add_option("--checkpoint", eval_ck, "checkpoint path")->required();
    eval->add_option("--corpus", eval_corpus, "text file")->required();
    eval->add_option("--seq-len", eval_seq, "tokens per sample");
    eval->callback([&] { rc = run_eval(eval_ck, eval_corpus, eval_seq); });

    // generate
    auto* gen = app.add_subcommand("generate", "greedy decode from a checkpoint");
    std::string gen_ck, gen_prompt, gen_events;
    int64_t gen_tokens = 32;
    gen->add_option("--checkpoint", gen_ck, "checkpoint path")->required();
    gen->add_option("--prompt", gen_prompt, "prompt text")->required();
    gen->add_option("--tokens", gen_tokens, "tokens to decode");
    gen->add_option("--events", gen_events, "write the cache event CSV here");
    gen->callback([&] { rc = run_generate(gen_ck, gen_prompt, gen_tokens, gen_events); });

    // bench
    auto* bench = app.add_subcommand("bench", "latency sweep over sequence lengths");
    ShapeFlags bench_shape;
    bench_shape.attach(bench);
    BenchFlags bf;
    bench->add_option("--out-dir", bf.out_dir, "output directory");
    bench->add_option("-n,--n", bf.n_list, "sequence lengths (multiples of wog)");
    bench->add_option("--repeats", bf.repeats, "timed runs per point");
    bench->add_option("--warmup", bf.warmup, "untimed runs per point");
    bench->add_option("--tokens", bf.tokens, "tokens decoded per point (>= 3)");
    bench->add_flag("--no-baseline", bf.no_baseline, "skip the dense baseline");
    bench->add_flag("--f32", bf.f32, "run the sweep in 32-bit floats");
    bench->add_option("--seed", bf.seed, "rng seed");
    bench->callback([&] {
        const bool shape_given =
            bench->count("--d-model") || bench->count("--n-head") || bench->count("--inner-depth") ||
            bench->count("--n-blocks") || bench->count("--woh") || bench->count("--wog") ||
            bench->count("--ffn-mult") || bench->count("--max-seq");
        rc = run_bench(bench_shape, bf, shape_given);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const tlin::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const tlin::io_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const tlin::error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return rc;
}
