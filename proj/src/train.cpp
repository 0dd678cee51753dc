#include "tlin/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "tlin/util.hpp"

namespace tlin {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Tokenizer Tokenizer::from_corpus(std::string_view text) {
    std::set<uint8_t> seen;
    for (char c : text) seen.insert(static_cast<uint8_t>(c));
    return from_table({seen.begin(), seen.end()});
}

Tokenizer Tokenizer::from_table(const std::vector<uint8_t>& bytes) {
    Tokenizer tk;
    tk.table_ = bytes;
    std::sort(tk.table_.begin(), tk.table_.end());
    tk.table_.erase(std::unique(tk.table_.begin(), tk.table_.end()), tk.table_.end());
    tk.to_id_.fill(-1);
    for (size_t i = 0; i < tk.table_.size(); ++i)
        tk.to_id_[tk.table_[i]] = static_cast<int16_t>(i);
    return tk;
}

std::vector<int64_t> Tokenizer::encode(std::string_view text) const {
    std::vector<int64_t> out;
    out.reserve(text.size());
    for (char c : text) {
        const int16_t id = to_id_[static_cast<uint8_t>(c)];
        if (id < 0)
            throw config_error("tokenizer: byte " + std::to_string(static_cast<uint8_t>(c)) +
                               " is not in the vocabulary");
        out.push_back(id);
    }
    return out;
}

std::string Tokenizer::decode(std::span<const int64_t> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int64_t id : ids) {
        if (id < 0 || id >= vocab())
            throw config_error("tokenizer: id " + std::to_string(id) + " outside vocab of " +
                               std::to_string(vocab()));
        out.push_back(static_cast<char>(table_[static_cast<size_t>(id)]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

Corpus make_corpus(std::span<const int64_t> tokens, double eval_fraction) {
    if (eval_fraction < 0.0 || eval_fraction >= 1.0)
        throw config_error("eval_fraction must lie in [0, 1)");
    Corpus c;
    c.tokens.assign(tokens.begin(), tokens.end());
    const auto n = static_cast<int64_t>(c.tokens.size());
    c.train_end = n - static_cast<int64_t>(static_cast<double>(n) * eval_fraction);
    return c;
}

void TrainConfig::validate() const {
    if (seq_len < 1) throw config_error("seq_len must be positive");
    if (batch_size < 1) throw config_error("batch_size must be positive");
    if (grad_accum < 1) throw config_error("grad_accum must be positive");
    if (steps < 1) throw config_error("steps must be positive");
    if (!(lr > 0.0)) throw config_error("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw config_error("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw config_error("adam_eps must be positive");
    if (eval_fraction < 0.0 || eval_fraction >= 1.0)
        throw config_error("eval_fraction must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1,
           double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& [name, p] : params) {
        if (p.dtype() != Dtype::f64)
            throw config_error("optimizer: parameter " + name + " is not f64; training runs in f64");
        Slot s;
        s.p = p;
        s.m.assign(static_cast<size_t>(p.numel()), 0.0);
        s.v.assign(static_cast<size_t>(p.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (Slot& s : slots_) {
        if (!s.p.has_grad()) continue; // parameter off the loss path this step
        const int64_t n = s.p.numel();
        for (int64_t i = 0; i < n; ++i) {
            const double g = s.p.grad_at(i);
            auto& m = s.m[static_cast<size_t>(i)];
            auto& v = s.v[static_cast<size_t>(i)];
            m = b1_ * m + (1.0 - b1_) * g;
            v = b2_ * v + (1.0 - b2_) * g * g;
            const double update = lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
            s.p.set(i, s.p.at(i) - update);
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (Slot& s : slots_) s.p.zero_grad();
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor tlin_sample_loss(Graph& g, const TLinFormer& m, std::span<const int64_t> sample) {
    const int64_t wog = m.cfg.wog;
    const int64_t n = std::ssize(sample) - 1;
    if (n < 1) throw config_error("sample must hold at least two tokens");
    if (n % wog != 0)
        throw config_error("scored length " + std::to_string(n) + " is not a multiple of wog " +
                           std::to_string(wog));
    Tensor total;
    for (int64_t j = 0; j < n / wog; ++j) {
        const int64_t end = (j + 1) * wog;
        Tensor logits = forward_window(g, m, sample.first(end), j * wog);
        std::vector<int64_t> targets(sample.begin() + j * wog + 1, sample.begin() + end + 1);
        Tensor loss = g.cross_entropy_sum(logits, targets);
        total = total.defined() ? g.add(total, loss) : loss;
    }
    return total;
}

Tensor baseline_sample_loss(Graph& g, const BaselineModel& m, std::span<const int64_t> sample) {
    const int64_t n = std::ssize(sample) - 1;
    if (n < 1) throw config_error("sample must hold at least two tokens");
    Tensor logits = baseline_forward(g, m, sample.first(n));
    std::vector<int64_t> targets(sample.begin() + 1, sample.end());
    return g.cross_entropy_sum(logits, targets);
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

namespace {

std::vector<int64_t> sample_offsets(const Corpus& corpus, int64_t seq_len, int64_t count,
                                    std::mt19937_64& rng) {
    const int64_t span = corpus.train_end - (seq_len + 1);
    if (span < 0)
        throw config_error("corpus train split holds " + std::to_string(corpus.train_end) +
                           " tokens, a sample needs " + std::to_string(seq_len + 1));
    std::uniform_int_distribution<int64_t> dist(0, span);
    std::vector<int64_t> offs(static_cast<size_t>(count));
    for (auto& o : offs) o = dist(rng);
    return offs;
}

template <typename LossFn>
StepStats run_step(Adam& opt, const Corpus& corpus, const TrainConfig& tc, std::mt19937_64& rng,
                   LossFn&& sample_loss) {
    const uint64_t t0 = now_nanos();
    const int64_t per_pass = tc.batch_size * tc.seq_len;
    const double denom = static_cast<double>(per_pass * tc.grad_accum);
    double loss_acc = 0.0;
    for (int64_t a = 0; a < tc.grad_accum; ++a) {
        Graph g;
        Tensor total;
        for (int64_t off : sample_offsets(corpus, tc.seq_len, tc.batch_size, rng)) {
            std::span<const int64_t> sample{corpus.tokens.data() + off,
                                            static_cast<size_t>(tc.seq_len + 1)};
            Tensor loss = sample_loss(g, sample);
            total = total.defined() ? g.add(total, loss) : loss;
        }
        Tensor scaled = g.scale(total, 1.0 / denom);
        loss_acc += scaled.item() * static_cast<double>(tc.grad_accum);
        g.backward(scaled);
    }
    opt.step();
    StepStats st;
    st.loss = loss_acc / static_cast<double>(tc.grad_accum);
    st.tokens = per_pass * tc.grad_accum;
    st.wall_nanos = now_nanos() - t0;
    return st;
}

template <typename LossFn>
double run_eval(std::span<const int64_t> tokens, int64_t seq_len, LossFn&& sample_loss) {
    const int64_t n_samples = (std::ssize(tokens) - 1) / seq_len;
    if (n_samples < 1)
        throw config_error("eval span holds " + std::to_string(tokens.size()) +
                           " tokens, one sample needs " + std::to_string(seq_len + 1));
    double total = 0.0;
    for (int64_t s = 0; s < n_samples; ++s) {
        Graph g(/*grad_enabled=*/false);
        Tensor loss = sample_loss(g, tokens.subspan(static_cast<size_t>(s * seq_len),
                                                    static_cast<size_t>(seq_len + 1)));
        total += loss.item();
    }
    return std::exp(total / static_cast<double>(n_samples * seq_len));
}

template <typename StepFn, typename EvalFn>
TrainRunResult run_training(const Corpus& corpus, const TrainConfig& tc, StepFn&& one_step,
                            EvalFn&& eval_ppl) {
    tc.validate();
    std::ostringstream log;
    log << "step,loss,tokens_seen,wall_nanos\n";
    TrainRunResult res;
    int64_t tokens_seen = 0;
    for (int64_t step = 1; step <= tc.steps; ++step) {
        StepStats st;
        try {
            st = one_step();
        } catch (const numeric_error& e) {
            throw numeric_error("training step " + std::to_string(step) + ": " + e.what());
        }
        tokens_seen += st.tokens;
        log << step << ',' << st.loss << ',' << tokens_seen << ',' << st.wall_nanos << '\n';
        res.final_loss = st.loss;
    }
    const auto eval = std::span<const int64_t>{corpus.tokens.data() + corpus.train_end,
                                               corpus.tokens.size() -
                                                   static_cast<size_t>(corpus.train_end)};
    if (std::ssize(eval) >= tc.seq_len + 1) res.eval_ppl = eval_ppl(eval);
    res.log_csv = log.str();
    return res;
}

} // namespace

StepStats train_step_tlin(TLinFormer& m, Adam& opt, const Corpus& corpus, const TrainConfig& tc,
                          std::mt19937_64& rng) {
    return run_step(opt, corpus, tc, rng, [&](Graph& g, std::span<const int64_t> s) {
        return tlin_sample_loss(g, m, s);
    });
}

StepStats train_step_baseline(BaselineModel& m, Adam& opt, const Corpus& corpus,
                              const TrainConfig& tc, std::mt19937_64& rng) {
    return run_step(opt, corpus, tc, rng, [&](Graph& g, std::span<const int64_t> s) {
        return baseline_sample_loss(g, m, s);
    });
}

double evaluate_ppl_tlin(const TLinFormer& m, std::span<const int64_t> tokens, int64_t seq_len) {
    return run_eval(tokens, seq_len, [&](Graph& g, std::span<const int64_t> s) {
        return tlin_sample_loss(g, m, s);
    });
}

double evaluate_ppl_baseline(const BaselineModel& m, std::span<const int64_t> tokens,
                             int64_t seq_len) {
    return run_eval(tokens, seq_len, [&](Graph& g, std::span<const int64_t> s) {
        return baseline_sample_loss(g, m, s);
    });
}

TrainRunResult train_tlinformer(TLinFormer& m, const Corpus& corpus, const TrainConfig& tc) {
    if (m.cfg.dtype != Dtype::f64) throw config_error("training runs in f64");
    std::mt19937_64 rng(tc.seed);
    Adam opt(m.named_params(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    return run_training(
        corpus, tc, [&] { return train_step_tlin(m, opt, corpus, tc, rng); },
        [&](std::span<const int64_t> eval) { return evaluate_ppl_tlin(m, eval, tc.seq_len); });
}

TrainRunResult train_baseline(BaselineModel& m, const Corpus& corpus, const TrainConfig& tc) {
    if (m.cfg.dtype != Dtype::f64) throw config_error("training runs in f64");
    std::mt19937_64 rng(tc.seed);
    Adam opt(m.named_params(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    return run_training(
        corpus, tc, [&] { return train_step_baseline(m, opt, corpus, tc, rng); },
        [&](std::span<const int64_t> eval) { return evaluate_ppl_baseline(m, eval, tc.seq_len); });
}

} // namespace tlin
