#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tlin/model.hpp"

namespace tlin {

// Byte-level tokenizer. Ids are the ranks of the distinct bytes seen in the
// corpus, in ascending byte order, so the mapping is a pure function of the
// byte set.
class Tokenizer {
  public:
    static Tokenizer from_corpus(std::string_view text);
    static Tokenizer from_table(const std::vector<uint8_t>& bytes);

    int64_t vocab() const { return static_cast<int64_t>(table_.size()); }
    const std::vector<uint8_t>& table() const { return table_; }
    std::vector<int64_t> encode(std::string_view text) const;
    std::string decode(std::span<const int64_t> ids) const;

  private:
    std::vector<uint8_t> table_;      // id -> byte, ascending
    std::array<int16_t, 256> to_id_{}; // byte -> id, -1 when absent
};

// Encoded corpus with a held-out tail for evaluation.
struct Corpus {
    std::vector<int64_t> tokens;
    int64_t train_end = 0; // tokens[0, train_end) train, [train_end, size) eval

    std::span<const int64_t> train_span() const {
        return {tokens.data(), static_cast<size_t>(train_end)};
    }
    std::span<const int64_t> eval_span() const {
        return {tokens.data() + train_end, tokens.size() - static_cast<size_t>(train_end)};
    }
};

Corpus make_corpus(std::span<const int64_t> tokens, double eval_fraction);

struct TrainConfig {
    int64_t seq_len = 256; // tokens per sample; must be a multiple of wog
    int64_t batch_size = 4;
    int64_t grad_accum = 1;
    int64_t steps = 100;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    double eval_fraction = 0.1;
    void validate() const;
};

class Adam {
  public:
    Adam(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1,
         double beta2, double eps);

    void step();      // applies accumulated grads, then clears them
    void zero_grad();
    int64_t steps_taken() const { return t_; }

  private:
    struct Slot {
        Tensor p;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
};

// Summed next-token loss over one sample of seq_len + 1 tokens, computed one
// window chunk at a time: chunk j sees tokens [0, (j+1)*wog) with history
// j*wog and is scored on its wog positions. The chunk losses add up to the
// loss of scoring every position once.
Tensor tlin_sample_loss(Graph& g, const TLinFormer& m, std::span<const int64_t> sample);

// Same contract for the dense decoder: one full forward, all positions scored.
Tensor baseline_sample_loss(Graph& g, const BaselineModel& m, std::span<const int64_t> sample);

struct StepStats {
    double loss = 0.0;   // mean next-token loss for this step
    int64_t tokens = 0;  // positions scored
    uint64_t wall_nanos = 0;
};

StepStats train_step_tlin(TLinFormer& m, Adam& opt, const Corpus& corpus, const TrainConfig& tc,
                          std::mt19937_64& rng);
StepStats train_step_baseline(BaselineModel& m, Adam& opt, const Corpus& corpus,
                              const TrainConfig& tc, std::mt19937_64& rng);

// Mean loss over non-overlapping samples of the span; exp of it.
double evaluate_ppl_tlin(const TLinFormer& m, std::span<const int64_t> tokens, int64_t seq_len);
double evaluate_ppl_baseline(const BaselineModel& m, std::span<const int64_t> tokens,
                             int64_t seq_len);

struct TrainRunResult {
    double final_loss = 0.0; // last step's mean loss
    double eval_ppl = 0.0;   // 0 when the eval span holds no full sample
    std::string log_csv;     // step,loss,tokens_seen,wall_nanos
};

TrainRunResult train_tlinformer(TLinFormer& m, const Corpus& corpus, const TrainConfig& tc);
TrainRunResult train_baseline(BaselineModel& m, const Corpus& corpus, const TrainConfig& tc);

} // namespace tlin
