#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tlin/model.hpp"

namespace tlin {

// Latency sweep over sequence lengths. Per point and model: build a fresh
// store, prefill an n-token prompt, then decode tokens_per_point tokens. The
// first token is free (prefill logits), the second pays the slide, the third
// is a pure window hit; its step supplies t_third.
struct SweepConfig {
    std::vector<int64_t> n_list{128, 1024, 2048, 4096, 8192};
    int64_t repeats = 5; // timed runs per point, median reported
    int64_t warmup = 2;  // untimed runs per point
    int64_t tokens_per_point = 6;
    bool run_baseline = true;
    ModelConfig model; // see desk_bench_model()
    uint64_t seed = 7;
    void validate() const;
};

// Small single-core shape the sweep defaults to.
ModelConfig desk_bench_model(int64_t n_max, Dtype dt);

struct SweepRow {
    int64_t n = 0;
    uint64_t t_first_nanos = 0; // prefill wall time
    uint64_t t_third_nanos = 0; // third token's step wall time
    uint64_t interaction_units_miss = 0;
    uint64_t interaction_units_hit = 0;
    uint64_t bytes_cached = 0; // after prefill
    std::string model;         // "tlinformer" | "baseline"
};

// Runs the window model, then (optionally) the baseline. Ledger readings are
// checked against the closed forms; a mismatch aborts the run. Allocation
// failure at a point ends that model's sweep and keeps the rows so far.
std::vector<SweepRow> run_sweep(const SweepConfig& sc);

std::string sweep_csv(const std::vector<SweepRow>& rows);

std::vector<SweepRow> rows_for_model(const std::vector<SweepRow>& rows, const std::string& name);

struct SpeedupRow {
    int64_t n = 0;
    double prefill_speedup = 0.0; // a.t_first / b.t_first
    double hit_speedup = 0.0;
    double unit_speedup = 0.0; // miss interaction units ratio
};

// Ratios of row set a over row set b, matched by n; the grids must agree.
std::vector<SpeedupRow> speedup_table(const std::vector<SweepRow>& a,
                                      const std::vector<SweepRow>& b);

std::string speedup_csv(const std::vector<SpeedupRow>& rows);

struct ChartSeries {
    std::string name;
    std::vector<double> xs, ys;
};

// Minimal self-contained SVG line chart; log axes use decade ticks.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series,
                           bool log_x, bool log_y);

// Writes bench.csv, latency.svg, memory.svg and, when both models are
// present, speedup.csv and speedup.svg into dir.
void emit_outputs(const std::string& dir, const std::vector<SweepRow>& rows);

} // namespace tlin
