#include "tlin/bench.hpp"

#include <algorithm>
#include <cmath>
#include <new>
#include <random>
#include <sstream>

#include "tlin/cost_model.hpp"
#include "tlin/kv_cache.hpp"
#include "tlin/util.hpp"

namespace tlin {

void SweepConfig::validate() const {
    model.validate();
    if (n_list.empty()) throw config_error("sweep: no sequence lengths given");
    if (repeats < 1) throw config_error("sweep: repeats must be positive");
    if (warmup < 0) throw config_error("sweep: warmup must be non-negative");
    if (tokens_per_point < 3)
        throw config_error("sweep: tokens_per_point must be at least 3, the third token is the "
                           "measured window hit");
    int64_t n_max = 0;
    for (int64_t n : n_list) {
        if (n % model.wog != 0)
            throw config_error("sweep: N=" + std::to_string(n) + " is not a multiple of wog " +
                               std::to_string(model.wog));
        if (n - model.wog < model.woh)
            throw config_error("sweep: N=" + std::to_string(n) +
                               " leaves less history than woh; the closed forms assume a full "
                               "history window");
        n_max = std::max(n_max, n);
    }
    if (model.max_seq < n_max + tokens_per_point)
        throw config_error("sweep: max_seq too small for N=" + std::to_string(n_max) + " plus " +
                           std::to_string(tokens_per_point) + " decoded tokens");
}

ModelConfig desk_bench_model(int64_t n_max, Dtype dt) {
    ModelConfig c;
    c.vocab_size = 256;
    c.d_model = 64;
    c.n_head = 4;
    c.inner_depth = 2;
    c.n_blocks = 2;
    c.woh = 32;
    c.wog = 32;
    c.ffn_mult = 4;
    c.max_seq = n_max + 64;
    c.dtype = dt;
    c.seed = 7;
    return c;
}

namespace {

struct PointSample {
    uint64_t t_first = 0;
    uint64_t t_third = 0;
    uint64_t u_miss = 0;
    uint64_t u_hit = 0;
    uint64_t bytes = 0;
};

std::vector<int64_t> random_prompt(int64_t n, int64_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<int64_t> dist(0, vocab - 1);
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (auto& t : p) t = dist(rng);
    return p;
}

void check_units(const char* what, int64_t n, uint64_t measured, uint64_t expected) {
    if (measured != expected)
        throw verify_error(std::string(what) + " at N=" + std::to_string(n) + ": ledger read " +
                           std::to_string(measured) + ", closed form gives " +
                           std::to_string(expected));
}

PointSample run_point_tlin(const TLinFormer& m, int64_t n, int64_t tokens,
                           std::mt19937_64& rng) {
    const ModelConfig& cfg = m.cfg;
    const auto prompt = random_prompt(n, cfg.vocab_size, rng);
    KVCacheStore store(m);
    Tensor logits = cache_prefill(store, prompt);
    int64_t tok = argmax_row(logits, logits.rows() - 1);
    for (int64_t i = 1; i < tokens; ++i) {
        if (store.fill() == cfg.wog) cache_slide(store);
        logits = cache_step(store, tok);
        tok = argmax_row(logits, 0);
    }

    PointSample s;
    std::vector<uint64_t> hit_units, hit_walls;
    for (const CacheEvent& e : store.events()) {
        if (e.kind == CacheEventKind::Miss && s.t_first == 0 && e.n == n) {
            s.t_first = e.wall_nanos;
            s.u_miss = e.interaction_units;
            s.bytes = e.bytes_cached;
        } else if (e.kind == CacheEventKind::Hit) {
            hit_units.push_back(e.interaction_units);
            hit_walls.push_back(e.wall_nanos);
        }
    }
    if (hit_walls.size() < 2) throw verify_error("sweep point produced fewer than two window hits");
    s.t_third = hit_walls[1]; // second step: the slide is paid by the first
    s.u_hit = hit_units[1];

    const uint64_t blocks = static_cast<uint64_t>(cfg.n_blocks);
    check_units("prefill units", n, s.u_miss,
                blocks * static_cast<uint64_t>(
                             cost_cache_miss(cfg.d_model, n, cfg.woh, cfg.wog, cfg.inner_depth)
                                 .total));
    check_units("window-hit units", n, s.u_hit,
                blocks * static_cast<uint64_t>(cost_cache_hit(cfg.d_model, n + cfg.wog, cfg.woh,
                                                              cfg.wog, cfg.inner_depth)));
    return s;
}

PointSample run_point_baseline(const BaselineModel& m, int64_t n, int64_t tokens,
                               std::mt19937_64& rng) {
    const ModelConfig& cfg = m.cfg;
    const auto prompt = random_prompt(n, cfg.vocab_size, rng);
    BaselineCacheStore store(m);
    Tensor logits = baseline_cache_prefill(store, prompt);
    int64_t tok = argmax_row(logits, logits.rows() - 1);
    for (int64_t i = 1; i < tokens; ++i) {
        logits = baseline_cache_step(store, tok);
        tok = argmax_row(logits, 0);
    }

    PointSample s;
    std::vector<uint64_t> hit_units, hit_walls;
    for (const CacheEvent& e : store.events()) {
        if (e.kind == CacheEventKind::Miss) {
            s.t_first = e.wall_nanos;
            s.u_miss = e.interaction_units;
            s.bytes = e.bytes_cached;
        } else if (e.kind == CacheEventKind::Hit) {
            hit_units.push_back(e.interaction_units);
            hit_walls.push_back(e.wall_nanos);
        }
    }
    if (hit_walls.size() < 2) throw verify_error("sweep point produced fewer than two cache hits");
    s.t_third = hit_walls[1];
    s.u_hit = hit_units[1];

    check_units("baseline prefill units", n, s.u_miss,
                static_cast<uint64_t>(baseline_cost(n, cfg.d_model, m.n_layers)));
    check_units("baseline hit units", n, s.u_hit,
                static_cast<uint64_t>(baseline_cost_hit(n + 2, cfg.d_model, m.n_layers)));
    return s;
}

template <typename RunFn>
void sweep_one_model(const SweepConfig& sc, const std::string& name, std::mt19937_64& rng,
                     std::vector<SweepRow>& rows, RunFn&& run_point) {
    for (int64_t n : sc.n_list) {
        try {
            for (int64_t w = 0; w < sc.warmup; ++w) run_point(n, rng);
            std::vector<uint64_t> firsts, thirds;
            PointSample last;
            for (int64_t r = 0; r < sc.repeats; ++r) {
                last = run_point(n, rng);
                firsts.push_back(last.t_first);
                thirds.push_back(last.t_third);
            }
            SweepRow row;
            row.n = n;
            row.t_first_nanos = median_u64(firsts);
            row.t_third_nanos = median_u64(thirds);
            row.interaction_units_miss = last.u_miss;
            row.interaction_units_hit = last.u_hit;
            row.bytes_cached = last.bytes;
            row.model = name;
            rows.push_back(row);
        } catch (const std::bad_alloc&) {
            break; // out of memory at this length; keep the points that fit
        }
    }
}

} // namespace

std::vector<SweepRow> run_sweep(const SweepConfig& sc) {
    sc.validate();
    std::mt19937_64 rng(sc.seed);
    std::vector<SweepRow> rows;
    {
        TLinFormer m = TLinFormer::init(sc.model);
        sweep_one_model(sc, "tlinformer", rng, rows, [&](int64_t n, std::mt19937_64& r) {
            return run_point_tlin(m, n, sc.tokens_per_point, r);
        });
    }
    if (sc.run_baseline) {
        BaselineModel m = BaselineModel::init(sc.model);
        sweep_one_model(sc, "baseline", rng, rows, [&](int64_t n, std::mt19937_64& r) {
            return run_point_baseline(m, n, sc.tokens_per_point, r);
        });
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "N,t_first_nanos,t_third_nanos,interaction_units_miss,interaction_units_hit,"
          "bytes_cached,model\n";
    for (const SweepRow& r : rows) {
        os << r.n << ',' << r.t_first_nanos << ',' << r.t_third_nanos << ','
           << r.interaction_units_miss << ',' << r.interaction_units_hit << ',' << r.bytes_cached
           << ',' << r.model << '\n';
    }
    return os.str();
}

std::vector<SweepRow> rows_for_model(const std::vector<SweepRow>& rows, const std::string& name) {
    std::vector<SweepRow> out;
    for (const SweepRow& r : rows)
        if (r.model == name) out.push_back(r);
    return out;
}

std::vector<SpeedupRow> speedup_table(const std::vector<SweepRow>& a,
                                      const std::vector<SweepRow>& b) {
    if (a.size() != b.size()) throw config_error("speedup: sweep grids differ in length");
    std::vector<SpeedupRow> out;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].n != b[i].n) throw config_error("speedup: sweep grids disagree at index " +
                                                 std::to_string(i));
        if (b[i].t_first_nanos == 0 || b[i].t_third_nanos == 0 ||
            b[i].interaction_units_miss == 0)
            throw config_error("speedup: denominator row at N=" + std::to_string(b[i].n) +
                               " holds a zero");
        SpeedupRow r;
        r.n = a[i].n;
        r.prefill_speedup =
            static_cast<double>(a[i].t_first_nanos) / static_cast<double>(b[i].t_first_nanos);
        r.hit_speedup =
            static_cast<double>(a[i].t_third_nanos) / static_cast<double>(b[i].t_third_nanos);
        r.unit_speedup = static_cast<double>(a[i].interaction_units_miss) /
                         static_cast<double>(b[i].interaction_units_miss);
        out.push_back(r);
    }
    return out;
}

std::string speedup_csv(const std::vector<SpeedupRow>& rows) {
    std::ostringstream os;
    os << "N,prefill_speedup,hit_speedup,unit_speedup\n";
    for (const SpeedupRow& r : rows)
        os << r.n << ',' << r.prefill_speedup << ',' << r.hit_speedup << ',' << r.unit_speedup
           << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

namespace {

constexpr int kW = 760, kH = 480;
constexpr int kMarginL = 80, kMarginR = 160, kMarginT = 46, kMarginB = 56;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

std::string fmt_tick(double v) {
    std::ostringstream os;
    if (v != 0.0 && (std::fabs(v) >= 1e6 || std::fabs(v) < 1e-3)) {
        os << std::scientific;
        os.precision(0);
    } else {
        os.precision(6);
    }
    os << v;
    return os.str();
}

} // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series,
                           bool log_x, bool log_y) {
    if (series.empty()) throw config_error("chart: no series");
    double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
    bool first = true;
    for (const ChartSeries& s : series) {
        if (s.xs.empty() || s.xs.size() != s.ys.size())
            throw config_error("chart: series " + s.name + " is empty or ragged");
        for (size_t i = 0; i < s.xs.size(); ++i) {
            if ((log_x && s.xs[i] <= 0) || (log_y && s.ys[i] <= 0))
                throw config_error("chart: log axis needs positive values");
            if (first) {
                xmin = xmax = s.xs[i];
                ymin = ymax = s.ys[i];
                first = false;
            }
            xmin = std::min(xmin, s.xs[i]);
            xmax = std::max(xmax, s.xs[i]);
            ymin = std::min(ymin, s.ys[i]);
            ymax = std::max(ymax, s.ys[i]);
        }
    }
    auto fx = [&](double v) { return log_x ? std::log10(v) : v; };
    auto fy = [&](double v) { return log_y ? std::log10(v) : v; };
    double x0 = fx(xmin), x1 = fx(xmax), y0 = fy(ymin), y1 = fy(ymax);
    if (x1 - x0 < 1e-12) { x0 -= 0.5; x1 += 0.5; }
    if (y1 - y0 < 1e-12) { y0 -= 0.5; y1 += 0.5; }
    const double pw = kW - kMarginL - kMarginR;
    const double ph = kH - kMarginT - kMarginB;
    auto px = [&](double v) { return kMarginL + (fx(v) - x0) / (x1 - x0) * pw; };
    auto py = [&](double v) { return kH - kMarginB - (fy(v) - y0) / (y1 - y0) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" viewBox=\"0 0 " << kW << ' ' << kH << "\">\n";
    os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
       << " font-size=\"16\">" << esc(title) << "</text>\n";

    // ticks: decades on log axes, five even splits otherwise
    auto emit_ticks = [&](bool is_x) {
        const double lo = is_x ? x0 : y0;
        const double hi = is_x ? x1 : y1;
        const bool lg = is_x ? log_x : log_y;
        std::vector<double> tick_vals;
        if (lg) {
            for (int e = static_cast<int>(std::floor(lo)); e <= static_cast<int>(std::ceil(hi));
                 ++e)
                if (e >= lo - 1e-9 && e <= hi + 1e-9) tick_vals.push_back(std::pow(10.0, e));
        } else {
            for (int i = 0; i <= 5; ++i) tick_vals.push_back(lo + (hi - lo) * i / 5.0);
        }
        for (double v : tick_vals) {
            if (is_x) {
                const double x = px(lg ? v : v);
                os << "<line x1=\"" << x << "\" y1=\"" << kMarginT << "\" x2=\"" << x << "\" y2=\""
                   << kH - kMarginB << "\" stroke=\"#dddddd\"/>\n";
                os << "<text x=\"" << x << "\" y=\"" << kH - kMarginB + 18
                   << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
                   << fmt_tick(v) << "</text>\n";
            } else {
                const double y = py(lg ? v : v);
                os << "<line x1=\"" << kMarginL << "\" y1=\"" << y << "\" x2=\"" << kW - kMarginR
                   << "\" y2=\"" << y << "\" stroke=\"#dddddd\"/>\n";
                os << "<text x=\"" << kMarginL - 8 << "\" y=\"" << y + 4
                   << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
                   << fmt_tick(v) << "</text>\n";
            }
        }
    };
    emit_ticks(true);
    emit_ticks(false);

    os << "<rect x=\"" << kMarginL << "\" y=\"" << kMarginT << "\" width=\"" << pw
       << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#333333\"/>\n";
    os << "<text x=\"" << kMarginL + pw / 2 << "\" y=\"" << kH - 14
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << esc(x_label)
       << "</text>\n";
    os << "<text x=\"18\" y=\"" << kMarginT + ph / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\""
       << "rotate(-90 18 " << kMarginT + ph / 2 << ")\">" << esc(y_label) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const ChartSeries& s = series[si];
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < s.xs.size(); ++i)
            os << px(s.xs[i]) << ',' << py(s.ys[i]) << ' ';
        os << "\"/>\n";
        for (size_t i = 0; i < s.xs.size(); ++i)
            os << "<circle cx=\"" << px(s.xs[i]) << "\" cy=\"" << py(s.ys[i])
               << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        const double ly = kMarginT + 16 + 18 * static_cast<double>(si);
        os << "<line x1=\"" << kW - kMarginR + 12 << "\" y1=\"" << ly << "\" x2=\""
           << kW - kMarginR + 34 << "\" y2=\"" << ly << "\" stroke=\"" << color
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << kW - kMarginR + 40 << "\" y=\"" << ly + 4
           << "\" font-family=\"sans-serif\" font-size=\"12\">" << esc(s.name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

void emit_outputs(const std::string& dir, const std::vector<SweepRow>& rows) {
    if (rows.empty()) throw config_error("emit_outputs: no sweep rows");
    atomic_write_file(dir + "/bench.csv", sweep_csv(rows));

    const auto tl = rows_for_model(rows, "tlinformer");
    const auto bl = rows_for_model(rows, "baseline");

    auto series_of = [](const std::vector<SweepRow>& rs, const std::string& name,
                        auto&& pick) {
        ChartSeries s;
        s.name = name;
        for (const SweepRow& r : rs) {
            s.xs.push_back(static_cast<double>(r.n));
            s.ys.push_back(static_cast<double>(pick(r)));
        }
        return s;
    };

    std::vector<ChartSeries> lat;
    std::vector<ChartSeries> mem;
    for (const auto* rs : {&tl, &bl}) {
        if (rs->empty()) continue;
        const std::string& name = rs->front().model;
        lat.push_back(series_of(*rs, name + " prefill",
                                [](const SweepRow& r) { return r.t_first_nanos; }));
        lat.push_back(series_of(*rs, name + " hit",
                                [](const SweepRow& r) { return r.t_third_nanos; }));
        mem.push_back(
            series_of(*rs, name, [](const SweepRow& r) { return r.bytes_cached; }));
    }
    atomic_write_file(dir + "/latency.svg",
                      svg_line_chart("Decode latency", "sequence length N", "nanoseconds", lat,
                                     true, true));
    atomic_write_file(dir + "/memory.svg",
                      svg_line_chart("Cache footprint", "sequence length N", "bytes", mem, true,
                                     true));

    if (!tl.empty() && !bl.empty()) {
        // grids can diverge when one model ran out of memory first
        std::vector<SweepRow> a, b;
        for (const SweepRow& rb : bl)
            for (const SweepRow& rt : tl)
                if (rb.n == rt.n) {
                    a.push_back(rb);
                    b.push_back(rt);
                }
        if (!a.empty()) {
            const auto sp = speedup_table(a, b);
            atomic_write_file(dir + "/speedup.csv", speedup_csv(sp));
            std::vector<ChartSeries> sps;
            ChartSeries s1{"prefill", {}, {}}, s2{"window hit", {}, {}};
            for (const SpeedupRow& r : sp) {
                s1.xs.push_back(static_cast<double>(r.n));
                s1.ys.push_back(r.prefill_speedup);
                s2.xs.push_back(static_cast<double>(r.n));
                s2.ys.push_back(r.hit_speedup);
            }
            sps.push_back(s1);
            sps.push_back(s2);
            atomic_write_file(dir + "/speedup.svg",
                              svg_line_chart("Baseline time over window-model time",
                                             "sequence length N", "speedup", sps, true, false));
        }
    }
}

} // namespace tlin
