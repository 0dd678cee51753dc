#include "tlin/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "tlin/errors.hpp"

namespace tlin {

void atomic_write_file(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path dir = target.parent_path();
    if (dir.empty()) dir = ".";
    std::error_code ec;
    fs::create_directories(dir, ec);

    static std::mt19937_64 rng{std::random_device{}()};
    fs::path tmp = dir / (target.filename().string() + ".tmp" + std::to_string(rng()));
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw io_error("cannot open temp file for " + path);
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) throw io_error("short write to temp file for " + path);
    }
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw io_error("rename failed for " + path + ": " + ec.message());
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

uint64_t median_u64(std::vector<uint64_t> xs) {
    if (xs.empty()) throw dim_error("median of empty sample");
    std::sort(xs.begin(), xs.end());
    return xs[xs.size() / 2];
}

double log_log_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw dim_error("log_log_slope needs >= 2 paired points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        if (xs[i] <= 0 || ys[i] <= 0) throw dim_error("log_log_slope needs positive values");
        const double lx = std::log(xs[i]);
        const double ly = std::log(ys[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0) throw dim_error("log_log_slope: degenerate x values");
    return (n * sxy - sx * sy) / denom;
}

} // namespace tlin
