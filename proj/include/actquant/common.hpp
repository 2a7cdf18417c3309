#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace actquant {

// Error classes map 1:1 onto CLI exit codes.
enum class errc : int { config = 2, data = 3, numeric = 4, io = 5 };

class error : public std::runtime_error {
public:
    error(errc c, const std::string& msg) : std::runtime_error(msg), code_(c) {}
    errc code() const noexcept { return code_; }

private:
    errc code_;
};

[[noreturn]] inline void fail(errc c, const std::string& msg) { throw error(c, msg); }

// Dense row-major matrix of doubles. Doubles throughout; file formats narrow
// to f32 where the on-disk layout says so.
struct matrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> data;

    matrix() = default;
    matrix(int64_t r, int64_t c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<size_t>(r * c), fill) {}

    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }

    int64_t numel() const { return rows * cols; }
    bool same_shape(const matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Index of the first non-finite entry, or -1.
inline int64_t first_nonfinite(const matrix& m) {
    for (int64_t i = 0; i < m.numel(); ++i) {
        if (!std::isfinite(m.data[static_cast<size_t>(i)])) return i;
    }
    return -1;
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(uint64_t v);

// Named substream so one config seed can drive independent RNG streams.
inline uint64_t substream(uint64_t seed, std::string_view tag) {
    uint64_t h = fnv1a64(tag.data(), tag.size());
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

// mt19937_64 with hand-rolled transforms: std:: distributions are not
// bit-portable across standard libraries, these are.
struct rng {
    std::mt19937_64 eng;

    explicit rng(uint64_t seed) : eng(seed) {}

    double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without the cached second value, so draw order is obvious.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        const uint64_t span = static_cast<uint64_t>(hi - lo + 1);
        return lo + static_cast<int64_t>(eng() % span);
    }
};

}  // namespace actquant
