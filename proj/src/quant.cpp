#include "actquant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace actquant {

bool bit_width_allowed(int b) {
    return b == 2 || b == 3 || b == 4 || b == 5 || b == 6 || b == 8;
}

void validate(const quant_type& t) {
    if (!bit_width_allowed(t.bit_width)) {
        fail(errc::config, "bit_width " + std::to_string(t.bit_width) + " not in {2,3,4,5,6,8}");
    }
    if (t.block_size < 2) fail(errc::config, "block_size must be >= 2");
    if (t.superblock_size < 0) fail(errc::config, "superblock_size must be >= 0");
}

double error_factor(const quant_type& t) { return std::ldexp(1.0, -2 * t.bit_width); }

int code_min(const quant_type& t) {
    return t.codebook == codebook_kind::uniform_symmetric ? -(1 << (t.bit_width - 1)) : 0;
}

int code_max(const quant_type& t) {
    return t.codebook == codebook_kind::uniform_symmetric ? (1 << (t.bit_width - 1)) - 1
                                                          : (1 << t.bit_width) - 1;
}

double storage_bpw(const quant_type& t) {
    const double B = t.block_size;
    const bool asym = t.codebook == codebook_kind::uniform_asymmetric;
    if (t.superblock_size == 0) {
        // f32 scale per block, plus f32 zero for asymmetric types
        return t.bit_width + (asym ? 64.0 : 32.0) / B;
    }
    // u8 code per block per parameter, plus one f32 (step, min) pair per
    // super-block per parameter
    const double S = t.superblock_size;
    return t.bit_width + (asym ? 16.0 : 8.0) / B + (asym ? 128.0 : 64.0) / (B * S);
}

int64_t quantized_tensor::superblock_count() const {
    if (qtype.superblock_size == 0) return 0;
    return (block_count() + qtype.superblock_size - 1) / qtype.superblock_size;
}

int32_t nearest_code(double x, const quant_type& t) {
    const double r = std::round(x);  // std::round is half away from zero
    const double lo = code_min(t), hi = code_max(t);
    return static_cast<int32_t>(std::min(hi, std::max(lo, r)));
}

namespace {

// Largest |z| stored exactly as an f32 integer with headroom; beyond this the
// block is effectively constant and the degenerate path applies anyway.
constexpr double kMaxZero = 1048576.0;  // 2^20

void assign_block_codes(qblock& blk, const double* w, int64_t n, const quant_type& t) {
    if (blk.scale == 0.0) {
        std::fill(blk.codes.begin(), blk.codes.end(), 0);
        return;
    }
    for (int64_t i = 0; i < n; ++i) {
        blk.codes[static_cast<size_t>(i)] = nearest_code(w[i] / blk.scale + blk.zero, t);
    }
    // padding elements keep the zero-ish code nearest to 0 + z
    for (int64_t i = n; i < t.block_size; ++i) {
        blk.codes[static_cast<size_t>(i)] = nearest_code(blk.zero, t);
    }
}

void rtn_block(qblock& blk, const double* w, int64_t n, const quant_type& t) {
    blk.codes.assign(static_cast<size_t>(t.block_size), 0);
    blk.zero = 0.0;

    if (t.codebook == codebook_kind::uniform_symmetric) {
        // scale carries the sign of the abs-max element so that element (and
        // any constant block) lands exactly on code -2^(b-1)
        double amax = 0.0, signed_amax = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double a = std::fabs(w[i]);
            if (a > amax) {
                amax = a;
                signed_amax = w[i];
            }
        }
        if (amax == 0.0) {
            blk.scale = 0.0;
            return;
        }
        blk.scale = static_cast<double>(static_cast<float>(signed_amax / -static_cast<double>(1 << (t.bit_width - 1))));
        assign_block_codes(blk, w, n, t);
        return;
    }

    double mn = w[0], mx = w[0];
    for (int64_t i = 1; i < n; ++i) {
        mn = std::min(mn, w[i]);
        mx = std::max(mx, w[i]);
    }
    if (mx == mn) {
        if (mn == 0.0) {
            blk.scale = 0.0;
            return;
        }
        // constant block: s*(1 - 0) reproduces the value exactly
        blk.scale = static_cast<double>(static_cast<float>(mn));
        blk.zero = 0.0;
        std::fill(blk.codes.begin(), blk.codes.begin() + n, 1);
        return;
    }
    blk.scale = static_cast<double>(static_cast<float>((mx - mn) / static_cast<double>(code_max(t))));
    blk.zero = std::min(kMaxZero, std::max(-kMaxZero, std::round(-mn / blk.scale)));
    assign_block_codes(blk, w, n, t);
}

}  // namespace

quantized_tensor quantize_rtn(const matrix& weights, const quant_type& t, std::string name) {
    validate(t);
    if (const int64_t bad = first_nonfinite(weights); bad >= 0) {
        fail(errc::data, "non-finite weight at flat index " + std::to_string(bad));
    }

    quantized_tensor qt;
    qt.name = std::move(name);
    qt.rows = weights.rows;
    qt.cols = weights.cols;
    qt.qtype = t;

    const int64_t n = weights.numel();
    const int64_t B = t.block_size;
    const int64_t nblocks = (n + B - 1) / B;
    qt.pad_count = nblocks * B - n;
    qt.blocks.resize(static_cast<size_t>(nblocks));

    for (int64_t b = 0; b < nblocks; ++b) {
        const int64_t lo = b * B;
        const int64_t cnt = std::min(B, n - lo);
        rtn_block(qt.blocks[static_cast<size_t>(b)], weights.data.data() + lo, cnt, t);
    }

    if (t.superblock_size > 0) snap_superblock_scales(qt, weights);
    return qt;
}

void snap_superblock_scales(quantized_tensor& qt, const matrix& original) {
    const quant_type& t = qt.qtype;
    if (t.superblock_size == 0) return;

    const int64_t S = t.superblock_size;
    const int64_t nblocks = qt.block_count();
    const bool asym = t.codebook == codebook_kind::uniform_asymmetric;

    qt.sblocks.assign(static_cast<size_t>(qt.superblock_count()), superblock_params{});
    qt.scale_codes.assign(static_cast<size_t>(nblocks), 0);
    qt.zero_codes.assign(asym ? static_cast<size_t>(nblocks) : 0, 0);

    auto snap_field = [&](auto get, auto set, auto set_params, std::vector<uint8_t>& codes) {
        for (int64_t g = 0; g * S < nblocks; ++g) {
            const int64_t lo = g * S;
            const int64_t hi = std::min(lo + S, nblocks);
            float mn = static_cast<float>(get(qt.blocks[static_cast<size_t>(lo)]));
            float mx = mn;
            for (int64_t b = lo + 1; b < hi; ++b) {
                const float v = static_cast<float>(get(qt.blocks[static_cast<size_t>(b)]));
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
            const float d = (mx - mn) / 255.0f;
            set_params(qt.sblocks[static_cast<size_t>(g)], d, mn);
            for (int64_t b = lo; b < hi; ++b) {
                const float v = static_cast<float>(get(qt.blocks[static_cast<size_t>(b)]));
                uint8_t u = 0;
                if (d > 0.0f) {
                    const double q = std::round((static_cast<double>(v) - mn) / d);
                    u = static_cast<uint8_t>(std::min(255.0, std::max(0.0, q)));
                }
                codes[static_cast<size_t>(b)] = u;
                set(qt.blocks[static_cast<size_t>(b)], superblock_decode(d, mn, u));
            }
        }
    };

    snap_field([](const qblock& b) { return b.scale; }, [](qblock& b, double v) { b.scale = v; },
               [](superblock_params& p, float d, float m) { p.d_scale = d; p.m_scale = m; },
               qt.scale_codes);
    if (asym) {
        snap_field([](const qblock& b) { return b.zero; }, [](qblock& b, double v) { b.zero = v; },
                   [](superblock_params& p, float d, float m) { p.d_zero = d; p.m_zero = m; },
                   qt.zero_codes);
    }

    // scales moved, so codes must be re-assigned against the snapped values
    const int64_t B = t.block_size;
    const int64_t n = original.numel();
    for (int64_t b = 0; b < nblocks; ++b) {
        const int64_t lo = b * B;
        const int64_t cnt = std::min(B, n - lo);
        assign_block_codes(qt.blocks[static_cast<size_t>(b)], original.data.data() + lo, cnt, t);
    }
}

matrix dequantize(const quantized_tensor& qt) {
    const quant_type& t = qt.qtype;
    const int64_t B = t.block_size;
    const int64_t n = qt.numel();
    if (qt.block_count() * B != n + qt.pad_count) {
        fail(errc::data, "tensor '" + qt.name + "': block count inconsistent with shape");
    }

    matrix out(qt.rows, qt.cols);
    for (int64_t i = 0; i < n; ++i) {
        const qblock& blk = qt.blocks[static_cast<size_t>(i / B)];
        const int32_t q = blk.codes[static_cast<size_t>(i % B)];
        if (q < code_min(t) || q > code_max(t)) {
            fail(errc::data, "tensor '" + qt.name + "': code " + std::to_string(q) +
                                 " outside the " + std::to_string(t.bit_width) + "-bit codebook");
        }
        out.data[static_cast<size_t>(i)] = blk.scale * (static_cast<double>(q) - blk.zero);
    }
    return out;
}

double quant_mse(const matrix& original, const quantized_tensor& qt,
                 const std::vector<double>* importance) {
    if (original.rows != qt.rows || original.cols != qt.cols) {
        fail(errc::data, "quant_mse: shape mismatch");
    }
    if (importance && static_cast<int64_t>(importance->size()) != original.numel()) {
        fail(errc::data, "quant_mse: importance length mismatch");
    }
    const matrix deq = dequantize(qt);
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < original.numel(); ++i) {
        const double w = importance ? (*importance)[static_cast<size_t>(i)] : 1.0;
        const double e = original.data[static_cast<size_t>(i)] - deq.data[static_cast<size_t>(i)];
        num += w * e * e;
        den += w;
    }
    return den > 0.0 ? num / den : 0.0;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace actquant
