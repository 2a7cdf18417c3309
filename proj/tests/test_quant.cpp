#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "actquant/quant.hpp"

using namespace actquant;

namespace {

matrix row(std::vector<double> v) {
    matrix m(1, static_cast<int64_t>(v.size()));
    m.data = std::move(v);
    return m;
}

matrix gaussian(int64_t rows, int64_t cols, uint64_t seed, double scale = 1.0) {
    matrix m(rows, cols);
    rng r(seed);
    for (double& v : m.data) v = scale * r.normal();
    return m;
}

quant_type sym(int bits, int B = 32, int S = 0) {
    return {bits, codebook_kind::uniform_symmetric, B, S};
}

quant_type asym(int bits, int B = 32, int S = 0) {
    return {bits, codebook_kind::uniform_asymmetric, B, S};
}

// Exhaustive scale scan at fixed codebook: 10001 candidates on [0, 2*absmax],
// nearest-code assignment, returns the minimum mean squared error. Slow and
// independent of the implementation path.
double scan_oracle_mse(const std::vector<double>& w, const quant_type& t) {
    double amax = 0.0;
    for (double v : w) amax = std::max(amax, std::fabs(v));
    double best = 1e300;
    for (int k = 0; k <= 10000; ++k) {
        const double s = 2.0 * amax * static_cast<double>(k) / 10000.0;
        double mse = 0.0;
        for (double v : w) {
            double deq = 0.0;
            if (s > 0.0) {
                deq = s * static_cast<double>(nearest_code(v / s, t));
            }
            mse += (v - deq) * (v - deq);
        }
        best = std::min(best, mse / static_cast<double>(w.size()));
    }
    return best;
}

double plain_mse(const matrix& a, const matrix& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a.data[size_t(i)] - b.data[size_t(i)];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

}  // namespace

TEST_CASE("quant_type validation and constants") {
    CHECK(error_factor(sym(4)) == 1.0 / 256.0);
    CHECK(error_factor(sym(2)) == 1.0 / 16.0);
    CHECK(error_factor(sym(8)) == std::ldexp(1.0, -16));

    // symmetric grid is asymmetric around zero: 2^b entries, min = -2^(b-1)
    for (int b : {2, 3, 4, 5, 6, 8}) {
        CHECK(code_min(sym(b)) == -(1 << (b - 1)));
        CHECK(code_max(sym(b)) == (1 << (b - 1)) - 1);
        CHECK(code_min(asym(b)) == 0);
        CHECK(code_max(asym(b)) == (1 << b) - 1);
    }

    CHECK_THROWS_AS(validate(quant_type{7, codebook_kind::uniform_symmetric, 32, 0}), error);
    CHECK_THROWS_AS(validate(quant_type{4, codebook_kind::uniform_symmetric, 1, 0}), error);
    CHECK_THROWS_AS(validate(quant_type{4, codebook_kind::uniform_symmetric, 32, -1}), error);

    CHECK(storage_bpw(sym(4, 32, 0)) == doctest::Approx(5.0));  // f32 scale per 32 elements
    CHECK(storage_bpw(sym(3, 32, 0)) == doctest::Approx(4.0));
}

TEST_CASE("quantize_rtn: all-zero block") {
    const matrix w = row({0, 0, 0, 0});
    for (const quant_type& t : {sym(2, 4), sym(8, 4), asym(3, 4)}) {
        const quantized_tensor qt = quantize_rtn(w, t);
        CHECK(qt.blocks.size() == 1);
        CHECK(qt.blocks[0].scale == 0.0);
        for (int32_t q : qt.blocks[0].codes) CHECK(q == 0);
        const matrix deq = dequantize(qt);
        for (double v : deq.data) CHECK(v == 0.0);
    }
}

TEST_CASE("quantize_rtn: block on the scaled codebook round-trips exactly") {
    const matrix w = row({-1.0, -0.5, 0.0, 0.5});  // 0.5 * {-2,-1,0,1}
    const quantized_tensor qt = quantize_rtn(w, sym(2, 4));
    CHECK(qt.blocks[0].scale == 0.5);
    CHECK(plain_mse(w, dequantize(qt)) == 0.0);
}

TEST_CASE("quantize_rtn within 25% of the exhaustive scale-scan oracle") {
    const std::vector<double> w = {0.1, -0.3, 0.25, 0.4};
    const quant_type t = sym(2, 4);
    const quantized_tensor qt = quantize_rtn(row(w), t);
    const double rtn = plain_mse(row(w), dequantize(qt));
    const double oracle = scan_oracle_mse(w, t);
    CHECK(rtn <= 1.25 * oracle);
    CHECK(oracle <= rtn + 1e-15);  // the scan includes every RTN-reachable error
}

TEST_CASE("dequantize identity-scale block") {
    quantized_tensor qt;
    qt.rows = 1;
    qt.cols = 4;
    qt.qtype = sym(2, 4);
    qt.pad_count = 0;
    qblock b;
    b.scale = 1.0;
    b.zero = 0.0;
    b.codes = {-2, -1, 0, 1};
    qt.blocks.push_back(b);
    const matrix deq = dequantize(qt);
    CHECK(deq.data == std::vector<double>{-2, -1, 0, 1});
}

TEST_CASE("dequantize rejects out-of-codebook codes") {
    quantized_tensor qt;
    qt.rows = 1;
    qt.cols = 4;
    qt.qtype = sym(2, 4);
    qblock b;
    b.scale = 1.0;
    b.codes = {-2, -1, 0, 2};  // 2 is outside the b=2 symmetric grid
    qt.blocks.push_back(b);
    CHECK_THROWS_WITH_AS(static_cast<void>(dequantize(qt)), doctest::Contains("outside"), error);
}

TEST_CASE("gaussian round trip at b=8: per-element MSE within the half-step bound") {
    const matrix w = gaussian(64, 64, 101);
    const quantized_tensor qt = quantize_rtn(w, sym(8, 32));
    double smax = 0.0;
    for (const qblock& b : qt.blocks) smax = std::max(smax, std::fabs(b.scale));
    CHECK(plain_mse(w, dequantize(qt)) <= smax * smax / 4.0);
}

TEST_CASE("quant_mse") {
    const matrix w = row({-1.0, -0.5, 0.0, 0.5});
    const quantized_tensor qt = quantize_rtn(w, sym(2, 4));
    CHECK(quant_mse(w, qt) == 0.0);  // exact round trip

    const matrix w2 = row({0.11, -0.37, 0.21, 0.44});
    const quantized_tensor qt2 = quantize_rtn(w2, sym(2, 4));
    const std::vector<double> uniform(4, 3.0);
    CHECK(quant_mse(w2, qt2, &uniform) == doctest::Approx(quant_mse(w2, qt2)).epsilon(1e-14));

    // hand-expanded weighted sum
    const std::vector<double> omega = {1, 2, 3, 4};
    const matrix deq = dequantize(qt2);
    double num = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double e = w2.data[size_t(i)] - deq.data[size_t(i)];
        num += omega[size_t(i)] * e * e;
    }
    CHECK(quant_mse(w2, qt2, &omega) == doctest::Approx(num / 10.0).epsilon(1e-14));

    matrix wrong(2, 4);
    CHECK_THROWS_AS(static_cast<void>(quant_mse(wrong, qt2)), error);
}

TEST_CASE("error rejection: non-finite weights and bad bit width") {
    matrix w = row({0.1, std::nan(""), 0.3, 0.4});
    CHECK_THROWS_WITH_AS(static_cast<void>(quantize_rtn(w, sym(4, 4))), doctest::Contains("index 1"),
                         error);
    CHECK_THROWS_AS(static_cast<void>(quantize_rtn(row({1, 2, 3, 4}),
                                                   quant_type{9, codebook_kind::uniform_symmetric, 4, 0})),
                    error);
}

TEST_CASE("round-trip idempotence: requantizing a dequantized tensor is bit-identical") {
    for (const quant_type& t : {sym(2, 8), sym(3, 8), sym(4, 16), sym(8, 16), asym(2, 8),
                                asym(4, 16), asym(8, 16)}) {
        for (uint64_t seed : {7u, 8u, 9u}) {
            const matrix w = gaussian(6, 16, seed);
            const quantized_tensor q1 = quantize_rtn(w, t);
            const quantized_tensor q2 = quantize_rtn(dequantize(q1), t);
            REQUIRE(q1.blocks.size() == q2.blocks.size());
            for (size_t b = 0; b < q1.blocks.size(); ++b) {
                CHECK(q1.blocks[b].scale == q2.blocks[b].scale);
                CHECK(q1.blocks[b].zero == q2.blocks[b].zero);
                CHECK(q1.blocks[b].codes == q2.blocks[b].codes);
            }
        }
    }
}

TEST_CASE("constant blocks round-trip with zero error") {
    rng r(55);
    for (int i = 0; i < 50; ++i) {
        // f32-graded constants, the native grid of checkpointed weights
        const double c = static_cast<double>(static_cast<float>(r.uniform(-3.0, 3.0)));
        matrix w(1, 8, c);
        for (const quant_type& t : {sym(2, 8), sym(5, 8), asym(2, 8), asym(6, 8)}) {
            const quantized_tensor qt = quantize_rtn(w, t);
            const matrix deq = dequantize(qt);
            for (double v : deq.data) CHECK(v == c);
        }
    }
}

TEST_CASE("per-bit error scaling on gaussian matrices stays in [2, 8]") {
    const matrix w = gaussian(64, 64, 202);
    double prev = plain_mse(w, dequantize(quantize_rtn(w, sym(2, 32))));
    for (int b : {3, 4, 5, 6}) {
        const double cur = plain_mse(w, dequantize(quantize_rtn(w, sym(b, 32))));
        const double ratio = prev / cur;
        CHECK(ratio >= 2.0);
        CHECK(ratio <= 8.0);
        prev = cur;
    }
}

TEST_CASE("super-block scale compression stays decode-consistent") {
    for (const quant_type& t : {sym(4, 8, 4), asym(3, 8, 2)}) {
        const matrix w = gaussian(8, 16, 303);
        const quantized_tensor qt = quantize_rtn(w, t);
        REQUIRE(qt.sblocks.size() == static_cast<size_t>(qt.superblock_count()));
        REQUIRE(qt.scale_codes.size() == qt.blocks.size());
        for (size_t b = 0; b < qt.blocks.size(); ++b) {
            const superblock_params& p = qt.sblocks[b / static_cast<size_t>(t.superblock_size)];
            CHECK(qt.blocks[b].scale == superblock_decode(p.d_scale, p.m_scale, qt.scale_codes[b]));
            if (t.codebook == codebook_kind::uniform_asymmetric) {
                CHECK(qt.blocks[b].zero == superblock_decode(p.d_zero, p.m_zero, qt.zero_codes[b]));
            }
        }
        // snapping costs at most one 8-bit step of scale precision per block
        const matrix deq = dequantize(qt);
        const quantized_tensor flat = quantize_rtn(w, {t.bit_width, t.codebook, t.block_size, 0});
        const double mse_super = plain_mse(w, deq);
        const double mse_flat = plain_mse(w, dequantize(flat));
        CHECK(mse_super <= 1.2 * mse_flat + 1e-12);
    }
}

TEST_CASE("padding: non-multiple tensor sizes round-trip shape and zero out padding") {
    const matrix w = gaussian(3, 7, 404);  // 21 elements, B=8 -> pad 3
    const quantized_tensor qt = quantize_rtn(w, sym(4, 8));
    CHECK(qt.pad_count == 3);
    const matrix deq = dequantize(qt);
    CHECK(deq.rows == 3);
    CHECK(deq.cols == 7);
    CHECK(plain_mse(w, deq) < 0.01);
}
