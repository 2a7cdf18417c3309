#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "actquant/common.hpp"

namespace actquant {

enum class codebook_kind : uint8_t {
    uniform_symmetric = 0,   // codes {-2^(b-1), ..., 2^(b-1)-1}, zero fixed at 0
    uniform_asymmetric = 1,  // codes {0, ..., 2^b-1}, free per-block zero
};

struct quant_type {
    int bit_width = 4;  // one of {2,3,4,5,6,8}
    codebook_kind codebook = codebook_kind::uniform_symmetric;
    int block_size = 32;      // B, elements per block
    int superblock_size = 8;  // S, blocks per super-block; 0 disables super-blocks

    bool operator==(const quant_type&) const = default;
};

bool bit_width_allowed(int b);
void validate(const quant_type& t);  // throws errc::config

// Predicted per-element squared error factor, 2^(-2b) exactly.
double error_factor(const quant_type& t);

int code_min(const quant_type& t);
int code_max(const quant_type& t);

// Effective bits per weight including scale/zero storage for this layout.
double storage_bpw(const quant_type& t);

// One block: scale/zero are f32-representable values held in doubles so that
// serialization is lossless.
struct qblock {
    double scale = 0.0;
    double zero = 0.0;  // always 0 for symmetric codebooks
    std::vector<int32_t> codes;
};

// Per-super-block f32 parameters the 8-bit scale/zero codes decode against.
struct superblock_params {
    float d_scale = 0.0f;
    float m_scale = 0.0f;
    float d_zero = 0.0f;  // asymmetric types only
    float m_zero = 0.0f;
};

struct quantized_tensor {
    std::string name;
    int64_t rows = 0;
    int64_t cols = 0;
    quant_type qtype;
    std::vector<qblock> blocks;  // row-major element order
    int64_t pad_count = 0;       // trailing zero-padding elements in the last block

    // Populated when S > 0: the encoded form every block scale/zero decodes
    // from. block.scale == superblock_decode(d, m, code) always holds.
    std::vector<superblock_params> sblocks;
    std::vector<uint8_t> scale_codes;  // one per block
    std::vector<uint8_t> zero_codes;   // one per block, asymmetric only

    int64_t numel() const { return rows * cols; }
    int64_t block_count() const { return static_cast<int64_t>(blocks.size()); }
    int64_t superblock_count() const;
};

// Nearest codebook entry to x, ties rounded half away from zero, clamped.
int32_t nearest_code(double x, const quant_type& t);

// Decode one super-block scale code. Shared by the snapper and the pack
// reader; both sides must run the identical f32 expression for bit-exact
// round trips.
inline double superblock_decode(float d, float m, uint8_t u) {
    return static_cast<double>(d * static_cast<float>(u) + m);
}

// Re-encode per-block scales (and zeros, for asymmetric types) as 8-bit codes
// against per-super-block f32 (step, min) pairs, then re-assign codes against
// the snapped parameters. No-op when S == 0.
void snap_superblock_scales(quantized_tensor& qt, const matrix& original);

// Baseline round-to-nearest block quantization with absmax scales.
quantized_tensor quantize_rtn(const matrix& weights, const quant_type& t, std::string name = "");

matrix dequantize(const quantized_tensor& qt);

// Importance-weighted mean squared reconstruction error; padding excluded.
// With no importance vector all weights are 1.
double quant_mse(const matrix& original, const quantized_tensor& qt,
                 const std::vector<double>* importance = nullptr);

}  // namespace actquant
