#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "actquant/quant.hpp"

namespace actquant {

// AQPK pack file. Byte-level layout is documented in docs/FORMATS.md; the
// writer is deterministic (directory sorted by name, fixed section order) so
// identical models produce identical bytes.
inline constexpr char kPackMagic[4] = {'A', 'Q', 'P', 'K'};
inline constexpr uint16_t kPackVersion = 1;

using pack_metadata = std::map<std::string, std::string>;

struct pack_tensor_info {
    std::string name;
    int64_t rows = 0;
    int64_t cols = 0;
    quant_type qtype;
    uint64_t offset = 0;  // absolute file offset of the payload
    uint64_t length = 0;  // payload bytes
};

// Payload byte count implied by shape and type; the reader rejects files whose
// directory disagrees.
uint64_t payload_length(int64_t rows, int64_t cols, const quant_type& t);

std::vector<uint8_t> write_pack(const std::vector<quantized_tensor>& tensors,
                                const pack_metadata& metadata);

struct pack_contents {
    std::vector<quantized_tensor> tensors;  // directory order (sorted by name)
    pack_metadata metadata;
    std::vector<pack_tensor_info> directory;
    uint64_t file_bytes = 0;
};

pack_contents read_pack(const std::vector<uint8_t>& bytes);

void write_pack_file(const std::string& path, const std::vector<quantized_tensor>& tensors,
                     const pack_metadata& metadata);
pack_contents read_pack_file(const std::string& path);

struct memory_report_entry {
    std::string name;
    int64_t numel = 0;
    uint64_t bytes = 0;
    double code_bpw = 0.0;
    double effective_bpw = 0.0;
};

struct memory_report {
    std::vector<memory_report_entry> tensors;
    uint64_t total_bytes = 0;      // payload bytes
    uint64_t file_bytes = 0;       // including header/directory/metadata
    double code_bpw = 0.0;         // size-weighted, code bits only
    double effective_bpw = 0.0;    // payload bits per element
    double compression_vs_f16 = 0.0;
};

memory_report model_memory_report(const pack_contents& pack);

// Ratio helper used for headline size claims: baseline bytes / quantized bytes.
inline double compression_ratio(double baseline_bytes, double quantized_bytes) {
    return baseline_bytes / quantized_bytes;
}

std::string format_directory_listing(const pack_contents& pack);

}  // namespace actquant
