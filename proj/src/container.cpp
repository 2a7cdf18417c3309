#include "actquant/container.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace actquant {

namespace {

constexpr uint64_t kMaxNameLen = 4096;
constexpr uint64_t kMaxCount = 1u << 20;
constexpr int64_t kMaxSide = 1ll << 31;

// --- little-endian emit/parse helpers -------------------------------------

void put_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    out.insert(out.end(), b, b + n);
}

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
    uint8_t buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<uint8_t>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
    }
    put_bytes(out, buf, sizeof(T));
}

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put<uint32_t>(out, bits);
}

void put_str(std::vector<uint8_t>& out, const std::string& s) {
    put<uint32_t>(out, static_cast<uint32_t>(s.size()));
    put_bytes(out, s.data(), s.size());
}

struct cursor {
    const uint8_t* p = nullptr;
    size_t size = 0;
    size_t pos = 0;
    std::string context;

    void need(size_t n, const char* what) const {
        if (pos + n > size) {
            fail(errc::data, "truncated pack: " + std::string(what) +
                                 (context.empty() ? "" : " in " + context));
        }
    }

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        uint64_t v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
        }
        pos += sizeof(T);
        return static_cast<T>(v);
    }

    float get_f32(const char* what) {
        const uint32_t bits = get<uint32_t>(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string get_str(const char* what, uint64_t max_len = kMaxNameLen) {
        const uint32_t n = get<uint32_t>(what);
        if (n > max_len) fail(errc::data, "pack string too long for " + std::string(what));
        need(n, what);
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
};

// --- code bit packing -------------------------------------------------------

int64_t words_per_block(const quant_type& t) {
    return (static_cast<int64_t>(t.block_size) * t.bit_width + 31) / 32;
}

void pack_codes(std::vector<uint8_t>& out, const quantized_tensor& qt) {
    const quant_type& t = qt.qtype;
    const uint32_t mask = (1u << t.bit_width) - 1u;
    const int32_t off = -code_min(t);  // shift into the unsigned field
    for (const qblock& blk : qt.blocks) {
        std::vector<uint32_t> words(static_cast<size_t>(words_per_block(t)), 0);
        int64_t bit = 0;
        for (int i = 0; i < t.block_size; ++i) {
            const uint32_t u = static_cast<uint32_t>(blk.codes[static_cast<size_t>(i)] + off) & mask;
            const int64_t word = bit / 32;
            const int64_t sh = bit % 32;
            words[static_cast<size_t>(word)] |= u << sh;
            if (sh + t.bit_width > 32) {
                words[static_cast<size_t>(word + 1)] |= u >> (32 - sh);
            }
            bit += t.bit_width;
        }
        for (uint32_t w : words) put<uint32_t>(out, w);
    }
}

void unpack_codes(cursor& c, quantized_tensor& qt) {
    const quant_type& t = qt.qtype;
    const uint32_t mask = (1u << t.bit_width) - 1u;
    const int32_t off = -code_min(t);
    const int64_t wpb = words_per_block(t);
    for (qblock& blk : qt.blocks) {
        std::vector<uint32_t> words(static_cast<size_t>(wpb));
        for (auto& w : words) w = c.get<uint32_t>("code words");
        blk.codes.assign(static_cast<size_t>(t.block_size), 0);
        int64_t bit = 0;
        for (int i = 0; i < t.block_size; ++i) {
            const int64_t word = bit / 32;
            const int64_t sh = bit % 32;
            uint64_t u = words[static_cast<size_t>(word)] >> sh;
            if (sh + t.bit_width > 32) {
                u |= static_cast<uint64_t>(words[static_cast<size_t>(word + 1)]) << (32 - sh);
            }
            blk.codes[static_cast<size_t>(i)] = static_cast<int32_t>(u & mask) - off;
            bit += t.bit_width;
        }
    }
}

int64_t nblocks_of(int64_t rows, int64_t cols, const quant_type& t) {
    return (rows * cols + t.block_size - 1) / t.block_size;
}

void validate_shape(const std::string& name, int64_t rows, int64_t cols) {
    if (rows <= 0 || cols <= 0 || rows > kMaxSide || cols > kMaxSide) {
        fail(errc::data, "tensor '" + name + "' has invalid shape");
    }
}

}  // namespace

uint64_t payload_length(int64_t rows, int64_t cols, const quant_type& t) {
    const uint64_t nb = static_cast<uint64_t>(nblocks_of(rows, cols, t));
    const bool asym = t.codebook == codebook_kind::uniform_asymmetric;
    uint64_t len = nb * static_cast<uint64_t>(words_per_block(t)) * 4;
    if (t.superblock_size == 0) {
        len += nb * 4 * (asym ? 2 : 1);
    } else {
        const uint64_t ns = (nb + t.superblock_size - 1) / t.superblock_size;
        len += ns * 8 * (asym ? 2 : 1);  // (d, m) f32 pairs
        len += nb * (asym ? 2 : 1);      // u8 codes
    }
    return len;
}

std::vector<uint8_t> write_pack(const std::vector<quantized_tensor>& tensors,
                                const pack_metadata& metadata) {
    std::vector<const quantized_tensor*> order;
    order.reserve(tensors.size());
    for (const auto& t : tensors) order.push_back(&t);
    std::sort(order.begin(), order.end(),
              [](const quantized_tensor* a, const quantized_tensor* b) { return a->name < b->name; });
    for (size_t i = 1; i < order.size(); ++i) {
        if (order[i]->name == order[i - 1]->name) {
            fail(errc::data, "duplicate tensor name '" + order[i]->name + "'");
        }
    }

    for (const auto* qt : order) {
        validate(qt->qtype);
        validate_shape(qt->name, qt->rows, qt->cols);
        if (qt->block_count() != nblocks_of(qt->rows, qt->cols, qt->qtype)) {
            fail(errc::data, "tensor '" + qt->name + "': block count inconsistent with shape");
        }
        if (qt->qtype.superblock_size > 0 &&
            (qt->sblocks.size() != static_cast<size_t>(qt->superblock_count()) ||
             qt->scale_codes.size() != static_cast<size_t>(qt->block_count()))) {
            fail(errc::data, "tensor '" + qt->name + "': super-block parameters missing (snap first)");
        }
        for (const qblock& blk : qt->blocks) {
            if (blk.codes.size() != static_cast<size_t>(qt->qtype.block_size)) {
                fail(errc::data, "tensor '" + qt->name + "': short code block");
            }
            for (int32_t q : blk.codes) {
                if (q < code_min(qt->qtype) || q > code_max(qt->qtype)) {
                    fail(errc::data, "tensor '" + qt->name + "': code outside the codebook");
                }
            }
        }
    }

    std::vector<uint8_t> out;
    put_bytes(out, kPackMagic, 4);
    put<uint16_t>(out, kPackVersion);
    put<uint16_t>(out, 0);
    put<uint32_t>(out, static_cast<uint32_t>(order.size()));
    put<uint32_t>(out, static_cast<uint32_t>(metadata.size()));
    for (const auto& [k, v] : metadata) {
        put_str(out, k);
        put<uint32_t>(out, static_cast<uint32_t>(v.size()));
        put_bytes(out, v.data(), v.size());
    }

    // directory with placeholder offsets, patched after payload layout
    std::vector<size_t> offset_slots;
    for (const auto* qt : order) {
        put_str(out, qt->name);
        put<uint32_t>(out, static_cast<uint32_t>(qt->rows));
        put<uint32_t>(out, static_cast<uint32_t>(qt->cols));
        put<uint8_t>(out, static_cast<uint8_t>(qt->qtype.bit_width));
        put<uint8_t>(out, static_cast<uint8_t>(qt->qtype.codebook));
        put<uint16_t>(out, 0);
        put<uint32_t>(out, static_cast<uint32_t>(qt->qtype.block_size));
        put<uint32_t>(out, static_cast<uint32_t>(qt->qtype.superblock_size));
        offset_slots.push_back(out.size());
        put<uint64_t>(out, 0);  // offset
        put<uint64_t>(out, payload_length(qt->rows, qt->cols, qt->qtype));
    }

    for (size_t i = 0; i < order.size(); ++i) {
        const quantized_tensor& qt = *order[i];
        const uint64_t off = out.size();
        for (size_t b = 0; b < 8; ++b) {
            out[offset_slots[i] + b] = static_cast<uint8_t>((off >> (8 * b)) & 0xff);
        }
        pack_codes(out, qt);
        const bool asym = qt.qtype.codebook == codebook_kind::uniform_asymmetric;
        if (qt.qtype.superblock_size == 0) {
            for (const qblock& blk : qt.blocks) put_f32(out, static_cast<float>(blk.scale));
            if (asym) {
                for (const qblock& blk : qt.blocks) put_f32(out, static_cast<float>(blk.zero));
            }
        } else {
            for (const superblock_params& p : qt.sblocks) {
                put_f32(out, p.d_scale);
                put_f32(out, p.m_scale);
            }
            if (asym) {
                for (const superblock_params& p : qt.sblocks) {
                    put_f32(out, p.d_zero);
                    put_f32(out, p.m_zero);
                }
            }
            put_bytes(out, qt.scale_codes.data(), qt.scale_codes.size());
            if (asym) put_bytes(out, qt.zero_codes.data(), qt.zero_codes.size());
        }
    }
    return out;
}

pack_contents read_pack(const std::vector<uint8_t>& bytes) {
    cursor c{bytes.data(), bytes.size(), 0, ""};

    c.need(4, "magic");
    if (std::memcmp(bytes.data(), kPackMagic, 4) != 0) fail(errc::data, "bad magic: not an AQPK file");
    c.pos = 4;
    const uint16_t version = c.get<uint16_t>("version");
    if (version != kPackVersion) {
        fail(errc::data, "unsupported pack version " + std::to_string(version));
    }
    c.get<uint16_t>("reserved");
    const uint32_t tensor_count = c.get<uint32_t>("tensor count");
    const uint32_t meta_count = c.get<uint32_t>("metadata count");
    if (tensor_count > kMaxCount || meta_count > kMaxCount) {
        fail(errc::data, "pack header counts out of range");
    }

    pack_contents out;
    out.file_bytes = bytes.size();
    for (uint32_t i = 0; i < meta_count; ++i) {
        std::string k = c.get_str("metadata key");
        const uint32_t vlen = c.get<uint32_t>("metadata value length");
        if (vlen > c.size) fail(errc::data, "truncated pack: metadata value");
        c.need(vlen, "metadata value");
        out.metadata[k] = std::string(reinterpret_cast<const char*>(c.p + c.pos), vlen);
        c.pos += vlen;
    }

    for (uint32_t i = 0; i < tensor_count; ++i) {
        pack_tensor_info info;
        info.name = c.get_str("tensor name");
        c.context = "tensor '" + info.name + "'";
        info.rows = c.get<uint32_t>("rows");
        info.cols = c.get<uint32_t>("cols");
        info.qtype.bit_width = c.get<uint8_t>("bit width");
        info.qtype.codebook = static_cast<codebook_kind>(c.get<uint8_t>("codebook"));
        c.get<uint16_t>("reserved");
        info.qtype.block_size = static_cast<int>(c.get<uint32_t>("block size"));
        info.qtype.superblock_size = static_cast<int>(c.get<uint32_t>("superblock size"));
        info.offset = c.get<uint64_t>("payload offset");
        info.length = c.get<uint64_t>("payload length");

        if (!bit_width_allowed(info.qtype.bit_width) ||
            (info.qtype.codebook != codebook_kind::uniform_symmetric &&
             info.qtype.codebook != codebook_kind::uniform_asymmetric)) {
            fail(errc::data, "unknown quantization type tag on tensor '" + info.name + "'");
        }
        if (info.qtype.block_size < 2 || info.qtype.block_size > (1 << 20) ||
            info.qtype.superblock_size < 0 || info.qtype.superblock_size > (1 << 20)) {
            fail(errc::data, "invalid block geometry on tensor '" + info.name + "'");
        }
        validate_shape(info.name, info.rows, info.cols);
        if (info.length != payload_length(info.rows, info.cols, info.qtype)) {
            fail(errc::data, "payload length mismatch on tensor '" + info.name + "'");
        }
        if (info.offset > bytes.size() || info.length > bytes.size() - info.offset) {
            fail(errc::data, "truncated pack: payload of tensor '" + info.name + "'");
        }
        out.directory.push_back(std::move(info));
        c.context.clear();
    }

    // payload sections must not overlap each other or the directory
    const uint64_t header_end = c.pos;
    std::vector<std::pair<uint64_t, uint64_t>> spans;
    for (const auto& info : out.directory) {
        if (info.offset < header_end) {
            fail(errc::data, "overlapping sections: tensor '" + info.name + "' starts in the header");
        }
        spans.emplace_back(info.offset, info.offset + info.length);
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second) fail(errc::data, "overlapping payload sections");
    }

    for (const auto& info : out.directory) {
        quantized_tensor qt;
        qt.name = info.name;
        qt.rows = info.rows;
        qt.cols = info.cols;
        qt.qtype = info.qtype;
        const int64_t nb = nblocks_of(qt.rows, qt.cols, qt.qtype);
        qt.pad_count = nb * qt.qtype.block_size - qt.numel();
        qt.blocks.resize(static_cast<size_t>(nb));

        cursor pc{bytes.data(), static_cast<size_t>(info.offset + info.length),
                  static_cast<size_t>(info.offset), "tensor '" + info.name + "'"};
        unpack_codes(pc, qt);
        const bool asym = qt.qtype.codebook == codebook_kind::uniform_asymmetric;
        if (qt.qtype.superblock_size == 0) {
            for (qblock& blk : qt.blocks) {
                blk.scale = static_cast<double>(pc.get_f32("scale"));
                if (!std::isfinite(blk.scale)) {
                    fail(errc::data, "non-finite scale on tensor '" + info.name + "'");
                }
            }
            if (asym) {
                for (qblock& blk : qt.blocks) {
                    blk.zero = static_cast<double>(pc.get_f32("zero"));
                    if (!std::isfinite(blk.zero)) {
                        fail(errc::data, "non-finite zero on tensor '" + info.name + "'");
                    }
                }
            }
        } else {
            qt.sblocks.resize(static_cast<size_t>(qt.superblock_count()));
            for (auto& p : qt.sblocks) {
                p.d_scale = pc.get_f32("superblock scale step");
                p.m_scale = pc.get_f32("superblock scale min");
            }
            if (asym) {
                for (auto& p : qt.sblocks) {
                    p.d_zero = pc.get_f32("superblock zero step");
                    p.m_zero = pc.get_f32("superblock zero min");
                }
            }
            qt.scale_codes.resize(static_cast<size_t>(nb));
            for (auto& u : qt.scale_codes) u = pc.get<uint8_t>("scale code");
            if (asym) {
                qt.zero_codes.resize(static_cast<size_t>(nb));
                for (auto& u : qt.zero_codes) u = pc.get<uint8_t>("zero code");
            }
            const int64_t S = qt.qtype.superblock_size;
            for (int64_t b = 0; b < nb; ++b) {
                const superblock_params& p = qt.sblocks[static_cast<size_t>(b / S)];
                qblock& blk = qt.blocks[static_cast<size_t>(b)];
                blk.scale = superblock_decode(p.d_scale, p.m_scale,
                                              qt.scale_codes[static_cast<size_t>(b)]);
                blk.zero = asym ? superblock_decode(p.d_zero, p.m_zero,
                                                    qt.zero_codes[static_cast<size_t>(b)])
                                : 0.0;
                if (!std::isfinite(blk.scale) || !std::isfinite(blk.zero)) {
                    fail(errc::data, "non-finite scale on tensor '" + info.name + "'");
                }
            }
        }
        out.tensors.push_back(std::move(qt));
    }
    return out;
}

void write_pack_file(const std::string& path, const std::vector<quantized_tensor>& tensors,
                     const pack_metadata& metadata) {
    const std::vector<uint8_t> bytes = write_pack(tensors, metadata);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(errc::io, "cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail(errc::io, "short write to '" + path + "'");
}

pack_contents read_pack_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) fail(errc::io, "cannot open '" + path + "'");
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) fail(errc::io, "short read from '" + path + "'");
    return read_pack(bytes);
}

memory_report model_memory_report(const pack_contents& pack) {
    memory_report rep;
    rep.file_bytes = pack.file_bytes;
    double code_bits = 0.0, elems = 0.0;
    for (size_t i = 0; i < pack.directory.size(); ++i) {
        const auto& info = pack.directory[i];
        memory_report_entry e;
        e.name = info.name;
        e.numel = info.rows * info.cols;
        e.bytes = info.length;
        e.code_bpw = info.qtype.bit_width;
        e.effective_bpw = static_cast<double>(info.length) * 8.0 / static_cast<double>(e.numel);
        rep.tensors.push_back(e);
        rep.total_bytes += info.length;
        code_bits += static_cast<double>(info.qtype.bit_width) * static_cast<double>(e.numel);
        elems += static_cast<double>(e.numel);
    }
    if (elems > 0.0) {
        rep.code_bpw = code_bits / elems;
        rep.effective_bpw = static_cast<double>(rep.total_bytes) * 8.0 / elems;
        rep.compression_vs_f16 = 16.0 / rep.effective_bpw;
    }
    return rep;
}

std::string format_directory_listing(const pack_contents& pack) {
    std::ostringstream os;
    os << "tensors: " << pack.directory.size() << "\n";
    for (const auto& info : pack.directory) {
        os << "  " << info.name << "  " << info.rows << "x" << info.cols << "  b="
           << info.qtype.bit_width
           << (info.qtype.codebook == codebook_kind::uniform_symmetric ? " sym" : " asym")
           << " B=" << info.qtype.block_size << " S=" << info.qtype.superblock_size << "  offset="
           << info.offset << " bytes=" << info.length << "\n";
    }
    os << "metadata: " << pack.metadata.size() << "\n";
    for (const auto& [k, v] : pack.metadata) {
        const bool long_value = v.size() > 120 || v.find('\n') != std::string::npos;
        os << "  " << k << " = " << (long_value ? "<" + std::to_string(v.size()) + " bytes>" : v)
           << "\n";
    }
    return os.str();
}

}  // namespace actquant
