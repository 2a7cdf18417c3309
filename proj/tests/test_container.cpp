#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "actquant/container.hpp"

using namespace actquant;

namespace {

matrix gaussian(int64_t rows, int64_t cols, uint64_t seed) {
    matrix m(rows, cols);
    rng r(seed);
    for (double& v : m.data) v = r.normal();
    return m;
}

std::vector<quantized_tensor> toy_model(const quant_type& t, uint64_t seed) {
    std::vector<quantized_tensor> out;
    out.push_back(quantize_rtn(gaussian(8, 16, seed), t, "1.up"));
    out.push_back(quantize_rtn(gaussian(9, 7, seed + 1), t, "1.down"));  // padded tensor
    return out;
}

bool tensors_identical(const quantized_tensor& a, const quantized_tensor& b) {
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.pad_count != b.pad_count) {
        return false;
    }
    if (!(a.qtype == b.qtype) || a.blocks.size() != b.blocks.size()) return false;
    for (size_t i = 0; i < a.blocks.size(); ++i) {
        if (a.blocks[i].scale != b.blocks[i].scale) return false;
        if (a.blocks[i].zero != b.blocks[i].zero) return false;
        if (a.blocks[i].codes != b.blocks[i].codes) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("round trip is bit-exact for every bit width, codebook and super-block setting") {
    uint64_t seed = 5000;
    for (int bits : {2, 3, 4, 5, 6, 8}) {
        for (auto cb : {codebook_kind::uniform_symmetric, codebook_kind::uniform_asymmetric}) {
            for (int S : {0, 2, 8}) {
                const quant_type t{bits, cb, 16, S};
                const auto tensors = toy_model(t, ++seed);
                const auto bytes = write_pack(tensors, {{"k", "v"}});
                const auto back = read_pack(bytes);
                REQUIRE(back.tensors.size() == tensors.size());
                // directory is sorted by name: 1.down before 1.up
                CHECK(back.tensors[0].name == "1.down");
                for (const auto& qt : tensors) {
                    bool found = false;
                    for (const auto& rt : back.tensors) {
                        if (rt.name == qt.name) {
                            found = true;
                            CHECK(tensors_identical(qt, rt));
                            const matrix d0 = dequantize(qt);
                            const matrix d1 = dequantize(rt);
                            CHECK(d0.data == d1.data);
                        }
                    }
                    CHECK(found);
                }
                CHECK(back.metadata.at("k") == "v");
            }
        }
    }
}

TEST_CASE("writer determinism and duplicate rejection") {
    const quant_type t{4, codebook_kind::uniform_symmetric, 16, 4};
    const auto tensors = toy_model(t, 42);
    const auto b0 = write_pack(tensors, {{"a", "1"}, {"b", "2"}});
    const auto b1 = write_pack(tensors, {{"b", "2"}, {"a", "1"}});
    CHECK(b0 == b1);

    auto dup = tensors;
    dup.push_back(tensors[0]);
    CHECK_THROWS_WITH_AS(static_cast<void>(write_pack(dup, {})), doctest::Contains("duplicate"),
                         error);
}

TEST_CASE("empty tensor list is a fixed-size header") {
    const auto bytes = write_pack({}, {});
    CHECK(bytes.size() == 16);  // magic + version + reserved + two counts
    const auto back = read_pack(bytes);
    CHECK(back.tensors.empty());
    CHECK(back.metadata.empty());
}

TEST_CASE("named reader errors") {
    const quant_type t{3, codebook_kind::uniform_symmetric, 16, 0};
    auto bytes = write_pack(toy_model(t, 77), {});

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(static_cast<void>(read_pack(bad_magic)), doctest::Contains("bad magic"),
                         error);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_WITH_AS(static_cast<void>(read_pack(bad_version)), doctest::Contains("version"),
                         error);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 7);
    CHECK_THROWS_WITH_AS(static_cast<void>(read_pack(truncated)), doctest::Contains("truncated"),
                         error);

    // unknown type tag: corrupt the bit width in the directory of "1.down"
    auto bad_tag = bytes;
    bool patched = false;
    for (size_t i = 16; i + 6 < bad_tag.size() && !patched; ++i) {
        if (bad_tag[i] == 6 && bad_tag[i + 1] == 0 && bad_tag[i + 2] == 0 && bad_tag[i + 3] == 0 &&
            bad_tag[i + 4] == '1' && bad_tag[i + 5] == '.' && bad_tag[i + 6] == 'd') {
            bad_tag[i + 4 + 6 + 8] = 7;  // name + rows/cols, first type byte
            patched = true;
        }
    }
    REQUIRE(patched);
    CHECK_THROWS_WITH_AS(static_cast<void>(read_pack(bad_tag)), doctest::Contains("type tag"),
                         error);
}

TEST_CASE("fuzz: random byte mutations never crash the reader") {
    const quant_type t{4, codebook_kind::uniform_asymmetric, 16, 4};
    const auto base = write_pack(toy_model(t, 99), {{"note", "fuzz target"}});
    rng r(424242);
    int named_errors = 0, valid_reads = 0;
    for (int it = 0; it < 2000; ++it) {
        auto mutated = base;
        const int edits = 1 + static_cast<int>(r.uniform_int(0, 3));
        for (int e = 0; e < edits; ++e) {
            const size_t pos = static_cast<size_t>(r.uniform_int(0, static_cast<int64_t>(base.size()) - 1));
            mutated[pos] = static_cast<uint8_t>(r.uniform_int(0, 255));
        }
        try {
            const auto back = read_pack(mutated);
            (void)back;
            ++valid_reads;
        } catch (const error&) {
            ++named_errors;
        }
        // anything else (segfault, std::bad_alloc from bogus sizes, ...) kills the test
    }
    CHECK(named_errors + valid_reads == 2000);
    CHECK(named_errors > 0);
}

TEST_CASE("memory report and compression arithmetic") {
    // all tensors at 8 bit, S=0: payload = 8 bits codes + 32/16 bits scale
    const quant_type t8{8, codebook_kind::uniform_symmetric, 16, 0};
    const auto pack8 = read_pack(write_pack(toy_model(t8, 7), {}));
    const auto rep8 = model_memory_report(pack8);
    CHECK(rep8.code_bpw == doctest::Approx(8.0));
    CHECK(16.0 / rep8.code_bpw == doctest::Approx(2.0));  // code-only accounting

    // 3 code bits + one f32 scale per 32-element block: effective 4 bpw, 4x
    const quant_type t3{3, codebook_kind::uniform_symmetric, 32, 0};
    std::vector<quantized_tensor> m3 = {quantize_rtn(gaussian(16, 16, 11), t3, "1.up")};
    const auto rep3 = model_memory_report(read_pack(write_pack(m3, {})));
    CHECK(rep3.effective_bpw == doctest::Approx(4.0));
    CHECK(rep3.compression_vs_f16 == doctest::Approx(4.0));

    // headline ratio formula: 14.3 GB at 16 bpw down to 2.7 GB
    CHECK(compression_ratio(14.3, 2.7) == doctest::Approx(5.3).epsilon(0.01));
}

TEST_CASE("directory listing mentions every tensor") {
    const quant_type t{4, codebook_kind::uniform_symmetric, 16, 0};
    const auto pack = read_pack(write_pack(toy_model(t, 3), {{"generator", "test"}}));
    const std::string listing = format_directory_listing(pack);
    CHECK(listing.find("1.up") != std::string::npos);
    CHECK(listing.find("1.down") != std::string::npos);
    CHECK(listing.find("generator") != std::string::npos);
}

TEST_CASE("pack file I/O") {
    const quant_type t{5, codebook_kind::uniform_symmetric, 16, 2};
    const auto tensors = toy_model(t, 31);
    const std::string path = "test_container_tmp.aqpk";
    write_pack_file(path, tensors, {{"x", "y"}});
    const auto back = read_pack_file(path);
    CHECK(back.tensors.size() == 2);
    CHECK(back.metadata.at("x") == "y");
    std::remove(path.c_str());
    CHECK_THROWS_AS(static_cast<void>(read_pack_file("does_not_exist.aqpk")), error);
}
