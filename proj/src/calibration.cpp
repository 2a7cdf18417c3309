#include "actquant/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "actquant/allocator.hpp"

namespace actquant {

bool parse_tensor_name(const std::string& name, int& layer, std::string& module) {
    const size_t dot = name.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 >= name.size()) return false;
    layer = 0;
    for (size_t i = 0; i < dot; ++i) {
        if (name[i] < '0' || name[i] > '9') return false;
        layer = layer * 10 + (name[i] - '0');
    }
    if (layer < 1) return false;
    module = name.substr(dot + 1);
    return true;
}

int calibration_set::find_tensor(const std::string& name) const {
    for (size_t i = 0; i < tensor_names.size(); ++i) {
        if (tensor_names[i] == name) return static_cast<int>(i);
    }
    return -1;
}

void calibration_set::validate() const {
    if (K < 2) fail(errc::data, "calibration set needs K >= 2 samples");
    if (X.rows != K) {
        fail(errc::data, "calibration K mismatch: X has " + std::to_string(X.rows) +
                             " rows, header says K=" + std::to_string(K));
    }
    if (Y.rows != K) {
        fail(errc::data, "calibration K mismatch: Y has " + std::to_string(Y.rows) +
                             " rows, header says K=" + std::to_string(K));
    }
    if (first_nonfinite(X) >= 0) fail(errc::data, "calibration X has non-finite entries");
    if (first_nonfinite(Y) >= 0) fail(errc::data, "calibration Y has non-finite entries");

    const size_t n = tensor_names.size();
    if (n == 0) fail(errc::data, "calibration set has no tensors");
    if (tensor_rows.size() != n || tensor_cols.size() != n || Z.size() != n) {
        fail(errc::data, "calibration tensor directory inconsistent");
    }
    for (size_t t = 0; t < n; ++t) {
        int layer;
        std::string module;
        if (!parse_tensor_name(tensor_names[t], layer, module)) {
            fail(errc::data, "tensor '" + tensor_names[t] + "' is not a quantization candidate name");
        }
        if (tensor_rows[t] <= 0 || tensor_cols[t] <= 0) {
            fail(errc::data, "tensor '" + tensor_names[t] + "' has empty shape");
        }
        if (Z[t].rows != K) {
            fail(errc::data, "calibration K mismatch: Z of '" + tensor_names[t] + "' has " +
                                 std::to_string(Z[t].rows) + " rows, header says K=" +
                                 std::to_string(K));
        }
        if (first_nonfinite(Z[t]) >= 0) {
            fail(errc::data, "activation rows of '" + tensor_names[t] + "' have non-finite entries");
        }
    }
    auto check_grads = [&](const std::vector<matrix>& g, const char* what) {
        if (g.empty()) return;
        if (g.size() != n) fail(errc::data, std::string(what) + " sections do not cover all tensors");
        for (size_t t = 0; t < n; ++t) {
            if (g[t].rows != K) {
                fail(errc::data, std::string(what) + " of '" + tensor_names[t] + "' has " +
                                     std::to_string(g[t].rows) + " rows, header says K=" +
                                     std::to_string(K));
            }
            if (g[t].cols != tensor_rows[t] * tensor_cols[t]) {
                fail(errc::data, std::string(what) + " of '" + tensor_names[t] +
                                     "' does not match the tensor element count");
            }
            if (first_nonfinite(g[t]) >= 0) {
                fail(errc::data, std::string(what) + " of '" + tensor_names[t] + "' has non-finite entries");
            }
        }
    };
    check_grads(g_act, "g_act");
    check_grads(g_cls, "g_cls");
}

std::vector<gradient_sample> calibration_set::gradient_samples() const {
    if (!has_gradients()) fail(errc::data, "calibration set carries no gradient sections");
    std::vector<gradient_sample> out(static_cast<size_t>(K));
    for (int64_t d = 0; d < K; ++d) {
        gradient_sample& s = out[static_cast<size_t>(d)];
        s.id = d;
        s.g_act.resize(tensor_names.size());
        if (has_cls_gradients()) s.g_cls.resize(tensor_names.size());
        for (size_t t = 0; t < tensor_names.size(); ++t) {
            const matrix& ga = g_act[t];
            s.g_act[t].assign(ga.data.begin() + d * ga.cols, ga.data.begin() + (d + 1) * ga.cols);
            if (has_cls_gradients()) {
                const matrix& gc = g_cls[t];
                s.g_cls[t].assign(gc.data.begin() + d * gc.cols,
                                  gc.data.begin() + (d + 1) * gc.cols);
            }
        }
    }
    return out;
}

namespace {

enum class section_kind : uint8_t { x = 0, y = 1, z = 2, gact = 3, gcls = 4 };

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_name(std::vector<uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

void put_section(std::vector<uint8_t>& out, section_kind kind, const std::string& name,
                 const matrix& m) {
    out.push_back(static_cast<uint8_t>(kind));
    put_name(out, name);
    put_u32(out, static_cast<uint32_t>(m.rows));
    put_u32(out, static_cast<uint32_t>(m.cols));
    for (double v : m.data) {
        const float f = static_cast<float>(v);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

struct reader {
    const uint8_t* p;
    size_t size;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > size) fail(errc::data, "truncated calibration file: " + std::string(what));
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return p[pos++];
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::string str(const char* what) {
        const uint32_t n = u32(what);
        if (n > 4096) fail(errc::data, "calibration name too long");
        need(n, what);
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
    matrix mat(const char* what) {
        const uint32_t r = u32(what);
        const uint32_t c = u32(what);
        if (static_cast<uint64_t>(r) * c > (size - pos) / 4) {
            fail(errc::data, "truncated calibration file: " + std::string(what));
        }
        matrix m(r, c);
        for (int64_t i = 0; i < m.numel(); ++i) {
            const uint32_t bits = u32(what);
            float f;
            std::memcpy(&f, &bits, 4);
            m.data[static_cast<size_t>(i)] = static_cast<double>(f);
        }
        return m;
    }
};

}  // namespace

std::vector<uint8_t> encode_calibration(const calibration_set& c) {
    c.validate();
    std::vector<uint8_t> out;
    out.insert(out.end(), kCalibMagic, kCalibMagic + 4);
    out.push_back(kCalibVersion);
    out.push_back(static_cast<uint8_t>(c.action_loss));
    out.push_back(0);
    out.push_back(0);
    put_u32(out, static_cast<uint32_t>(c.K));
    put_u32(out, static_cast<uint32_t>(c.tensor_names.size()));
    const uint32_t nsec = 2 + static_cast<uint32_t>(c.Z.size() + c.g_act.size() + c.g_cls.size());
    put_u32(out, nsec);
    for (size_t t = 0; t < c.tensor_names.size(); ++t) {
        put_name(out, c.tensor_names[t]);
        put_u32(out, static_cast<uint32_t>(c.tensor_rows[t]));
        put_u32(out, static_cast<uint32_t>(c.tensor_cols[t]));
    }
    put_section(out, section_kind::x, "", c.X);
    put_section(out, section_kind::y, "", c.Y);
    for (size_t t = 0; t < c.tensor_names.size(); ++t) {
        put_section(out, section_kind::z, c.tensor_names[t], c.Z[t]);
        if (!c.g_act.empty()) put_section(out, section_kind::gact, c.tensor_names[t], c.g_act[t]);
        if (!c.g_cls.empty()) put_section(out, section_kind::gcls, c.tensor_names[t], c.g_cls[t]);
    }
    return out;
}

calibration_set decode_calibration(const std::vector<uint8_t>& bytes) {
    reader r{bytes.data(), bytes.size()};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kCalibMagic, 4) != 0) {
        fail(errc::data, "bad magic: not an AQCB calibration file");
    }
    r.pos = 4;
    const uint8_t version = r.u8("version");
    if (version != kCalibVersion) {
        fail(errc::data, "unknown calibration schema version " + std::to_string(version));
    }
    calibration_set c;
    const uint8_t loss = r.u8("action loss");
    if (loss > 1) fail(errc::data, "unknown action loss tag");
    c.action_loss = static_cast<action_loss_kind>(loss);
    r.u8("reserved");
    r.u8("reserved");
    c.K = r.u32("K");
    const uint32_t ntensors = r.u32("tensor count");
    const uint32_t nsec = r.u32("section count");
    if (ntensors > 65536 || nsec > 262144) fail(errc::data, "calibration header counts out of range");

    for (uint32_t t = 0; t < ntensors; ++t) {
        c.tensor_names.push_back(r.str("tensor name"));
        c.tensor_rows.push_back(r.u32("tensor rows"));
        c.tensor_cols.push_back(r.u32("tensor cols"));
    }
    c.Z.resize(ntensors);
    std::vector<bool> have_z(ntensors, false), have_ga(ntensors, false), have_gc(ntensors, false);
    bool have_x = false, have_y = false;
    std::vector<matrix> ga(ntensors), gc(ntensors);

    for (uint32_t s = 0; s < nsec; ++s) {
        const uint8_t kind = r.u8("section kind");
        const std::string name = r.str("section name");
        matrix m = r.mat("section payload");
        switch (static_cast<section_kind>(kind)) {
            case section_kind::x:
                have_x = true;
                c.X = std::move(m);
                break;
            case section_kind::y:
                have_y = true;
                c.Y = std::move(m);
                break;
            case section_kind::z:
            case section_kind::gact:
            case section_kind::gcls: {
                const int t = c.find_tensor(name);
                if (t < 0) fail(errc::data, "section references unknown tensor '" + name + "'");
                if (kind == static_cast<uint8_t>(section_kind::z)) {
                    have_z[static_cast<size_t>(t)] = true;
                    c.Z[static_cast<size_t>(t)] = std::move(m);
                } else if (kind == static_cast<uint8_t>(section_kind::gact)) {
                    have_ga[static_cast<size_t>(t)] = true;
                    ga[static_cast<size_t>(t)] = std::move(m);
                } else {
                    have_gc[static_cast<size_t>(t)] = true;
                    gc[static_cast<size_t>(t)] = std::move(m);
                }
                break;
            }
            default:
                fail(errc::data, "unknown section kind " + std::to_string(kind));
        }
    }
    if (!have_x || !have_y) fail(errc::data, "calibration file missing X or Y section");
    std::string missing;
    for (uint32_t t = 0; t < ntensors; ++t) {
        if (!have_z[t]) missing += (missing.empty() ? "" : ", ") + c.tensor_names[t];
    }
    if (!missing.empty()) fail(errc::data, "missing tensor activations: " + missing);

    const bool all_ga = std::all_of(have_ga.begin(), have_ga.end(), [](bool b) { return b; });
    const bool any_ga = std::any_of(have_ga.begin(), have_ga.end(), [](bool b) { return b; });
    const bool all_gc = std::all_of(have_gc.begin(), have_gc.end(), [](bool b) { return b; });
    const bool any_gc = std::any_of(have_gc.begin(), have_gc.end(), [](bool b) { return b; });
    if (any_ga != all_ga || any_gc != all_gc) {
        fail(errc::data, "gradient sections must cover all tensors or none");
    }
    if (all_ga) c.g_act = std::move(ga);
    if (all_gc) c.g_cls = std::move(gc);

    c.validate();
    return c;
}

void save_calibration(const std::string& path, const calibration_set& c) {
    const auto bytes = encode_calibration(c);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(errc::io, "cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail(errc::io, "short write to '" + path + "'");
}

calibration_set load_calibration(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) fail(errc::io, "cannot open '" + path + "'");
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) fail(errc::io, "short read from '" + path + "'");
    return decode_calibration(bytes);
}

}  // namespace actquant
