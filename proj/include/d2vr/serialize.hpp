// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats:
//   * D2TN tensors: magic "D2TN", u32 LE rank, rank x u32 LE extents, then
//     row-major f32 LE payload.
//   * Manifests: plain text, one `key = value` per line, '#' comments.
//   * Checkpoints: a directory of D2TN files plus a manifest binding
//     parameter names to files and carrying step counter / RNG words.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/optim.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr {

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated D2TN header");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}
inline bool is_little_endian() {
    const uint32_t probe = 1;
    return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}
}  // namespace detail

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write("D2TN", 4);
    detail::put_u32(os, static_cast<uint32_t>(t.ndim()));
    for (int e : t.shape()) detail::put_u32(os, static_cast<uint32_t>(e));
    if (detail::is_little_endian()) {
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel()) * 4);
    } else {
        for (int i = 0; i < t.numel(); ++i) {
            uint32_t bits;
            std::memcpy(&bits, &t.data()[i], 4);
            detail::put_u32(os, bits);
        }
    }
    if (!os) throw IoError("short write to " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "D2TN", 4) != 0)
        throw IoError("bad magic in " + path.string());
    const uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw IoError("implausible rank in " + path.string());
    Shape shape(rank);
    size_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
        const uint32_t e = detail::get_u32(is);
        if (e == 0 || e > (1u << 24)) throw IoError("implausible extent in " + path.string());
        shape[d] = static_cast<int>(e);
        n *= e;
    }
    std::vector<float> data(n);
    if (detail::is_little_endian()) {
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n) * 4))
            throw IoError("truncated payload in " + path.string());
    } else {
        for (size_t i = 0; i < n; ++i) {
            const uint32_t bits = detail::get_u32(is);
            std::memcpy(&data[i], &bits, 4);
        }
    }
    char extra;
    if (is.read(&extra, 1)) throw IoError("trailing bytes in " + path.string());
    return Tensor::from(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// key = value manifests (order preserving)
// ---------------------------------------------------------------------------

using Manifest = std::vector<std::pair<std::string, std::string>>;

inline std::string manifest_text(const Manifest& m) {
    std::string out;
    for (const auto& [k, v] : m) out += k + " = " + v + "\n";
    return out;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << manifest_text(m);
    if (!os) throw IoError("short write to " + path.string());
}

inline Manifest parse_manifest(const std::string& text) {
    Manifest m;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("manifest line without '=': " + line);
        m.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_manifest(text);
}

inline std::string manifest_get(const Manifest& m, const std::string& key) {
    for (const auto& [k, v] : m)
        if (k == key) return v;
    throw IoError("manifest is missing key '" + key + "'");
}

inline std::string manifest_get_or(const Manifest& m, const std::string& key,
                                   const std::string& dflt) {
    for (const auto& [k, v] : m)
        if (k == key) return v;
    return dflt;
}

// 64-bit FNV-1a over a canonical text; used as the config hash in snapshots.
inline std::string text_hash_hex(const std::string& text) {
    const uint64_t h = Rng::fnv1a(text);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& dir, const TrainState& state,
                            const Manifest& extra = {}) {
    std::filesystem::create_directories(dir);
    Manifest m;
    m.emplace_back("format", "d2vr-checkpoint-v1");
    m.emplace_back("step", std::to_string(state.step));
    m.emplace_back("rng_key", std::to_string(state.rng_key));
    m.emplace_back("rng_counter", std::to_string(state.rng_counter));
    for (const auto& [k, v] : extra) m.emplace_back(k, v);
    for (size_t i = 0; i < state.params.size(); ++i) {
        const auto& p = state.params[i];
        char file[32];
        std::snprintf(file, sizeof(file), "p%04zu.d2tn", i);
        save_tensor(dir / file, p.value);
        m.emplace_back("param." + p.name, file);
        if (!p.m.empty()) {
            char mf[32], vf[32];
            std::snprintf(mf, sizeof(mf), "p%04zu.m.d2tn", i);
            std::snprintf(vf, sizeof(vf), "p%04zu.v.d2tn", i);
            save_tensor(dir / mf, Tensor::from(p.value.shape(), p.m));
            save_tensor(dir / vf, Tensor::from(p.value.shape(), p.v));
            m.emplace_back("moment_m." + p.name, mf);
            m.emplace_back("moment_v." + p.name, vf);
        }
    }
    save_manifest(dir / "manifest.txt", m);
}

// Loads parameters (and moments when present) in manifest order.
inline TrainState load_checkpoint(const std::filesystem::path& dir) {
    const Manifest m = load_manifest(dir / "manifest.txt");
    if (manifest_get(m, "format") != "d2vr-checkpoint-v1")
        throw IoError("unknown checkpoint format in " + dir.string());
    TrainState state;
    state.step = std::stoll(manifest_get(m, "step"));
    state.rng_key = std::strtoull(manifest_get(m, "rng_key").c_str(), nullptr, 10);
    state.rng_counter = std::strtoull(manifest_get(m, "rng_counter").c_str(), nullptr, 10);
    for (const auto& [k, v] : m) {
        if (k.rfind("param.", 0) == 0) {
            const std::string name = k.substr(6);
            state.add(name, load_tensor(dir / v));
        } else if (k.rfind("moment_m.", 0) == 0) {
            const std::string name = k.substr(9);
            for (auto& p : state.params)
                if (p.name == name) p.m = load_tensor(dir / v).vec();
        } else if (k.rfind("moment_v.", 0) == 0) {
            const std::string name = k.substr(9);
            for (auto& p : state.params)
                if (p.name == name) p.v = load_tensor(dir / v).vec();
        }
    }
    return state;
}

inline std::string checkpoint_meta(const std::filesystem::path& dir, const std::string& key,
                                   const std::string& dflt = "") {
    return manifest_get_or(load_manifest(dir / "manifest.txt"), key, dflt);
}

}  // namespace d2vr
