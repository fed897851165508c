// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` run configuration. Every command resolves its full
// parameter set into one of these, writes the canonical snapshot next to its
// outputs, and can be re-run bit-identically from that snapshot. Precedence:
// command-line flags > config file > preset defaults.
#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/serialize.hpp"

namespace d2vr::config {

class Config {
public:
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_int(const std::string& key, long long v) { kv_[key] = std::to_string(v); }
    void set_float(const std::string& key, double v) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%g", v);
        kv_[key] = buf;
    }
    void set_bool(const std::string& key, bool v) { kv_[key] = v ? "1" : "0"; }
    void set_if_absent(const std::string& key, const std::string& value) {
        kv_.emplace(key, value);
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    const std::string& str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }

    long long geti(const std::string& key) const {
        try {
            size_t used = 0;
            const long long v = std::stoll(str(key), &used);
            if (used != str(key).size()) throw std::invalid_argument(key);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' is not an integer: " + str(key));
        }
    }

    double getf(const std::string& key) const {
        try {
            size_t used = 0;
            const double v = std::stod(str(key), &used);
            if (used != str(key).size()) throw std::invalid_argument(key);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' is not a number: " + str(key));
        }
    }

    bool getb(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        throw ConfigError("key '" + key + "' is not a boolean: " + v);
    }

    std::vector<int> get_ints(const std::string& key) const {
        std::vector<int> out;
        std::stringstream ss(str(key));
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(std::stoi(tok));
        if (out.empty()) throw ConfigError("key '" + key + "' holds no integers");
        return out;
    }

    void load_file(const std::filesystem::path& path) {
        for (const auto& [k, v] : load_manifest(path)) kv_[k] = v;
    }

    // sorted, one key per line; this text is the snapshot and the hash input
    std::string canonical_text() const {
        std::string out;
        for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
        return out;
    }

    std::string hash() const { return text_hash_hex(canonical_text()); }

    void save_snapshot(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write snapshot " + path.string());
        os << canonical_text();
    }

    const std::map<std::string, std::string>& items() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

// Shared data-scale defaults (the desk scale); the paper preset only changes
// the distillation keys it pins.
inline void apply_preset(Config& c, const std::string& preset) {
    if (preset != "desk" && preset != "paper")
        throw ConfigError("unknown preset '" + preset + "' (expected desk or paper)");
    c.set_if_absent("preset", preset);
    // data
    c.set_if_absent("frames", "8");
    c.set_if_absent("channels", "1");
    c.set_if_absent("height", "32");
    c.set_if_absent("width", "32");
    c.set_if_absent("motion", "mix");
    c.set_if_absent("num_train", "32");
    c.set_if_absent("num_eval", "20");
    c.set_if_absent("noise", "0.1");
    c.set_if_absent("blur", "1.0");
    c.set_if_absent("occlusion", "0.3");
    c.set_if_absent("downsample", "2");
    // flow training
    c.set_if_absent("flow_steps", "1500");
    c.set_if_absent("flow_batch", "6");
    c.set_if_absent("flow_lr", "2e-4");
    c.set_if_absent("confidence", "1");
    // teacher training
    c.set_if_absent("teacher_steps", "3000");
    c.set_if_absent("teacher_batch", "8");
    c.set_if_absent("teacher_lr", "2e-4");
    c.set_if_absent("denoiser_base", "20");
    // distillation
    if (preset == "paper") {
        c.set_if_absent("distill_steps", "5000");
        c.set_if_absent("distill_batch", "8");
    } else {
        c.set_if_absent("distill_steps", "2000");
        c.set_if_absent("distill_batch", "4");
    }
    c.set_if_absent("clip_len", "4");
    c.set_if_absent("lambda1", "0.05");
    c.set_if_absent("lambda2", "0.1");
    c.set_if_absent("distill_lr", "2e-5");
    c.set_if_absent("t_student", "750,500,250,0");
    // samplers
    c.set_if_absent("teacher_sample_steps", "48");
    c.set_if_absent("seed", "0");
}

inline int env_threads() {
    const char* v = std::getenv("D2VR_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n < 1 ? 1 : n;
}

}  // namespace d2vr::config
