#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "condseg/common.hpp"

namespace condseg {

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// flat "section.key" -> value store parsed from an ini-style file
class ConfigMap {
  public:
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    int64_t get_i64(const std::string& key, int64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected integer, got '" + it->second + "'");
        }
    }

    double get_f64(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected number, got '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key '" + key + "': expected bool, got '" + it->second + "'");
    }

    std::vector<int64_t> get_i64_list(const std::string& key, std::vector<int64_t> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<int64_t> out;
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                out.push_back(std::stoll(tok));
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': expected integer list, got '" + it->second +
                                  "'");
            }
        }
        if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
        return out;
    }

    // sorted key=value dump; doubles as the canonical form for hashing
    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : values_) {
            out += k;
            out += " = ";
            out += v;
            out += "\n";
        }
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline void parse_config_text(ConfigMap& cfg, std::istream& in, const std::string& origin) {
    std::string line, section;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto cut = line.find_first_of("#;");
        if (cut != std::string::npos) line = line.substr(0, cut);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        cfg.set(section.empty() ? key : section + "." + key, value);
    }
}

inline ConfigMap read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    ConfigMap cfg;
    parse_config_text(cfg, f, path);
    return cfg;
}

// "section.key=value" fragments from the command line
inline void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("bad --set override (want key=value): " + s);
        cfg.set(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
}

inline uint64_t fnv1a_hash(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

enum class Protocol { baseline, fine_tune, joint, conditional_interleaved };

inline Protocol protocol_from_string(const std::string& s) {
    if (s == "baseline") return Protocol::baseline;
    if (s == "fine-tune") return Protocol::fine_tune;
    if (s == "joint") return Protocol::joint;
    if (s == "conditional-interleaved") return Protocol::conditional_interleaved;
    throw ConfigError("unknown protocol: " + s);
}

inline std::string to_string(Protocol p) {
    switch (p) {
        case Protocol::baseline: return "baseline";
        case Protocol::fine_tune: return "fine-tune";
        case Protocol::joint: return "joint";
        default: return "conditional-interleaved";
    }
}

struct TrainConfig {
    Protocol protocol = Protocol::conditional_interleaved;
    int64_t epochs = 150;
    double peak_lr = 1e-3;
    double warmup_fraction = 0.04;
    double weight_decay = 1e-5;
    int64_t batch_samples = 4; // volumes per batch
    int64_t batch_crops = 2;   // crops per volume
    int64_t crop = 32;
    uint64_t seed = 1;
    std::string manifest;
    int64_t target_modality = 0; // baseline and fine-tune train on this modality only
    double grad_clip = 1.0;      // global norm; 0 disables
    bool augment = true;
    bool uniform_modality_sampling = false;

    // loss
    double lambda_dice = 1.0;
    double lambda_focal = 1.0;
    double focal_gamma = 2.0;
    bool include_background = false;

    // model
    std::string arch = "cvit"; // cvit | unet
    int64_t num_classes = 8;
    int64_t patch = 8;
    int64_t dim = 64;
    int64_t depth = 4;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    std::vector<int64_t> widths{16, 32, 64, 128};

    static TrainConfig from_map(const ConfigMap& m) {
        TrainConfig c;
        c.protocol = protocol_from_string(m.get_str("train.protocol", to_string(c.protocol)));
        c.epochs = m.get_i64("train.epochs", c.epochs);
        c.peak_lr = m.get_f64("train.peak_lr", c.peak_lr);
        c.warmup_fraction = m.get_f64("train.warmup_fraction", c.warmup_fraction);
        c.weight_decay = m.get_f64("train.weight_decay", c.weight_decay);
        c.batch_samples = m.get_i64("train.batch_samples", c.batch_samples);
        c.batch_crops = m.get_i64("train.batch_crops", c.batch_crops);
        c.crop = m.get_i64("train.crop", c.crop);
        c.seed = static_cast<uint64_t>(m.get_i64("train.seed", static_cast<int64_t>(c.seed)));
        c.manifest = m.get_str("train.manifest", c.manifest);
        c.target_modality = m.get_i64("train.target_modality", c.target_modality);
        c.grad_clip = m.get_f64("train.grad_clip", c.grad_clip);
        c.augment = m.get_bool("train.augment", c.augment);
        c.uniform_modality_sampling =
            m.get_bool("train.uniform_modality_sampling", c.uniform_modality_sampling);
        c.lambda_dice = m.get_f64("loss.lambda_dice", c.lambda_dice);
        c.lambda_focal = m.get_f64("loss.lambda_focal", c.lambda_focal);
        c.focal_gamma = m.get_f64("loss.gamma", c.focal_gamma);
        c.include_background = m.get_bool("loss.include_background", c.include_background);
        c.arch = m.get_str("model.arch", c.arch);
        c.num_classes = m.get_i64("model.num_classes", c.num_classes);
        c.patch = m.get_i64("model.patch", c.patch);
        c.dim = m.get_i64("model.dim", c.dim);
        c.depth = m.get_i64("model.depth", c.depth);
        c.heads = m.get_i64("model.heads", c.heads);
        c.mlp_ratio = m.get_i64("model.mlp_ratio", c.mlp_ratio);
        c.widths = m.get_i64_list("model.widths", c.widths);
        c.validate();
        return c;
    }

    void validate() const {
        const double allowed[] = {0.02, 0.04, 0.06};
        bool ok = false;
        for (double w : allowed) ok = ok || std::abs(warmup_fraction - w) < 1e-12;
        if (!ok) throw ConfigError("train.warmup_fraction must be one of 0.02, 0.04, 0.06");
        if (epochs <= 0) throw ConfigError("train.epochs must be positive");
        if (peak_lr <= 0.0) throw ConfigError("train.peak_lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
        if (batch_samples <= 0 || batch_crops <= 0)
            throw ConfigError("train.batch_samples and train.batch_crops must be positive");
        if (crop <= 0) throw ConfigError("train.crop must be positive");
        if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be non-negative");
        if (arch != "cvit" && arch != "unet") throw ConfigError("model.arch must be cvit or unet");
        if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
    }

    ConfigMap to_map() const {
        ConfigMap m;
        m.set("train.protocol", to_string(protocol));
        m.set("train.epochs", std::to_string(epochs));
        m.set("train.peak_lr", format_f64(peak_lr));
        m.set("train.warmup_fraction", format_f64(warmup_fraction));
        m.set("train.weight_decay", format_f64(weight_decay));
        m.set("train.batch_samples", std::to_string(batch_samples));
        m.set("train.batch_crops", std::to_string(batch_crops));
        m.set("train.crop", std::to_string(crop));
        m.set("train.seed", std::to_string(seed));
        m.set("train.manifest", manifest);
        m.set("train.target_modality", std::to_string(target_modality));
        m.set("train.grad_clip", format_f64(grad_clip));
        m.set("train.augment", augment ? "true" : "false");
        m.set("train.uniform_modality_sampling", uniform_modality_sampling ? "true" : "false");
        m.set("loss.lambda_dice", format_f64(lambda_dice));
        m.set("loss.lambda_focal", format_f64(lambda_focal));
        m.set("loss.gamma", format_f64(focal_gamma));
        m.set("loss.include_background", include_background ? "true" : "false");
        m.set("model.arch", arch);
        m.set("model.num_classes", std::to_string(num_classes));
        m.set("model.patch", std::to_string(patch));
        m.set("model.dim", std::to_string(dim));
        m.set("model.depth", std::to_string(depth));
        m.set("model.heads", std::to_string(heads));
        m.set("model.mlp_ratio", std::to_string(mlp_ratio));
        std::string w;
        for (size_t i = 0; i < widths.size(); ++i) w += (i ? "," : "") + std::to_string(widths[i]);
        m.set("model.widths", w);
        return m;
    }

    uint64_t hash() const { return fnv1a_hash(to_map().canonical()); }

  private:
    static std::string format_f64(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
};

} // namespace condseg
