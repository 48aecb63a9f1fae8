#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "larvseg/errors.hpp"

namespace larvseg {

enum class TrainMode { Supervised, Baseline, LarvSeg, SingleImageCA };

inline std::string mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::Supervised: return "supervised";
        case TrainMode::Baseline: return "baseline";
        case TrainMode::LarvSeg: return "larvseg";
        case TrainMode::SingleImageCA: return "single-image-ca";
    }
    throw ContractError("mode_name: bad enum");
}

inline TrainMode parse_mode(const std::string& s) {
    if (s == "supervised") return TrainMode::Supervised;
    if (s == "baseline") return TrainMode::Baseline;
    if (s == "larvseg") return TrainMode::LarvSeg;
    if (s == "single-image-ca") return TrainMode::SingleImageCA;
    throw ConfigError("unknown mode '" + s + "' (expected supervised|baseline|larvseg|single-image-ca)");
}

// Every tunable in one flat struct. Values mirror the defaults used throughout
// the docs; a key=value file or repeated --set flags override them.
struct Config {
    // dataset geometry
    std::size_t categories = 12;
    std::size_t feature_dim = 8;
    std::size_t height = 16;
    std::size_t width = 16;
    double novel_fraction = 0.42;  // round(0.42*12) = 5 novel, 7 base
    double sigma = 0.15;
    double mu_separation = 4.0;  // mean spacing in units of sigma
    std::size_t regions_min = 2;
    std::size_t regions_max = 6;
    std::size_t count_seg = 400;
    std::size_t count_multilabel = 400;
    std::size_t count_singlelabel = 400;
    std::size_t count_val = 100;
    double singlelabel_fg_min = 0.40;
    double singlelabel_fg_max = 0.70;
    std::size_t background_base_id = 0;
    std::uint64_t seed = 42;

    // model
    std::size_t hidden_dim = 32;
    std::size_t embed_dim = 16;
    std::size_t mixing_radius = 1;
    double logit_scale = 20.0;
    double init_range = 0.1;

    // head
    double lambda_cls = 0.1;
    double lambda_aux = 0.1;
    double tau = 1.0;
    std::size_t memory_capacity = 20;
    std::size_t top_k = 20;

    // trainer
    TrainMode mode = TrainMode::LarvSeg;
    std::size_t total_iters = 3000;
    std::size_t batch_size = 8;
    double base_lr = 0.001;
    double min_lr = 1e-5;
    double lr_power = 0.9;
    double momentum = 0.9;
    std::size_t ratio_seg = 1;
    std::size_t ratio_multilabel = 1;
    std::size_t ratio_singlelabel = 1;
    std::size_t checkpoint_interval = 1000;

    // evaluation
    std::size_t ignore_id = 255;

    std::size_t novel_count() const {
        return static_cast<std::size_t>(std::llround(novel_fraction * static_cast<double>(categories)));
    }
    std::size_t base_count() const { return categories - novel_count(); }

    void validate() const {
        if (categories < 4) throw ConfigError("categories must be >= 4");
        if (!(novel_fraction > 0.0 && novel_fraction < 1.0))
            throw ConfigError("novel_fraction must lie in (0,1)");
        if (novel_count() == 0 || novel_count() >= categories)
            throw ConfigError("novel_fraction leaves an empty base or novel split");
        if (sigma <= 0.0) throw ConfigError("sigma must be positive");
        if (mu_separation < 2.0) throw ConfigError("mu_separation must be >= 2 (separability)");
        if (regions_min < 1 || regions_max < regions_min)
            throw ConfigError("regions range must satisfy 1 <= min <= max");
        if (height < 4 || width < 4) throw ConfigError("height/width must be >= 4");
        if (!(singlelabel_fg_min >= 0.05 && singlelabel_fg_max <= 0.95 &&
              singlelabel_fg_min <= singlelabel_fg_max))
            throw ConfigError("singlelabel fg fraction range invalid");
        if (background_base_id >= base_count())
            throw ConfigError("background_base_id must name a base category");
        if (hidden_dim == 0 || embed_dim == 0) throw ConfigError("model dims must be positive");
        if (logit_scale <= 0.0) throw ConfigError("logit_scale must be positive");
        if (lambda_cls < 0.0 || lambda_aux < 0.0) throw ConfigError("loss weights must be >= 0");
        if (tau <= 0.0) throw ConfigError("tau must be positive");
        if (memory_capacity == 0) throw ConfigError("memory_capacity must be positive");
        if (top_k == 0) throw ConfigError("top_k must be positive");
        if (top_k > height * width) throw ConfigError("top_k exceeds pixel count");
        if (total_iters == 0) throw ConfigError("total_iters must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(base_lr > min_lr && min_lr >= 0.0))
            throw ConfigError("learning rates must satisfy base_lr > min_lr >= 0");
        if (lr_power <= 0.0) throw ConfigError("lr_power must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
        if (ratio_seg + ratio_multilabel + ratio_singlelabel == 0)
            throw ConfigError("at least one batch ratio must be positive");
        if (ignore_id < categories) throw ConfigError("ignore_id collides with category ids");
    }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream ss(value);
    T out;
    ss >> out;
    if (ss.fail() || !ss.eof())
        throw ConfigError("config key '" + key + "': cannot parse value '" + value + "'");
    return out;
}

struct ConfigField {
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

inline const std::map<std::string, ConfigField>& config_fields() {
    static const std::map<std::string, ConfigField> fields = [] {
        std::map<std::string, ConfigField> f;
        auto num = [&f](const std::string& key, auto Config::* member) {
            using T = std::decay_t<decltype(std::declval<Config>().*member)>;
            f[key] = ConfigField{
                [key, member](Config& c, const std::string& v) { c.*member = parse_number<T>(key, v); },
                [member](const Config& c) {
                    std::ostringstream ss;
                    ss.precision(17);
                    ss << c.*member;
                    return ss.str();
                }};
        };
        num("categories", &Config::categories);
        num("feature_dim", &Config::feature_dim);
        num("height", &Config::height);
        num("width", &Config::width);
        num("novel_fraction", &Config::novel_fraction);
        num("sigma", &Config::sigma);
        num("mu_separation", &Config::mu_separation);
        num("regions_min", &Config::regions_min);
        num("regions_max", &Config::regions_max);
        num("count_seg", &Config::count_seg);
        num("count_multilabel", &Config::count_multilabel);
        num("count_singlelabel", &Config::count_singlelabel);
        num("count_val", &Config::count_val);
        num("singlelabel_fg_min", &Config::singlelabel_fg_min);
        num("singlelabel_fg_max", &Config::singlelabel_fg_max);
        num("background_base_id", &Config::background_base_id);
        num("seed", &Config::seed);
        num("hidden_dim", &Config::hidden_dim);
        num("embed_dim", &Config::embed_dim);
        num("mixing_radius", &Config::mixing_radius);
        num("logit_scale", &Config::logit_scale);
        num("init_range", &Config::init_range);
        num("lambda_cls", &Config::lambda_cls);
        num("lambda_aux", &Config::lambda_aux);
        num("tau", &Config::tau);
        num("memory_capacity", &Config::memory_capacity);
        num("top_k", &Config::top_k);
        num("total_iters", &Config::total_iters);
        num("batch_size", &Config::batch_size);
        num("base_lr", &Config::base_lr);
        num("min_lr", &Config::min_lr);
        num("lr_power", &Config::lr_power);
        num("momentum", &Config::momentum);
        num("ratio_seg", &Config::ratio_seg);
        num("ratio_multilabel", &Config::ratio_multilabel);
        num("ratio_singlelabel", &Config::ratio_singlelabel);
        num("checkpoint_interval", &Config::checkpoint_interval);
        num("ignore_id", &Config::ignore_id);
        f["mode"] = ConfigField{
            [](Config& c, const std::string& v) { c.mode = parse_mode(v); },
            [](const Config& c) { return mode_name(c.mode); }};
        return f;
    }();
    return fields;
}

}  // namespace detail

inline void apply_config_kv(Config& cfg, const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(cfg, value);
}

// key=value lines; '#' starts a comment; blank lines skipped.
inline Config parse_config_text(std::istream& is, Config base = Config{}) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto notspace = [](unsigned char c) { return !std::isspace(c); };
        line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
        line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                              line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto strip = [&](std::string& s) {
            s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
            s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
        };
        strip(key);
        strip(value);
        apply_config_kv(base, key, value);
    }
    return base;
}

inline Config load_config(const std::string& path, Config base = Config{}) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    return parse_config_text(is, std::move(base));
}

// Deterministic echo: sorted keys, one per line. Round-trips through
// parse_config_text and serves as the manifest/checkpoint config block.
inline std::string config_to_text(const Config& cfg) {
    std::ostringstream out;
    for (const auto& [key, field] : detail::config_fields())
        out << key << "=" << field.get(cfg) << "\n";
    return out.str();
}

inline void save_config(const std::string& path, const Config& cfg) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << config_to_text(cfg);
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace larvseg
