#include "pifs/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace pifs {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& s, const std::string& where) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            fail(where + ": cannot parse integer '" + item + "'");
        }
    }
    if (out.empty()) fail(where + ": empty list");
    return out;
}

bool parse_bool(const std::string& s, const std::string& where) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail(where + ": expected a boolean, got '" + s + "'");
}

double parse_real(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        fail(where + ": cannot parse real '" + s + "'");
    }
}

long parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const long v = std::stol(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        fail(where + ": cannot parse integer '" + s + "'");
    }
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string real_str(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// One registry drives parsing, printing, and hashing so the three can never
// drift apart.
struct KeyHandler {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::map<std::string, KeyHandler>& key_registry() {
    static const std::map<std::string, KeyHandler> registry = [] {
        std::map<std::string, KeyHandler> r;
        auto add = [&r](const std::string& key,
                        std::function<void(RunConfig&, const std::string&, const std::string&)> set,
                        std::function<std::string(const RunConfig&)> get) {
            r[key] = KeyHandler{std::move(set), std::move(get)};
        };

        add("protocol.shots",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.shots = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.shots); });
        add("protocol.setting",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                if (v == "ss")
                    c.protocol.setting = Setting::SS;
                else if (v == "ms")
                    c.protocol.setting = Setting::MS;
                else
                    fail(w + ": setting must be 'ss' or 'ms', got '" + v + "'");
            },
            [](const RunConfig& c) {
                return c.protocol.setting == Setting::SS ? "ss" : "ms";
            });
        add("protocol.strict",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.strict = parse_bool(v, w);
            },
            [](const RunConfig& c) { return c.protocol.strict ? "true" : "false"; });
        add("protocol.folds",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.folds = parse_int_list(v, w);
            },
            [](const RunConfig& c) { return join_ints(c.protocol.folds); });
        add("protocol.ms_steps",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.ms_steps = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.ms_steps); });
        add("protocol.trials",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trials = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.trials); });
        add("protocol.seed",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.seed = static_cast<std::uint64_t>(parse_int(v, w));
                c.data.seed = c.protocol.seed;
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.seed); });
        add("protocol.fold_size",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.fold_size = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.fold_size); });
        add("protocol.background_in_base",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.include_background_in_base = parse_bool(v, w);
            },
            [](const RunConfig& c) {
                return c.protocol.include_background_in_base ? "true" : "false";
            });
        add("protocol.hm_policy",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                if (v == "recompute")
                    c.protocol.hm_policy = HmPolicy::RecomputeFromMeans;
                else if (v == "average")
                    c.protocol.hm_policy = HmPolicy::AverageReports;
                else
                    fail(w + ": hm_policy must be 'recompute' or 'average', got '" + v + "'");
            },
            [](const RunConfig& c) {
                return c.protocol.hm_policy == HmPolicy::RecomputeFromMeans ? "recompute"
                                                                            : "average";
            });

        add("trainer.lr_base",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.lr_base = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.trainer.lr_base); });
        add("trainer.lr_fsl",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.lr_fsl = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.trainer.lr_fsl); });
        add("trainer.momentum",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.momentum = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.trainer.momentum); });
        add("trainer.weight_decay",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.weight_decay = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.trainer.weight_decay); });
        add("trainer.iters_base",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.iters_base = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.trainer.iters_base); });
        add("trainer.iters_fsl",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.iters_fsl = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.trainer.iters_fsl); });
        add("trainer.batch_cap",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.batch_cap = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.protocol.trainer.batch_cap); });
        add("trainer.hflip",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.trainer.hflip = parse_bool(v, w);
            },
            [](const RunConfig& c) { return c.protocol.trainer.hflip ? "true" : "false"; });

        add("model.channels",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.model.channels = parse_int_list(v, w);
            },
            [](const RunConfig& c) { return join_ints(c.protocol.model.channels); });
        add("model.tau",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.model.tau = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.model.tau); });
        add("model.bn_momentum",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.model.bn_momentum = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.model.bn_momentum); });
        add("model.br_clip",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.model.br_clip = parse_bool(v, w);
            },
            [](const RunConfig& c) { return c.protocol.model.br_clip ? "true" : "false"; });
        add("model.lambda",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.protocol.lambda = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.protocol.lambda); });

        add("data.height",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.height = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.data.height); });
        add("data.width",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.width = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.data.width); });
        add("data.n_classes",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.n_classes = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.data.n_classes); });
        add("data.shapes_min",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.shapes_min = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.data.shapes_min); });
        add("data.shapes_max",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.shapes_max = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.data.shapes_max); });
        add("data.min_pixels_per_shape",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.min_pixels_per_shape = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.data.min_pixels_per_shape); });
        add("data.color_noise_sigma",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.data.color_noise_sigma = parse_real(v, w);
            },
            [](const RunConfig& c) { return real_str(c.data.color_noise_sigma); });
        add("data.n_base_images",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.n_base_images = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.n_base_images); });
        add("data.n_val_images",
            [](RunConfig& c, const std::string& v, const std::string& w) {
                c.n_val_images = static_cast<int>(parse_int(v, w));
            },
            [](const RunConfig& c) { return std::to_string(c.n_val_images); });
        return r;
    }();
    return registry;
}

}  // namespace

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.protocol.trainer.iters_base = 2000;
    cfg.protocol.trainer.iters_fsl = 200;
    cfg.data.seed = cfg.protocol.seed;
    return cfg;
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg = default_run_config();
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = origin + ":" + std::to_string(line_no);
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(where + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "protocol" && section != "trainer" && section != "model" &&
                section != "data")
                fail(where + ": unknown section [" + section + "]");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) fail(where + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) fail(where + ": key '" + key + "' outside any section");
        const std::string full_key = section + "." + key;
        auto it = key_registry().find(full_key);
        if (it == key_registry().end()) fail(where + ": unknown key '" + full_key + "'");
        it->second.set(cfg, value, where);
    }
    validate_config(cfg);
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream file(path);
    if (!file) fail("config: cannot open " + path);
    std::ostringstream buf;
    buf << file.rdbuf();
    return parse_config_text(buf.str(), path);
}

std::string config_text(const RunConfig& cfg) {
    std::map<std::string, std::vector<std::string>> sections;
    for (const auto& [key, handler] : key_registry()) {
        const std::size_t dot = key.find('.');
        sections[key.substr(0, dot)].push_back(key.substr(dot + 1) + " = " +
                                               handler.get(cfg));
    }
    std::string out;
    for (const char* name : {"protocol", "trainer", "model", "data"}) {
        out += std::string("[") + name + "]\n";
        for (const std::string& line : sections[name]) out += line + "\n";
        out += "\n";
    }
    return out;
}

std::uint64_t config_hash(const RunConfig& cfg) {
    std::vector<std::string> lines;
    for (const auto& [key, handler] : key_registry()) lines.push_back(key + "=" + handler.get(cfg));
    std::sort(lines.begin(), lines.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const std::string& line : lines)
        for (unsigned char c : line) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    return h;
}

void validate_config(const RunConfig& cfg) {
    if (cfg.protocol.shots != 1 && cfg.protocol.shots != 2 && cfg.protocol.shots != 5)
        fail("config: shots must be 1, 2 or 5, got " + std::to_string(cfg.protocol.shots));
    if (cfg.protocol.trials < 1) fail("config: trials must be positive");
    if (cfg.protocol.fold_size < 1) fail("config: fold_size must be positive");
    const int shape_classes = cfg.data.n_classes - 1;
    if (shape_classes < 1) fail("config: need at least one shape class");
    if (shape_classes % cfg.protocol.fold_size != 0)
        fail("config: " + std::to_string(shape_classes) +
             " shape classes are not divisible into folds of " +
             std::to_string(cfg.protocol.fold_size));
    const int n_folds = shape_classes / cfg.protocol.fold_size;
    for (int fold : cfg.protocol.folds)
        if (fold < 0 || fold >= n_folds)
            fail("config: fold " + std::to_string(fold) + " out of range 0.." +
                 std::to_string(n_folds - 1));
    if (cfg.protocol.setting == Setting::MS && cfg.protocol.ms_steps > 0 &&
        cfg.protocol.fold_size % cfg.protocol.ms_steps != 0)
        fail("config: ms_steps " + std::to_string(cfg.protocol.ms_steps) +
             " must divide fold_size " + std::to_string(cfg.protocol.fold_size) +
             " (classes per step would not be integral)");
    if (cfg.protocol.trainer.iters_base < 1 || cfg.protocol.trainer.iters_fsl < 0)
        fail("config: iteration counts must be positive");
    if (cfg.protocol.trainer.lr_base <= 0 || cfg.protocol.trainer.lr_fsl <= 0)
        fail("config: learning rates must be positive");
    if (cfg.protocol.lambda < 0) fail("config: lambda must be nonnegative");
    if (cfg.protocol.model.channels.empty()) fail("config: channel list is empty");
    if (cfg.data.shapes_min < 0 || cfg.data.shapes_max < cfg.data.shapes_min)
        fail("config: invalid shapes_min/shapes_max range");
    if (cfg.n_base_images < 1 || cfg.n_val_images < 1)
        fail("config: image counts must be positive");
    if (palette_min_separation(cfg.data) < 6.0 * cfg.data.color_noise_sigma)
        fail("config: class colors are closer than 6 sigma of the color noise; "
             "lower color_noise_sigma or reduce n_classes");
}

}  // namespace pifs
