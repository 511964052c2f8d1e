#include "bevmt/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "bevmt/common.hpp"

namespace bevmt {
namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + ": expected boolean, got '" + v + "'");
}

// One settable field: how to assign from text and how to mirror into/out of json.
struct Field {
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
    std::function<void(const RunConfig&, json&)> save;
    std::function<void(RunConfig&, const json&)> load;
};

#define BEVMT_FIELD_I64(member)                                                               \
    Field{[](RunConfig& c, const std::string& k, const std::string& v) {                      \
              c.member = parse_int(k, v);                                                     \
          },                                                                                  \
          [](const RunConfig& c, json& j) { j = static_cast<int64_t>(c.member); },            \
          [](RunConfig& c, const json& j) {                                                   \
              c.member = static_cast<decltype(c.member)>(j.get<int64_t>());                   \
          }}
#define BEVMT_FIELD_F64(member)                                                               \
    Field{[](RunConfig& c, const std::string& k, const std::string& v) {                      \
              c.member = parse_double(k, v);                                                  \
          },                                                                                  \
          [](const RunConfig& c, json& j) { j = c.member; },                                  \
          [](RunConfig& c, const json& j) { c.member = j.get<double>(); }}
#define BEVMT_FIELD_BOOL(member)                                                              \
    Field{[](RunConfig& c, const std::string& k, const std::string& v) {                      \
              c.member = parse_bool(k, v);                                                    \
          },                                                                                  \
          [](const RunConfig& c, json& j) { j = c.member; },                                  \
          [](RunConfig& c, const json& j) { c.member = j.get<bool>(); }}

const std::map<std::string, Field>& field_table() {
    static const std::map<std::string, Field> table = {
        // [scene]
        {"scene.grid_h", BEVMT_FIELD_I64(scene.grid_h)},
        {"scene.grid_w", BEVMT_FIELD_I64(scene.grid_w)},
        {"scene.grid_z", BEVMT_FIELD_I64(scene.grid_z)},
        {"scene.out_h", BEVMT_FIELD_I64(scene.out_h)},
        {"scene.out_w", BEVMT_FIELD_I64(scene.out_w)},
        {"scene.out_z", BEVMT_FIELD_I64(scene.out_z)},
        {"scene.extent_m", BEVMT_FIELD_F64(scene.extent_m)},
        {"scene.n_det_classes", BEVMT_FIELD_I64(scene.n_det_classes)},
        {"scene.n_seg_classes", BEVMT_FIELD_I64(scene.n_seg_classes)},
        {"scene.n_occ_classes", BEVMT_FIELD_I64(scene.n_occ_classes)},
        {"scene.channels", BEVMT_FIELD_I64(scene.channels)},
        {"scene.noise_amp", BEVMT_FIELD_F64(scene.noise_amp)},
        {"scene.seed", BEVMT_FIELD_I64(scene.seed)},
        // [model]
        {"model.variant",
         Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                   if (v != "transformer" && v != "mamba")
                       throw ConfigError(k + ": expected 'transformer' or 'mamba', got '" + v +
                                         "'");
                   c.model.variant = v;
               },
               [](const RunConfig& c, json& j) { j = c.model.variant; },
               [](RunConfig& c, const json& j) { c.model.variant = j.get<std::string>(); }}},
        {"model.layers", BEVMT_FIELD_I64(model.layers)},
        {"model.n_d", BEVMT_FIELD_I64(model.n_d)},
        {"model.s_blocks", BEVMT_FIELD_I64(model.s_blocks)},
        {"model.heads", BEVMT_FIELD_I64(model.heads)},
        {"model.points", BEVMT_FIELD_I64(model.points)},
        {"model.n_state", BEVMT_FIELD_I64(model.n_state)},
        {"model.use_mafi", BEVMT_FIELD_BOOL(model.use_mafi)},
        {"model.use_tcs", BEVMT_FIELD_BOOL(model.use_tcs)},
        {"model.task_det", BEVMT_FIELD_BOOL(model.task_det)},
        {"model.task_seg", BEVMT_FIELD_BOOL(model.task_seg)},
        {"model.task_occ", BEVMT_FIELD_BOOL(model.task_occ)},
        // [loss]
        {"loss.lambda_det", BEVMT_FIELD_F64(model.lambda_det)},
        {"loss.lambda_seg", BEVMT_FIELD_F64(model.lambda_seg)},
        {"loss.lambda_occ", BEVMT_FIELD_F64(model.lambda_occ)},
        {"loss.lambda_cls", BEVMT_FIELD_F64(model.lambda_cls)},
        {"loss.lambda_reg", BEVMT_FIELD_F64(model.lambda_reg)},
        // [optim]
        {"optim.peak_lr", BEVMT_FIELD_F64(peak_lr)},
        {"optim.weight_decay", BEVMT_FIELD_F64(weight_decay)},
        {"optim.warmup_frac", BEVMT_FIELD_F64(warmup_frac)},
        // [train]
        {"train.steps", BEVMT_FIELD_I64(steps)},
        {"train.batch", BEVMT_FIELD_I64(batch)},
        {"train.n_scenes", BEVMT_FIELD_I64(n_scenes)},
        {"train.checkpoint_every", BEVMT_FIELD_I64(checkpoint_every)},
        {"train.staged_fraction", BEVMT_FIELD_F64(staged_fraction)},
        {"train.seed", BEVMT_FIELD_I64(seed)},
        {"train.out_dir",
         Field{[](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
               nullptr,  // run-local; never snapshotted
               nullptr}},
    };
    return table;
}

void assign(RunConfig& cfg, const std::string& dotted, const std::string& value) {
    auto it = field_table().find(dotted);
    if (it == field_table().end()) throw ConfigError("unknown config key '" + dotted + "'");
    it->second.set(cfg, dotted, value);
}

}  // namespace

void RunConfig::validate() const {
    scene.validate();
    model.validate(scene);
    if (peak_lr <= 0.0) throw ConfigError("optim.peak_lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be non-negative");
    if (warmup_frac < 0.0 || warmup_frac > 1.0)
        throw ConfigError("optim.warmup_frac must lie in [0, 1]");
    if (steps < 0) throw ConfigError("train.steps must be non-negative");
    if (batch < 1) throw ConfigError("train.batch must be at least 1");
    if (n_scenes < 1) throw ConfigError("train.n_scenes must be at least 1");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be at least 1");
    if (staged_fraction < 0.0 || staged_fraction >= 1.0)
        throw ConfigError("train.staged_fraction must lie in [0, 1)");
    if (out_dir.empty()) throw ConfigError("train.out_dir must not be empty");
}

void RunConfig::apply_override(const std::string& key_eq_value) {
    size_t eq = key_eq_value.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + key_eq_value + "' is not of the form section.key=value");
    std::string key = trim(key_eq_value.substr(0, eq));
    std::string value = trim(key_eq_value.substr(eq + 1));
    if (key.find('.') == std::string::npos)
        throw ConfigError("override key '" + key + "' must be section.key");
    assign(*this, key, value);
}

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key '" + key +
                              "' appears before any [section]");
        assign(cfg, section + "." + key, value);
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return from_text(buf.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + std::string(e.what()).substr(std::string("config error: ").size()));
    }
}

nlohmann::json RunConfig::to_json() const {
    json j = json::object();
    for (const auto& [dotted, field] : field_table()) {
        if (!field.save) continue;
        size_t dot = dotted.find('.');
        json v;
        field.save(*this, v);
        j[dotted.substr(0, dot)][dotted.substr(dot + 1)] = v;
    }
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig cfg;
    for (const auto& [dotted, field] : field_table()) {
        if (!field.load) continue;
        size_t dot = dotted.find('.');
        std::string sec = dotted.substr(0, dot), key = dotted.substr(dot + 1);
        if (!j.contains(sec) || !j.at(sec).contains(key))
            throw ConfigError("config snapshot is missing '" + dotted + "'");
        try {
            field.load(cfg, j.at(sec).at(key));
        } catch (const json::exception& e) {
            throw ConfigError("config snapshot field '" + dotted + "': " + e.what());
        }
    }
    return cfg;
}

nlohmann::json scene_to_json(const SceneSpec& spec) {
    RunConfig carrier;
    carrier.scene = spec;
    return carrier.to_json().at("scene");
}

SceneSpec scene_from_json(const nlohmann::json& j) {
    RunConfig carrier = RunConfig::from_json([&] {
        json full = RunConfig{}.to_json();
        full["scene"] = j;
        return full;
    }());
    return carrier.scene;
}

bool scene_shapes_match(const SceneSpec& a, const SceneSpec& b) {
    return a.grid_h == b.grid_h && a.grid_w == b.grid_w && a.grid_z == b.grid_z &&
           a.out_h == b.out_h && a.out_w == b.out_w && a.out_z == b.out_z &&
           a.channels == b.channels && a.n_det_classes == b.n_det_classes &&
           a.n_seg_classes == b.n_seg_classes && a.n_occ_classes == b.n_occ_classes;
}

}  // namespace bevmt
