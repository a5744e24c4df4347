#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>

#include "color/error.hpp"
#include "color/harness.hpp"

namespace color {

std::string to_string(Method method) {
    switch (method) {
        case Method::color: return "color";
        case Method::colorpp: return "colorpp";
        case Method::oracle: return "oracle";
        case Method::ftseq: return "ftseq";
        case Method::joint: return "joint";
    }
    return "?";
}

Method parse_method(const std::string& text) {
    for (Method m : {Method::color, Method::colorpp, Method::oracle, Method::ftseq, Method::joint})
        if (to_string(m) == text) return m;
    throw ConfigError("unknown method '" + text + "' (expected color, colorpp, oracle, ftseq or joint)");
}

RunConfig RunConfig::defaults(ScenarioKind scenario) {
    RunConfig c;
    c.scenario = scenario;
    if (scenario != ScenarioKind::dil) {
        c.num_classes = 40;
        c.classes_per_update = 4;
    }
    return c;
}

std::size_t RunConfig::effective_clusters() const {
    if (clusters > 0) return clusters;
    return scenario == ScenarioKind::dil ? 5 : 2 * classes_per_update;
}

std::size_t RunConfig::num_updates() const {
    if (scenario == ScenarioKind::dil) return num_domains;
    return classes_per_update == 0 ? 0 : num_classes / classes_per_update;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (model.channels != 3) throw ConfigError("channels must be 3");
    if (train.rank > model.embed_dim)
        throw ConfigError("rank " + std::to_string(train.rank) + " exceeds embed_dim " +
                          std::to_string(model.embed_dim));
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (train_per_class == 0 || test_per_class == 0)
        throw ConfigError("train_per_class and test_per_class must be positive");
    if (!(margin >= 0.0 && margin <= 1.0)) throw ConfigError("margin must lie in [0, 1]");
    std::size_t classes_in_update = num_classes;
    if (scenario == ScenarioKind::dil) {
        if (num_domains == 0) throw ConfigError("num_domains must be positive");
    } else {
        if (classes_per_update == 0 || num_classes % classes_per_update != 0)
            throw ConfigError("classes_per_update (" + std::to_string(classes_per_update) +
                              ") must divide num_classes (" + std::to_string(num_classes) + ")");
        classes_in_update = classes_per_update;
    }
    if (effective_clusters() > classes_in_update * train_per_class)
        throw ConfigError("clusters (" + std::to_string(effective_clusters()) +
                          ") exceeds the number of training instances per update");
    if (repeats == 0) throw ConfigError("repeats must be positive");
    if (pretrain_epochs == 0 || !(pretrain_learning_rate > 0.0))
        throw ConfigError("pretrain_epochs and pretrain_learning_rate must be positive");
    if (!(pretrain_min_accuracy >= 0.0 && pretrain_min_accuracy <= 1.0))
        throw ConfigError("pretrain_min_accuracy must lie in [0, 1]");
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError("setting '" + key + "' expects a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError("setting '" + key + "' expects a number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("setting '" + key + "' expects true or false, got '" + v + "'");
}

struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define COLOR_SIZE_FIELD(name, member)                                                        \
    Field {                                                                                   \
        name, [](const RunConfig& c) { return std::to_string(c.member); },                   \
            [](RunConfig& c, const std::string& v) { c.member = parse_size(name, v); }       \
    }
#define COLOR_DOUBLE_FIELD(name, member)                                                      \
    Field {                                                                                   \
        name, [](const RunConfig& c) { return format_double(c.member); },                    \
            [](RunConfig& c, const std::string& v) { c.member = parse_double(name, v); }     \
    }
#define COLOR_BOOL_FIELD(name, member)                                                        \
    Field {                                                                                   \
        name, [](const RunConfig& c) { return format_bool(c.member); },                      \
            [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); }       \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        Field{"scenario", [](const RunConfig& c) { return to_string(c.scenario); },
              [](RunConfig& c, const std::string& v) { c.scenario = parse_scenario(v); }},
        Field{"method", [](const RunConfig& c) { return to_string(c.method); },
              [](RunConfig& c, const std::string& v) { c.method = parse_method(v); }},
        COLOR_SIZE_FIELD("image_size", model.image_size),
        COLOR_SIZE_FIELD("patch_size", model.patch_size),
        COLOR_SIZE_FIELD("embed_dim", model.embed_dim),
        COLOR_SIZE_FIELD("num_layers", model.num_layers),
        COLOR_SIZE_FIELD("num_heads", model.num_heads),
        COLOR_SIZE_FIELD("ffn_hidden", model.ffn_hidden),
        COLOR_SIZE_FIELD("rank", train.rank),
        COLOR_SIZE_FIELD("clusters", clusters),
        COLOR_SIZE_FIELD("epochs", train.epochs),
        COLOR_SIZE_FIELD("batch_size", train.batch_size),
        COLOR_DOUBLE_FIELD("learning_rate", train.learning_rate),
        COLOR_DOUBLE_FIELD("weight_decay", train.weight_decay),
        COLOR_BOOL_FIELD("augment_flip", train.augment_flip),
        COLOR_BOOL_FIELD("augment_crop", train.augment_crop),
        COLOR_SIZE_FIELD("num_classes", num_classes),
        COLOR_SIZE_FIELD("num_domains", num_domains),
        COLOR_SIZE_FIELD("classes_per_update", classes_per_update),
        COLOR_SIZE_FIELD("train_per_class", train_per_class),
        COLOR_SIZE_FIELD("test_per_class", test_per_class),
        COLOR_DOUBLE_FIELD("margin", margin),
        COLOR_SIZE_FIELD("pretrain_epochs", pretrain_epochs),
        COLOR_DOUBLE_FIELD("pretrain_learning_rate", pretrain_learning_rate),
        COLOR_DOUBLE_FIELD("pretrain_min_accuracy", pretrain_min_accuracy),
        Field{"backbone_path", [](const RunConfig& c) { return c.backbone_path; },
              [](RunConfig& c, const std::string& v) { c.backbone_path = v; }},
        COLOR_SIZE_FIELD("data_seed", data_seed),
        COLOR_SIZE_FIELD("init_seed", init_seed),
        COLOR_SIZE_FIELD("kmeans_seed", kmeans_seed),
        COLOR_SIZE_FIELD("repeats", repeats),
        Field{"joint_mode", [](const RunConfig& c) { return std::string(c.joint_mode == JointMode::lora ? "lora" : "full"); },
              [](RunConfig& c, const std::string& v) {
                  if (v == "lora")
                      c.joint_mode = JointMode::lora;
                  else if (v == "full")
                      c.joint_mode = JointMode::full;
                  else
                      throw ConfigError("joint_mode must be lora or full, got '" + v + "'");
              }},
        Field{"average",
              [](const RunConfig& c) {
                  return std::string(c.average_mode == AverageMode::pooled ? "pooled" : "task_mean");
              },
              [](RunConfig& c, const std::string& v) {
                  if (v == "pooled")
                      c.average_mode = AverageMode::pooled;
                  else if (v == "task_mean")
                      c.average_mode = AverageMode::task_mean;
                  else
                      throw ConfigError("average must be pooled or task_mean, got '" + v + "'");
              }},
        COLOR_BOOL_FIELD("record_wall_time", record_wall_time),
        COLOR_BOOL_FIELD("save_checkpoints", save_checkpoints),
        Field{"output_dir", [](const RunConfig& c) { return c.output_dir; },
              [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
    };
    return table;
}

#undef COLOR_SIZE_FIELD
#undef COLOR_DOUBLE_FIELD
#undef COLOR_BOOL_FIELD

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> RunConfig::settings() const {
    std::map<std::string, std::string> out;
    for (const Field& f : fields()) out[f.key] = f.get(*this);
    return out;
}

void RunConfig::apply_setting(const std::string& key, const std::string& value) {
    for (const Field& f : fields()) {
        if (key == f.key) {
            f.set(*this, value);
            return;
        }
    }
    throw ConfigError("unknown setting '" + key + "'");
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const Field& f : fields()) keys.emplace_back(f.key);
    return keys;
}

Settings read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file '" + path + "'");
    Settings out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

RunConfig config_from_settings(const Settings& settings) {
    ScenarioKind scenario = ScenarioKind::dil;
    if (auto it = settings.find("scenario"); it != settings.end()) scenario = parse_scenario(it->second);
    RunConfig c = RunConfig::defaults(scenario);
    for (const auto& [key, value] : settings)
        if (key != "scenario") c.apply_setting(key, value);
    return c;
}

std::string default_output_root() {
    const char* root = std::getenv("COLOR_OUTPUT_ROOT");
    return root && *root ? std::string(root) : std::string("color_runs");
}

}  // namespace color
