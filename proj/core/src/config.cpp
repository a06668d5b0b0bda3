#include "colabel/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace colabel {
namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// One entry per key: how to print it and how to parse it into the config.
struct Field {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

struct Section {
    std::string name;
    std::vector<Field> fields;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw ConfigError("config key " + key + ": '" + value + "' is not " + expected);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
    Int out{};
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end) bad_value(key, value, "an integer in range");
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(value, &used);
    } catch (const std::exception&) {
        bad_value(key, value, "a number");
    }
    if (used != value.size()) bad_value(key, value, "a number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    bad_value(key, value, "a boolean");
}

#define COLABEL_INT(name, member)                                                                   \
    Field {                                                                                         \
        name, [](const ExperimentConfig& c) { return std::to_string(c.member); },                   \
            [](ExperimentConfig& c, const std::string& v) {                                         \
                c.member = parse_int<std::decay_t<decltype(c.member)>>(name, v);                    \
            }                                                                                       \
    }
#define COLABEL_DOUBLE(name, member)                                                                                \
    Field {                                                                                                         \
        name, [](const ExperimentConfig& c) { return format_double(c.member); },                                    \
            [](ExperimentConfig& c, const std::string& v) { c.member = parse_double(name, v); }                     \
    }
#define COLABEL_BOOL(name, member)                                                                                  \
    Field {                                                                                                         \
        name, [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); },                   \
            [](ExperimentConfig& c, const std::string& v) { c.member = parse_bool(name, v); }                       \
    }
#define COLABEL_STRING(name, member)                                                                                \
    Field {                                                                                                         \
        name, [](const ExperimentConfig& c) { return c.member; },                                                   \
            [](ExperimentConfig& c, const std::string& v) { c.member = v; }                                         \
    }

const std::vector<Section>& schema() {
    static const std::vector<Section> sections = {
        {"experiment",
         {COLABEL_INT("seed", seed), COLABEL_INT("folds", folds), COLABEL_STRING("output_dir", output_dir)}},
        {"data",
         {COLABEL_STRING("source", data.source), COLABEL_INT("resample", data.resample),
          COLABEL_BOOL("normalize", data.normalize)}},
        {"phantom",
         {COLABEL_INT("count", phantom.count), COLABEL_INT("height", phantom.height),
          COLABEL_INT("width", phantom.width), COLABEL_INT("depth", phantom.depth),
          COLABEL_DOUBLE("center_row_min", phantom.center_row.lo), COLABEL_DOUBLE("center_row_max", phantom.center_row.hi),
          COLABEL_DOUBLE("center_col_min", phantom.center_col.lo), COLABEL_DOUBLE("center_col_max", phantom.center_col.hi),
          COLABEL_DOUBLE("radius_row_min", phantom.radius_row.lo), COLABEL_DOUBLE("radius_row_max", phantom.radius_row.hi),
          COLABEL_DOUBLE("radius_col_min", phantom.radius_col.lo), COLABEL_DOUBLE("radius_col_max", phantom.radius_col.hi),
          COLABEL_DOUBLE("contrast_min", phantom.contrast.lo), COLABEL_DOUBLE("contrast_max", phantom.contrast.hi),
          COLABEL_DOUBLE("noise_sigma", phantom.noise_sigma),
          COLABEL_DOUBLE("deformation_amplitude", phantom.deformation_amplitude),
          COLABEL_DOUBLE("shrink", phantom.shrink), COLABEL_DOUBLE("background_drift", phantom.background_drift),
          COLABEL_INT("seed", phantom.seed)}},
        {"segmentation", {COLABEL_INT("depth", segmentation.depth), COLABEL_INT("base_channels", segmentation.base_channels)}},
        {"loss",
         {COLABEL_DOUBLE("gamma", loss.gamma), COLABEL_DOUBLE("dice_eps", loss.dice_eps),
          COLABEL_BOOL("squared_dice_denominator", loss.squared_dice_denominator)}},
        {"schedule",
         {COLABEL_DOUBLE("base_lr", schedule.base_lr), COLABEL_INT("step_epochs", schedule.step_epochs),
          COLABEL_DOUBLE("decay_factor", schedule.factor)}},
        {"adam",
         {COLABEL_DOUBLE("beta1", adam.beta1), COLABEL_DOUBLE("beta2", adam.beta2), COLABEL_DOUBLE("epsilon", adam.eps)}},
        {"semi",
         {COLABEL_INT("warmup_epochs", semi.warmup_epochs), COLABEL_INT("total_epochs", semi.total_epochs),
          COLABEL_INT("batch_size", semi.batch_size), COLABEL_DOUBLE("unlabeled_weight", semi.unlabeled_weight),
          COLABEL_INT("unlabeled_ramp_epochs", semi.unlabeled_ramp_epochs), COLABEL_BOOL("augment", semi.augment)}},
        {"registration",
         {COLABEL_INT("levels", registration.levels), COLABEL_INT("base_channels", registration.base_channels),
          COLABEL_DOUBLE("smoothness_weight", registration.smoothness_weight),
          Field{"similarity",
                [](const ExperimentConfig& c) {
                    return std::string(c.registration.similarity == Similarity::ncc ? "ncc" : "mse");
                },
                [](ExperimentConfig& c, const std::string& v) {
                    if (v == "mse") {
                        c.registration.similarity = Similarity::mse;
                    } else if (v == "ncc") {
                        c.registration.similarity = Similarity::ncc;
                    } else {
                        bad_value("similarity", v, "one of mse, ncc");
                    }
                }},
          COLABEL_INT("epochs", registration.epochs), COLABEL_INT("batch_size", registration.batch_size),
          COLABEL_INT("pairs_per_epoch", registration.pairs_per_epoch), COLABEL_BOOL("export_fields", export_fields)}},
        {"fusion", {COLABEL_BOOL("exclude_disagreement", fusion.exclude_disagreement)}},
        {"final",
         {COLABEL_INT("epochs", final_train.epochs), COLABEL_INT("batch_size", final_train.batch_size),
          COLABEL_BOOL("augment", final_train.augment), COLABEL_BOOL("warm_start", final_train.warm_start)}},
    };
    return sections;
}

#undef COLABEL_INT
#undef COLABEL_DOUBLE
#undef COLABEL_BOOL
#undef COLABEL_STRING

std::string section_text(const Section& s, const ExperimentConfig& c) {
    std::string out = "[" + s.name + "]\n";
    for (const auto& f : s.fields) out += f.key + " = " + f.get(c) + "\n";
    return out;
}

} // namespace

void ExperimentConfig::validate() const {
    if (folds < 2) throw ConfigError("experiment.folds must be at least 2");
    if (output_dir.empty()) throw ConfigError("experiment.output_dir must not be empty");
    if (data.source.empty()) throw ConfigError("data.source must be 'phantom' or a manifest path");
    if (data.resample != 0 && data.resample < 8) throw ConfigError("data.resample must be 0 or at least 8");
    if (data.source == "phantom") {
        try {
            phantom.validate();
        } catch (const SpecError& e) {
            throw ConfigError(std::string("phantom: ") + e.what());
        }
    }
    segmentation.validate();
    loss.validate();
    if (!(schedule.base_lr > 0.0) || schedule.step_epochs < 1 || !(schedule.factor > 0.0)) {
        throw ConfigError("schedule: base_lr and decay_factor must be positive, step_epochs at least 1");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
        throw ConfigError("adam: betas must lie in [0, 1) and epsilon must be positive");
    }
    semi_config(seed).validate();
    registration_config(seed).validate();
    final_config(seed).validate();
    // Every level halves the grid, so the working size must stay divisible.
    if (data.resample > 0) {
        const int need = 1 << std::max(segmentation.depth - 1, registration.levels);
        if (data.resample % need != 0) {
            throw ConfigError("data.resample must be divisible by " + std::to_string(need) +
                              " for the configured network depths");
        }
    }
}

SemiTrainConfig ExperimentConfig::semi_config(std::uint64_t stage_seed) const {
    SemiTrainConfig c = semi;
    c.lr = schedule;
    c.loss = loss;
    c.seed = stage_seed;
    return c;
}

RegNetConfig ExperimentConfig::registration_config(std::uint64_t stage_seed) const {
    RegNetConfig c = registration;
    c.lr = schedule;
    c.seed = stage_seed;
    return c;
}

FinalTrainConfig ExperimentConfig::final_config(std::uint64_t stage_seed) const {
    FinalTrainConfig c = final_train;
    c.lr = schedule;
    c.loss = loss;
    c.seed = stage_seed;
    return c;
}

ExperimentConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    for (const auto& [name, child] : tree) {
        if (child.empty() && !child.data().empty()) throw ConfigError("config: key '" + name + "' outside a section");
        const Section* section = nullptr;
        for (const auto& s : schema()) {
            if (s.name == name) section = &s;
        }
        if (!section) throw ConfigError("config: unknown section [" + name + "]");
        for (const auto& [key, value] : child) {
            const Field* field = nullptr;
            for (const auto& f : section->fields) {
                if (f.key == key) field = &f;
            }
            if (!field) throw ConfigError("config: unknown key '" + key + "' in [" + name + "]");
            field->set(c, value.data());
        }
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string to_ini(const ExperimentConfig& config) {
    std::string out;
    for (const auto& s : schema()) {
        if (!out.empty()) out += "\n";
        out += section_text(s, config);
    }
    return out;
}

std::map<std::string, std::string> config_sections(const ExperimentConfig& config) {
    std::map<std::string, std::string> out;
    for (const auto& s : schema()) out[s.name] = section_text(s, config);
    return out;
}

} // namespace colabel
