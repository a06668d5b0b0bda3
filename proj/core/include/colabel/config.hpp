#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "colabel/fusion.hpp"
#include "colabel/phantom.hpp"
#include "colabel/pipeline.hpp"
#include "colabel/registration.hpp"
#include "colabel/semi_supervised.hpp"

namespace colabel {

struct DataConfig {
    std::string source = "phantom"; // "phantom" or a dataset manifest (.csv)
    int resample = 0;               // in-plane size after resampling; 0 keeps the native grid
    bool normalize = true;          // per-volume z-score
};

// Every hyperparameter of the experiment. Shared sections (loss, schedule, adam)
// are copied into the stage configs by the accessors below.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    int folds = 5;
    std::string output_dir = "runs/default";
    DataConfig data;
    PhantomSpec phantom;
    UNetConfig segmentation;
    SegLossConfig loss;
    ad::StepDecay schedule;
    ad::AdamOptions adam;
    SemiTrainConfig semi;
    RegNetConfig registration;
    bool export_fields = false;
    FusionOptions fusion;
    FinalTrainConfig final_train;

    void validate() const; // throws ConfigError

    SemiTrainConfig semi_config(std::uint64_t seed) const;
    RegNetConfig registration_config(std::uint64_t seed) const;
    FinalTrainConfig final_config(std::uint64_t seed) const;
};

// INI text with [section] headers and "key = value" lines; '#' and ';' start
// comment lines. Keys left out keep their defaults. Unknown sections or keys and
// malformed values raise ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical text of every key, in a fixed order; parse_config(to_ini(c)) == c.
std::string to_ini(const ExperimentConfig& config);
// Canonical text per section, keyed by section name.
std::map<std::string, std::string> config_sections(const ExperimentConfig& config);

} // namespace colabel
