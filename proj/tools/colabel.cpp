// colabel: stage-by-stage driver for the slice-label propagation pipeline.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "colabel/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPrerequisite = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitPaused = 5;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> fold;
    int threads = 1;
    int epoch_budget = 0;
    bool resume = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_fold) {
    cmd->add_option("--config", c.config, "Experiment config file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Override experiment.seed");
    if (with_fold) cmd->add_option("--fold", c.fold, "Fold to run (default: every fold)");
    cmd->add_option("--threads", c.threads, "Folds processed in parallel")->check(CLI::PositiveNumber);
    cmd->add_flag("--resume", c.resume, "Continue interrupted training from its last finished epoch");
    cmd->add_option("--epoch-budget", c.epoch_budget, "Pause a training stage after this many epochs")
        ->check(CLI::NonNegativeNumber);
}

colabel::Experiment open(const Common& c) {
    colabel::RunOptions options;
    options.resume = c.resume;
    options.threads = c.threads;
    options.epoch_budget = c.epoch_budget;
    return colabel::Experiment::open(c.config, c.seed, options);
}

// Runs one stage for the requested fold, or for every fold in turn.
void run_stage(const Common& c, colabel::Stage stage) {
    auto exp = open(c);
    if (c.fold) {
        exp.run(stage, *c.fold);
        return;
    }
    for (int fold = 0; fold < exp.config().folds; ++fold) exp.run(stage, fold);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"colabel: segmentation from central-slice annotations"};
    app.require_subcommand(1);

    Common common;
    struct StageCommand {
        const char* name;
        const char* help;
        colabel::Stage stage;
    };
    const StageCommand stages[] = {
        {"train-semi", "Warm-up and pseudo-label training; writes semi-supervised labels", colabel::Stage::semi},
        {"train-reg", "Train the slice registration network", colabel::Stage::reg},
        {"propagate", "Propagate central labels with the registration network", colabel::Stage::ssl},
        {"fuse", "Intersect semi-supervised and propagated labels", colabel::Stage::fused},
        {"train-final", "Train the final network on manual and fused labels", colabel::Stage::final_net},
        {"train-baseline", "Train the central-slice-only baseline (FS-LCS)", colabel::Stage::baseline},
        {"evaluate", "Score the trained networks on the validation volumes", colabel::Stage::eval},
    };

    auto* synth = app.add_subcommand("synth", "Generate the phantom dataset described by the config");
    add_common(synth, common, false);
    synth->callback([&] { open(common).synth(); });

    for (const auto& s : stages) {
        auto* cmd = app.add_subcommand(s.name, s.help);
        add_common(cmd, common, true);
        const colabel::Stage stage = s.stage;
        cmd->callback([&common, stage] { run_stage(common, stage); });
    }

    auto* crossval = app.add_subcommand("crossval", "Run every stage on every fold and pool the metrics");
    add_common(crossval, common, false);
    crossval->callback([&] { open(common).crossval(); });

    std::string index_dir, index_out;
    auto* index = app.add_subcommand("index", "Write a dataset manifest for a CaseNN.mhd / CaseNN_segmentation.mhd directory");
    index->add_option("dir", index_dir, "Directory with the volumes")->required()->check(CLI::ExistingDirectory);
    index->add_option("--out", index_out, "Manifest to write (default: <dir>/dataset.csv)");
    index->callback([&] {
        const std::filesystem::path out = index_out.empty() ? std::filesystem::path(index_dir) / "dataset.csv" : std::filesystem::path(index_out);
        const auto n = colabel::index_dataset_directory(index_dir, out);
        std::cout << "indexed " << n << " volumes into " << out.string() << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    } catch (const colabel::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const colabel::PrerequisiteError& e) {
        std::cerr << "missing prerequisite: " << e.what() << "\n";
        return kExitPrerequisite;
    } catch (const colabel::StagePaused& e) {
        std::cerr << "paused: " << e.what() << "\n";
        return kExitPaused;
    } catch (const colabel::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}
