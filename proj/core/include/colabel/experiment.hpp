#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "colabel/config.hpp"
#include "colabel/metrics.hpp"

namespace colabel {

// Dataset manifest: volume_id,image,reference,central_index with paths relative
// to the manifest. The central index is the annotated slice, floor(N/2).
struct DatasetEntry {
    std::string volume_id;
    std::filesystem::path image;
    std::filesystem::path reference;
    int central_index = -1; // -1 when writing: taken from the image header
};

std::vector<DatasetEntry> read_dataset_manifest(const std::filesystem::path& path); // paths made absolute
void write_dataset_manifest(const std::filesystem::path& path, std::span<const DatasetEntry> entries);

// Scans a PROMISE12-style directory (CaseNN.mhd + CaseNN_segmentation.mhd) and
// writes a dataset manifest. Returns the number of volumes indexed.
std::size_t index_dataset_directory(const std::filesystem::path& dir, const std::filesystem::path& manifest);

// Pseudo-label set on disk: <dir>/labels.csv (volume_id,slice,provenance,file)
// with one MetaImage per volume under <dir>/labels/.
void write_label_set(const std::filesystem::path& dir, std::span<const PseudoMask> masks,
                     std::span<const Volume> volumes);
std::vector<PseudoMask> read_label_set(const std::filesystem::path& dir);

struct RunOptions {
    bool resume = false;
    int threads = 1;
    int epoch_budget = 0; // > 0: a training stage stops with StagePaused after this many epochs
    std::function<void(const std::string&)> log; // defaults to stderr
};

// A training stage stopped early on request; its progress is kept for --resume.
class StagePaused : public Error {
public:
    using Error::Error;
};

enum class Stage { synth, semi, reg, ssl, fused, final_net, baseline, eval };

std::string stage_dir_name(Stage stage);
std::string stage_command(Stage stage);

class Experiment {
public:
    Experiment(ExperimentConfig config, std::filesystem::path output_root, std::filesystem::path config_dir,
               RunOptions options = {});
    ~Experiment();
    Experiment(Experiment&&) noexcept;
    Experiment& operator=(Experiment&&) noexcept;

    // Loads the config, applies a seed override and the COLABEL_OUTPUT_ROOT environment variable.
    static Experiment open(const std::filesystem::path& config_path, std::optional<std::uint64_t> seed_override,
                           RunOptions options = {});

    const ExperimentConfig& config() const { return config_; }
    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path stage_dir(Stage stage, int fold) const;

    // Each stage returns false when its recorded inputs and outputs are unchanged
    // and nothing had to be done.
    bool synth();
    bool train_semi(int fold);
    bool train_reg(int fold);
    bool propagate(int fold);
    bool fuse(int fold);
    bool train_final(int fold);
    bool train_baseline(int fold);
    bool evaluate(int fold);
    bool run(Stage stage, int fold);

    // Every stage of one fold, in order.
    void run_fold(int fold);
    // Data, all folds (options.threads workers), then the pooled report under <root>/crossval.
    void crossval();
    void aggregate();

    // Volume ids of the training and validation parts of a fold; loads the dataset if needed.
    std::vector<std::string> training_ids(int fold) const;
    std::vector<std::string> validation_ids(int fold) const;

private:
    struct Impl;
    ExperimentConfig config_;
    std::filesystem::path root_;
    std::filesystem::path config_dir_;
    RunOptions options_;
    std::unique_ptr<Impl> impl_;
};

// Per-volume reports stored by the evaluate stage.
std::vector<MetricsReport> read_reports(const std::filesystem::path& path);

} // namespace colabel
