#include "colabel/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "colabel/autodiff/checkpoint.hpp"
#include "colabel/hashing.hpp"
#include "colabel/metaimage.hpp"
#include "colabel/preprocess.hpp"

namespace colabel {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kRecordFile = "run.json";
constexpr const char* kProgressFile = "progress.json";
constexpr const char* kProgressCheckpoint = "progress.ckpt";
constexpr const char* kNetFile = "net.ckpt";
constexpr const char* kOurs = "Ours";
constexpr const char* kBaseline = "FS-LCS";

// Sub-stream tags for seeds derived from the experiment seed.
enum SeedTag : std::uint64_t {
    kSemiInit = 1,
    kSemiTrain,
    kRegInit,
    kRegTrain,
    kSegInit,
    kSegTrain,
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::vector<std::string>& header) {
    std::ifstream in(path);
    if (!in) throw PrerequisiteError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || split_csv_line(line) != header) {
        throw FormatError(path.string() + ": unexpected header");
    }
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw FormatError(path.string() + ": malformed row '" + line + "'");
        rows.push_back(std::move(cells));
    }
    return rows;
}

void check_csv_field(const std::string& value, const char* what) {
    if (value.empty() || value.find_first_of(",\n\r") != std::string::npos) {
        throw FormatError(std::string(what) + " '" + value + "' cannot be stored in a manifest");
    }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << text;
        if (!out) throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

int parse_int_field(const std::string& value, const std::string& where) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used == value.size()) return v;
    } catch (const std::exception&) {
    }
    throw FormatError(where + ": '" + value + "' is not an integer");
}

// A MetaImage header and, unless embedded, its payload file.
std::vector<fs::path> metaimage_files(const fs::path& header) {
    std::vector<fs::path> files{header};
    const auto h = read_metaimage_header(header);
    if (h.element_data_file != "LOCAL") files.push_back(header.parent_path() / h.element_data_file);
    return files;
}

std::vector<fs::path> files_under(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto name = e.path().filename().string();
        if (name == kRecordFile || name == kProgressFile || name == kProgressCheckpoint) continue;
        if (name.size() > 4 && name.ends_with(".tmp")) continue;
        out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string generic_relative(const fs::path& path, const fs::path& base) {
    return fs::relative(path, base).generic_string();
}

Mask2D slice_mask(const MaskGrid& grid, int n) { return grid.slice(n); }

MaskGrid single_slice(const Mask2D& m) {
    MaskGrid g(1, m.rows(), m.cols());
    g.set_slice(0, m);
    return g;
}

// Adam moments and parameters for resumable training.
std::vector<ad::NamedTensor> progress_tensors(const UShapedNet<float>& body, const ad::AdamState<float>& adam) {
    auto tensors = body.state();
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
        const int n = static_cast<int>(adam.m[i].size());
        tensors.push_back({"adam.m." + std::to_string(i), ad::Tensor<float>({n}, adam.m[i])});
        tensors.push_back({"adam.v." + std::to_string(i), ad::Tensor<float>({n}, adam.v[i])});
    }
    return tensors;
}

class Progress {
public:
    Progress(fs::path dir, std::string key, bool resume) : dir_(std::move(dir)), key_(std::move(key)) {
        if (!resume) return;
        const fs::path meta = dir_ / kProgressFile;
        if (!fs::exists(meta) || !fs::exists(dir_ / kProgressCheckpoint)) return;
        const json j = json::parse(read_text(meta));
        if (j.value("key", "") != key_) return;
        saved_ = j;
    }

    bool resuming() const { return !saved_.is_null(); }
    int start_epoch() const { return resuming() ? saved_.at("next_epoch").get<int>() : 0; }
    std::vector<double> trace() const {
        return resuming() ? saved_.at("trace").get<std::vector<double>>() : std::vector<double>{};
    }
    json extra() const { return resuming() ? saved_.value("extra", json::object()) : json::object(); }

    void restore(UShapedNet<float>& body, ad::AdamState<float>& adam) const {
        if (!resuming()) return;
        auto tensors = ad::read_checkpoint(dir_ / kProgressCheckpoint);
        std::vector<ad::NamedTensor> params;
        std::map<std::string, std::vector<float>> moments;
        for (auto& t : tensors) {
            if (t.name.starts_with("adam.")) {
                moments[t.name] = std::vector<float>(t.tensor.data().begin(), t.tensor.data().end());
            } else {
                params.push_back(std::move(t));
            }
        }
        body.load_state(params);
        adam.step = saved_.at("adam_step").get<std::int64_t>();
        adam.m.clear();
        adam.v.clear();
        for (std::size_t i = 0; moments.count("adam.m." + std::to_string(i)); ++i) {
            adam.m.push_back(moments.at("adam.m." + std::to_string(i)));
            adam.v.push_back(moments.at("adam.v." + std::to_string(i)));
        }
    }

    void save(int next_epoch, const std::vector<double>& trace, const UShapedNet<float>& body,
              const ad::AdamState<float>& adam, const json& extra = json::object()) const {
        ad::write_checkpoint(dir_ / kProgressCheckpoint, progress_tensors(body, adam));
        json j{{"key", key_}, {"next_epoch", next_epoch}, {"adam_step", adam.step}, {"trace", trace}, {"extra", extra}};
        write_text_atomic(dir_ / kProgressFile, j.dump(1));
    }

    void clear() const {
        fs::remove(dir_ / kProgressFile);
        fs::remove(dir_ / kProgressCheckpoint);
    }

private:
    fs::path dir_;
    std::string key_;
    json saved_;
};

void save_net(const fs::path& path, const UShapedNet<float>& body) { ad::write_checkpoint(path, body.state()); }

void load_net(const fs::path& path, UShapedNet<float>& body) { body.load_state(ad::read_checkpoint(path)); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> json_optional(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace

// ---------------------------------------------------------------- manifests

std::vector<DatasetEntry> read_dataset_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw PrerequisiteError("dataset manifest " + path.string() + " does not exist");
    const fs::path base = path.parent_path();
    std::vector<DatasetEntry> out;
    std::set<std::string> seen;
    for (const auto& row : read_csv(path, {"volume_id", "image", "reference", "central_index"})) {
        if (!seen.insert(row[0]).second) throw FormatError(path.string() + ": duplicate volume id " + row[0]);
        out.push_back({row[0], fs::absolute(base / row[1]).lexically_normal(),
                       fs::absolute(base / row[2]).lexically_normal(), parse_int_field(row[3], path.string())});
    }
    if (out.empty()) throw FormatError(path.string() + ": no volumes listed");
    return out;
}

void write_dataset_manifest(const fs::path& path, std::span<const DatasetEntry> entries) {
    const fs::path base = fs::absolute(path).parent_path();
    std::string text = "volume_id,image,reference,central_index\n";
    for (const auto& e : entries) {
        check_csv_field(e.volume_id, "volume id");
        const auto image = fs::relative(fs::absolute(e.image), base).generic_string();
        const auto reference = fs::relative(fs::absolute(e.reference), base).generic_string();
        check_csv_field(image, "path");
        check_csv_field(reference, "path");
        const int c = e.central_index >= 0 ? e.central_index : central_index(read_metaimage_header(e.image).dim_size[2]);
        text += e.volume_id + "," + image + "," + reference + "," + std::to_string(c) + "\n";
    }
    write_text_atomic(path, text);
}

std::size_t index_dataset_directory(const fs::path& dir, const fs::path& manifest) {
    if (!fs::is_directory(dir)) throw PrerequisiteError(dir.string() + " is not a directory");
    static const std::regex kCase(R"((Case\d+)\.mhd)");
    std::vector<DatasetEntry> entries;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = e.path().filename().string();
        if (!std::regex_match(name, m, kCase)) continue;
        const fs::path seg = dir / (m[1].str() + "_segmentation.mhd");
        if (!fs::exists(seg)) continue; // test cases come without a reference
        entries.push_back({m[1].str(), e.path(), seg});
    }
    if (entries.empty()) throw PrerequisiteError("no CaseNN.mhd / CaseNN_segmentation.mhd pairs in " + dir.string());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.volume_id < b.volume_id; });
    write_dataset_manifest(manifest, entries);
    return entries.size();
}

void write_label_set(const fs::path& dir, std::span<const PseudoMask> masks, std::span<const Volume> volumes) {
    std::map<std::string, const Volume*> by_id;
    for (const auto& v : volumes) by_id[v.id] = &v;
    std::map<std::string, LabelVolume> grids;
    std::string text = "volume_id,slice,provenance,file\n";
    for (const auto& m : masks) {
        const auto it = by_id.find(m.volume_id);
        if (it == by_id.end()) throw PairingError("write_label_set: no volume " + m.volume_id);
        const Volume& v = *it->second;
        if (m.slice < 0 || m.slice >= v.depth() || m.mask.rows() != v.height() || m.mask.cols() != v.width()) {
            throw DimensionError("write_label_set: " + to_string(m.key()) + " does not fit its volume");
        }
        auto [g, fresh] = grids.try_emplace(m.volume_id);
        if (fresh) g->second = LabelVolume{v.id, MaskGrid(v.depth(), v.height(), v.width()), v.spacing};
        g->second.labels.set_slice(m.slice, m.mask);
        check_csv_field(m.volume_id, "volume id");
        text += m.volume_id + "," + std::to_string(m.slice) + "," + to_string(m.provenance) + ",labels/" +
                m.volume_id + ".mhd\n";
    }
    fs::create_directories(dir / "labels");
    for (const auto& [id, lv] : grids) write_label_metaimage(dir / "labels" / (id + ".mhd"), lv);
    write_text_atomic(dir / "labels.csv", text);
}

std::vector<PseudoMask> read_label_set(const fs::path& dir) {
    const fs::path manifest = dir / "labels.csv";
    std::map<std::string, LabelVolume> cache;
    std::vector<PseudoMask> out;
    for (const auto& row : read_csv(manifest, {"volume_id", "slice", "provenance", "file"})) {
        const int slice = parse_int_field(row[1], manifest.string());
        auto it = cache.find(row[3]);
        if (it == cache.end()) it = cache.emplace(row[3], read_label_metaimage(dir / row[3])).first;
        const auto& grid = it->second.labels;
        if (slice < 0 || slice >= grid.depth()) {
            throw FormatError(manifest.string() + ": slice " + row[1] + " outside " + row[3]);
        }
        out.push_back({row[0], slice, slice_mask(grid, slice), parse_provenance(row[2])});
    }
    return out;
}

std::string stage_dir_name(Stage stage) {
    switch (stage) {
    case Stage::synth: return "data";
    case Stage::semi: return "semi";
    case Stage::reg: return "reg";
    case Stage::ssl: return "ssl";
    case Stage::fused: return "fused";
    case Stage::final_net: return "final";
    case Stage::baseline: return "baseline";
    case Stage::eval: return "eval";
    }
    return "unknown";
}

std::string stage_command(Stage stage) {
    switch (stage) {
    case Stage::synth: return "synth";
    case Stage::semi: return "train-semi";
    case Stage::reg: return "train-reg";
    case Stage::ssl: return "propagate";
    case Stage::fused: return "fuse";
    case Stage::final_net: return "train-final";
    case Stage::baseline: return "train-baseline";
    case Stage::eval: return "evaluate";
    }
    return "unknown";
}

std::vector<MetricsReport> read_reports(const fs::path& path) {
    const json j = json::parse(read_text(path));
    std::vector<MetricsReport> out;
    for (const auto& r : j) {
        MetricsReport m;
        m.method = r.at("method").get<std::string>();
        m.fold = r.at("fold").get<int>();
        m.volume_id = r.at("volume_id").get<std::string>();
        m.dice = r.at("dice").get<double>();
        m.iou = r.at("iou").get<double>();
        m.assd = json_optional(r.at("assd"));
        m.ravd = json_optional(r.at("ravd"));
        out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------- experiment

struct LoadedData {
    std::vector<Volume> volumes;
    std::vector<LabelVolume> references;
    std::vector<fs::path> files; // everything the data was read from
    fs::path manifest;
    FoldSplit split;
};


struct Experiment::Impl {
    std::mutex log_mutex;
    std::mutex data_mutex;
    std::shared_ptr<const LoadedData> data;
};

Experiment::Experiment(ExperimentConfig config, fs::path output_root, fs::path config_dir, RunOptions options)
    : config_(std::move(config)), root_(std::move(output_root)), config_dir_(std::move(config_dir)),
      options_(std::move(options)), impl_(std::make_unique<Impl>()) {
    config_.validate();
    if (options_.threads < 1) throw ConfigError("--threads must be at least 1");
}

Experiment::~Experiment() = default;
Experiment::Experiment(Experiment&&) noexcept = default;
Experiment& Experiment::operator=(Experiment&&) noexcept = default;

Experiment Experiment::open(const fs::path& config_path, std::optional<std::uint64_t> seed_override,
                            RunOptions options) {
    ExperimentConfig cfg = load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    fs::path root = cfg.output_dir;
    if (const char* env = std::getenv("COLABEL_OUTPUT_ROOT"); env && *env) root = env;
    return Experiment(std::move(cfg), fs::absolute(root), fs::absolute(config_path).parent_path(), std::move(options));
}

fs::path Experiment::stage_dir(Stage stage, int fold) const {
    if (stage == Stage::synth) return root_ / "data";
    return root_ / ("fold" + std::to_string(fold)) / stage_dir_name(stage);
}

namespace {

class Logger {
public:
    Logger(std::mutex& m, const RunOptions& o) : mutex_(m), options_(o) {}
    void operator()(const std::string& msg) const {
        std::lock_guard lock(mutex_);
        if (options_.log) {
            options_.log(msg);
        } else {
            std::cerr << msg << '\n';
        }
    }

private:
    std::mutex& mutex_;
    const RunOptions& options_;
};

std::string stage_label(Stage stage, int fold) {
    if (stage == Stage::synth) return "[synth] ";
    return "[" + stage_command(stage) + " fold " + std::to_string(fold) + "] ";
}

} // namespace

// Dataset location, loading and preprocessing -------------------------------

namespace {

fs::path dataset_manifest_path(const ExperimentConfig& cfg, const fs::path& root, const fs::path& config_dir) {
    if (cfg.data.source == "phantom") return root / "data" / "dataset.csv";
    fs::path p = cfg.data.source;
    return p.is_absolute() ? p : config_dir / p;
}

std::shared_ptr<const LoadedData> load_data(const ExperimentConfig& cfg, const fs::path& manifest) {
    auto data = std::make_shared<LoadedData>();
    data->manifest = manifest;
    data->files.push_back(manifest);
    std::vector<std::string> ids;
    for (const auto& e : read_dataset_manifest(manifest)) {
        for (const auto& f : metaimage_files(e.image)) data->files.push_back(f);
        for (const auto& f : metaimage_files(e.reference)) data->files.push_back(f);
        Volume v = read_metaimage(e.image);
        LabelVolume ref = read_label_metaimage(e.reference);
        v.id = ref.id = e.volume_id;
        if (ref.labels.depth() != v.depth() || ref.labels.rows() != v.height() || ref.labels.cols() != v.width()) {
            throw PairingError("reference of " + e.volume_id + " does not match its image grid");
        }
        ref.spacing = v.spacing;
        if (e.central_index != central_index(v.depth())) {
            throw PairingError("manifest gives central slice " + std::to_string(e.central_index) + " for " + e.volume_id +
                               ", but its " + std::to_string(v.depth()) + " slices put it at " +
                               std::to_string(central_index(v.depth())));
        }
        if (cfg.data.resample > 0) {
            v = resample_inplane(v, cfg.data.resample, cfg.data.resample);
            ref = resample_inplane(ref, cfg.data.resample, cfg.data.resample);
        }
        if (cfg.data.normalize) v = normalize_intensity(v);
        v.check_invariants();
        ids.push_back(e.volume_id);
        data->volumes.push_back(std::move(v));
        data->references.push_back(std::move(ref));
    }
    const int need = 1 << std::max(cfg.segmentation.depth - 1, cfg.registration.levels);
    for (const auto& v : data->volumes) {
        if (v.height() % need != 0 || v.width() % need != 0) {
            throw ConfigError("volume " + v.id + " is " + std::to_string(v.height()) + "x" + std::to_string(v.width()) +
                              "; the networks need multiples of " + std::to_string(need) + " (set data.resample)");
        }
    }
    if (static_cast<int>(ids.size()) < cfg.folds) {
        throw ConfigError("experiment.folds = " + std::to_string(cfg.folds) + " exceeds the " +
                          std::to_string(ids.size()) + " volumes of the dataset");
    }
    data->split = split_folds(ids, cfg.folds, cfg.seed);
    return data;
}

} // namespace

namespace {
std::shared_ptr<const LoadedData> cached_data(std::mutex& m, std::shared_ptr<const LoadedData>& slot,
                                              const ExperimentConfig& cfg, const fs::path& root,
                                              const fs::path& config_dir);
} // namespace

std::vector<std::string> Experiment::training_ids(int fold) const {
    return cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_)->split.complement(fold);
}

std::vector<std::string> Experiment::validation_ids(int fold) const {
    return cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_)->split.members(fold);
}

// Stage bookkeeping ----------------------------------------------------------

namespace {


std::string input_name(const fs::path& file, const fs::path& root, const fs::path& manifest) {
    const auto in_root = fs::relative(file, root);
    if (!in_root.empty() && *in_root.begin() != "..") return in_root.generic_string();
    return "dataset/" + fs::relative(file, manifest.parent_path()).generic_string();
}

std::string compute_key(Stage stage, int fold, const ExperimentConfig& cfg, const std::vector<std::string>& sections,
                        const std::vector<std::pair<std::string, std::string>>& inputs) {
    const auto texts = config_sections(cfg);
    std::string material = "stage " + stage_command(stage) + "\nfold " + std::to_string(fold) + "\nseed " +
                           std::to_string(cfg.seed) + "\nfolds " + std::to_string(cfg.folds) + "\n";
    for (const auto& s : sections) material += texts.at(s);
    for (const auto& [name, hash] : inputs) material += "input " + name + " " + hash + "\n";
    return sha1_hex(material);
}

std::vector<std::string> stage_sections(Stage stage, const ExperimentConfig& cfg) {
    switch (stage) {
    case Stage::synth: return {"phantom"};
    case Stage::semi: return {"data", "segmentation", "loss", "schedule", "adam", "semi"};
    case Stage::reg: return {"data", "schedule", "adam", "registration"};
    case Stage::ssl: return {"data", "registration"};
    case Stage::fused: return {"fusion"};
    case Stage::final_net:
        if (cfg.final_train.warm_start) return {"data", "segmentation", "loss", "schedule", "adam", "final", "semi"};
        return {"data", "segmentation", "loss", "schedule", "adam", "final"};
    case Stage::baseline: return {"data", "segmentation", "loss", "schedule", "adam", "final"};
    case Stage::eval: return {"data", "segmentation"};
    }
    return {};
}

bool record_matches(const fs::path& dir, const std::string& key) {
    const fs::path record = dir / kRecordFile;
    if (!fs::exists(record)) return false;
    json j;
    try {
        j = json::parse(read_text(record));
    } catch (const json::exception&) {
        return false;
    }
    if (j.value("key", "") != key) return false;
    const auto outputs = j.value("outputs", json::object());
    const auto present = files_under(dir);
    if (present.size() != outputs.size()) return false;
    for (const auto& f : present) {
        const auto name = generic_relative(f, dir);
        if (!outputs.contains(name) || outputs[name].get<std::string>() != file_blob_hash(f)) return false;
    }
    return true;
}

} // namespace

bool Experiment::run(Stage stage, int fold) {
    switch (stage) {
    case Stage::synth: return synth();
    case Stage::semi: return train_semi(fold);
    case Stage::reg: return train_reg(fold);
    case Stage::ssl: return propagate(fold);
    case Stage::fused: return fuse(fold);
    case Stage::final_net: return train_final(fold);
    case Stage::baseline: return train_baseline(fold);
    case Stage::eval: return evaluate(fold);
    }
    return false;
}

namespace {

// Shared plumbing for one stage invocation: prerequisite checks, the skip test,
// and the run record.
class StageDriver {
public:
    StageDriver(Stage stage, int fold, const ExperimentConfig& cfg, fs::path root, fs::path dir, Logger log,
                bool resume)
        : stage_(stage), fold_(fold), cfg_(cfg), root_(std::move(root)), dir_(std::move(dir)), log_(log),
          resume_(resume) {}

    void add_inputs(const std::vector<fs::path>& files, const fs::path& manifest) {
        for (const auto& f : files) inputs_.emplace_back(input_name(f, root_, manifest), file_blob_hash(f));
    }

    const std::string& key() {
        if (key_.empty()) key_ = compute_key(stage_, fold_, cfg_, stage_sections(stage_, cfg_), inputs_);
        return key_;
    }

    bool up_to_date() {
        if (record_matches(dir_, key())) {
            log_(stage_label(stage_, fold_) + "up to date, skipping");
            return true;
        }
        return false;
    }

    // Clears stale outputs; progress files survive when resuming.
    void prepare() {
        fs::create_directories(dir_);
        fs::remove(dir_ / kRecordFile);
        for (const auto& e : fs::directory_iterator(dir_)) {
            const auto name = e.path().filename().string();
            if (resume_ && (name == kProgressFile || name == kProgressCheckpoint)) continue;
            fs::remove_all(e.path());
        }
        started_ = std::chrono::steady_clock::now();
        log_(stage_label(stage_, fold_) + "running");
    }

    void finish(const json& metrics, const std::string& command) {
        json outputs = json::object();
        for (const auto& f : files_under(dir_)) outputs[generic_relative(f, dir_)] = file_blob_hash(f);
        json inputs = json::object();
        for (const auto& [name, hash] : inputs_) inputs[name] = hash;
        json record{{"stage", stage_command(stage_)},
                    {"fold", stage_ == Stage::synth ? json(nullptr) : json(fold_)},
                    {"seed", cfg_.seed},
                    {"key", key()},
                    {"config_hash", sha1_hex(to_ini(cfg_))},
                    {"config", to_ini(cfg_)},
                    {"command", command},
                    {"inputs", inputs},
                    {"outputs", outputs},
                    {"metrics", metrics}};
        write_text_atomic(dir_ / kRecordFile, record.dump(1) + "\n");
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
        char buf[64];
        std::snprintf(buf, sizeof buf, "done in %.1f s", secs);
        log_(stage_label(stage_, fold_) + buf);
    }

    Progress progress() { return Progress(dir_, key(), resume_); }
    const fs::path& dir() const { return dir_; }
    void log(const std::string& msg) const { log_(stage_label(stage_, fold_) + msg); }

private:
    Stage stage_;
    int fold_;
    const ExperimentConfig& cfg_;
    fs::path root_;
    fs::path dir_;
    Logger log_;
    bool resume_;
    std::vector<std::pair<std::string, std::string>> inputs_;
    std::string key_;
    std::chrono::steady_clock::time_point started_;
};

std::string command_line(Stage stage, int fold, std::uint64_t seed) {
    std::string c = "colabel " + stage_command(stage) + " --config <config> --seed " + std::to_string(seed);
    if (stage != Stage::synth) c += " --fold " + std::to_string(fold);
    return c;
}

} // namespace

// The pieces every fold-level stage needs -----------------------------------

struct FoldData {
    std::shared_ptr<const LoadedData> data;
    std::vector<Volume> train;
    std::vector<CentralAnnotation> centrals;
    std::vector<Volume> validation;
    std::vector<LabelVolume> validation_refs;
    std::vector<LabelVolume> train_refs; // evaluation only
};

namespace {

FoldData split_fold(const std::shared_ptr<const LoadedData>& data, int fold) {
    FoldData fd;
    fd.data = data;
    for (std::size_t i = 0; i < data->volumes.size(); ++i) {
        const auto& v = data->volumes[i];
        if (data->split.fold_of(v.id) == fold) {
            fd.validation.push_back(v);
            fd.validation_refs.push_back(data->references[i]);
        } else {
            fd.train.push_back(v);
            fd.train_refs.push_back(data->references[i]);
            fd.centrals.push_back(central_annotation(data->references[i]));
        }
    }
    return fd;
}

void check_fold(int fold, const ExperimentConfig& cfg) {
    if (fold < 0 || fold >= cfg.folds) {
        throw ConfigError("fold " + std::to_string(fold) + " outside [0, " + std::to_string(cfg.folds) + ")");
    }
}

} // namespace

namespace {

// Upstream stage output must exist and still match the current configuration.
void require_record(const fs::path& dir, Stage stage, int fold) {
    if (!fs::exists(dir / kRecordFile)) {
        std::string cmd = "colabel " + stage_command(stage);
        if (stage != Stage::synth) cmd += " --fold " + std::to_string(fold);
        const std::string msg = stage_dir_name(stage) + " output for fold " + std::to_string(fold) +
                                " is missing; run `" + cmd + "` first";
        throw PrerequisiteError(msg);
    }
}

} // namespace

#define COLABEL_STAGE_PREAMBLE(STAGE)                                                                     \
    check_fold(fold, config_);                                                                            \
    Logger log(impl_->log_mutex, options_);                                                               \
    StageDriver driver(STAGE, fold, config_, root_, stage_dir(STAGE, fold), log, options_.resume)

namespace {

std::shared_ptr<const LoadedData> cached_data(std::mutex& m, std::shared_ptr<const LoadedData>& slot,
                                              const ExperimentConfig& cfg, const fs::path& root,
                                              const fs::path& config_dir) {
    std::lock_guard lock(m);
    if (!slot) {
        const fs::path manifest = dataset_manifest_path(cfg, root, config_dir);
        if (!fs::exists(manifest)) {
            if (cfg.data.source == "phantom") {
                throw PrerequisiteError("phantom dataset missing under " + (root / "data").string() +
                                        "; run `colabel synth` first");
            }
            throw PrerequisiteError("dataset manifest " + manifest.string() +
                                    " not found; create it with `colabel index`");
        }
        if (cfg.data.source == "phantom") require_record(root / "data", Stage::synth, 0);
        slot = load_data(cfg, manifest);
    }
    return slot;
}

} // namespace

bool Experiment::synth() {
    if (config_.data.source != "phantom") {
        throw ConfigError("synth: data.source is '" + config_.data.source + "', not phantom");
    }
    const int fold = 0;
    Logger log(impl_->log_mutex, options_);
    StageDriver driver(Stage::synth, fold, config_, root_, stage_dir(Stage::synth, fold), log, false);
    if (driver.up_to_date()) return false;
    driver.prepare();
    {
        std::lock_guard lock(impl_->data_mutex);
        impl_->data.reset();
    }
    const auto cases = generate_phantom(config_.phantom);
    std::vector<DatasetEntry> entries;
    for (const auto& c : cases) {
        const fs::path image = driver.dir() / (c.volume.id + ".mhd");
        const fs::path reference = driver.dir() / (c.volume.id + "_segmentation.mhd");
        write_metaimage(image, c.volume, ElementType::Float);
        write_label_metaimage(reference, c.truth);
        entries.push_back({c.volume.id, image, reference});
    }
    write_dataset_manifest(driver.dir() / "dataset.csv", entries);
    driver.finish(json{{"volumes", cases.size()}}, command_line(Stage::synth, fold, config_.seed));
    return true;
}

namespace {

// Runs `train` under per-epoch progress checkpoints and returns the full loss
// trace, including epochs restored from an earlier interrupted run.
std::vector<double> run_resumable(StageDriver& driver, UShapedNet<float>& body, ad::AdamState<float>& adam,
                                  const RunOptions& options, const std::function<void(const EpochHooks&)>& train,
                                  const json& extra = json::object()) {
    const Progress progress = driver.progress();
    progress.restore(body, adam);
    std::vector<double> trace = progress.trace();
    EpochHooks hooks;
    hooks.start_epoch = progress.start_epoch();
    if (progress.resuming()) driver.log("resuming at epoch " + std::to_string(hooks.start_epoch));
    int ran = 0;
    hooks.on_epoch_end = [&](int epoch, double loss) {
        trace.push_back(loss);
        progress.save(epoch + 1, trace, body, adam, extra);
        if (options.epoch_budget > 0 && ++ran >= options.epoch_budget) {
            throw StagePaused("paused after epoch " + std::to_string(epoch + 1) + "; continue with --resume");
        }
    };
    train(hooks);
    progress.clear();
    return trace;
}

} // namespace

bool Experiment::train_semi(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::semi);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    driver.add_inputs(data->files, data->manifest);
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    const auto cfg = config_.semi_config(derive_seed(config_.seed, {kSemiTrain, static_cast<std::uint64_t>(fold)}));
    SegmentationNet net(config_.segmentation, derive_seed(config_.seed, {kSemiInit, static_cast<std::uint64_t>(fold)}));
    ad::AdamState<float> adam{config_.adam, 0, {}, {}};

    const auto labeled = central_slices(fd.train, fd.centrals);
    std::vector<Image2D> unlabeled;
    for (const auto& v : fd.train) {
        for (int n = 0; n < v.depth(); ++n) {
            if (n != central_index(v.depth())) unlabeled.push_back(v.voxels.slice(n));
        }
    }

    const auto trace = run_resumable(driver, net.body(), adam, options_, [&](const EpochHooks& h) {
        warmup_train(net, adam, labeled, cfg, h);
        EpochHooks rest = h;
        rest.start_epoch = std::max(h.start_epoch, cfg.warmup_epochs);
        semi_train(net, adam, labeled, unlabeled, cfg, rest);
    });
    save_net(driver.dir() / kNetFile, net.body());
    const auto masks = emit_semi_labels(net, fd.train);
    write_label_set(driver.dir(), masks, fd.train);
    driver.finish(json{{"loss_trace", trace}, {"labels", masks.size()}}, command_line(Stage::semi, fold, config_.seed));
    return true;
}

bool Experiment::train_reg(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::reg);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    driver.add_inputs(data->files, data->manifest);
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    const auto cfg =
        config_.registration_config(derive_seed(config_.seed, {kRegTrain, static_cast<std::uint64_t>(fold)}));
    RegistrationNet net(cfg, derive_seed(config_.seed, {kRegInit, static_cast<std::uint64_t>(fold)}));
    ad::AdamState<float> adam{config_.adam, 0, {}, {}};

    json extra = Progress(driver.dir(), driver.key(), options_.resume).extra();
    if (extra.empty()) {
        const auto before = evaluate_registration(net, fd.train);
        extra = json{{"similarity_before", before.similarity}, {"smoothness_before", before.smoothness}};
    }
    const auto trace = run_resumable(
        driver, net.body(), adam, options_, [&](const EpochHooks& h) { train_registration(net, adam, fd.train, cfg, h); },
        extra);
    const auto after = evaluate_registration(net, fd.train);
    save_net(driver.dir() / kNetFile, net.body());
    json metrics = extra;
    metrics["loss_trace"] = trace;
    metrics["similarity_after"] = after.similarity;
    metrics["smoothness_after"] = after.smoothness;
    driver.finish(metrics, command_line(Stage::reg, fold, config_.seed));
    return true;
}

bool Experiment::propagate(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::ssl);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    const fs::path reg_dir = stage_dir(Stage::reg, fold);
    require_record(reg_dir, Stage::reg, fold);
    driver.add_inputs(data->files, data->manifest);
    driver.add_inputs({reg_dir / kNetFile}, data->manifest);
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    const auto cfg = config_.registration_config(0);
    RegistrationNet net(cfg, 0);
    load_net(reg_dir / kNetFile, net.body());

    std::vector<PseudoMask> masks;
    for (std::size_t i = 0; i < fd.train.size(); ++i) {
        for (auto& m : propagate_labels(net, fd.train[i], fd.centrals[i])) masks.push_back(std::move(m));
        if (config_.export_fields) {
            const auto& v = fd.train[i];
            const int c = central_index(v.depth());
            for (int n = 0; n < v.depth(); ++n) {
                if (n == c) continue;
                const int from = n < c ? n + 1 : n - 1;
                const auto field = reg_forward(net, {v.voxels.slice(n), v.voxels.slice(from)});
                write_field_metaimage(driver.dir() / "fields" / (v.id + "_" + std::to_string(n) + ".mhd"), field);
            }
        }
    }
    write_label_set(driver.dir(), masks, fd.train);
    driver.finish(json{{"labels", masks.size()}}, command_line(Stage::ssl, fold, config_.seed));
    return true;
}

bool Experiment::fuse(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::fused);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    const fs::path semi_dir = stage_dir(Stage::semi, fold);
    const fs::path ssl_dir = stage_dir(Stage::ssl, fold);
    require_record(semi_dir, Stage::semi, fold);
    require_record(ssl_dir, Stage::ssl, fold);
    for (const auto& dir : {semi_dir, ssl_dir}) {
        std::vector<fs::path> files{dir / "labels.csv"};
        for (const auto& f : files_under(dir / "labels")) files.push_back(f);
        driver.add_inputs(files, data->manifest);
    }
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    const auto semis = read_label_set(semi_dir);
    const auto ssls = read_label_set(ssl_dir);
    for (const auto& m : semis) {
        if (m.provenance != Provenance::semi) throw PairingError("semi label set holds " + to_string(m.provenance));
    }
    for (const auto& m : ssls) {
        if (m.provenance != Provenance::ssl) throw PairingError("ssl label set holds " + to_string(m.provenance));
    }
    const auto fused = fuse_dataset(semis, ssls, config_.fusion);
    std::size_t empty = 0;
    for (const auto& m : fused) empty += count_foreground(m.mask.values()) == 0;
    write_label_set(driver.dir(), fused, fd.train);
    driver.finish(json{{"labels", fused.size()}, {"empty", empty}, {"excluded", semis.size() - fused.size()}},
                  command_line(Stage::fused, fold, config_.seed));
    return true;
}

bool Experiment::train_final(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::final_net);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    const fs::path fused_dir = stage_dir(Stage::fused, fold);
    require_record(fused_dir, Stage::fused, fold);
    driver.add_inputs(data->files, data->manifest);
    {
        std::vector<fs::path> files{fused_dir / "labels.csv"};
        for (const auto& f : files_under(fused_dir / "labels")) files.push_back(f);
        driver.add_inputs(files, data->manifest);
    }
    const fs::path semi_net = stage_dir(Stage::semi, fold) / kNetFile;
    if (config_.final_train.warm_start) {
        require_record(stage_dir(Stage::semi, fold), Stage::semi, fold);
        driver.add_inputs({semi_net}, data->manifest);
    }
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    const auto fused = read_label_set(fused_dir);
    const auto ds = build_mixed_dataset(fd.train, fd.centrals, fused, !config_.fusion.exclude_disagreement);
    const auto cfg = config_.final_config(derive_seed(config_.seed, {kSegTrain, static_cast<std::uint64_t>(fold)}));
    SegmentationNet net(config_.segmentation, derive_seed(config_.seed, {kSegInit, static_cast<std::uint64_t>(fold)}));
    if (cfg.warm_start) load_net(semi_net, net.body());
    ad::AdamState<float> adam{config_.adam, 0, {}, {}};
    const auto trace = run_resumable(driver, net.body(), adam, options_, [&](const EpochHooks& h) { colabel::train_final(net, adam, ds, cfg, h); });
    save_net(driver.dir() / kNetFile, net.body());
    driver.finish(json{{"loss_trace", trace},
                       {"entries", ds.entries.size()},
                       {"manual", ds.count(Provenance::manual)},
                       {"fused", ds.count(Provenance::fused)}},
                  command_line(Stage::final_net, fold, config_.seed));
    return true;
}

bool Experiment::train_baseline(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::baseline);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    driver.add_inputs(data->files, data->manifest);
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    const auto centrals = central_slices(fd.train, fd.centrals);
    // Same initialisation and training seed as the final network: paired runs.
    auto cfg = config_.final_config(derive_seed(config_.seed, {kSegTrain, static_cast<std::uint64_t>(fold)}));
    cfg.warm_start = false;
    SegmentationNet net(config_.segmentation, derive_seed(config_.seed, {kSegInit, static_cast<std::uint64_t>(fold)}));
    ad::AdamState<float> adam{config_.adam, 0, {}, {}};
    const auto trace = run_resumable(driver, net.body(), adam, options_, [&](const EpochHooks& h) { train_fs_lcs(net, adam, centrals, cfg, h); });
    save_net(driver.dir() / kNetFile, net.body());
    driver.finish(json{{"loss_trace", trace}, {"entries", centrals.size()}},
                  command_line(Stage::baseline, fold, config_.seed));
    return true;
}

bool Experiment::evaluate(int fold) {
    COLABEL_STAGE_PREAMBLE(Stage::eval);
    const auto data = cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);
    driver.add_inputs(data->files, data->manifest);

    struct Method {
        std::string name;
        Stage stage;
    };
    std::vector<Method> methods;
    for (const Method& m : {Method{kOurs, Stage::final_net}, Method{kBaseline, Stage::baseline}}) {
        const fs::path dir = stage_dir(m.stage, fold);
        if (!fs::exists(dir / kRecordFile)) continue;
        methods.push_back(m);
        driver.add_inputs({dir / kNetFile}, data->manifest);
    }
    if (methods.empty()) {
        throw PrerequisiteError("no trained network for fold " + std::to_string(fold) +
                                "; run `colabel train-final` or `colabel train-baseline` first");
    }
    std::vector<Stage> label_stages;
    for (Stage s : {Stage::semi, Stage::ssl, Stage::fused}) {
        const fs::path dir = stage_dir(s, fold);
        if (!fs::exists(dir / kRecordFile)) continue;
        label_stages.push_back(s);
        std::vector<fs::path> files{dir / "labels.csv"};
        for (const auto& f : files_under(dir / "labels")) files.push_back(f);
        driver.add_inputs(files, data->manifest);
    }
    if (driver.up_to_date()) return false;
    driver.prepare();

    const FoldData fd = split_fold(data, fold);
    std::vector<MetricsReport> reports;
    json summary = json::object();
    for (const auto& m : methods) {
        SegmentationNet net(config_.segmentation, 0);
        load_net(stage_dir(m.stage, fold) / kNetFile, net.body());
        std::vector<MetricsReport> mine;
        for (std::size_t i = 0; i < fd.validation.size(); ++i) {
            const auto& v = fd.validation[i];
            const MaskGrid pred = predict_volume(net, v);
            write_label_metaimage(driver.dir() / "predictions" / m.name / (v.id + ".mhd"),
                                  LabelVolume{v.id, pred, v.spacing});
            MetricsReport r = evaluate_volume(pred, fd.validation_refs[i].labels, v.spacing);
            r.method = m.name;
            r.fold = fold;
            r.volume_id = v.id;
            if (!r.assd) driver.log("warning: ASSD undefined for " + m.name + " on " + v.id + " (empty mask)");
            if (!r.ravd) driver.log("warning: RAVD undefined for " + v.id + " (empty reference)");
            mine.push_back(r);
            reports.push_back(r);
        }
        const auto agg = colabel::aggregate(mine);
        summary[m.name] = json{{"dice_mean", agg.dice.mean}, {"dice_sd", agg.dice.sd}};
    }

    std::ostringstream csv;
    write_metrics_csv(csv, reports);
    write_text_atomic(driver.dir() / "metrics.csv", csv.str());
    json rj = json::array();
    for (const auto& r : reports) {
        rj.push_back(json{{"method", r.method},
                          {"fold", r.fold},
                          {"volume_id", r.volume_id},
                          {"dice", r.dice},
                          {"iou", r.iou},
                          {"assd", optional_json(r.assd)},
                          {"ravd", optional_json(r.ravd)}});
    }
    write_text_atomic(driver.dir() / "reports.json", rj.dump(1) + "\n");

    // Pseudo-label quality against the full references of the training volumes.
    if (!label_stages.empty()) {
        std::map<Stage, std::map<SliceKey, Mask2D>> sets;
        for (Stage s : label_stages) {
            for (auto& m : read_label_set(stage_dir(s, fold))) sets[s].emplace(m.key(), std::move(m.mask));
        }
        std::string text = "volume_id,slice,distance";
        for (Stage s : label_stages) text += "," + stage_dir_name(s) + "_precision," + stage_dir_name(s) + "_dice";
        text += "\n";
        std::size_t slices = 0, fused_best = 0;
        for (std::size_t i = 0; i < fd.train.size(); ++i) {
            const auto& v = fd.train[i];
            const int c = central_index(v.depth());
            for (int n = 0; n < v.depth(); ++n) {
                if (n == c) continue;
                const SliceKey key{v.id, n};
                const Mask2D truth = fd.train_refs[i].labels.slice(n);
                text += v.id + "," + std::to_string(n) + "," + std::to_string(std::abs(n - c));
                std::map<Stage, double> prec;
                for (Stage s : label_stages) {
                    const auto it = sets[s].find(key);
                    if (it == sets[s].end()) {
                        text += ",undefined,undefined";
                        continue;
                    }
                    prec[s] = precision(it->second, truth);
                    text += "," + format_metric(prec[s]) + "," +
                            format_metric(dice(single_slice(it->second), single_slice(truth)));
                }
                if (prec.count(Stage::fused) && prec.count(Stage::semi) && prec.count(Stage::ssl)) {
                    ++slices;
                    fused_best += prec[Stage::fused] >= prec[Stage::semi] && prec[Stage::fused] >= prec[Stage::ssl];
                }
                text += "\n";
            }
        }
        write_text_atomic(driver.dir() / "label_quality.csv", text);
        if (slices > 0) {
            summary["fused_precision_best_fraction"] = static_cast<double>(fused_best) / static_cast<double>(slices);
        }
    }
    driver.finish(summary, command_line(Stage::eval, fold, config_.seed));
    return true;
}

#undef COLABEL_STAGE_PREAMBLE

void Experiment::run_fold(int fold) {
    for (Stage s : {Stage::semi, Stage::reg, Stage::ssl, Stage::fused, Stage::final_net, Stage::baseline, Stage::eval}) {
        run(s, fold);
    }
}

void Experiment::crossval() {
    if (config_.data.source == "phantom") synth();
    cached_data(impl_->data_mutex, impl_->data, config_, root_, config_dir_);

    std::atomic<int> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        for (int fold = next++; fold < config_.folds; fold = next++) {
            {
                std::lock_guard lock(error_mutex);
                if (error) return;
            }
            try {
                run_fold(fold);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    const int workers = std::min(options_.threads, config_.folds);
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    aggregate();
}

void Experiment::aggregate() {
    Logger log(impl_->log_mutex, options_);
    std::vector<MetricsReport> reports;
    std::string quality;
    for (int fold = 0; fold < config_.folds; ++fold) {
        const fs::path dir = stage_dir(Stage::eval, fold);
        require_record(dir, Stage::eval, fold);
        for (auto& r : read_reports(dir / "reports.json")) reports.push_back(std::move(r));
        if (fs::exists(dir / "label_quality.csv")) {
            std::istringstream in(read_text(dir / "label_quality.csv"));
            std::string line;
            std::getline(in, line);
            if (quality.empty()) quality = "fold," + line + "\n";
            while (std::getline(in, line)) {
                if (!line.empty()) quality += std::to_string(fold) + "," + line + "\n";
            }
        }
    }
    // Methods first, then folds, so the pooled CSV does not depend on fold completion order.
    std::stable_sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
        auto rank = [](const std::string& m) { return m == kOurs ? 0 : m == kBaseline ? 1 : 2; };
        if (rank(a.method) != rank(b.method)) return rank(a.method) < rank(b.method);
        return a.fold < b.fold;
    });
    std::ostringstream csv;
    write_metrics_csv(csv, reports);
    const fs::path out = root_ / "crossval";
    write_text_atomic(out / "metrics.csv", csv.str());
    if (!quality.empty()) write_text_atomic(out / "label_quality.csv", quality);

    json summary = json::object();
    for (const char* method : {kOurs, kBaseline}) {
        std::vector<MetricsReport> mine;
        for (const auto& r : reports) {
            if (r.method == method) mine.push_back(r);
        }
        if (mine.empty()) continue;
        const auto agg = colabel::aggregate(mine);
        summary[method] = json{{"dice_mean", agg.dice.mean}, {"dice_sd", agg.dice.sd}, {"volumes", mine.size()}};
        char buf[128];
        std::snprintf(buf, sizeof buf, "[crossval] %s: Dice %.4f +/- %.4f over %zu volumes", method, agg.dice.mean,
                      agg.dice.sd, mine.size());
        log(buf);
    }
    write_text_atomic(out / "summary.json", summary.dump(1) + "\n");
}

} // namespace colabel
