// Acceptance runner: one PASS / FAIL / SKIP line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "colabel/autodiff/optim.hpp"
#include "colabel/config.hpp"
#include "suites.hpp"

namespace fs = std::filesystem;
using namespace colabel;
using namespace colabel::testing;

namespace {

struct Outcome {
    enum Kind { pass, fail, skip } kind = fail;
    std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Outcome::pass : Outcome::fail, std::move(detail)}; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) row.push_back(cell);
        if (!line.empty() && line.back() == ',') row.emplace_back();
        rows.push_back(std::move(row));
    }
    return rows;
}

class Runner {
public:
    Runner(fs::path cli, fs::path configs, fs::path work) : cli_(std::move(cli)), configs_(std::move(configs)), work_(std::move(work)) {}

    // Runs the command line tool with its output root at work/<tag>; returns the exit code.
    int run(const std::string& tag, const std::string& args) const {
        const fs::path root = work_ / tag;
        fs::create_directories(root);
        const std::string cmd = "COLABEL_OUTPUT_ROOT='" + root.string() + "' '" + cli_.string() + "' " + args +
                                " >> '" + (root / "log.txt").string() + "' 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string config(const std::string& name) const { return "--config '" + (configs_ / name).string() + "'"; }
    fs::path root(const std::string& tag) const { return work_ / tag; }
    const fs::path& configs() const { return configs_; }

private:
    fs::path cli_, configs_, work_;
};

// Mean Dice per (method, fold) from the pooled metrics CSV; fold -1 holds the overall mean.
std::map<std::string, std::map<int, double>> fold_means(const fs::path& csv) {
    std::map<std::string, std::map<int, double>> out;
    for (const auto& row : read_csv(csv)) {
        if (row.size() < 9 || row[8] != "mean") continue;
        out[row[0]][row[1] == "all" ? -1 : std::stoi(row[1])] = std::stod(row[3]);
    }
    return out;
}

Outcome phantom_ordering(const Runner& r) {
    const auto start = std::chrono::steady_clock::now();
    const int code = r.run("desk", "crossval " + r.config("phantom_desk.cfg"));
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
    if (code != 0) return {Outcome::fail, "crossval exited with " + std::to_string(code)};

    const auto summary = nlohmann::json::parse(slurp(r.root("desk") / "crossval" / "summary.json"));
    const double ours = summary.at("Ours").at("dice_mean").get<double>();
    const double base = summary.at("FS-LCS").at("dice_mean").get<double>();

    const auto rows = read_csv(r.root("desk") / "crossval" / "label_quality.csv");
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows.at(0).size(); ++i) col[rows[0][i]] = i;
    std::size_t slices = 0, best = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const auto& f = row.at(col.at("fused_precision"));
        const auto& s = row.at(col.at("semi_precision"));
        const auto& p = row.at(col.at("ssl_precision"));
        if (f == "undefined" || s == "undefined" || p == "undefined") continue;
        ++slices;
        best += std::stod(f) >= std::stod(s) && std::stod(f) >= std::stod(p);
    }
    const double fraction = slices ? static_cast<double>(best) / slices : 0.0;
    const bool ok = ours >= base + 0.05 && fraction >= 0.9 && minutes < 20.0;
    return verdict(ok, fmt("Ours %.4f vs FS-LCS %.4f; fused precision best on %.1f%% of slices; %.1f min", ours, base,
                           100.0 * fraction, minutes));
}

Outcome promise12(const Runner& r) {
    const char* dir = std::getenv("COLABEL_PROMISE12_DIR");
    if (!dir || !*dir) return {Outcome::skip, "set COLABEL_PROMISE12_DIR to a CaseNN.mhd directory to run"};
    const fs::path root = r.root("promise12");
    fs::create_directories(root);
    const fs::path manifest = root / "dataset.csv";
    if (r.run("promise12", "index '" + std::string(dir) + "' --out '" + manifest.string() + "'") != 0) {
        return {Outcome::fail, "indexing the dataset failed"};
    }
    const fs::path cfg = root / "promise12.cfg";
    {
        auto c = load_config(r.configs() / "default.cfg");
        c.data.source = manifest.string();
        c.data.resample = 128;
        std::ofstream(cfg) << to_ini(c);
    }
    if (const int code = r.run("promise12", "crossval --config '" + cfg.string() + "'"); code != 0) {
        return {Outcome::fail, "crossval exited with " + std::to_string(code)};
    }
    const auto means = fold_means(root / "crossval" / "metrics.csv");
    int ordered = 0;
    for (const auto& [fold, d] : means.at("Ours")) {
        if (fold >= 0 && d > means.at("FS-LCS").at(fold)) ++ordered;
    }
    const double ours = means.at("Ours").at(-1), base = means.at("FS-LCS").at(-1);
    return verdict(ours >= base + 0.05 && ours >= 0.70 && ordered >= 4,
                   fmt("Ours %.4f vs FS-LCS %.4f; ordering on %.0f of %.0f folds", ours, base, ordered,
                       static_cast<double>(means.at("Ours").size() - 1)));
}

Outcome gradients() {
    bool ok = true;
    double worst = 0.0, fraction = 1.0;
    std::string failing;
    const auto reports = gradient_suite(50, 2024);
    for (const auto& rep : reports) {
        worst = std::max(worst, rep.worst_rel_error);
        fraction = std::min(fraction, rep.min_checked_fraction);
        if (!rep.pass()) {
            ok = false;
            failing += " " + describe(rep);
        }
    }
    return verdict(ok, fmt("%.0f ops x 50 instances, worst relative error %.2e, min checked fraction %.2f",
                           static_cast<double>(reports.size()), worst, fraction) +
                           failing);
}

Outcome metric_oracles() {
    const auto rep = metric_oracle_suite(200, 2024);
    return verdict(rep.pass() && rep.cases == 200, describe(rep));
}

Outcome label_algebra() {
    const auto rep = label_algebra_suite(100, 2024);
    return verdict(rep.pass() && rep.argmax_cases == 100 && rep.fuse_cases == 100, describe(rep));
}

Outcome warps() {
    const auto rep = warp_suite(100, 2024);
    return verdict(rep.pass(), describe(rep));
}

Outcome determinism(const Runner& r) {
    for (const char* tag : {"det_a", "det_b"}) {
        if (const int code = r.run(tag, "crossval --seed 7 " + r.config("tiny.cfg")); code != 0) {
            return {Outcome::fail, std::string(tag) + ": crossval exited with " + std::to_string(code)};
        }
    }
    std::string detail;
    bool ok = true;
    for (const char* f : {"metrics.csv", "label_quality.csv"}) {
        const auto a = slurp(r.root("det_a") / "crossval" / f), b = slurp(r.root("det_b") / "crossval" / f);
        const bool same = !a.empty() && a == b;
        ok = ok && same;
        detail += std::string(detail.empty() ? "" : "; ") + f + (same ? " identical" : " differs");
    }
    return verdict(ok, detail);
}

Outcome schedule_defaults(const Runner& r) {
    const ExperimentConfig defaults;
    const auto file = load_config(r.configs() / "default.cfg");
    bool ok = std::abs(ad::lr_schedule(0) - 1e-4) < 1e-15 && std::abs(ad::lr_schedule(30) - 5e-5) < 1e-15;
    for (const auto* c : {&defaults, &file}) {
        ok = ok && c->loss.gamma == 1.0 && c->semi.warmup_epochs == 50 && c->semi.total_epochs == 100 &&
             c->semi.batch_size == 4 && c->final_train.epochs == 100 && std::abs(c->schedule(0) - 1e-4) < 1e-15 &&
             std::abs(c->schedule(30) - 5e-5) < 1e-15 && c->folds == 5;
    }
    return verdict(ok, fmt("lr(0)=%g lr(30)=%g gamma=%g warmup=%g", ad::lr_schedule(0), ad::lr_schedule(30),
                           file.loss.gamma, file.semi.warmup_epochs));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"colabel acceptance suite"};
    std::string cli, configs, work;
    bool keep = false;
    app.add_option("--cli", cli, "colabel executable")->required()->check(CLI::ExistingFile);
    app.add_option("--configs", configs, "Directory with the shipped configs")->required()->check(CLI::ExistingDirectory);
    app.add_option("--work", work, "Scratch directory")->required();
    app.add_flag("--keep", keep, "Reuse outputs from an earlier run instead of starting clean");
    CLI11_PARSE(app, argc, argv);

    if (!keep) fs::remove_all(work);
    fs::create_directories(work);
    const Runner runner(fs::absolute(cli), fs::absolute(configs), fs::absolute(work));

    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> check;
    };
    const std::vector<Criterion> criteria{
        {1, "phantom end-to-end ordering", [&] { return phantom_ordering(runner); }},
        {2, "PROMISE12 directional check", [&] { return promise12(runner); }},
        {3, "gradient suite", gradients},
        {4, "metric oracle equivalence", metric_oracles},
        {5, "pseudo-label argmax and fusion algebra", label_algebra},
        {6, "warp correctness", warps},
        {7, "crossval determinism", [&] { return determinism(runner); }},
        {8, "schedule and config defaults", [&] { return schedule_defaults(runner); }},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {Outcome::fail, std::string("exception: ") + e.what()};
        }
        const char* tag = o.kind == Outcome::pass ? "PASS" : o.kind == Outcome::skip ? "SKIP" : "FAIL";
        failures += o.kind == Outcome::fail;
        std::cout << tag << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
