#include "colabel/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <algorithm>

namespace colabel {
namespace {

struct Counts {
    std::size_t pred = 0, ref = 0, both = 0;
};

Counts count(const MaskGrid& pred, const MaskGrid& ref, const char* op) {
    if (pred.depth() != ref.depth() || pred.rows() != ref.rows() || pred.cols() != ref.cols()) {
        throw DimensionError(std::string(op) + ": mask shapes differ");
    }
    Counts c;
    const auto p = pred.values();
    const auto r = ref.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool a = p[i] != 0, b = r[i] != 0;
        c.pred += a;
        c.ref += b;
        c.both += a && b;
    }
    return c;
}

// Lower envelope of parabolas along one line; f holds squared distances in, out.
void distance_1d(std::vector<double>& f, std::size_t n, double step, std::vector<int>& v, std::vector<double>& z,
                 std::vector<double>& d) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const double w2 = step * step;
    int k = -1;
    for (std::size_t q = 0; q < n; ++q) {
        if (!std::isfinite(f[q])) continue;
        const double qd = static_cast<double>(q);
        if (k < 0) {
            k = 0;
            v[0] = static_cast<int>(q);
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s;
        while (true) {
            const double p = v[k];
            s = ((f[q] + w2 * qd * qd) - (f[v[k]] + w2 * p * p)) / (2.0 * w2 * (qd - p));
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        if (s <= z[k]) {
            // only reachable for k == 0: the new parabola dominates everywhere
            v[0] = static_cast<int>(q);
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        ++k;
        v[k] = static_cast<int>(q);
        z[k] = s;
        z[k + 1] = inf;
    }
    if (k < 0) return; // no finite values: stays +inf
    int j = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double qd = static_cast<double>(q);
        while (z[j + 1] < qd) ++j;
        const double diff = qd - v[j];
        d[q] = w2 * diff * diff + f[v[j]];
    }
    for (std::size_t q = 0; q < n; ++q) f[q] = d[q];
}

} // namespace

double dice(const MaskGrid& pred, const MaskGrid& ref) {
    const auto c = count(pred, ref, "dice");
    if (c.pred + c.ref == 0) return 1.0;
    return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.ref);
}

double iou(const MaskGrid& pred, const MaskGrid& ref) {
    const auto c = count(pred, ref, "iou");
    const std::size_t uni = c.pred + c.ref - c.both;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.both) / static_cast<double>(uni);
}

MaskGrid surface(const MaskGrid& mask) {
    const int nd = mask.depth(), nr = mask.rows(), nc = mask.cols();
    MaskGrid out(nd, nr, nc);
    auto background = [&](int n, int r, int c) {
        if (n < 0 || n >= nd || r < 0 || r >= nr || c < 0 || c >= nc) return true;
        return mask(n, r, c) == 0;
    };
    for (int n = 0; n < nd; ++n) {
        for (int r = 0; r < nr; ++r) {
            for (int c = 0; c < nc; ++c) {
                if (mask(n, r, c) == 0) continue;
                if (background(n - 1, r, c) || background(n + 1, r, c) || background(n, r - 1, c) ||
                    background(n, r + 1, c) || background(n, r, c - 1) || background(n, r, c + 1)) {
                    out(n, r, c) = 1;
                }
            }
        }
    }
    return out;
}

std::vector<double> squared_distance_transform(const MaskGrid& features, const Spacing& spacing) {
    const std::size_t nd = features.depth(), nr = features.rows(), nc = features.cols();
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(features.size());
    const auto f = features.values();
    for (std::size_t i = 0; i < f.size(); ++i) dist[i] = f[i] != 0 ? 0.0 : inf;

    const std::size_t longest = std::max({nd, nr, nc});
    std::vector<double> line(longest), scratch(longest), z(longest + 1);
    std::vector<int> v(longest);
    auto pass = [&](std::size_t len, std::size_t stride, double step, auto&& starts) {
        for (std::size_t base : starts) {
            for (std::size_t i = 0; i < len; ++i) line[i] = dist[base + i * stride];
            distance_1d(line, len, step, v, z, scratch);
            for (std::size_t i = 0; i < len; ++i) dist[base + i * stride] = line[i];
        }
    };
    std::vector<std::size_t> starts;
    starts.clear();
    for (std::size_t n = 0; n < nd; ++n)
        for (std::size_t r = 0; r < nr; ++r) starts.push_back((n * nr + r) * nc);
    pass(nc, 1, spacing.col, starts);
    starts.clear();
    for (std::size_t n = 0; n < nd; ++n)
        for (std::size_t c = 0; c < nc; ++c) starts.push_back(n * nr * nc + c);
    pass(nr, nc, spacing.row, starts);
    starts.clear();
    for (std::size_t r = 0; r < nr; ++r)
        for (std::size_t c = 0; c < nc; ++c) starts.push_back(r * nc + c);
    pass(nd, nr * nc, spacing.slice, starts);
    return dist;
}

double assd(const MaskGrid& pred, const MaskGrid& ref, const Spacing& spacing) {
    const auto c = count(pred, ref, "assd");
    if (c.pred == 0 || c.ref == 0) throw UndefinedMetricError("assd: undefined for an empty mask");
    const MaskGrid sp = surface(pred), sr = surface(ref);
    const auto to_ref = squared_distance_transform(sr, spacing);
    const auto to_pred = squared_distance_transform(sp, spacing);
    double total = 0.0;
    std::size_t n = 0;
    const auto a = sp.values();
    const auto b = sr.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i]) total += std::sqrt(to_ref[i]), ++n;
        if (b[i]) total += std::sqrt(to_pred[i]), ++n;
    }
    return total / static_cast<double>(n);
}

double ravd(const MaskGrid& pred, const MaskGrid& ref) {
    const auto c = count(pred, ref, "ravd");
    if (c.ref == 0) throw UndefinedMetricError("ravd: undefined for an empty reference");
    return (static_cast<double>(c.pred) - static_cast<double>(c.ref)) / static_cast<double>(c.ref);
}

std::optional<double> MetricsReport::ravd_abs() const {
    if (!ravd) return std::nullopt;
    return std::abs(*ravd);
}

MetricsReport evaluate_volume(const MaskGrid& pred, const MaskGrid& ref, const Spacing& spacing) {
    MetricsReport r;
    r.dice = dice(pred, ref);
    r.iou = iou(pred, ref);
    try {
        r.assd = assd(pred, ref, spacing);
    } catch (const UndefinedMetricError&) {
    }
    try {
        r.ravd = ravd(pred, ref);
    } catch (const UndefinedMetricError&) {
    }
    return r;
}

Summary summarize(std::span<const std::optional<double>> values) {
    Summary s;
    double sum = 0.0;
    for (const auto& v : values) {
        if (!v) {
            ++s.undefined;
            continue;
        }
        sum += *v;
        ++s.count;
    }
    if (s.count == 0) return s;
    s.mean = sum / static_cast<double>(s.count);
    double sq = 0.0;
    for (const auto& v : values) {
        if (v) sq += (*v - s.mean) * (*v - s.mean);
    }
    s.sd = std::sqrt(sq / static_cast<double>(s.count));
    return s;
}

AggregateReport aggregate(std::span<const MetricsReport> reports) {
    std::vector<std::optional<double>> d, j, a, r, ra;
    for (const auto& m : reports) {
        d.emplace_back(m.dice);
        j.emplace_back(m.iou);
        a.push_back(m.assd);
        r.push_back(m.ravd);
        ra.push_back(m.ravd_abs());
    }
    return {summarize(d), summarize(j), summarize(a), summarize(r), summarize(ra)};
}

std::string format_metric(std::optional<double> value) {
    if (!value) return "undefined";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", *value);
    return buf;
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsReport> reports) {
    out << "method,fold,volume_id,dice,iou,assd,ravd,ravd_abs,aggregate\n";
    auto summary_rows = [&](const std::string& method, const std::string& fold, std::span<const MetricsReport> group) {
        const auto agg = aggregate(group);
        auto value = [](const Summary& s, bool sd) -> std::optional<double> {
            if (s.count == 0) return std::nullopt;
            return sd ? s.sd : s.mean;
        };
        for (bool sd : {false, true}) {
            out << method << ',' << fold << ",," << format_metric(value(agg.dice, sd)) << ','
                << format_metric(value(agg.iou, sd)) << ',' << format_metric(value(agg.assd, sd)) << ','
                << format_metric(value(agg.ravd, sd)) << ',' << format_metric(value(agg.ravd_abs, sd)) << ','
                << (sd ? "sd" : "mean") << '\n';
        }
    };

    // Keep first-appearance order of methods and folds.
    std::vector<std::string> methods;
    for (const auto& r : reports) {
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    }
    for (const auto& method : methods) {
        std::vector<MetricsReport> all;
        std::vector<int> folds;
        for (const auto& r : reports) {
            if (r.method != method) continue;
            all.push_back(r);
            if (std::find(folds.begin(), folds.end(), r.fold) == folds.end()) folds.push_back(r.fold);
        }
        for (int fold : folds) {
            std::vector<MetricsReport> group;
            for (const auto& r : all) {
                if (r.fold != fold) continue;
                group.push_back(r);
                out << method << ',' << fold << ',' << r.volume_id << ',' << format_metric(r.dice) << ','
                    << format_metric(r.iou) << ',' << format_metric(r.assd) << ',' << format_metric(r.ravd) << ','
                    << format_metric(r.ravd_abs()) << ",volume\n";
            }
            summary_rows(method, std::to_string(fold), group);
        }
        summary_rows(method, "all", all);
    }
}

} // namespace colabel
