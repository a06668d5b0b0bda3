#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "colabel/volume.hpp"

namespace colabel {

// Both empty counts as perfect agreement (1.0).
double dice(const MaskGrid& pred, const MaskGrid& ref);
double iou(const MaskGrid& pred, const MaskGrid& ref);

// Foreground voxels with a face neighbour in the background; outside the grid is background.
MaskGrid surface(const MaskGrid& mask);

// Average symmetric surface distance in spacing units. UndefinedMetricError if either mask is empty.
double assd(const MaskGrid& pred, const MaskGrid& ref, const Spacing& spacing);

// (|P| - |R|) / |R|. UndefinedMetricError for an empty reference.
double ravd(const MaskGrid& pred, const MaskGrid& ref);

// Squared anisotropic distance from every voxel to the nearest set voxel of
// `features` (+inf everywhere when there is none).
std::vector<double> squared_distance_transform(const MaskGrid& features, const Spacing& spacing);

struct MetricsReport {
    std::string method;
    int fold = -1;
    std::string volume_id;
    double dice = 0.0;
    double iou = 0.0;
    std::optional<double> assd; // empty when undefined
    std::optional<double> ravd;

    std::optional<double> ravd_abs() const;
};

MetricsReport evaluate_volume(const MaskGrid& pred, const MaskGrid& ref, const Spacing& spacing);

struct Summary {
    double mean = 0.0;
    double sd = 0.0; // population standard deviation
    std::size_t count = 0;
    std::size_t undefined = 0; // values left out of the summary
};

struct AggregateReport {
    Summary dice, iou, assd, ravd, ravd_abs;
};

Summary summarize(std::span<const std::optional<double>> values);
AggregateReport aggregate(std::span<const MetricsReport> reports);

// Header: method,fold,volume_id,dice,iou,assd,ravd,ravd_abs,aggregate
// Per-volume rows carry aggregate "volume"; each (method, fold) group is
// followed by "mean" and "sd" rows, and each method by overall rows with fold "all".
void write_metrics_csv(std::ostream& out, std::span<const MetricsReport> reports);

std::string format_metric(std::optional<double> value); // %.6g, or "undefined"

} // namespace colabel
