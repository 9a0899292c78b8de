#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "overton/trainer.hpp"

namespace overton {

// gold[task][unit] = class index, collapsed from test-row supervision.
using GoldLabels = std::map<std::string, std::map<UnitRef, int>>;

GoldLabels gold_from_test_supervision(const RowStore& store, const Schema& schema);

struct ConfusionMatrix {
    int k = 0;
    std::vector<int64_t> counts;  // row-major, gold * k + predicted

    int64_t& at(int gold, int pred) { return counts[static_cast<size_t>(gold * k + pred)]; }
    int64_t at(int gold, int pred) const { return counts[static_cast<size_t>(gold * k + pred)]; }
    int64_t total() const;
    int64_t trace() const;
};

// Macro-averaged metrics for k > 2; positive-class (index 1) convention for
// binary confusions.
struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

Metrics metrics_from_confusion(const ConfusionMatrix& cm);

struct MetricRow {
    std::string tag;
    std::string task;
    std::string bit;  // per-bit rows of bitvector tasks; empty otherwise
    int64_t n = 0;
    Metrics metrics;
    ConfusionMatrix confusion;
    std::string note;  // e.g. NoGoldLabels
};

struct Report {
    std::vector<MetricRow> rows;
};

// Metrics per (tag, task) over units in rows_with_tag(tag) ∩ test rows.
// Unknown tags produce an empty section with a warning note.
Report evaluate(const TrainedModel& model, const RowStore& store, const Schema& schema,
                const std::vector<std::string>& tags, const GoldLabels& gold);
Report evaluate(const TrainedModel& model, const RowStore& store, const Schema& schema,
                const std::vector<std::string>& tags);

enum class ReportFormat { CSV, JSON };

std::string export_report(const Report& report, ReportFormat format);
Report parse_report_csv(const std::string& text);

struct ScalingRow {
    double fraction = 0.0;
    uint64_t seed = 0;
    std::string task;
    double metric = 0.0;
    double relative_quality = 0.0;  // metric / metric at the smallest fraction
};

// Trains on seeded subsamples of the train rows and evaluates on the full
// test set; the smallest fraction is the relative-quality baseline.
std::vector<ScalingRow> scaling_curve(const Schema& schema, const RowStore& store,
                                      const std::map<std::string, TaskLabels>& labels,
                                      const ArchChoice& choice, const std::vector<double>& fractions,
                                      const std::vector<uint64_t>& seeds);

std::string scaling_to_csv(const std::vector<ScalingRow>& rows);

// Dev/test-style metric for one task over given rows: accuracy for
// multiclass/select, macro-F1 over bits for bitvector.
double task_metric(const TrainedModel& model, const RowStore& store, const Schema& schema,
                   const std::string& task, const std::vector<int64_t>& rows);

}  // namespace overton
