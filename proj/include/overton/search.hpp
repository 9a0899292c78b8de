#pragma once

#include <map>
#include <string>
#include <vector>

#include "overton/monitor.hpp"
#include "overton/trainer.hpp"

namespace overton {

struct TrialResult {
    int trial_id = 0;
    ArchChoice choice;
    double dev_metric = 0.0;             // mean over tasks
    std::map<std::string, double> per_task;
    std::map<std::string, double> per_slice;  // "task/slice" -> metric on dev ∩ slice
    double wall_time = 0.0;              // seconds, measured
    std::string error;                   // non-empty when the trial failed
};

struct SearchResult {
    TrainedModel best;
    int best_trial = -1;
    std::vector<TrialResult> trials;
};

// Trains every candidate with a trial-index-derived seed, evaluates on dev
// rows, and returns the best model (ties to the earliest trial). Failed trials
// are recorded with metric 0 and the search continues. Trials may run on
// OVERTON_THREADS threads; results are merged by index, so concurrency never
// changes the selection.
SearchResult run_search(const Schema& schema, const RowStore& store,
                        const std::map<std::string, TaskLabels>& labels, const TuningSpec& tuning);

// One row per trial. Timing cells are left empty when include_timing is false
// so rerun artifacts stay byte-identical.
std::string search_results_csv(const std::vector<TrialResult>& trials,
                               const std::vector<std::string>& tasks, bool include_timing);

int thread_budget();  // OVERTON_THREADS, default: hardware concurrency

}  // namespace overton
