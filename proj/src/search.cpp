#include "overton/search.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include "overton/common.hpp"
#include "overton/compiler.hpp"
#include "overton/errors.hpp"

namespace overton {

int thread_budget() {
    if (const char* env = std::getenv("OVERTON_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace {

struct TrialOutcome {
    TrialResult result;
    TrainedModel model;
    bool ok = false;
};

TrialOutcome run_trial(int index, const Schema& schema, const RowStore& store,
                       const std::map<std::string, TaskLabels>& labels, const ArchChoice& choice,
                       uint64_t seed, const std::vector<int64_t>& dev_rows) {
    TrialOutcome out;
    out.result.trial_id = index;
    out.result.choice = choice;
    auto started = std::chrono::steady_clock::now();
    try {
        ModelIR ir = compile(schema, choice);
        TrainConfig cfg = TrainConfig::from_choice(choice, seed);
        TrainedModel model = train(ir, store, labels, cfg);
        model.provenance.schema_digest = schema_hash(schema);

        double sum = 0.0;
        for (const auto& task : schema.tasks) {
            double m = task_metric(model, store, schema, task.name, dev_rows);
            out.result.per_task[task.name] = m;
            sum += m;
        }
        out.result.dev_metric = schema.tasks.empty() ? 0.0 : sum / static_cast<double>(schema.tasks.size());

        std::set<int64_t> dev_set(dev_rows.begin(), dev_rows.end());
        for (const auto& slice : schema.slices) {
            std::vector<int64_t> rows;
            for (int64_t r : store.rows_with_tag(slice.tag))
                if (dev_set.count(r)) rows.push_back(r);
            for (const auto& task : schema.tasks) {
                bool applies = slice.tasks.empty()
                                   ? task.kind != TaskKind::Select
                                   : std::find(slice.tasks.begin(), slice.tasks.end(), task.name) !=
                                         slice.tasks.end();
                if (!applies) continue;
                out.result.per_slice[task.name + "/" + slice.tag] =
                    task_metric(model, store, schema, task.name, rows);
            }
        }
        out.model = std::move(model);
        out.ok = true;
    } catch (const std::exception& e) {
        out.result.dev_metric = 0.0;
        out.result.error = e.what();
    }
    out.result.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return out;
}

}  // namespace

SearchResult run_search(const Schema& schema, const RowStore& store,
                        const std::map<std::string, TaskLabels>& labels, const TuningSpec& tuning) {
    std::vector<ArchChoice> candidates = enumerate_candidates(schema, tuning);
    std::vector<int64_t> dev_rows = store.rows_with_tag("dev");

    std::vector<TrialOutcome> outcomes(candidates.size());
    const int threads = std::min<int>(thread_budget(), static_cast<int>(candidates.size()));
    if (threads <= 1) {
        for (size_t i = 0; i < candidates.size(); ++i)
            outcomes[i] = run_trial(static_cast<int>(i), schema, store, labels, candidates[i],
                                    mix64(tuning.seed ^ (0x7716a1ull + i)), dev_rows);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < candidates.size(); i = next.fetch_add(1))
                    outcomes[i] = run_trial(static_cast<int>(i), schema, store, labels, candidates[i],
                                            mix64(tuning.seed ^ (0x7716a1ull + i)), dev_rows);
            });
        for (auto& th : pool) th.join();
    }

    SearchResult result;
    for (auto& o : outcomes) result.trials.push_back(o.result);
    for (size_t i = 0; i < outcomes.size(); ++i) {
        if (!outcomes[i].ok) continue;
        if (result.best_trial < 0 ||
            outcomes[i].result.dev_metric > result.trials[static_cast<size_t>(result.best_trial)].dev_metric) {
            result.best_trial = static_cast<int>(i);
        }
    }
    if (result.best_trial < 0) throw Error("every search trial failed");
    result.best = std::move(outcomes[static_cast<size_t>(result.best_trial)].model);
    return result;
}

std::string search_results_csv(const std::vector<TrialResult>& trials,
                               const std::vector<std::string>& tasks, bool include_timing) {
    std::ostringstream os;
    os << "trial_id,choice,dev_metric";
    for (const auto& t : tasks) os << ",metric." << t;
    os << ",wall_time,error\n";
    char buf[32];
    for (const auto& tr : trials) {
        os << tr.trial_id << ",\"" << tr.choice.describe() << "\",";
        std::snprintf(buf, sizeof(buf), "%.6f", tr.dev_metric);
        os << buf;
        for (const auto& t : tasks) {
            auto it = tr.per_task.find(t);
            std::snprintf(buf, sizeof(buf), "%.6f", it == tr.per_task.end() ? 0.0 : it->second);
            os << ',' << buf;
        }
        if (include_timing) {
            std::snprintf(buf, sizeof(buf), "%.3f", tr.wall_time);
            os << ',' << buf;
        } else {
            os << ',';
        }
        os << ',' << tr.error << '\n';
    }
    return os.str();
}

}  // namespace overton
