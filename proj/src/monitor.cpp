#include "overton/monitor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/compiler.hpp"
#include "overton/errors.hpp"

namespace overton {

using nlohmann::json;

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
}

int64_t ConfusionMatrix::trace() const {
    int64_t t = 0;
    for (int i = 0; i < k; ++i) t += at(i, i);
    return t;
}

namespace {

double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

struct ClassPrf {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

ClassPrf class_prf(const ConfusionMatrix& cm, int c) {
    int64_t col = 0, row = 0;
    for (int i = 0; i < cm.k; ++i) {
        col += cm.at(i, c);
        row += cm.at(c, i);
    }
    ClassPrf out;
    out.precision = safe_div(static_cast<double>(cm.at(c, c)), static_cast<double>(col));
    out.recall = safe_div(static_cast<double>(cm.at(c, c)), static_cast<double>(row));
    out.f1 = safe_div(2 * out.precision * out.recall, out.precision + out.recall);
    return out;
}

}  // namespace

Metrics metrics_from_confusion(const ConfusionMatrix& cm) {
    Metrics m;
    int64_t total = cm.total();
    m.accuracy = safe_div(static_cast<double>(cm.trace()), static_cast<double>(total));
    if (cm.k == 2) {
        ClassPrf pos = class_prf(cm, 1);
        m.precision = pos.precision;
        m.recall = pos.recall;
        m.f1 = pos.f1;
    } else if (cm.k > 0) {
        for (int c = 0; c < cm.k; ++c) {
            ClassPrf p = class_prf(cm, c);
            m.precision += p.precision / cm.k;
            m.recall += p.recall / cm.k;
            m.f1 += p.f1 / cm.k;
        }
    }
    return m;
}

GoldLabels gold_from_test_supervision(const RowStore& store, const Schema& schema) {
    GoldLabels gold;
    std::vector<int64_t> test_rows = store.rows_with_tag("test");
    for (const auto& task : schema.tasks) {
        LabelMatrix matrix = build_label_matrix(store, schema, task.name, test_rows);
        ProbLabels mv = majority_vote(matrix);
        auto& per_unit = gold[task.name];
        for (size_t i = 0; i < matrix.units.size(); ++i) {
            if (mv.abstained(i)) continue;
            const auto& p = *mv.labels[i];
            int arg = 0;
            for (size_t c = 1; c < p.size(); ++c)
                if (p[c] > p[static_cast<size_t>(arg)]) arg = static_cast<int>(c);
            per_unit[matrix.units[i].ref] = arg;
        }
    }
    return gold;
}

namespace {

// Hard predictions for one row: per task, class per unit position.
std::map<std::string, std::vector<int>> row_predictions(const TrainedModel& model,
                                                        const Record& record) {
    EncodedExample ex = encode_example(record);
    Forward fwd = forward(model.ir, model.params, ex);
    std::map<std::string, std::vector<int>> out;
    for (const auto& st : model.ir.signature.tasks) {
        const Tensor& p = fwd.value(model.ir.task_outputs.at(st.name).probs);
        std::vector<int> preds;
        if (st.kind == TaskKind::Select) {
            if (p.rows() > 0) {
                int arg = 0;
                for (int64_t i = 1; i < p.rows(); ++i)
                    if (p.at(i, 0) > p.at(arg, 0)) arg = static_cast<int>(i);
                preds.push_back(arg);
            }
        } else if (st.kind == TaskKind::Multiclass) {
            for (int64_t r = 0; r < p.rows(); ++r) {
                int arg = 0;
                for (int64_t c = 1; c < p.cols(); ++c)
                    if (p.at(r, c) > p.at(r, arg)) arg = static_cast<int>(c);
                preds.push_back(arg);
            }
        } else {  // bitvector: threshold at 0.5, unit order (token, bit)
            for (int64_t r = 0; r < p.rows(); ++r)
                for (int64_t c = 0; c < p.cols(); ++c)
                    preds.push_back(p.at(r, c) >= 0.5 ? 1 : 0);
        }
        out[st.name] = std::move(preds);
    }
    return out;
}

// Position of a unit within the row's prediction vector.
int unit_position(const TaskDecl& task, const PayloadDecl& payload, const UnitRef& ref) {
    const int k = task.label_count();
    switch (task.kind) {
        case TaskKind::Select: return 0;
        case TaskKind::Multiclass: return ref.token >= 0 ? ref.token : 0;
        case TaskKind::Bitvector: {
            int t = ref.token >= 0 ? ref.token : 0;
            (void)payload;
            return t * k + ref.bit;
        }
    }
    return 0;
}

struct TaskEvalData {
    // (gold, pred) pairs per unit; bitvector pairs grouped per bit.
    std::vector<std::pair<int, int>> pairs;
    std::vector<std::vector<std::pair<int, int>>> per_bit;
    int k = 0;
    TaskKind kind = TaskKind::Multiclass;
};

TaskEvalData collect_units(const TrainedModel& model, const RowStore& store, const Schema& schema,
                           const std::string& task_name, const std::vector<int64_t>& rows,
                           const GoldLabels& gold,
                           std::map<int64_t, std::map<std::string, std::vector<int>>>& cache) {
    const TaskDecl* task = schema.find_task(task_name);
    const PayloadDecl* payload = schema.find_payload(task->payload);
    TaskEvalData data;
    data.kind = task->kind;
    data.k = task->kind == TaskKind::Bitvector ? 2 : task->label_count();
    if (task->kind == TaskKind::Bitvector) data.per_bit.resize(task->labels.size());

    auto git = gold.find(task_name);
    if (git == gold.end()) return data;

    LabelMatrix matrix = build_label_matrix(store, schema, task_name, rows);
    for (const auto& unit : matrix.units) {
        auto gu = git->second.find(unit.ref);
        if (gu == git->second.end()) continue;
        auto cit = cache.find(unit.ref.row);
        if (cit == cache.end())
            cit = cache.emplace(unit.ref.row, row_predictions(model, store.get(unit.ref.row))).first;
        const auto& preds = cit->second.at(task_name);
        int pos = unit_position(*task, *payload, unit.ref);
        if (pos < 0 || static_cast<size_t>(pos) >= preds.size()) continue;
        int pred = preds[static_cast<size_t>(pos)];
        data.pairs.emplace_back(gu->second, pred);
        if (task->kind == TaskKind::Bitvector)
            data.per_bit[static_cast<size_t>(unit.ref.bit)].emplace_back(gu->second, pred);
    }
    return data;
}

ConfusionMatrix confusion_of(const std::vector<std::pair<int, int>>& pairs, int k) {
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts.assign(static_cast<size_t>(k) * k, 0);
    for (auto [g, p] : pairs)
        if (g >= 0 && g < k && p >= 0 && p < k) ++cm.at(g, p);
    return cm;
}

std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

Report evaluate(const TrainedModel& model, const RowStore& store, const Schema& schema,
                const std::vector<std::string>& tags, const GoldLabels& gold) {
    Report report;
    std::vector<int64_t> test_rows = store.rows_with_tag("test");
    std::set<int64_t> test_set(test_rows.begin(), test_rows.end());
    std::map<int64_t, std::map<std::string, std::vector<int>>> pred_cache;

    for (const auto& tag : tags) {
        if (store.tag_index().find(tag) == store.tag_index().end()) {
            MetricRow row;
            row.tag = tag;
            row.note = "UnknownTag";
            report.rows.push_back(std::move(row));
            continue;
        }
        std::vector<int64_t> rows;
        for (int64_t r : store.rows_with_tag(tag))
            if (test_set.count(r)) rows.push_back(r);

        for (const auto& task : schema.tasks) {
            TaskEvalData data = collect_units(model, store, schema, task.name, rows, gold, pred_cache);
            MetricRow row;
            row.tag = tag;
            row.task = task.name;
            row.n = static_cast<int64_t>(data.pairs.size());
            if (data.pairs.empty()) {
                row.note = "NoGoldLabels";
                report.rows.push_back(std::move(row));
                continue;
            }
            if (task.kind == TaskKind::Select) {
                int64_t correct = 0;
                for (auto [g, p] : data.pairs) correct += g == p ? 1 : 0;
                double acc = static_cast<double>(correct) / static_cast<double>(data.pairs.size());
                row.metrics = Metrics{acc, acc, acc, acc};
            } else if (task.kind == TaskKind::Multiclass) {
                row.confusion = confusion_of(data.pairs, data.k);
                row.metrics = metrics_from_confusion(row.confusion);
            } else {
                // Aggregate bitvector row: overall bit accuracy, macro P/R/F1 over bits.
                row.confusion = confusion_of(data.pairs, 2);
                Metrics agg;
                agg.accuracy = safe_div(static_cast<double>(row.confusion.trace()),
                                        static_cast<double>(row.confusion.total()));
                int counted = 0;
                for (size_t b = 0; b < data.per_bit.size(); ++b) {
                    if (data.per_bit[b].empty()) continue;
                    Metrics mb = metrics_from_confusion(confusion_of(data.per_bit[b], 2));
                    agg.precision += mb.precision;
                    agg.recall += mb.recall;
                    agg.f1 += mb.f1;
                    ++counted;
                }
                if (counted > 0) {
                    agg.precision /= counted;
                    agg.recall /= counted;
                    agg.f1 /= counted;
                }
                row.metrics = agg;
                report.rows.push_back(row);
                for (size_t b = 0; b < data.per_bit.size(); ++b) {
                    if (data.per_bit[b].empty()) continue;
                    MetricRow bit_row;
                    bit_row.tag = tag;
                    bit_row.task = task.name;
                    bit_row.bit = task.labels[b];
                    bit_row.n = static_cast<int64_t>(data.per_bit[b].size());
                    bit_row.confusion = confusion_of(data.per_bit[b], 2);
                    bit_row.metrics = metrics_from_confusion(bit_row.confusion);
                    report.rows.push_back(std::move(bit_row));
                }
                continue;
            }
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

Report evaluate(const TrainedModel& model, const RowStore& store, const Schema& schema,
                const std::vector<std::string>& tags) {
    return evaluate(model, store, schema, tags, gold_from_test_supervision(store, schema));
}

std::string export_report(const Report& report, ReportFormat format) {
    if (format == ReportFormat::CSV) {
        std::ostringstream os;
        os << "tag,task,n,accuracy,precision,recall,f1,bit,confusion,note\n";
        for (const auto& r : report.rows) {
            std::string conf;
            if (r.confusion.k > 0) {
                conf = std::to_string(r.confusion.k) + ":";
                for (size_t i = 0; i < r.confusion.counts.size(); ++i) {
                    if (i) conf += ';';
                    conf += std::to_string(r.confusion.counts[i]);
                }
            }
            os << r.tag << ',' << r.task << ',' << r.n << ',' << format_metric(r.metrics.accuracy)
               << ',' << format_metric(r.metrics.precision) << ',' << format_metric(r.metrics.recall)
               << ',' << format_metric(r.metrics.f1) << ',' << r.bit << ',' << conf << ',' << r.note
               << '\n';
        }
        return os.str();
    }
    json arr = json::array();
    for (const auto& r : report.rows) {
        json j;
        j["tag"] = r.tag;
        j["task"] = r.task;
        j["bit"] = r.bit;
        j["n"] = r.n;
        j["accuracy"] = r.metrics.accuracy;
        j["precision"] = r.metrics.precision;
        j["recall"] = r.metrics.recall;
        j["f1"] = r.metrics.f1;
        j["confusion"] = json{{"k", r.confusion.k}, {"counts", r.confusion.counts}};
        j["note"] = r.note;
        arr.push_back(j);
    }
    return arr.dump(2) + "\n";
}

Report parse_report_csv(const std::string& text) {
    Report report;
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        cells.resize(10);
        MetricRow r;
        r.tag = cells[0];
        r.task = cells[1];
        r.n = std::stoll(cells[2].empty() ? "0" : cells[2]);
        r.metrics.accuracy = std::stod(cells[3].empty() ? "0" : cells[3]);
        r.metrics.precision = std::stod(cells[4].empty() ? "0" : cells[4]);
        r.metrics.recall = std::stod(cells[5].empty() ? "0" : cells[5]);
        r.metrics.f1 = std::stod(cells[6].empty() ? "0" : cells[6]);
        r.bit = cells[7];
        if (!cells[8].empty()) {
            size_t colon = cells[8].find(':');
            r.confusion.k = std::stoi(cells[8].substr(0, colon));
            std::istringstream cs(cells[8].substr(colon + 1));
            std::string num;
            while (std::getline(cs, num, ';')) r.confusion.counts.push_back(std::stoll(num));
        }
        r.note = cells[9];
        report.rows.push_back(std::move(r));
    }
    return report;
}

double task_metric(const TrainedModel& model, const RowStore& store, const Schema& schema,
                   const std::string& task_name, const std::vector<int64_t>& rows) {
    const TaskDecl* task = schema.find_task(task_name);
    // Gold over exactly these rows, collapsed by majority vote.
    LabelMatrix matrix = build_label_matrix(store, schema, task_name, rows);
    ProbLabels mv = majority_vote(matrix);
    GoldLabels gold;
    auto& per_unit = gold[task_name];
    for (size_t i = 0; i < matrix.units.size(); ++i) {
        if (mv.abstained(i)) continue;
        const auto& p = *mv.labels[i];
        int arg = 0;
        for (size_t c = 1; c < p.size(); ++c)
            if (p[c] > p[static_cast<size_t>(arg)]) arg = static_cast<int>(c);
        per_unit[matrix.units[i].ref] = arg;
    }
    std::map<int64_t, std::map<std::string, std::vector<int>>> cache;
    TaskEvalData data = collect_units(model, store, schema, task_name, rows, gold, cache);
    if (data.pairs.empty()) return 0.0;
    if (task->kind == TaskKind::Bitvector) {
        double f1 = 0.0;
        int counted = 0;
        for (const auto& bit_pairs : data.per_bit) {
            if (bit_pairs.empty()) continue;
            f1 += metrics_from_confusion(confusion_of(bit_pairs, 2)).f1;
            ++counted;
        }
        return counted > 0 ? f1 / counted : 0.0;
    }
    int64_t correct = 0;
    for (auto [g, p] : data.pairs) correct += g == p ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.pairs.size());
}

std::vector<ScalingRow> scaling_curve(const Schema& schema, const RowStore& store,
                                      const std::map<std::string, TaskLabels>& labels,
                                      const ArchChoice& choice, const std::vector<double>& fractions,
                                      const std::vector<uint64_t>& seeds) {
    std::vector<double> fracs = fractions;
    std::sort(fracs.begin(), fracs.end());
    std::vector<int64_t> train_rows = store.rows_with_tag("train");
    std::vector<int64_t> test_rows = store.rows_with_tag("test");

    std::vector<ScalingRow> out;
    for (uint64_t seed : seeds) {
        std::vector<int64_t> shuffled = train_rows;
        Rng rng(mix64(seed ^ 0x5ca11e5ull));
        rng.shuffle(shuffled);

        std::map<std::string, double> baseline;
        for (double f : fracs) {
            auto n_sub = static_cast<size_t>(std::llround(f * static_cast<double>(train_rows.size())));
            n_sub = std::min(n_sub, shuffled.size());
            std::vector<int64_t> subset(shuffled.begin(), shuffled.begin() + static_cast<int64_t>(n_sub));
            std::sort(subset.begin(), subset.end());

            TrainConfig cfg = TrainConfig::from_choice(choice, seed);
            TrainedModel model = train(compile(schema, choice), store, labels, cfg, &subset);
            for (const auto& task : schema.tasks) {
                double metric = task_metric(model, store, schema, task.name, test_rows);
                if (!baseline.count(task.name)) baseline[task.name] = metric;
                double base = baseline.at(task.name);
                out.push_back(ScalingRow{f, seed, task.name, metric,
                                         base > 0 ? metric / base : 0.0});
            }
        }
    }
    return out;
}

std::string scaling_to_csv(const std::vector<ScalingRow>& rows) {
    std::ostringstream os;
    os << "fraction,seed,task,metric,relative_quality\n";
    for (const auto& r : rows)
        os << format_metric(r.fraction) << ',' << r.seed << ',' << r.task << ','
           << format_metric(r.metric) << ',' << format_metric(r.relative_quality) << '\n';
    return os.str();
}

}  // namespace overton
