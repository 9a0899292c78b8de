#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "json.hpp"
#include "overton/compiler.hpp"
#include "overton/monitor.hpp"
#include "overton/synthetic.hpp"
#include "testutil.hpp"

using namespace overton;
using nlohmann::json;

namespace {

const std::string kDir = testutil::scratch_dir("monitor");

ConfusionMatrix make_confusion(int k, std::vector<int64_t> counts) {
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts = std::move(counts);
    return cm;
}

struct Fixture {
    Schema schema;
    RowStore store;
    std::map<std::string, TaskLabels> labels;
};

Fixture binary_fixture(const std::string& name, int n, uint64_t seed, double slice_fraction = 0.0) {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = n;
    cfg.seed = seed;
    cfg.slice_fraction = slice_fraction;
    cfg.declare_slice = slice_fraction > 0;
    synth::Fixture f = synth::make_binary_fixture(cfg);
    Schema schema = parse_schema(f.schema_json);
    RowStore store = testutil::ingest_jsonl(schema, f.data_jsonl, kDir, name);
    std::map<std::string, TaskLabels> labels;
    for (const auto& task : schema.tasks) {
        LabelMatrix m = build_label_matrix(store, schema, task.name, store.rows_with_tag("train"));
        ProbLabels p = majority_vote(m);
        labels.emplace(task.name, TaskLabels{std::move(m), std::move(p)});
    }
    return Fixture{std::move(schema), std::move(store), std::move(labels)};
}

TrainedModel quick_train(Fixture& fx, int epochs = 20, uint64_t seed = 1) {
    ArchChoice c;
    c.embed_dim = 16;
    c.hidden_dim = 16;
    c.learning_rate = 0.5;
    c.epochs = epochs;
    c.batch_size = 16;
    return train(compile(fx.schema, c), fx.store, fx.labels, TrainConfig::from_choice(c, seed));
}

}  // namespace

TEST_CASE("metric formulas from confusion matrices") {
    SUBCASE("perfect predictions: accuracy 1, F1 1, diagonal confusion") {
        ConfusionMatrix cm = make_confusion(3, {4, 0, 0, 0, 3, 0, 0, 0, 3});
        Metrics m = metrics_from_confusion(cm);
        CHECK(m.accuracy == 1.0);
        CHECK(m.precision == 1.0);
        CHECK(m.recall == 1.0);
        CHECK(m.f1 == 1.0);
        CHECK(cm.trace() == cm.total());
    }
    SUBCASE("binary TP=2 FP=1 FN=1 TN=6 gives P=R=F1=2/3") {
        // rows = gold, cols = predicted, positive class = index 1
        ConfusionMatrix cm = make_confusion(2, {6, 1, 1, 2});
        Metrics m = metrics_from_confusion(cm);
        CHECK(m.accuracy == doctest::Approx(0.8));
        CHECK(m.precision == doctest::Approx(2.0 / 3).epsilon(1e-12));
        CHECK(m.recall == doctest::Approx(2.0 / 3).epsilon(1e-12));
        CHECK(m.f1 == doctest::Approx(2.0 / 3).epsilon(1e-12));
    }
    SUBCASE("degenerate zero counts divide safely") {
        ConfusionMatrix cm = make_confusion(2, {5, 0, 0, 0});
        Metrics m = metrics_from_confusion(cm);
        CHECK(m.accuracy == 1.0);
        CHECK(m.precision == 0.0);
        CHECK(m.recall == 0.0);
        CHECK(m.f1 == 0.0);
    }
}

TEST_CASE("property: metric identities over random confusions") {
    Rng rng(404);
    for (int trial = 0; trial < 120; ++trial) {
        int k = 2 + static_cast<int>(rng.next_below(4));
        ConfusionMatrix cm;
        cm.k = k;
        int64_t total = 0;
        for (int i = 0; i < k * k; ++i) {
            int64_t v = static_cast<int64_t>(rng.next_below(12));
            cm.counts.push_back(v);
            total += v;
        }
        if (total == 0) continue;
        Metrics m = metrics_from_confusion(cm);
        REQUIRE(m.accuracy ==
                doctest::Approx(static_cast<double>(cm.trace()) / static_cast<double>(total))
                    .epsilon(1e-12));
        // macro F1 recomputed independently from the confusion
        if (k > 2) {
            double macro_f1 = 0;
            for (int c = 0; c < k; ++c) {
                int64_t col = 0, row = 0;
                for (int i = 0; i < k; ++i) {
                    col += cm.at(i, c);
                    row += cm.at(c, i);
                }
                double p = col ? static_cast<double>(cm.at(c, c)) / static_cast<double>(col) : 0.0;
                double r = row ? static_cast<double>(cm.at(c, c)) / static_cast<double>(row) : 0.0;
                macro_f1 += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
            }
            macro_f1 /= k;
            REQUIRE(m.f1 == doctest::Approx(macro_f1).epsilon(1e-9));
        }
        REQUIRE(m.accuracy >= 0.0);
        REQUIRE(m.f1 <= 1.0);
    }
}

TEST_CASE("evaluate produces per-tag rows over tag ∩ test") {
    Fixture fx = binary_fixture("eval", 400, 51, 0.2);
    TrainedModel model = quick_train(fx);
    Report report = evaluate(model, fx.store, fx.schema, {"test", "special", "train", "missing_tag"});

    std::set<int64_t> test_rows;
    for (int64_t r : fx.store.rows_with_tag("test")) test_rows.insert(r);
    int64_t special_test = 0;
    for (int64_t r : fx.store.rows_with_tag("special")) special_test += test_rows.count(r);

    REQUIRE(report.rows.size() == 4);
    CHECK(report.rows[0].tag == "test");
    CHECK(report.rows[0].task == "polarity");
    CHECK(report.rows[0].n == static_cast<int64_t>(test_rows.size()));
    CHECK(report.rows[0].confusion.k == 2);
    CHECK(report.rows[0].confusion.total() == report.rows[0].n);

    CHECK(report.rows[1].tag == "special");
    CHECK(report.rows[1].n == special_test);  // slice metrics condition on slice ∩ test

    // train ∩ test is empty: reported as NoGoldLabels, not fatal
    CHECK(report.rows[2].tag == "train");
    CHECK(report.rows[2].n == 0);
    CHECK(report.rows[2].note == "NoGoldLabels");

    CHECK(report.rows[3].tag == "missing_tag");
    CHECK(report.rows[3].note == "UnknownTag");
}

TEST_CASE("well-trained separable model reaches a perfect test report") {
    Fixture fx = binary_fixture("perfect", 300, 8);
    TrainedModel model = quick_train(fx, 30);
    Report report = evaluate(model, fx.store, fx.schema, {"test"});
    REQUIRE(!report.rows.empty());
    CHECK(report.rows[0].metrics.accuracy == doctest::Approx(1.0));
    CHECK(report.rows[0].metrics.f1 == doctest::Approx(1.0));
    // diagonal confusion
    CHECK(report.rows[0].confusion.trace() == report.rows[0].confusion.total());
}

TEST_CASE("train/dev/test partition accounts for every row exactly once") {
    Fixture fx = binary_fixture("partition", 350, 77);
    auto train_rows = fx.store.rows_with_tag("train");
    auto dev = fx.store.rows_with_tag("dev");
    auto test = fx.store.rows_with_tag("test");
    std::set<int64_t> all(train_rows.begin(), train_rows.end());
    all.insert(dev.begin(), dev.end());
    all.insert(test.begin(), test.end());
    CHECK(static_cast<int64_t>(all.size()) == fx.store.count());
    CHECK(train_rows.size() + dev.size() + test.size() == all.size());
}

TEST_CASE("report export") {
    Fixture fx = binary_fixture("export", 260, 21, 0.15);
    TrainedModel model = quick_train(fx, 10);
    Report report = evaluate(model, fx.store, fx.schema, {"test", "special"});

    SUBCASE("empty report exports the header only") {
        Report empty;
        CHECK(export_report(empty, ReportFormat::CSV) ==
              "tag,task,n,accuracy,precision,recall,f1,bit,confusion,note\n");
        CHECK(export_report(empty, ReportFormat::JSON) == "[]\n");
    }
    SUBCASE("re-export is byte-identical") {
        CHECK(export_report(report, ReportFormat::CSV) == export_report(report, ReportFormat::CSV));
        CHECK(export_report(report, ReportFormat::JSON) == export_report(report, ReportFormat::JSON));
    }
    SUBCASE("CSV re-parses to the same values within formatting precision") {
        Report back = parse_report_csv(export_report(report, ReportFormat::CSV));
        REQUIRE(back.rows.size() == report.rows.size());
        for (size_t i = 0; i < report.rows.size(); ++i) {
            CHECK(back.rows[i].tag == report.rows[i].tag);
            CHECK(back.rows[i].task == report.rows[i].task);
            CHECK(back.rows[i].n == report.rows[i].n);
            CHECK(back.rows[i].metrics.accuracy ==
                  doctest::Approx(report.rows[i].metrics.accuracy).epsilon(1e-6));
            CHECK(back.rows[i].metrics.f1 == doctest::Approx(report.rows[i].metrics.f1).epsilon(1e-6));
            CHECK(back.rows[i].confusion.counts == report.rows[i].confusion.counts);
        }
    }
    SUBCASE("JSON export mirrors the rows") {
        json arr = json::parse(export_report(report, ReportFormat::JSON));
        REQUIRE(arr.size() == report.rows.size());
        CHECK(arr[0].at("tag") == report.rows[0].tag);
        CHECK(arr[0].at("n") == report.rows[0].n);
    }
}

TEST_CASE("per-bit rows appear for bitvector tasks") {
    synth::IntentFixtureConfig cfg;
    cfg.n_records = 200;
    cfg.seed = 31;
    synth::Fixture f = synth::make_intent_fixture(cfg);
    Schema schema = parse_schema(f.schema_json);
    RowStore store = testutil::ingest_jsonl(schema, f.data_jsonl, kDir, "bits");
    std::map<std::string, TaskLabels> labels;
    for (const auto& task : schema.tasks) {
        LabelMatrix m = build_label_matrix(store, schema, task.name, store.rows_with_tag("train"));
        ProbLabels p = majority_vote(m);
        labels.emplace(task.name, TaskLabels{std::move(m), std::move(p)});
    }
    ArchChoice c;
    c.embed_dim = 16;
    c.hidden_dim = 16;
    c.learning_rate = 0.5;
    c.epochs = 5;
    c.batch_size = 16;
    Fixture fx{std::move(schema), std::move(store), std::move(labels)};
    TrainedModel model = train(compile(fx.schema, c), fx.store, fx.labels, TrainConfig::from_choice(c, 2));
    Report report = evaluate(model, fx.store, fx.schema, {"test"});

    int aggregate = 0, person_bit = 0, place_bit = 0, select_rows = 0;
    for (const auto& r : report.rows) {
        if (r.task == "entity_type" && r.bit.empty()) ++aggregate;
        if (r.task == "entity_type" && r.bit == "person") ++person_bit;
        if (r.task == "entity_type" && r.bit == "place") ++place_bit;
        if (r.task == "intent_arg") ++select_rows;
    }
    CHECK(aggregate == 1);
    CHECK(person_bit == 1);
    CHECK(place_bit == 1);
    CHECK(select_rows == 1);
}

TEST_CASE("scaling curve") {
    Fixture fx = binary_fixture("scaling", 420, 13);
    ArchChoice c;
    c.embed_dim = 8;
    c.hidden_dim = 8;
    c.learning_rate = 0.3;
    c.epochs = 4;
    c.batch_size = 16;

    SUBCASE("smallest fraction is the baseline with relative quality exactly 1") {
        auto rows = scaling_curve(fx.schema, fx.store, fx.labels, c, {0.25, 0.5, 1.0}, {1});
        REQUIRE(rows.size() == 3);
        CHECK(rows[0].fraction == 0.25);
        CHECK(rows[0].relative_quality == 1.0);
        for (const auto& r : rows) CHECK(r.task == "polarity");
    }
    SUBCASE("fractions that round to the same subsample give identical metrics") {
        size_t n_train = fx.store.rows_with_tag("train").size();
        double f1 = 0.5;
        double f2 = (std::llround(0.5 * static_cast<double>(n_train)) + 0.4) /
                    static_cast<double>(n_train);  // rounds to the same count
        auto rows = scaling_curve(fx.schema, fx.store, fx.labels, c, {f1, f2}, {3});
        REQUIRE(rows.size() == 2);
        CHECK(rows[0].metric == rows[1].metric);
    }
    SUBCASE("reproducible per seed; csv is deterministic") {
        auto a = scaling_curve(fx.schema, fx.store, fx.labels, c, {0.5, 1.0}, {5});
        auto b = scaling_curve(fx.schema, fx.store, fx.labels, c, {0.5, 1.0}, {5});
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].metric == b[i].metric);
        CHECK(scaling_to_csv(a) == scaling_to_csv(b));
        CHECK(scaling_to_csv(a).find("fraction,seed,task,metric,relative_quality\n") == 0);
    }
}
