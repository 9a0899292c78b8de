#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "json.hpp"
#include "overton/compiler.hpp"
#include "overton/monitor.hpp"
#include "overton/synthetic.hpp"
#include "overton/trainer.hpp"
#include "testutil.hpp"

using namespace overton;
using nlohmann::json;

namespace {

const std::string kDir = testutil::scratch_dir("trainer");

struct Fixture {
    Schema schema;
    RowStore store;
    std::map<std::string, TaskLabels> labels;
};

Fixture load_fixture(const synth::Fixture& f, const std::string& name, bool use_em = true) {
    Schema schema = parse_schema(f.schema_json);
    RowStore store = testutil::ingest_jsonl(schema, f.data_jsonl, kDir, name);
    std::map<std::string, TaskLabels> labels;
    auto train_rows = store.rows_with_tag("train");
    for (const auto& task : schema.tasks) {
        LabelMatrix m = build_label_matrix(store, schema, task.name, train_rows);
        ProbLabels p = use_em ? posterior_labels(fit_em(m, 100, 1e-8, 0), m) : majority_vote(m);
        labels.emplace(task.name, TaskLabels{std::move(m), std::move(p)});
    }
    return Fixture{std::move(schema), std::move(store), std::move(labels)};
}

ArchChoice small_choice(int epochs = 12, double lr = 0.5) {
    ArchChoice c;
    c.embed_dim = 16;
    c.hidden_dim = 16;
    c.learning_rate = lr;
    c.epochs = epochs;
    c.batch_size = 16;
    return c;
}

}  // namespace

TEST_CASE("noise-aware loss") {
    SUBCASE("near-perfect prediction is near-zero loss") {
        double loss = noise_aware_loss({30.0, 0.0}, {1.0, 0.0}, 1.0);
        CHECK(loss == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("uniform soft label lower-bounds at ln K, equality iff uniform p") {
        std::vector<double> q = {1.0 / 3, 1.0 / 3, 1.0 / 3};
        double at_uniform = noise_aware_loss({0.0, 0.0, 0.0}, q, 1.0);
        CHECK(at_uniform == doctest::Approx(std::log(3.0)).epsilon(1e-12));
        CHECK(at_uniform == doctest::Approx(1.0986).epsilon(1e-4));
        for (auto logits : {std::vector<double>{1, 0, 0}, {0, 2, -1}, {5, 5, 0}})
            CHECK(noise_aware_loss(logits, q, 1.0) > at_uniform);
    }
    SUBCASE("weight 0 masks the unit") {
        CHECK(noise_aware_loss({1.0, -2.0}, {0.3, 0.7}, 0.0) == 0.0);
        CHECK(noise_aware_bit_loss(3.0, 0.25, 0.0) == 0.0);
    }
    SUBCASE("bit loss matches the direct formula") {
        double z = 0.7, q = 0.3;
        double p = 1.0 / (1.0 + std::exp(-z));
        double expect = -(q * std::log(p) + (1 - q) * std::log(1 - p));
        CHECK(noise_aware_bit_loss(z, q, 1.0) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(noise_aware_bit_loss(z, q, 2.5) == doctest::Approx(2.5 * expect).epsilon(1e-12));
    }
}

TEST_CASE("separable synthetic task trains to >= 0.99 train accuracy") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 250;  // ~200 train rows under the 8/1/1 split
    cfg.seed = 5;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "separable", false);
    ArchChoice choice = small_choice(30);
    TrainConfig tc = TrainConfig::from_choice(choice, 1);
    TrainedModel model = train(compile(fx.schema, choice), fx.store, fx.labels, tc);
    double acc = task_metric(model, fx.store, fx.schema, "polarity", fx.store.rows_with_tag("train"));
    CHECK(acc >= 0.99);

    SUBCASE("predictions on training rows recover the labels") {
        auto train_rows = fx.store.rows_with_tag("train");
        Record rec = fx.store.get(train_rows[0]);
        auto probs = predict_probs(model, rec);
        const Tensor& p = probs.at("polarity");
        double sum = p.data[0] + p.data[1];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("full-batch training loss is non-increasing with a small rate") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 120;
    cfg.seed = 9;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "convex", false);
    ArchChoice choice = small_choice(25, 0.05);
    choice.batch_size = 4096;  // full batch
    TrainConfig tc = TrainConfig::from_choice(choice, 2);
    TrainedModel model = train(compile(fx.schema, choice), fx.store, fx.labels, tc);
    REQUIRE(model.epoch_log.size() == 25);
    for (size_t e = 1; e < model.epoch_log.size(); ++e)
        REQUIRE(model.epoch_log[e].total <= model.epoch_log[e - 1].total + 1e-9);
}

TEST_CASE("training is deterministic given identical inputs") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 100;
    cfg.seed = 3;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "det", false);
    ArchChoice choice = small_choice(4);
    ModelIR ir = compile(fx.schema, choice);
    TrainConfig tc = TrainConfig::from_choice(choice, 7);
    TrainedModel a = train(ir, fx.store, fx.labels, tc);
    TrainedModel b = train(ir, fx.store, fx.labels, tc);
    CHECK(a.params.to_bytes(ir) == b.params.to_bytes(ir));
    TrainConfig tc2 = tc;
    tc2.seed = 8;
    TrainedModel c = train(ir, fx.store, fx.labels, tc2);
    CHECK(a.params.to_bytes(ir) != c.params.to_bytes(ir));
}

TEST_CASE("slice lambdas at zero with no slices match the plain model bitwise") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 80;
    cfg.seed = 4;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "lambda0", false);
    ArchChoice choice = small_choice(3);
    ModelIR ir = compile(fx.schema, choice);
    TrainConfig tc = TrainConfig::from_choice(choice, 5);
    TrainedModel plain = train(ir, fx.store, fx.labels, tc);
    TrainConfig tz = tc;
    tz.lambda_ind = 0.0;
    tz.lambda_exp = 0.0;
    TrainedModel zeroed = train(ir, fx.store, fx.labels, tz);
    CHECK(plain.params.to_bytes(ir) == zeroed.params.to_bytes(ir));
}

TEST_CASE("zero loss weight freezes that task's head parameters") {
    std::string doc = R"({
        "payloads": [
            {"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
            {"name": "query", "kind": "singleton", "inputs": [{"payload": "tokens"}]}],
        "tasks": [
            {"name": "a", "payload": "query", "kind": {"multiclass": ["x", "y"]}},
            {"name": "b", "payload": "query", "kind": {"multiclass": ["u", "v"]}, "loss_weight": 0.0}]})";
    Schema schema = parse_schema(doc);
    std::string jsonl;
    Rng rng(6);
    for (int i = 0; i < 60; ++i) {
        json rec;
        rec["tokens"] = json::array({std::string("w") + std::to_string(rng.next_below(20))});
        rec["supervision"] = json{
            {"a", json::array({json{{"source", "s"}, {"value", rng.next_below(2) ? "x" : "y"}}})},
            {"b", json::array({json{{"source", "s"}, {"value", rng.next_below(2) ? "u" : "v"}}})}};
        rec["tags"] = json::array({"train"});
        jsonl += rec.dump() + "\n";
    }
    RowStore store = testutil::ingest_jsonl(schema, jsonl, kDir, "freeze");
    std::map<std::string, TaskLabels> labels;
    for (const auto& task : schema.tasks) {
        LabelMatrix m = build_label_matrix(store, schema, task.name, store.rows_with_tag("train"));
        ProbLabels p = majority_vote(m);
        labels.emplace(task.name, TaskLabels{std::move(m), std::move(p)});
    }
    ArchChoice choice = small_choice(3);
    ModelIR ir = compile(schema, choice);
    TrainConfig tc = TrainConfig::from_choice(choice, 11);
    TrainedModel model = train(ir, store, labels, tc);
    ParamStore init = init_params(ir, tc.seed);

    CHECK(model.params.at("task/b/head/W").data == init.at("task/b/head/W").data);
    CHECK(model.params.at("task/b/head/b").data == init.at("task/b/head/b").data);
    CHECK(model.params.at("task/b/trunk/W").data == init.at("task/b/trunk/W").data);
    // the trained task did move
    CHECK(model.params.at("task/a/head/W").data != init.at("task/a/head/W").data);
}

TEST_CASE("rebalancing equalizes per-class loss mass at initialization") {
    // 90/10 imbalance: per-class sums of weights must match.
    ProbLabels labels;
    for (int i = 0; i < 90; ++i) labels.labels.emplace_back(std::vector<double>{1.0, 0.0});
    for (int i = 0; i < 10; ++i) labels.labels.emplace_back(std::vector<double>{0.0, 1.0});
    auto w = rebalance_weights(labels);
    double mass0 = 0, mass1 = 0;
    for (size_t i = 0; i < w.size(); ++i) (i < 90 ? mass0 : mass1) += w[i];
    CHECK(mass0 == doctest::Approx(mass1).epsilon(1e-9));
}

TEST_CASE("slice-aware training wires indicator and expert losses") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 300;
    cfg.seed = 12;
    cfg.slice_fraction = 0.2;
    cfg.declare_slice = true;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "sliced", false);
    ArchChoice choice = small_choice(15);
    ModelIR ir = compile(fx.schema, choice);
    REQUIRE(ir.slice_blocks.size() == 1);
    TrainConfig tc = TrainConfig::from_choice(choice, 13);
    TrainedModel model = train(ir, fx.store, fx.labels, tc);

    // the indicator should fire on slice rows and stay quiet elsewhere
    auto slice_rows = fx.store.rows_with_tag("special");
    REQUIRE(!slice_rows.empty());
    Record in_slice = fx.store.get(slice_rows[0]);
    Forward fwd = forward(ir, model.params, encode_example(in_slice));
    double p_in = fwd.value(ir.slice_blocks[0].indicator_prob).data[0];

    double p_out = 1.0;
    for (int64_t r : fx.store.rows_with_tag("train")) {
        Record rec = fx.store.get(r);
        if (rec.has_tag("special")) continue;
        Forward f2 = forward(ir, model.params, encode_example(rec));
        p_out = f2.value(ir.slice_blocks[0].indicator_prob).data[0];
        break;
    }
    CHECK(p_in > 0.8);
    CHECK(p_out < 0.2);
}

TEST_CASE("predict") {
    synth::IntentFixtureConfig cfg;
    cfg.n_records = 150;
    cfg.seed = 2;
    synth::Fixture f = synth::make_intent_fixture(cfg);
    Schema schema = parse_schema(f.schema_json);
    RowStore store = testutil::ingest_jsonl(schema, f.data_jsonl, kDir, "predict");
    std::map<std::string, TaskLabels> labels;
    for (const auto& task : schema.tasks) {
        LabelMatrix m = build_label_matrix(store, schema, task.name, store.rows_with_tag("train"));
        ProbLabels p = posterior_labels(fit_em(m, 60, 1e-8, 0), m);
        labels.emplace(task.name, TaskLabels{std::move(m), std::move(p)});
    }
    ArchChoice choice = small_choice(3);
    TrainedModel model = train(compile(schema, choice), store, labels, TrainConfig::from_choice(choice, 3));

    SUBCASE("multiclass output sums to one and lists schema labels") {
        std::string out = predict(model, store.get(0));
        json j = json::parse(out);
        REQUIRE(j.contains("intent"));
        double sum = 0;
        for (const auto& [label, p] : j.at("intent").at("probs").items()) sum += p.get<double>();
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(j.at("intent").at("probs").size() == 3);
        CHECK(j.at("intent").at("probs").contains("height"));
        // per-token bitvector rows match the token count
        const auto& toks = std::get<std::vector<std::string>>(store.get(0).payload_values.at("tokens"));
        CHECK(j.at("entity_type").at("tokens").size() == toks.size());
        // select distribution over this record's candidates sums to one
        double ssum = 0;
        for (const auto& c : j.at("intent_arg").at("candidates")) ssum += c.at("p").get<double>();
        CHECK(ssum == doctest::Approx(1.0).epsilon(1e-9));
        const auto& elems = std::get<std::vector<SetElement>>(store.get(0).payload_values.at("entities"));
        CHECK(j.at("intent_arg").at("candidates").size() == elems.size());
    }

    SUBCASE("output validates against the serialized signature") {
        json sig = json::parse(signature_to_json(model.signature()));
        json out = json::parse(predict(model, store.get(1)));
        for (const auto& tj : sig.at("tasks")) {
            const std::string name = tj.at("name").get<std::string>();
            REQUIRE(out.contains(name));
            CHECK(out.at(name).at("type") == tj.at("output_type"));
            if (tj.at("kind") == "multiclass") {
                for (const auto& label : tj.at("labels"))
                    CHECK(out.at(name).at("probs").contains(label.get<std::string>()));
            }
        }
    }

    SUBCASE("missing required payload names the field") {
        Record rec;
        rec.payload_values["entities"] = std::vector<SetElement>{{"e:x", std::nullopt}};
        try {
            predict(model, rec);
            FAIL("expected MissingPayload");
        } catch (const MissingPayload& e) {
            CHECK(e.payload == "tokens");
        }
    }

    SUBCASE("null payload still yields a prediction via zero vectors") {
        Record rec;
        rec.payload_values["tokens"] = std::monostate{};
        rec.payload_values["entities"] = std::vector<SetElement>{{"e:x", std::nullopt}};
        json j = json::parse(predict(model, rec));
        double sum = 0;
        for (const auto& [label, p] : j.at("intent").at("probs").items()) sum += p.get<double>();
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("empty candidate set is an explicit error") {
        Record rec;
        rec.payload_values["tokens"] = std::vector<std::string>{"how", "tall"};
        rec.payload_values["entities"] = std::vector<SetElement>{};
        CHECK_THROWS_AS(predict(model, rec), EmptyCandidateSet);
    }
}

TEST_CASE("model container round-trips through disk") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 60;
    cfg.seed = 21;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "container", false);
    ArchChoice choice = small_choice(2);
    ModelIR ir = compile(fx.schema, choice);
    TrainedModel model = train(ir, fx.store, fx.labels, TrainConfig::from_choice(choice, 9));
    model.provenance.schema_digest = schema_hash(fx.schema);
    model.provenance.label_digests["polarity"] = 12345;

    std::string path = kDir + "/model.ovm";
    save_model(model, path);
    TrainedModel back = load_model(path);
    CHECK(back.params.to_bytes(back.ir) == model.params.to_bytes(model.ir));
    CHECK(ir_to_json(back.ir) == ir_to_json(model.ir));
    CHECK(back.provenance.schema_digest == model.provenance.schema_digest);
    CHECK(back.provenance.store_digest == model.provenance.store_digest);
    CHECK(back.provenance.label_digests == model.provenance.label_digests);

    // saving the loaded model reproduces identical bytes
    save_model(back, kDir + "/model2.ovm");
    CHECK(testutil::read_file(path) == testutil::read_file(kDir + "/model2.ovm"));

    // predictions survive the round trip
    Record rec = fx.store.get(0);
    CHECK(predict(back, rec) == predict(model, rec));
}

TEST_CASE("empty train set and missing labels are rejected") {
    synth::BinaryFixtureConfig cfg;
    cfg.n_records = 40;
    Fixture fx = load_fixture(synth::make_binary_fixture(cfg), "guards", false);
    ArchChoice choice = small_choice(1);
    ModelIR ir = compile(fx.schema, choice);
    TrainConfig tc = TrainConfig::from_choice(choice, 1);
    CHECK_THROWS_AS(train(ir, fx.store, {}, tc), EmptyTrainSet);
    std::vector<int64_t> none;
    CHECK_THROWS_AS(train(ir, fx.store, fx.labels, tc, &none), EmptyTrainSet);
}
