#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/labelmodel.hpp"
#include "overton/synthetic.hpp"
#include "testutil.hpp"

using namespace overton;
using nlohmann::json;

namespace {

const std::string kDir = testutil::scratch_dir("labelmodel");

// Independent Bayes oracle: direct enumeration of prior_c * prod p(vote | c).
std::vector<double> bayes_oracle(const Unit& u, const std::vector<double>& acc,
                                 const std::vector<double>& prior) {
    const int k = u.cardinality;
    std::vector<double> p(static_cast<size_t>(k));
    double z = 0.0;
    for (int c = 0; c < k; ++c) {
        double lik = prior.empty() ? 1.0 / k : prior[static_cast<size_t>(c)];
        for (const auto& [s, v] : u.votes)
            lik *= v == c ? acc[static_cast<size_t>(s)] : (1.0 - acc[static_cast<size_t>(s)]) / (k - 1);
        p[static_cast<size_t>(c)] = lik;
        z += lik;
    }
    for (double& x : p) x /= z;
    return p;
}

LabelMatrix simple_matrix(int k, const std::vector<std::vector<std::pair<int, int>>>& unit_votes,
                          int n_sources) {
    LabelMatrix m;
    m.task = "t";
    for (int s = 0; s < n_sources; ++s) m.sources.push_back("s" + std::to_string(s));
    for (size_t i = 0; i < unit_votes.size(); ++i)
        m.units.push_back(Unit{UnitRef{static_cast<int64_t>(i), -1, -1}, k, unit_votes[i]});
    return m;
}

SourceModel fixed_model(std::vector<double> acc, std::vector<double> prior) {
    SourceModel model;
    for (size_t s = 0; s < acc.size(); ++s) model.sources.push_back("s" + std::to_string(s));
    model.accuracies = std::move(acc);
    model.class_prior = std::move(prior);
    return model;
}

}  // namespace

TEST_CASE("matrix construction per granularity") {
    Schema schema = parse_schema(testutil::intent_schema_json());

    SUBCASE("singleton multiclass: one unit per row, schema label order") {
        std::string jsonl =
            R"({"tokens": ["a"], "supervision": {"intent": [{"source": "A", "value": "height"}]}, "tags": ["train"]})"
            "\n"
            R"({"tokens": ["a"], "supervision": {"intent": [{"source": "A", "value": "age"}, {"source": "B", "value": "height"}]}, "tags": ["train"]})"
            "\n";
        auto store = testutil::ingest_jsonl(schema, jsonl, kDir, "sing");
        LabelMatrix m = build_label_matrix(store, schema, "intent", {0, 1});
        REQUIRE(m.units.size() == 2);
        CHECK(m.units[0].cardinality == 3);
        CHECK(m.units[0].votes == std::vector<std::pair<int, int>>{{0, 0}});
        CHECK(m.units[1].votes == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}});
    }

    SUBCASE("sequence task over a 3-token row expands to 3 units") {
        Schema seq_schema = parse_schema(R"({
            "payloads": [{"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]}],
            "tasks": [{"name": "pos", "payload": "tokens", "kind": {"multiclass": ["x", "y"]}}]})");
        std::string jsonl =
            R"({"tokens": ["a", "b", "c"], "supervision": {"pos": [{"source": "A", "value": ["x", "y", "x"]}]}, "tags": ["train"]})"
            "\n";
        auto store = testutil::ingest_jsonl(seq_schema, jsonl, kDir, "seq");
        LabelMatrix m = build_label_matrix(store, seq_schema, "pos", {0});
        REQUIRE(m.units.size() == 3);
        CHECK(m.units[1].ref.token == 1);
        CHECK(m.units[1].votes == std::vector<std::pair<int, int>>{{0, 1}});
    }

    SUBCASE("bitvector over 2 tokens expands to 4 binary units") {
        // Oracle: enumerate (token, bit) pairs.
        Schema bv_schema = parse_schema(R"({
            "payloads": [{"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]}],
            "tasks": [{"name": "et", "payload": "tokens", "kind": {"bitvector": ["loc", "country"]}}]})");
        std::string jsonl =
            R"({"tokens": ["a", "b"], "supervision": {"et": [{"source": "A", "value": [["loc"], ["loc", "country"]]}]}, "tags": ["train"]})"
            "\n";
        auto store = testutil::ingest_jsonl(bv_schema, jsonl, kDir, "bv");
        LabelMatrix m = build_label_matrix(store, bv_schema, "et", {0});
        std::vector<std::pair<int, int>> expected_refs;
        for (int t = 0; t < 2; ++t)
            for (int b = 0; b < 2; ++b) expected_refs.emplace_back(t, b);
        REQUIRE(m.units.size() == expected_refs.size());
        for (size_t i = 0; i < m.units.size(); ++i) {
            CHECK(m.units[i].ref.token == expected_refs[i].first);
            CHECK(m.units[i].ref.bit == expected_refs[i].second);
            CHECK(m.units[i].cardinality == 2);
        }
        CHECK(m.units[0].votes[0].second == 1);  // token 0 has loc
        CHECK(m.units[1].votes[0].second == 0);  // token 0 lacks country
        CHECK(m.units[3].votes[0].second == 1);  // token 1 has country
    }
}

TEST_CASE("single source voting one class converges to the upper clamp") {
    std::vector<std::vector<std::pair<int, int>>> votes(100, {{0, 0}});
    LabelMatrix m = simple_matrix(2, votes, 1);
    SourceModel model = fit_em(m, 100, 1e-10, 0);
    CHECK(model.accuracies[0] == doctest::Approx(1.0 - kAccuracyClampEps));
    CHECK(model.class_prior[0] > 0.99);
}

TEST_CASE("EM recovers synthetic accuracies and prior") {
    synth::LabelModelTruth truth;
    LabelMatrix m = synth::synth_label_matrix(3, 8000, {0.9, 0.8, 0.7, 0.6, 0.55}, 0.3,
                                              {1.0 / 3, 1.0 / 3, 1.0 / 3}, 42, &truth);
    SourceModel model = fit_em(m, 200, 1e-9, 0);
    for (size_t s = 0; s < truth.accuracies.size(); ++s)
        CHECK(model.accuracies[s] == doctest::Approx(truth.accuracies[s]).epsilon(0.06));
    for (int c = 0; c < 3; ++c)
        CHECK(model.class_prior[static_cast<size_t>(c)] == doctest::Approx(1.0 / 3).epsilon(0.09));
}

TEST_CASE("two sources that always agree get equal accuracies") {
    Rng rng(17);
    std::vector<std::vector<std::pair<int, int>>> votes;
    for (int i = 0; i < 500; ++i) {
        int v = static_cast<int>(rng.next_below(3));
        votes.push_back({{0, v}, {1, v}});
    }
    LabelMatrix m = simple_matrix(3, votes, 2);
    SourceModel model = fit_em(m, 100, 1e-10, 0);
    CHECK(model.accuracies[0] == doctest::Approx(model.accuracies[1]).epsilon(1e-9));

    // Swapping source ids leaves the posteriors unchanged.
    LabelMatrix swapped = m;
    std::swap(swapped.sources[0], swapped.sources[1]);
    SourceModel model2 = fit_em(swapped, 100, 1e-10, 0);
    ProbLabels a = posterior_labels(model, m);
    ProbLabels b = posterior_labels(model2, swapped);
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t c = 0; c < a.labels[i]->size(); ++c)
            REQUIRE((*a.labels[i])[c] == doctest::Approx((*b.labels[i])[c]).epsilon(1e-12));
}

TEST_CASE("log-likelihood is non-decreasing across EM iterations") {
    synth::LabelModelTruth truth;
    LabelMatrix m = synth::synth_label_matrix(3, 600, {0.85, 0.6, 0.55}, 0.4,
                                              {0.5, 0.3, 0.2}, 7, &truth);
    double prev = -1e300;
    for (int iters = 1; iters <= 25; ++iters) {
        SourceModel model = fit_em(m, iters, 0.0, 0);
        REQUIRE(model.log_likelihood >= prev - 1e-9);
        prev = model.log_likelihood;
    }
}

TEST_CASE("posterior closed forms") {
    SUBCASE("two agreeing sources, K=2, uniform prior") {
        LabelMatrix m = simple_matrix(2, {{{0, 0}, {1, 0}}}, 2);
        ProbLabels p = posterior_labels(fixed_model({0.9, 0.8}, {0.5, 0.5}), m);
        CHECK((*p.labels[0])[0] == doctest::Approx((0.9 * 0.8) / (0.9 * 0.8 + 0.1 * 0.2)).epsilon(1e-9));
        CHECK((*p.labels[0])[0] == doctest::Approx(0.97297).epsilon(1e-4));
    }
    SUBCASE("single voter, the other abstains") {
        LabelMatrix m = simple_matrix(2, {{{0, 0}}}, 2);
        ProbLabels p = posterior_labels(fixed_model({0.9, 0.8}, {0.5, 0.5}), m);
        CHECK((*p.labels[0])[0] == doctest::Approx(0.9).epsilon(1e-12));
    }
    SUBCASE("all sources abstain marks the unit ABSTAINED") {
        LabelMatrix m = simple_matrix(2, {{}}, 2);
        ProbLabels p = posterior_labels(fixed_model({0.9, 0.8}, {0.5, 0.5}), m);
        CHECK(p.abstained(0));
    }
    SUBCASE("unknown source is rejected") {
        LabelMatrix m = simple_matrix(2, {{{0, 0}}}, 2);
        SourceModel model = fixed_model({0.9}, {0.5, 0.5});  // knows s0 only
        m.sources = {"s0", "mystery"};
        m.units[0].votes = {{1, 0}};
        CHECK_THROWS_AS(posterior_labels(model, m), UnknownSource);
    }
}

TEST_CASE("posterior exactness against exhaustive enumeration") {
    // Every vote pattern with <= 4 sources and K in {2, 3, 4}.
    const std::vector<double> acc = {0.9, 0.8, 0.7, 0.6};
    for (int k = 2; k <= 4; ++k) {
        std::vector<double> prior;
        double z = 0;
        for (int c = 0; c < k; ++c) {
            prior.push_back(1.0 + c);
            z += 1.0 + c;
        }
        for (double& p : prior) p /= z;
        for (int n_sources = 1; n_sources <= 4; ++n_sources) {
            int patterns = 1;
            for (int s = 0; s < n_sources; ++s) patterns *= k + 1;  // vote c or abstain
            std::vector<std::vector<std::pair<int, int>>> unit_votes;
            for (int pat = 0; pat < patterns; ++pat) {
                std::vector<std::pair<int, int>> votes;
                int rem = pat;
                for (int s = 0; s < n_sources; ++s) {
                    int v = rem % (k + 1);
                    rem /= k + 1;
                    if (v < k) votes.emplace_back(s, v);
                }
                unit_votes.push_back(std::move(votes));
            }
            LabelMatrix m = simple_matrix(k, unit_votes, n_sources);
            std::vector<double> used_acc(acc.begin(), acc.begin() + n_sources);
            ProbLabels p = posterior_labels(fixed_model(used_acc, prior), m);
            for (size_t i = 0; i < m.units.size(); ++i) {
                if (m.units[i].votes.empty()) {
                    REQUIRE(p.abstained(i));
                    continue;
                }
                auto oracle = bayes_oracle(m.units[i], used_acc, prior);
                for (int c = 0; c < k; ++c)
                    REQUIRE(std::abs((*p.labels[i])[static_cast<size_t>(c)] -
                                     oracle[static_cast<size_t>(c)]) < 1e-9);
            }
        }
    }
}

TEST_CASE("label permutation equivariance") {
    LabelMatrix m = simple_matrix(3, {{{0, 0}, {1, 2}}, {{0, 1}}, {{1, 0}, {0, 2}}}, 2);
    SourceModel model = fixed_model({0.8, 0.7}, {0.5, 0.3, 0.2});
    ProbLabels p = posterior_labels(model, m);

    // permute classes with sigma = (1 2 0): new class = sigma[old]
    std::vector<int> sigma = {1, 2, 0};
    LabelMatrix pm = m;
    for (auto& u : pm.units)
        for (auto& [s, v] : u.votes) v = sigma[static_cast<size_t>(v)];
    SourceModel pmodel = model;
    for (int c = 0; c < 3; ++c)
        pmodel.class_prior[static_cast<size_t>(sigma[static_cast<size_t>(c)])] =
            model.class_prior[static_cast<size_t>(c)];
    ProbLabels pp = posterior_labels(pmodel, pm);
    for (size_t i = 0; i < p.size(); ++i)
        for (int c = 0; c < 3; ++c)
            REQUIRE((*pp.labels[i])[static_cast<size_t>(sigma[static_cast<size_t>(c)])] ==
                    doctest::Approx((*p.labels[i])[static_cast<size_t>(c)]).epsilon(1e-12));
}

TEST_CASE("majority vote") {
    SUBCASE("plurality wins") {
        LabelMatrix m = simple_matrix(2, {{{0, 0}, {1, 0}, {2, 1}}}, 3);
        ProbLabels p = majority_vote(m);
        CHECK((*p.labels[0]) == std::vector<double>{1.0, 0.0});
    }
    SUBCASE("ties break toward the lowest class index") {
        LabelMatrix m = simple_matrix(2, {{{0, 0}, {1, 1}}}, 2);
        ProbLabels p = majority_vote(m);
        CHECK((*p.labels[0]) == std::vector<double>{1.0, 0.0});
    }
    SUBCASE("no votes abstains") {
        LabelMatrix m = simple_matrix(2, {{}}, 1);
        CHECK(majority_vote(m).abstained(0));
    }
    SUBCASE("argmax agrees with EM posteriors on a conflict-free matrix") {
        Rng rng(23);
        std::vector<std::vector<std::pair<int, int>>> votes;
        for (int i = 0; i < 300; ++i) {
            int v = static_cast<int>(rng.next_below(3));
            std::vector<std::pair<int, int>> u;
            for (int s = 0; s < 3; ++s)
                if (rng.next_below(4)) u.emplace_back(s, v);  // everyone who votes agrees
            votes.push_back(std::move(u));
        }
        LabelMatrix m = simple_matrix(3, votes, 3);
        ProbLabels mv = majority_vote(m);
        ProbLabels em = posterior_labels(fit_em(m, 100, 1e-10, 0), m);
        for (size_t i = 0; i < m.units.size(); ++i) {
            if (mv.abstained(i)) {
                REQUIRE(em.abstained(i));
                continue;
            }
            auto arg = [](const std::vector<double>& p) {
                return std::max_element(p.begin(), p.end()) - p.begin();
            };
            REQUIRE(arg(*mv.labels[i]) == arg(*em.labels[i]));
        }
    }
}

TEST_CASE("rebalance weights") {
    SUBCASE("balanced two-class labels weigh 1.0") {
        ProbLabels labels;
        for (int i = 0; i < 10; ++i) {
            labels.labels.emplace_back(std::vector<double>{1.0, 0.0});
            labels.labels.emplace_back(std::vector<double>{0.0, 1.0});
        }
        auto w = rebalance_weights(labels);
        for (double v : w) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("90/10 hard split gives 5.0 and 5/9") {
        ProbLabels labels;
        for (int i = 0; i < 90; ++i) labels.labels.emplace_back(std::vector<double>{1.0, 0.0});
        for (int i = 0; i < 10; ++i) labels.labels.emplace_back(std::vector<double>{0.0, 1.0});
        auto w = rebalance_weights(labels);
        CHECK(w[0] == doctest::Approx(5.0 / 9.0).epsilon(1e-12));
        CHECK(w[95] == doctest::Approx(5.0).epsilon(1e-12));
    }
    SUBCASE("all abstained weighs 0") {
        ProbLabels labels;
        labels.labels.assign(5, std::nullopt);
        auto w = rebalance_weights(labels);
        for (double v : w) CHECK(v == 0.0);
    }
    SUBCASE("mean weight is 1 when classes are balanced (soft labels)") {
        Rng rng(5);
        ProbLabels labels;
        for (int i = 0; i < 400; ++i) {
            double p = 0.1 + 0.8 * rng.next_double();
            // mirrored pairs keep classes balanced overall
            labels.labels.emplace_back(std::vector<double>{p, 1 - p});
            labels.labels.emplace_back(std::vector<double>{1 - p, p});
        }
        auto w = rebalance_weights(labels);
        double mean = 0;
        for (double v : w) mean += v;
        mean /= static_cast<double>(w.size());
        CHECK(mean == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("degenerate matrix is rejected") {
    LabelMatrix m = simple_matrix(2, {{}, {}, {}}, 1);
    CHECK_THROWS_AS(fit_em(m, 10, 1e-6, 0), DegenerateMatrix);
}

TEST_CASE("labels artifact round-trips through JSON") {
    LabelMatrix m = simple_matrix(2, {{{0, 0}, {1, 1}}, {}}, 2);
    SourceModel model = fit_em(m, 50, 1e-9, 0);
    ProbLabels p = posterior_labels(model, m);
    std::string text = labels_to_json(model, p);
    json j = json::parse(text);
    CHECK(j.contains("accuracies"));
    CHECK(j.contains("prior"));
    CHECK(j.contains("log_likelihood"));
    CHECK(j.at("labels").size() == 2);
    CHECK(j.at("labels")[1].is_null());

    SourceModel model2;
    ProbLabels p2;
    labels_from_json(text, model2, p2);
    CHECK(model2.sources == model.sources);
    CHECK(model2.accuracies[0] == doctest::Approx(model.accuracies[0]).epsilon(1e-12));
    CHECK(p2.abstained(1));
    CHECK((*p2.labels[0])[0] == doctest::Approx((*p.labels[0])[0]).epsilon(1e-12));
}
