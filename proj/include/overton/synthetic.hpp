#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "overton/labelmodel.hpp"

namespace overton::synth {

// Ground truth behind a generated label matrix.
struct LabelModelTruth {
    std::vector<double> accuracies;
    std::vector<double> prior;
    std::vector<int> true_labels;
};

// Units drawn from the label model's own generative story: y ~ prior, each
// source abstains independently, otherwise votes y with its accuracy.
LabelMatrix synth_label_matrix(int k, int n_units, const std::vector<double>& accuracies,
                               double abstain_rate, const std::vector<double>& prior, uint64_t seed,
                               LabelModelTruth* truth = nullptr);

struct Fixture {
    std::string schema_json;
    std::string data_jsonl;
};

// Running-example style fixture: tokens (sequence) / query (singleton) /
// entities (set), with a multiclass, a per-token bitvector, and a select task.
struct IntentFixtureConfig {
    int n_records = 200;
    uint64_t seed = 1;
    std::vector<double> source_accuracies = {0.9, 0.75};
    double abstain_rate = 0.2;
    double slice_fraction = 0.0;  // fraction of rows tagged "nutrition"
    int budget = 2;
    uint64_t tuning_seed = 7;
    int entity_vocab = 0;  // 0 = the small named dictionary; else synthetic entities
};

Fixture make_intent_fixture(const IntentFixtureConfig& cfg);

// Singleton binary-classification fixture; drives the noise-aware-loss and
// slice-advantage experiments.
struct BinaryFixtureConfig {
    int n_records = 600;
    uint64_t seed = 1;
    double token_noise = 0.0;  // chance a token comes from the wrong class pool
    std::vector<double> source_accuracies = {1.0};
    double abstain_rate = 0.0;
    double slice_fraction = 0.0;  // inverted-relation subpopulation, tagged "special"
    bool declare_slice = false;   // promote the tag to a slice in the schema
    int tokens_per_record = 4;
    int vocab_per_class = 0;  // 0 = the small named pools; else synthetic words
};

Fixture make_binary_fixture(const BinaryFixtureConfig& cfg);

void write_fixture(const Fixture& f, const std::string& dir);

}  // namespace overton::synth
