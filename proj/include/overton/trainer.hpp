#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "overton/labelmodel.hpp"
#include "overton/numerics.hpp"

namespace overton {

struct TrainConfig {
    double learning_rate = 0.1;
    int epochs = 10;
    int batch_size = 16;
    double lambda_ind = 1.0;  // indicator-head loss weight
    double lambda_exp = 1.0;  // member-masked expert loss weight
    bool rebalance = true;
    uint64_t seed = 0;

    static TrainConfig from_choice(const ArchChoice& c, uint64_t seed);
};

// Probabilistic labels for one task, aligned with a unit list over train rows.
struct TaskLabels {
    LabelMatrix matrix;
    ProbLabels labels;
};

struct Provenance {
    uint64_t schema_digest = 0;
    uint64_t store_digest = 0;
    ArchChoice choice;
    uint64_t seed = 0;
    std::map<std::string, uint64_t> label_digests;
};

struct EpochLoss {
    int epoch = 0;
    double total = 0.0;
    std::map<std::string, double> per_task;
};

struct TrainedModel {
    ModelIR ir;
    ParamStore params;
    Provenance provenance;
    std::vector<EpochLoss> epoch_log;

    const ServingSignature& signature() const { return ir.signature; }
};

// Noise-aware cross-entropy against a soft label (stable log-softmax path).
double noise_aware_loss(const std::vector<double>& logits, const std::vector<double>& soft_label,
                        double weight);

// Per-bit binary cross-entropy of sigmoid(logit) against a soft bit probability.
double noise_aware_bit_loss(double logit, double soft_on, double weight);

// Mini-batch SGD over the multitask, slice-aware loss. Deterministic given
// cfg.seed; gradient accumulation runs in fixed example order. `row_subset`
// restricts training to a subset of the train rows (scaling experiments).
TrainedModel train(const ModelIR& ir, const RowStore& store,
                   const std::map<std::string, TaskLabels>& labels, const TrainConfig& cfg,
                   const std::vector<int64_t>* row_subset = nullptr);

// Per-task output probabilities for one record (serving path).
std::map<std::string, Tensor> predict_probs(const TrainedModel& model, const Record& record);

// JSON predictions shaped by the serving signature.
std::string predict(const TrainedModel& model, const Record& record);

// Parses a serving-time record (payload values only) using the signature's
// typed input descriptors; no schema required at inference.
Record parse_serving_record(const ServingSignature& sig, std::string_view json_line);

// model.ovm container: model.ir.json, model.sig.json, params.bin, provenance.json.
void save_model(const TrainedModel& model, const std::string& path);
TrainedModel load_model(const std::string& path);

}  // namespace overton
