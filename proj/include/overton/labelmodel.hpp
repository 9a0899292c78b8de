#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "overton/rowstore.hpp"
#include "overton/schema.hpp"

namespace overton {

// One prediction target: a row, a (row, token), a (row, bit), or a
// (row, token, bit). Unused coordinates are -1.
struct UnitRef {
    int64_t row = -1;
    int32_t token = -1;
    int32_t bit = -1;
    bool operator==(const UnitRef&) const = default;
    auto operator<=>(const UnitRef&) const = default;
};

struct Unit {
    UnitRef ref;
    int cardinality = 2;
    // (source index, class index) pairs; a source absent from the list abstains.
    std::vector<std::pair<int, int>> votes;
};

struct LabelMatrix {
    std::string task;
    std::vector<std::string> sources;  // union over units, in first-seen order
    std::vector<Unit> units;

    int source_index(const std::string& name) const;
};

struct SourceModel {
    std::vector<std::string> sources;
    std::vector<double> accuracies;  // clamped to [1/K_min + eps, 1 - eps]
    std::vector<double> class_prior;  // over K for fixed-cardinality tasks
    double log_likelihood = 0.0;
    bool prior_is_uniform_per_unit = false;  // select tasks: uniform over candidates
};

// Per-unit probability vectors; nullopt marks an abstained unit (no votes).
struct ProbLabels {
    std::vector<std::optional<std::vector<double>>> labels;

    size_t size() const { return labels.size(); }
    bool abstained(size_t i) const { return !labels[i].has_value(); }
};

inline constexpr double kAccuracyClampEps = 1e-4;

// One unit per prediction target of `task` over `rows`; bitvector tasks expand
// to one binary unit per (target, bit); select units use the row's candidate
// index space.
LabelMatrix build_label_matrix(const RowStore& store, const Schema& schema,
                               const std::string& task, const std::vector<int64_t>& rows);

// EM under the symmetric-accuracy generative model: y ~ Categorical(prior);
// a non-abstaining source votes y with probability alpha_s, else uniformly
// over the other K-1 classes. Deterministic given `seed`.
SourceModel fit_em(const LabelMatrix& matrix, int max_iters, double tol, uint64_t seed);

// Exact Bayes posterior per unit under the generative model.
ProbLabels posterior_labels(const SourceModel& model, const LabelMatrix& matrix);

// One-hot plurality vote, ties toward the lowest class index.
ProbLabels majority_vote(const LabelMatrix& matrix);

// Per-unit class-rebalancing weights:
//   weight(u) = (N_eff / K_u) / mass(argmax class of u),  mass(c) = sum_u P_u(c).
// Abstained units get weight 0.
std::vector<double> rebalance_weights(const ProbLabels& labels);

// JSON artifact for `fit-labels` (fields: accuracies, prior, log_likelihood, labels).
std::string labels_to_json(const SourceModel& model, const ProbLabels& labels);
void labels_from_json(const std::string& text, SourceModel& model, ProbLabels& labels);

}  // namespace overton
