#include "overton/labelmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "overton/errors.hpp"

namespace overton {

using nlohmann::json;

int LabelMatrix::source_index(const std::string& name) const {
    for (size_t i = 0; i < sources.size(); ++i)
        if (sources[i] == name) return static_cast<int>(i);
    return -1;
}

namespace {

int intern_source(LabelMatrix& m, const std::string& name) {
    int idx = m.source_index(name);
    if (idx >= 0) return idx;
    m.sources.push_back(name);
    return static_cast<int>(m.sources.size()) - 1;
}

// Posterior over the unit's classes given its votes: prior_c * prod_s p(v_s|c),
// computed in log space. `prior` may be empty (uniform over the unit's classes).
std::vector<double> unit_posterior(const Unit& u, const std::vector<double>& accuracies,
                                   const std::vector<double>& prior, double* log_evidence) {
    const int k = u.cardinality;
    std::vector<double> logp(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c)
        logp[c] = prior.empty() ? -std::log(static_cast<double>(k)) : std::log(prior[c]);
    for (const auto& [s, v] : u.votes) {
        double alpha = accuracies[s];
        double miss = k > 1 ? (1.0 - alpha) / (k - 1) : 1.0;
        for (int c = 0; c < k; ++c) logp[c] += std::log(c == v ? alpha : miss);
    }
    double mx = *std::max_element(logp.begin(), logp.end());
    double z = 0.0;
    for (double& l : logp) {
        l = std::exp(l - mx);
        z += l;
    }
    for (double& l : logp) l /= z;
    if (log_evidence) *log_evidence = mx + std::log(z);
    return logp;
}

}  // namespace

LabelMatrix build_label_matrix(const RowStore& store, const Schema& schema,
                               const std::string& task_name, const std::vector<int64_t>& rows) {
    const TaskDecl* task = schema.find_task(task_name);
    if (!task) throw Error("unknown task: " + task_name);
    const PayloadDecl* payload = schema.find_payload(task->payload);
    const bool per_token = payload->kind == PayloadKind::Sequence;
    const int k = task->label_count();

    LabelMatrix m;
    m.task = task_name;

    for (int64_t row : rows) {
        Record rec = store.get(row);
        auto sup = rec.supervision.find(task_name);
        const std::vector<LabeledVote>* votes =
            sup == rec.supervision.end() ? nullptr : &sup->second;

        auto vote_of = [&](const LabeledVote& v, auto typed) -> decltype(typed) {
            const auto* p = std::get_if<std::decay_t<decltype(typed)>>(&v.value);
            if (!p)
                throw GranularityMismatch("vote shape for task \"" + task_name +
                                          "\" does not match its payload granularity");
            return *p;
        };

        switch (task->kind) {
            case TaskKind::Multiclass: {
                if (!per_token) {
                    Unit u{UnitRef{row, -1, -1}, k, {}};
                    if (votes)
                        for (const auto& v : *votes)
                            u.votes.emplace_back(intern_source(m, v.source), vote_of(v, int{}));
                    m.units.push_back(std::move(u));
                } else {
                    size_t len = 0;
                    if (auto it = rec.payload_values.find(task->payload); it != rec.payload_values.end())
                        if (const auto* seq = std::get_if<std::vector<std::string>>(&it->second))
                            len = seq->size();
                    std::vector<Unit> units;
                    for (size_t t = 0; t < len; ++t)
                        units.push_back(Unit{UnitRef{row, static_cast<int32_t>(t), -1}, k, {}});
                    if (votes)
                        for (const auto& v : *votes) {
                            const auto& labels = vote_of(v, std::vector<int>{});
                            int s = intern_source(m, v.source);
                            for (size_t t = 0; t < len; ++t) units[t].votes.emplace_back(s, labels[t]);
                        }
                    for (auto& u : units) m.units.push_back(std::move(u));
                }
                break;
            }
            case TaskKind::Bitvector: {
                if (!per_token) {
                    std::vector<Unit> units;
                    for (int b = 0; b < k; ++b)
                        units.push_back(Unit{UnitRef{row, -1, b}, 2, {}});
                    if (votes)
                        for (const auto& v : *votes) {
                            const auto& mask = vote_of(v, std::vector<uint8_t>{});
                            int s = intern_source(m, v.source);
                            for (int b = 0; b < k; ++b) units[b].votes.emplace_back(s, mask[b] ? 1 : 0);
                        }
                    for (auto& u : units) m.units.push_back(std::move(u));
                } else {
                    size_t len = 0;
                    if (auto it = rec.payload_values.find(task->payload); it != rec.payload_values.end())
                        if (const auto* seq = std::get_if<std::vector<std::string>>(&it->second))
                            len = seq->size();
                    std::vector<Unit> units;
                    for (size_t t = 0; t < len; ++t)
                        for (int b = 0; b < k; ++b)
                            units.push_back(Unit{UnitRef{row, static_cast<int32_t>(t), b}, 2, {}});
                    if (votes)
                        for (const auto& v : *votes) {
                            const auto& masks = vote_of(v, std::vector<std::vector<uint8_t>>{});
                            int s = intern_source(m, v.source);
                            for (size_t t = 0; t < len; ++t)
                                for (int b = 0; b < k; ++b)
                                    units[t * k + b].votes.emplace_back(s, masks[t][b] ? 1 : 0);
                        }
                    for (auto& u : units) m.units.push_back(std::move(u));
                }
                break;
            }
            case TaskKind::Select: {
                size_t n = 0;
                if (auto it = rec.payload_values.find(task->select_payload); it != rec.payload_values.end())
                    if (const auto* elems = std::get_if<std::vector<SetElement>>(&it->second))
                        n = elems->size();
                if (n == 0) break;  // nothing to select from
                Unit u{UnitRef{row, -1, -1}, static_cast<int>(n), {}};
                if (votes)
                    for (const auto& v : *votes)
                        u.votes.emplace_back(intern_source(m, v.source), vote_of(v, int{}));
                m.units.push_back(std::move(u));
                break;
            }
        }
    }
    return m;
}

SourceModel fit_em(const LabelMatrix& matrix, int max_iters, double tol, uint64_t seed) {
    (void)seed;  // initialization is deterministic; seed reserved for stochastic variants

    const size_t n_sources = matrix.sources.size();
    int k_min = 0, k_fixed = -1;
    bool fixed_k = true;
    int64_t total_votes = 0;
    for (const auto& u : matrix.units) {
        total_votes += static_cast<int64_t>(u.votes.size());
        if (k_min == 0 || u.cardinality < k_min) k_min = u.cardinality;
        if (k_fixed == -1) k_fixed = u.cardinality;
        else if (k_fixed != u.cardinality) fixed_k = false;
    }
    if (total_votes == 0) throw DegenerateMatrix("all units abstain for task " + matrix.task);

    const double lo = 1.0 / std::max(k_min, 2) + kAccuracyClampEps;
    const double hi = 1.0 - kAccuracyClampEps;
    auto clamp = [&](double a) { return std::min(hi, std::max(lo, a)); };

    SourceModel model;
    model.sources = matrix.sources;
    model.accuracies.assign(n_sources, 0.7);
    model.prior_is_uniform_per_unit = !fixed_k;
    if (fixed_k) model.class_prior.assign(static_cast<size_t>(k_fixed), 1.0 / k_fixed);

    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < max_iters; ++iter) {
        std::vector<double> correct(n_sources, 0.0), voted(n_sources, 0.0);
        std::vector<double> prior_acc(fixed_k ? static_cast<size_t>(k_fixed) : 0, 0.0);
        double n_active = 0.0;
        double ll = 0.0;

        for (const auto& u : matrix.units) {
            if (u.votes.empty()) continue;
            double log_ev = 0.0;
            auto post = unit_posterior(u, model.accuracies,
                                       fixed_k ? model.class_prior : std::vector<double>{}, &log_ev);
            ll += log_ev;
            n_active += 1.0;
            for (const auto& [s, v] : u.votes) {
                correct[s] += post[v];
                voted[s] += 1.0;
            }
            if (fixed_k)
                for (int c = 0; c < k_fixed; ++c) prior_acc[c] += post[c];
        }

        for (size_t s = 0; s < n_sources; ++s)
            if (voted[s] > 0) model.accuracies[s] = clamp(correct[s] / voted[s]);
        if (fixed_k && n_active > 0) {
            double z = 0.0;
            for (double& p : prior_acc) z += p;
            for (size_t c = 0; c < prior_acc.size(); ++c) model.class_prior[c] = prior_acc[c] / z;
        }

        model.log_likelihood = ll;
        if (iter > 0 && ll - prev_ll < tol) break;
        prev_ll = ll;
    }
    return model;
}

ProbLabels posterior_labels(const SourceModel& model, const LabelMatrix& matrix) {
    // Map matrix source indices into the model's accuracy table.
    std::vector<double> accuracies(matrix.sources.size());
    for (size_t i = 0; i < matrix.sources.size(); ++i) {
        auto it = std::find(model.sources.begin(), model.sources.end(), matrix.sources[i]);
        if (it == model.sources.end())
            throw UnknownSource("source \"" + matrix.sources[i] + "\" not covered by the model");
        accuracies[i] = model.accuracies[static_cast<size_t>(it - model.sources.begin())];
    }

    ProbLabels out;
    out.labels.reserve(matrix.units.size());
    for (const auto& u : matrix.units) {
        if (u.votes.empty()) {
            out.labels.emplace_back(std::nullopt);
            continue;
        }
        const bool use_prior = !model.prior_is_uniform_per_unit &&
                               static_cast<int>(model.class_prior.size()) == u.cardinality;
        out.labels.emplace_back(unit_posterior(
            u, accuracies, use_prior ? model.class_prior : std::vector<double>{}, nullptr));
    }
    return out;
}

ProbLabels majority_vote(const LabelMatrix& matrix) {
    ProbLabels out;
    out.labels.reserve(matrix.units.size());
    for (const auto& u : matrix.units) {
        if (u.votes.empty()) {
            out.labels.emplace_back(std::nullopt);
            continue;
        }
        std::vector<int> counts(static_cast<size_t>(u.cardinality), 0);
        for (const auto& [s, v] : u.votes) ++counts[v];
        int best = 0;
        for (int c = 1; c < u.cardinality; ++c)
            if (counts[c] > counts[best]) best = c;  // ties stay at the lowest index
        std::vector<double> onehot(static_cast<size_t>(u.cardinality), 0.0);
        onehot[best] = 1.0;
        out.labels.emplace_back(std::move(onehot));
    }
    return out;
}

std::vector<double> rebalance_weights(const ProbLabels& labels) {
    size_t max_k = 0;
    for (const auto& l : labels.labels)
        if (l) max_k = std::max(max_k, l->size());
    std::vector<double> mass(max_k, 0.0);
    double n_eff = 0.0;
    for (const auto& l : labels.labels) {
        if (!l) continue;
        n_eff += 1.0;
        for (size_t c = 0; c < l->size(); ++c) mass[c] += (*l)[c];
    }
    std::vector<double> weights(labels.size(), 0.0);
    if (n_eff == 0.0) return weights;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels.abstained(i)) continue;
        const auto& p = *labels.labels[i];
        size_t argmax = 0;
        for (size_t c = 1; c < p.size(); ++c)
            if (p[c] > p[argmax]) argmax = c;
        weights[i] = (n_eff / p.size()) / mass[argmax];
    }
    return weights;
}

std::string labels_to_json(const SourceModel& model, const ProbLabels& labels) {
    json j;
    json acc = json::object();
    for (size_t i = 0; i < model.sources.size(); ++i) acc[model.sources[i]] = model.accuracies[i];
    j["accuracies"] = acc;
    j["prior"] = model.class_prior;
    j["log_likelihood"] = model.log_likelihood;
    json arr = json::array();
    for (const auto& l : labels.labels) {
        if (l) arr.push_back(*l);
        else arr.push_back(nullptr);
    }
    j["labels"] = arr;
    return j.dump(2) + "\n";
}

void labels_from_json(const std::string& text, SourceModel& model, ProbLabels& labels) {
    json j = json::parse(text);
    model = SourceModel{};
    for (const auto& [src, a] : j.at("accuracies").items()) {
        model.sources.push_back(src);
        model.accuracies.push_back(a.get<double>());
    }
    model.class_prior = j.at("prior").get<std::vector<double>>();
    model.log_likelihood = j.at("log_likelihood").get<double>();
    model.prior_is_uniform_per_unit = model.class_prior.empty();
    labels.labels.clear();
    for (const auto& l : j.at("labels")) {
        if (l.is_null()) labels.labels.emplace_back(std::nullopt);
        else labels.labels.emplace_back(l.get<std::vector<double>>());
    }
}

}  // namespace overton
