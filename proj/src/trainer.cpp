#include "overton/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/errors.hpp"

namespace overton {

using nlohmann::json;

TrainConfig TrainConfig::from_choice(const ArchChoice& c, uint64_t seed) {
    TrainConfig cfg;
    cfg.learning_rate = c.learning_rate;
    cfg.epochs = c.epochs;
    cfg.batch_size = c.batch_size;
    cfg.seed = seed;
    return cfg;
}

double noise_aware_loss(const std::vector<double>& logits, const std::vector<double>& soft_label,
                        double weight) {
    if (weight == 0.0 || logits.empty()) return 0.0;
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    double log_z = mx + std::log(z);
    double loss = 0.0;
    for (size_t c = 0; c < logits.size(); ++c)
        loss -= soft_label[c] * (logits[c] - log_z);
    return weight * loss;
}

double noise_aware_bit_loss(double logit, double soft_on, double weight) {
    if (weight == 0.0) return 0.0;
    // log(1+e^x) evaluated stably
    double log1pexp = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
    return weight * (log1pexp - soft_on * logit);
}

namespace {

// Index from row id to that row's units within a task's matrix.
struct UnitIndex {
    std::map<int64_t, std::vector<size_t>> by_row;

    explicit UnitIndex(const LabelMatrix& m) {
        for (size_t i = 0; i < m.units.size(); ++i) by_row[m.units[i].ref.row].push_back(i);
    }
};

struct TaskState {
    const TaskLabels* labels = nullptr;
    std::vector<double> weights;  // per unit; 0 for abstained
    UnitIndex index;
    TaskKind kind;
    int label_count = 0;

    TaskState(const TaskLabels& tl, bool rebalance, TaskKind kind_, int k)
        : labels(&tl), index(tl.matrix), kind(kind_), label_count(k) {
        if (rebalance) {
            weights = rebalance_weights(tl.labels);
        } else {
            weights.assign(tl.labels.size(), 0.0);
            for (size_t i = 0; i < tl.labels.size(); ++i)
                if (!tl.labels.abstained(i)) weights[i] = 1.0;
        }
    }
};

void add_softmax_ce_grad(Tensor& dlogits, const Tensor& probs, int64_t pos,
                         const std::vector<double>& q, double scale) {
    const int64_t k = dlogits.cols();
    for (int64_t c = 0; c < k; ++c)
        dlogits.at(pos, c) += scale * (probs.at(pos, c) - q[static_cast<size_t>(c)]);
}

std::vector<double> row_of(const Tensor& t, int64_t pos) {
    std::vector<double> out(static_cast<size_t>(t.cols()));
    for (int64_t c = 0; c < t.cols(); ++c) out[static_cast<size_t>(c)] = t.at(pos, c);
    return out;
}

TaskKind task_kind(const ModelIR& ir, const std::string& task) {
    for (const auto& t : ir.signature.tasks)
        if (t.name == task) return t.kind;
    throw Error("task not in signature: " + task);
}

int task_label_count(const ModelIR& ir, const std::string& task) {
    for (const auto& t : ir.signature.tasks)
        if (t.name == task) return static_cast<int>(t.labels.size());
    return 0;
}

}  // namespace

TrainedModel train(const ModelIR& ir, const RowStore& store,
                   const std::map<std::string, TaskLabels>& labels, const TrainConfig& cfg,
                   const std::vector<int64_t>* row_subset) {
    std::vector<int64_t> train_rows = row_subset ? *row_subset : store.rows_with_tag("train");
    if (train_rows.empty()) throw EmptyTrainSet("no rows tagged train");
    if (labels.empty()) throw EmptyTrainSet("no task labels supplied");

    std::map<std::string, TaskState> tasks;
    for (const auto& [name, tl] : labels) {
        if (!ir.task_outputs.count(name)) continue;
        tasks.emplace(name, TaskState(tl, cfg.rebalance, task_kind(ir, name),
                                      task_label_count(ir, name)));
    }

    // Slice membership comes from tags, looked up once.
    std::map<std::string, std::set<int64_t>> slice_members;
    for (const auto& block : ir.slice_blocks) {
        if (slice_members.count(block.slice)) continue;
        auto rows = store.rows_with_tag(block.slice);
        slice_members[block.slice] = std::set<int64_t>(rows.begin(), rows.end());
    }

    ParamStore params = init_params(ir, cfg.seed);
    TrainedModel model;
    model.provenance.schema_digest = 0;  // filled by callers that know the schema
    model.provenance.store_digest = store.file_digest();
    model.provenance.choice = ir.choice;
    model.provenance.seed = cfg.seed;

    const double lr = cfg.learning_rate;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int64_t> order = train_rows;
        Rng rng(mix64(cfg.seed ^ (0xE70C000ull + static_cast<uint64_t>(epoch))));
        rng.shuffle(order);

        EpochLoss log;
        log.epoch = epoch;
        int64_t examples_seen = 0;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const double batch_n = static_cast<double>(stop - start);
            GradMap grads;
            int64_t batch_id = static_cast<int64_t>(start / static_cast<size_t>(cfg.batch_size));

            try {
                for (size_t bi = start; bi < stop; ++bi) {
                    int64_t row = order[bi];
                    Record rec = store.get(row);
                    EncodedExample ex = encode_example(rec);
                    Forward fwd = forward(ir, params, ex);
                    std::map<int, Tensor> out_grads;
                    auto grad_at = [&](int node) -> Tensor& {
                        auto it = out_grads.find(node);
                        if (it == out_grads.end())
                            it = out_grads.emplace(node, Tensor::zeros(fwd.value(node).shape)).first;
                        return it->second;
                    };

                    for (auto& [task_name, ts] : tasks) {
                        const double lw = ir.loss_weights.at(task_name);
                        const TaskOutputs& outs = ir.task_outputs.at(task_name);
                        auto urows = ts.index.by_row.find(row);
                        auto blocks = ir.slices_for(task_name);

                        if (urows != ts.index.by_row.end() && lw != 0.0) {
                            for (size_t ui : urows->second) {
                                if (ts.labels->labels.abstained(ui)) continue;
                                const Unit& unit = ts.labels->matrix.units[ui];
                                const auto& q = *ts.labels->labels.labels[ui];
                                const double w = ts.weights[ui];
                                if (w == 0.0) continue;
                                const Tensor& logits = fwd.value(outs.logits);
                                const Tensor& probs = fwd.value(outs.probs);
                                double loss = 0.0;
                                if (ts.kind == TaskKind::Multiclass) {
                                    int64_t pos = unit.ref.token >= 0 ? unit.ref.token : 0;
                                    loss = noise_aware_loss(row_of(logits, pos), q, w);
                                    add_softmax_ce_grad(grad_at(outs.logits), probs, pos, q, lw * w);
                                } else if (ts.kind == TaskKind::Bitvector) {
                                    int64_t pos = unit.ref.token >= 0 ? unit.ref.token : 0;
                                    int64_t bit = unit.ref.bit;
                                    double z = logits.at(pos, bit);
                                    loss = noise_aware_bit_loss(z, q[1], w);
                                    grad_at(outs.logits).at(pos, bit) += lw * w * (probs.at(pos, bit) - q[1]);
                                } else {  // Select: flat distribution over candidates
                                    const Tensor& p = probs;
                                    if (p.rows() != static_cast<int64_t>(q.size())) continue;
                                    std::vector<double> lg(static_cast<size_t>(p.rows()));
                                    for (int64_t i = 0; i < p.rows(); ++i)
                                        lg[static_cast<size_t>(i)] = logits.at(i, 0);
                                    loss = noise_aware_loss(lg, q, w);
                                    Tensor& dl = grad_at(outs.logits);
                                    for (int64_t i = 0; i < p.rows(); ++i)
                                        dl.at(i, 0) += lw * w * (p.at(i, 0) - q[static_cast<size_t>(i)]);
                                }
                                log.total += lw * loss;
                                log.per_task[task_name] += loss;
                            }
                        }

                        // Slice losses apply on every train row, abstained or not.
                        if (lw == 0.0) continue;
                        for (const auto& block : blocks) {
                            const bool member = slice_members.at(block.slice).count(row) > 0;
                            const double target = member ? 1.0 : 0.0;
                            const Tensor& ind = fwd.value(block.indicator_prob);
                            const Tensor& ind_logit = fwd.value(block.indicator_logit);
                            if (cfg.lambda_ind > 0.0) {
                                Tensor& dl = grad_at(block.indicator_logit);
                                for (int64_t p = 0; p < ind.rows(); ++p) {
                                    double bce = noise_aware_bit_loss(ind_logit.at(p, 0), target, 1.0);
                                    log.total += lw * cfg.lambda_ind * bce;
                                    dl.at(p, 0) += lw * cfg.lambda_ind * (ind.at(p, 0) - target);
                                }
                            }
                            if (member && cfg.lambda_exp > 0.0 &&
                                urows != ts.index.by_row.end()) {
                                const Tensor& ex_logits = fwd.value(block.expert_logits);
                                for (size_t ui : urows->second) {
                                    if (ts.labels->labels.abstained(ui)) continue;
                                    const Unit& unit = ts.labels->matrix.units[ui];
                                    const auto& q = *ts.labels->labels.labels[ui];
                                    const double w = ts.weights[ui];
                                    if (w == 0.0) continue;
                                    int64_t pos = unit.ref.token >= 0 ? unit.ref.token : 0;
                                    if (ts.kind == TaskKind::Multiclass) {
                                        double loss = noise_aware_loss(row_of(ex_logits, pos), q, w);
                                        log.total += lw * cfg.lambda_exp * loss;
                                        std::vector<double> p(static_cast<size_t>(ex_logits.cols()));
                                        {
                                            auto lg = row_of(ex_logits, pos);
                                            double mx = *std::max_element(lg.begin(), lg.end());
                                            double z = 0.0;
                                            for (double l : lg) z += std::exp(l - mx);
                                            for (size_t c = 0; c < lg.size(); ++c)
                                                p[c] = std::exp(lg[c] - mx) / z;
                                        }
                                        Tensor& dl = grad_at(block.expert_logits);
                                        for (int64_t c = 0; c < ex_logits.cols(); ++c)
                                            dl.at(pos, c) += lw * cfg.lambda_exp * w *
                                                             (p[static_cast<size_t>(c)] - q[static_cast<size_t>(c)]);
                                    } else {  // bitvector bit unit
                                        int64_t bit = unit.ref.bit;
                                        double z = ex_logits.at(pos, bit);
                                        double loss = noise_aware_bit_loss(z, q[1], w);
                                        log.total += lw * cfg.lambda_exp * loss;
                                        double p = 1.0 / (1.0 + std::exp(-z));
                                        grad_at(block.expert_logits).at(pos, bit) +=
                                            lw * cfg.lambda_exp * w * (p - q[1]);
                                    }
                                }
                            }
                        }
                    }
                    backward(ir, params, ex, fwd, out_grads, grads);
                    ++examples_seen;
                }

                for (auto& [name, g] : grads) {
                    Tensor& p = params.at(name);
                    const double scale = lr / batch_n;
                    for (size_t i = 0; i < p.data.size(); ++i) {
                        p.data[i] -= scale * g.data[i];
                        if (!std::isfinite(p.data[i]))
                            throw NonFiniteError("non-finite parameter update");
                    }
                }
            } catch (const NonFiniteError& e) {
                throw NonFiniteError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                     ", batch " + std::to_string(batch_id) + ")");
            }
        }

        if (examples_seen > 0) {
            log.total /= static_cast<double>(examples_seen);
            for (auto& [t, v] : log.per_task) v /= static_cast<double>(examples_seen);
        }
        model.epoch_log.push_back(std::move(log));
    }

    model.ir = ir;
    model.params = std::move(params);
    return model;
}

namespace {

void check_required_payloads(const TrainedModel& model, const Record& record) {
    for (const auto& st : model.ir.signature.tasks)
        for (const auto& p : st.required_payloads)
            if (!record.payload_values.count(p)) throw MissingPayload(p);
}

}  // namespace

std::map<std::string, Tensor> predict_probs(const TrainedModel& model, const Record& record) {
    check_required_payloads(model, record);
    EncodedExample ex = encode_example(record);
    Forward fwd = forward(model.ir, model.params, ex);
    std::map<std::string, Tensor> out;
    for (const auto& st : model.ir.signature.tasks) {
        if (st.kind == TaskKind::Select) {
            auto it = record.payload_values.find(st.candidate_payload);
            const auto* elems = it == record.payload_values.end()
                                    ? nullptr
                                    : std::get_if<std::vector<SetElement>>(&it->second);
            if (!elems || elems->empty())
                throw EmptyCandidateSet("no candidates in payload \"" + st.candidate_payload +
                                        "\" for task \"" + st.name + "\"");
        }
        out[st.name] = fwd.value(model.ir.task_outputs.at(st.name).probs);
    }
    return out;
}

std::string predict(const TrainedModel& model, const Record& record) {
    auto probs = predict_probs(model, record);
    json out;
    for (const auto& st : model.ir.signature.tasks) {
        const Tensor& p = probs.at(st.name);
        json tj;
        tj["type"] = st.output_type;
        if (st.kind == TaskKind::Select) {
            // Candidates are positional; ids may repeat, so emit an ordered list.
            const auto& elems =
                std::get<std::vector<SetElement>>(record.payload_values.at(st.candidate_payload));
            json dist = json::array();
            for (size_t i = 0; i < elems.size(); ++i)
                dist.push_back(json{{"id", elems[i].id}, {"p", p.at(static_cast<int64_t>(i), 0)}});
            tj["candidates"] = dist;
        } else if (st.per_token) {
            json rows = json::array();
            for (int64_t r = 0; r < p.rows(); ++r) {
                json d = json::object();
                for (size_t c = 0; c < st.labels.size(); ++c)
                    d[st.labels[c]] = p.at(r, static_cast<int64_t>(c));
                rows.push_back(d);
            }
            tj["tokens"] = rows;
        } else {
            json d = json::object();
            for (size_t c = 0; c < st.labels.size(); ++c)
                d[st.labels[c]] = p.at(0, static_cast<int64_t>(c));
            tj["probs"] = d;
        }
        out[st.name] = tj;
    }
    return out.dump();
}

Record parse_serving_record(const ServingSignature& sig, std::string_view json_line) {
    json j;
    try {
        j = json::parse(json_line);
    } catch (const json::parse_error& e) {
        throw Error(std::string("bad record: ") + e.what());
    }
    if (!j.is_object()) throw Error("record must be a JSON object");
    Record rec;
    for (const auto& in : sig.inputs) {
        auto it = j.find(in.name);
        if (it == j.end()) continue;
        const json& v = *it;
        if (v.is_null()) {
            rec.payload_values[in.name] = std::monostate{};
            continue;
        }
        switch (in.kind) {
            case PayloadKind::Singleton:
                rec.payload_values[in.name] = v.get<std::string>();
                break;
            case PayloadKind::Sequence:
                rec.payload_values[in.name] = v.get<std::vector<std::string>>();
                break;
            case PayloadKind::Set: {
                std::vector<SetElement> elems;
                for (const auto& ej : v) {
                    SetElement e;
                    e.id = ej.at("id").get<std::string>();
                    if (ej.contains("span") && !ej.at("span").is_null())
                        e.span = std::make_pair(ej.at("span")[0].get<int>(), ej.at("span")[1].get<int>());
                    elems.push_back(std::move(e));
                }
                rec.payload_values[in.name] = std::move(elems);
                break;
            }
        }
    }
    // Span bounds against the referenced sequence.
    for (const auto& in : sig.inputs) {
        if (in.kind != PayloadKind::Set || in.span_target.empty()) continue;
        auto it = rec.payload_values.find(in.name);
        if (it == rec.payload_values.end()) continue;
        const auto* elems = std::get_if<std::vector<SetElement>>(&it->second);
        if (!elems) continue;
        int64_t len = 0;
        if (auto st = rec.payload_values.find(in.span_target); st != rec.payload_values.end())
            if (const auto* seq = std::get_if<std::vector<std::string>>(&st->second))
                len = static_cast<int64_t>(seq->size());
        for (const auto& e : *elems)
            if (e.span && (e.span->first < 0 || e.span->first >= e.span->second || e.span->second > len))
                throw Error("invalid span in payload \"" + in.name + "\"");
    }
    return rec;
}

// --- model container ---

namespace {

json provenance_to_json(const Provenance& p) {
    json j;
    j["schema_hash"] = p.schema_digest;
    j["store_digest"] = p.store_digest;
    j["seed"] = p.seed;
    j["label_digests"] = p.label_digests;
    json enc = json::object();
    for (const auto& [name, e] : p.choice.encoders) {
        std::string s = to_string(e);
        if (e == EncoderKind::Conv1D) s += ":" + std::to_string(p.choice.conv_width_for(name));
        enc[name] = s;
    }
    j["choice"] = {{"encoders", enc},
                   {"embed_dim", p.choice.embed_dim},
                   {"hidden_dim", p.choice.hidden_dim},
                   {"learning_rate", p.choice.learning_rate},
                   {"epochs", p.choice.epochs},
                   {"batch_size", p.choice.batch_size}};
    return j;
}

Provenance provenance_from_json(const json& j) {
    Provenance p;
    p.schema_digest = j.at("schema_hash").get<uint64_t>();
    p.store_digest = j.at("store_digest").get<uint64_t>();
    p.seed = j.at("seed").get<uint64_t>();
    p.label_digests = j.at("label_digests").get<std::map<std::string, uint64_t>>();
    const json& cj = j.at("choice");
    for (const auto& [name, s] : cj.at("encoders").items()) {
        int w = 3;
        p.choice.encoders[name] = encoder_from_string(s.get<std::string>(), &w);
        if (p.choice.encoders[name] == EncoderKind::Conv1D) p.choice.conv_widths[name] = w;
    }
    p.choice.embed_dim = cj.at("embed_dim").get<int>();
    p.choice.hidden_dim = cj.at("hidden_dim").get<int>();
    p.choice.learning_rate = cj.at("learning_rate").get<double>();
    p.choice.epochs = cj.at("epochs").get<int>();
    p.choice.batch_size = cj.at("batch_size").get<int>();
    return p;
}

}  // namespace

void save_model(const TrainedModel& model, const std::string& path) {
    std::vector<std::pair<std::string, std::vector<uint8_t>>> entries;
    auto add_text = [&](const std::string& name, const std::string& text) {
        entries.emplace_back(name, std::vector<uint8_t>(text.begin(), text.end()));
    };
    add_text("model.ir.json", ir_to_json(model.ir));
    add_text("model.sig.json", signature_to_json(model.ir.signature));
    entries.emplace_back("params.bin", model.params.to_bytes(model.ir));
    add_text("provenance.json", provenance_to_json(model.provenance).dump(2) + "\n");

    std::vector<uint8_t> out;
    out.insert(out.end(), {'O', 'V', 'M', 'C'});
    put_u32(out, 1);
    put_u32(out, static_cast<uint32_t>(entries.size()));
    size_t header_size = out.size();
    for (const auto& [name, blob] : entries) header_size += 2 + name.size() + 16;
    uint64_t offset = header_size;
    for (const auto& [name, blob] : entries) {
        out.push_back(static_cast<uint8_t>(name.size() >> 8));
        out.push_back(static_cast<uint8_t>(name.size() & 0xff));
        out.insert(out.end(), name.begin(), name.end());
        put_u64(out, offset);
        put_u64(out, blob.size());
        offset += blob.size();
    }
    for (const auto& [name, blob] : entries) out.insert(out.end(), blob.begin(), blob.end());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write model: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

TrainedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open model: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || bytes[0] != 'O' || bytes[1] != 'V' || bytes[2] != 'M' || bytes[3] != 'C')
        throw FatalFormatError("not a model container: " + path);
    uint32_t count = get_u32(bytes.data() + 8);
    size_t pos = 12;
    std::map<std::string, std::pair<uint64_t, uint64_t>> table;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = static_cast<uint16_t>((bytes[pos] << 8) | bytes[pos + 1]);
        pos += 2;
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
        uint64_t off = get_u64(bytes.data() + pos);
        uint64_t size = get_u64(bytes.data() + pos + 8);
        pos += 16;
        table[name] = {off, size};
    }
    auto text_of = [&](const std::string& name) {
        auto [off, size] = table.at(name);
        return std::string(reinterpret_cast<const char*>(bytes.data() + off), size);
    };
    TrainedModel model;
    model.ir = ir_from_json(text_of("model.ir.json"));
    auto [poff, psize] = table.at("params.bin");
    model.params = ParamStore::from_bytes(
        std::vector<uint8_t>(bytes.begin() + static_cast<int64_t>(poff),
                             bytes.begin() + static_cast<int64_t>(poff + psize)));
    model.provenance = provenance_from_json(json::parse(text_of("provenance.json")));
    return model;
}

}  // namespace overton
