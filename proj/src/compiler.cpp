#include "overton/compiler.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/errors.hpp"

namespace overton {

using nlohmann::json;

const char* to_string(EncoderKind k) {
    switch (k) {
        case EncoderKind::MeanPool: return "mean_pool";
        case EncoderKind::MaxPool: return "max_pool";
        case EncoderKind::Conv1D: return "conv1d";
        case EncoderKind::Recurrent: return "recurrent";
    }
    return "?";
}

EncoderKind encoder_from_string(const std::string& s, int* conv_width) {
    if (s == "mean_pool") return EncoderKind::MeanPool;
    if (s == "max_pool") return EncoderKind::MaxPool;
    if (s == "recurrent") return EncoderKind::Recurrent;
    if (s.rfind("conv1d", 0) == 0) {
        int w = 3;
        if (s.size() > 7 && s[6] == ':') w = std::stoi(s.substr(7));
        if (w < 1 || w > 7 || w % 2 == 0)
            throw Error("conv1d width must be odd and in [1, 7]: " + s);
        if (conv_width) *conv_width = w;
        return EncoderKind::Conv1D;
    }
    throw Error("unknown encoder kind: " + s);
}

const char* to_string(OpKind k) {
    switch (k) {
        case OpKind::EmbedLookup: return "embed_lookup";
        case OpKind::MeanPool: return "mean_pool";
        case OpKind::MaxPool: return "max_pool";
        case OpKind::Conv1D: return "conv1d";
        case OpKind::Recurrent: return "recurrent";
        case OpKind::SpanPool: return "span_pool";
        case OpKind::Concat: return "concat";
        case OpKind::Linear: return "linear";
        case OpKind::Relu: return "relu";
        case OpKind::Softmax: return "softmax";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::CandidateScore: return "candidate_score";
        case OpKind::SliceCombine: return "slice_combine";
    }
    return "?";
}

namespace {

OpKind op_from_string(const std::string& s) {
    for (int i = 0; i <= static_cast<int>(OpKind::SliceCombine); ++i)
        if (s == to_string(static_cast<OpKind>(i))) return static_cast<OpKind>(i);
    throw Error("unknown op kind: " + s);
}

}  // namespace

EncoderKind ArchChoice::encoder_for(const std::string& payload) const {
    auto it = encoders.find(payload);
    return it == encoders.end() ? EncoderKind::MeanPool : it->second;
}

int ArchChoice::conv_width_for(const std::string& payload) const {
    auto it = conv_widths.find(payload);
    return it == conv_widths.end() ? 3 : it->second;
}

std::string ArchChoice::describe() const {
    std::ostringstream os;
    for (const auto& [p, e] : encoders) {
        os << "encoder." << p << "=" << to_string(e);
        if (e == EncoderKind::Conv1D) os << ":" << conv_width_for(p);
        os << " ";
    }
    os << "embed_dim=" << embed_dim << " hidden_dim=" << hidden_dim
       << " learning_rate=" << learning_rate << " epochs=" << epochs
       << " batch_size=" << batch_size;
    return os.str();
}

const ParamSpec* ModelIR::find_param(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return &p;
    return nullptr;
}

std::vector<SliceBlock> ModelIR::slices_for(const std::string& task) const {
    std::vector<SliceBlock> out;
    for (const auto& b : slice_blocks)
        if (b.task == task) out.push_back(b);
    return out;
}

int hash_token(std::string_view token) {
    return static_cast<int>(fnv1a64(token) % kHashedVocabSize);
}

namespace {

class Builder {
public:
    Builder(const Schema& schema, const ArchChoice& choice) : schema_(schema), choice_(choice) {
        ir_.choice = choice;
    }

    ModelIR build() {
        for (const auto& name : reference_order(schema_)) build_payload(*schema_.find_payload(name));
        for (const auto& task : schema_.tasks) {
            build_task(task);
            ir_.loss_weights[task.name] = task.loss_weight;
        }
        ir_.signature = build_signature(schema_);
        check_shapes(ir_);
        return std::move(ir_);
    }

    static ServingSignature build_signature(const Schema& schema);

private:
    int add_node(OpKind op, std::vector<int> inputs, NodeShape shape,
                 std::vector<std::string> params = {}, std::string payload = {},
                 int conv_width = 0) {
        IRNode n;
        n.id = static_cast<int>(ir_.nodes.size());
        n.op = op;
        n.inputs = std::move(inputs);
        n.params = std::move(params);
        n.payload = std::move(payload);
        n.conv_width = conv_width;
        n.shape = std::move(shape);
        ir_.nodes.push_back(std::move(n));
        return ir_.nodes.back().id;
    }

    std::string add_param(const std::string& name, std::vector<int64_t> shape, ParamInit init) {
        ir_.params.push_back(ParamSpec{name, std::move(shape), init});
        return name;
    }

    int embed_dim_of(const PayloadDecl& p) const {
        return p.embed_dim.value_or(choice_.embed_dim);
    }

    // Linear(in -> out) with zero bias; returns the output node.
    int linear(int input, int out_dim, const std::string& name) {
        const NodeShape& in = ir_.nodes[static_cast<size_t>(input)].shape;
        add_param(name + "/W", {in.dim, out_dim}, ParamInit::XavierUniform);
        add_param(name + "/b", {out_dim}, ParamInit::Zero);
        return add_node(OpKind::Linear, {input}, NodeShape{in.len_of, out_dim},
                        {name + "/W", name + "/b"});
    }

    int embed_lookup(const PayloadDecl& reader, const PayloadDecl& field) {
        int d = embed_dim_of(reader);
        std::string pname = "embed/" + field.name;
        if (!ir_.find_param(pname + "/E"))
            add_param(pname + "/E", {kHashedVocabSize, d}, ParamInit::XavierUniform);
        NodeShape shape = field.kind == PayloadKind::Singleton
                              ? NodeShape{"", d}
                              : NodeShape{field.name, d};
        return add_node(OpKind::EmbedLookup, {}, shape, {pname + "/E"}, field.name);
    }

    int encode_sequence(const PayloadDecl& reader, int seq_node) {
        const NodeShape& in = ir_.nodes[static_cast<size_t>(seq_node)].shape;
        switch (choice_.encoder_for(reader.name)) {
            case EncoderKind::MeanPool:
                return add_node(OpKind::MeanPool, {seq_node}, NodeShape{"", in.dim});
            case EncoderKind::MaxPool:
                return add_node(OpKind::MaxPool, {seq_node}, NodeShape{"", in.dim});
            case EncoderKind::Conv1D: {
                int w = choice_.conv_width_for(reader.name);
                std::string name = "enc/" + reader.name;
                add_param(name + "/K", {w, in.dim, in.dim}, ParamInit::XavierUniform);
                add_param(name + "/b", {in.dim}, ParamInit::Zero);
                int conv = add_node(OpKind::Conv1D, {seq_node}, NodeShape{in.len_of, in.dim},
                                    {name + "/K", name + "/b"}, "", w);
                return add_node(OpKind::MeanPool, {conv}, NodeShape{"", in.dim});
            }
            case EncoderKind::Recurrent: {
                std::string name = "enc/" + reader.name;
                add_param(name + "/W", {in.dim, in.dim}, ParamInit::XavierUniform);
                add_param(name + "/U", {in.dim, in.dim}, ParamInit::XavierUniform);
                add_param(name + "/b", {in.dim}, ParamInit::Zero);
                return add_node(OpKind::Recurrent, {seq_node}, NodeShape{"", in.dim},
                                {name + "/W", name + "/U", name + "/b"});
            }
        }
        throw UnsupportedCombination("unreachable encoder kind");
    }

    void build_payload(const PayloadDecl& p) {
        std::vector<int> parts;
        for (const auto& in : p.inputs) {
            if (in.kind == PayloadInput::Kind::DataField) {
                const PayloadDecl* field = schema_.find_payload(in.name);
                if ((p.kind == PayloadKind::Sequence || p.kind == PayloadKind::Set) &&
                    in.name != p.name)
                    throw UnsupportedCombination("payload \"" + p.name +
                                                 "\" must read its own raw field, not \"" +
                                                 in.name + "\"");
                parts.push_back(embed_lookup(p, *field));
            } else {
                const PayloadDecl* ref = schema_.find_payload(in.name);
                int ref_node = payload_node(in.name);
                if (p.kind == PayloadKind::Set && in.span_field) {
                    parts.push_back(add_node(OpKind::SpanPool, {ref_node},
                                             NodeShape{p.name, ir_.nodes[static_cast<size_t>(ref_node)].shape.dim},
                                             {}, p.name));
                } else if (p.kind == PayloadKind::Singleton && ref->kind == PayloadKind::Sequence) {
                    parts.push_back(encode_sequence(p, ref_node));
                } else if (p.kind == PayloadKind::Singleton && ref->kind == PayloadKind::Singleton) {
                    parts.push_back(ref_node);
                } else {
                    throw UnsupportedCombination(
                        "payload \"" + p.name + "\" (" + to_string(p.kind) +
                        ") cannot aggregate \"" + in.name + "\" (" + to_string(ref->kind) + ")");
                }
            }
        }
        if (parts.empty())
            throw UnsupportedCombination("payload \"" + p.name + "\" has no inputs");

        int d = embed_dim_of(p);
        int node;
        if (parts.size() == 1) {
            node = parts[0];
            if (ir_.nodes[static_cast<size_t>(node)].shape.dim != d)
                node = linear(node, d, "proj/" + p.name);
        } else {
            int total = 0;
            std::string len_of = ir_.nodes[static_cast<size_t>(parts[0])].shape.len_of;
            for (int part : parts) {
                const NodeShape& s = ir_.nodes[static_cast<size_t>(part)].shape;
                if (s.len_of != len_of)
                    throw ShapeError("payload \"" + p.name + "\" concatenates mismatched axes");
                total += s.dim;
            }
            int cat = add_node(OpKind::Concat, parts, NodeShape{len_of, total});
            node = linear(cat, d, "agg/" + p.name);
        }
        ir_.payload_nodes[p.name] = node;
    }

    int payload_node(const std::string& name) const { return ir_.payload_nodes.at(name); }

    // Linear(d -> h) + Relu shared trunk for one task.
    int task_trunk(const TaskDecl& t, int input_node) {
        int lin = linear(input_node, choice_.hidden_dim, "task/" + t.name + "/trunk");
        const NodeShape& s = ir_.nodes[static_cast<size_t>(lin)].shape;
        return add_node(OpKind::Relu, {lin}, s);
    }

    // Relu(Linear(h->h)) + Linear(h->K); returns {repr, logits}.
    std::pair<int, int> expert(const std::string& name, int hidden, int k) {
        int h = ir_.nodes[static_cast<size_t>(hidden)].shape.dim;
        int lin = linear(hidden, h, name + "/repr");
        int repr = add_node(OpKind::Relu, {lin}, ir_.nodes[static_cast<size_t>(lin)].shape);
        int logits = linear(repr, k, name + "/out");
        return {repr, logits};
    }

    std::vector<const SliceDecl*> slices_of(const TaskDecl& t) const {
        std::vector<const SliceDecl*> out;
        for (const auto& sl : schema_.slices) {
            bool applies = sl.tasks.empty()
                               ? t.kind != TaskKind::Select
                               : std::find(sl.tasks.begin(), sl.tasks.end(), t.name) != sl.tasks.end();
            if (!applies) continue;
            if (t.kind == TaskKind::Select)
                throw UnsupportedCombination("slice \"" + sl.tag +
                                             "\" cannot apply to select task \"" + t.name + "\"");
            out.push_back(&sl);
        }
        return out;
    }

    void build_task(const TaskDecl& t) {
        if (t.kind == TaskKind::Select) {
            build_select_task(t);
            return;
        }
        int hidden = task_trunk(t, payload_node(t.payload));
        const NodeShape hs = ir_.nodes[static_cast<size_t>(hidden)].shape;
        const int k = t.label_count();
        auto slices = slices_of(t);

        int logits;
        if (slices.empty()) {
            logits = linear(hidden, k, "task/" + t.name + "/head");
        } else {
            auto [base_repr, base_logits] = expert("task/" + t.name + "/base", hidden, k);
            std::vector<int> combine_inputs{base_repr, base_logits};
            for (const auto* sl : slices) {
                std::string prefix = "task/" + t.name + "/slice/" + sl->tag;
                int ind_logit = linear(hidden, 1, prefix + "/ind");
                int ind_prob = add_node(OpKind::Sigmoid, {ind_logit},
                                        ir_.nodes[static_cast<size_t>(ind_logit)].shape);
                auto [repr, ex_logits] = expert(prefix + "/expert", hidden, k);
                combine_inputs.insert(combine_inputs.end(), {ind_prob, repr, ex_logits});
                ir_.slice_blocks.push_back(
                    SliceBlock{t.name, sl->tag, ind_logit, ind_prob, repr, ex_logits});
            }
            int combined = add_node(OpKind::SliceCombine, combine_inputs, hs);
            logits = linear(combined, k, "task/" + t.name + "/final");
        }
        int probs = t.kind == TaskKind::Multiclass
                        ? add_node(OpKind::Softmax, {logits}, ir_.nodes[static_cast<size_t>(logits)].shape)
                        : add_node(OpKind::Sigmoid, {logits}, ir_.nodes[static_cast<size_t>(logits)].shape);
        ir_.task_outputs[t.name] = TaskOutputs{logits, probs};
    }

    // Bilinear score of the query representation against each candidate vector.
    void build_select_task(const TaskDecl& t) {
        slices_of(t);  // reject explicit slices on select tasks
        const PayloadDecl* query = nullptr;
        for (const auto& name : reference_order(schema_)) {
            const PayloadDecl* p = schema_.find_payload(name);
            if (p->kind == PayloadKind::Singleton) query = p;
        }
        if (!query)
            throw UnsupportedCombination("select task \"" + t.name +
                                         "\" needs a singleton payload as the query side");
        int hidden = task_trunk(t, payload_node(query->name));
        int cands = payload_node(t.select_payload);
        int d_cand = ir_.nodes[static_cast<size_t>(cands)].shape.dim;
        std::string wname = "task/" + t.name + "/score/W";
        add_param(wname, {choice_.hidden_dim, d_cand}, ParamInit::XavierUniform);
        int scores = add_node(OpKind::CandidateScore, {hidden, cands},
                              NodeShape{t.select_payload, 1}, {wname});
        int probs = add_node(OpKind::Softmax, {scores}, NodeShape{t.select_payload, 1});
        ir_.task_outputs[t.name] = TaskOutputs{scores, probs};
    }

    const Schema& schema_;
    const ArchChoice& choice_;
    ModelIR ir_;
};

// Raw record fields a payload's representation transitively reads.
void collect_required(const Schema& schema, const std::string& payload,
                      std::set<std::string>& out) {
    const PayloadDecl* p = schema.find_payload(payload);
    if (p->kind == PayloadKind::Set) out.insert(p->name);
    for (const auto& in : p->inputs) {
        if (in.kind == PayloadInput::Kind::DataField) out.insert(in.name);
        else collect_required(schema, in.name, out);
    }
}

}  // namespace

ServingSignature Builder::build_signature(const Schema& schema) {
    ServingSignature sig;
    for (const auto& t : schema.tasks) {
        SignatureTask st;
        st.name = t.name;
        st.kind = t.kind;
        st.labels = t.labels;
        const PayloadDecl* p = schema.find_payload(t.payload);
        st.per_token = t.kind != TaskKind::Select && p->kind == PayloadKind::Sequence;
        std::set<std::string> req;
        collect_required(schema, t.payload, req);
        switch (t.kind) {
            case TaskKind::Multiclass: st.output_type = "distribution"; break;
            case TaskKind::Bitvector: st.output_type = "per_bit_probabilities"; break;
            case TaskKind::Select: {
                st.output_type = "per_candidate_distribution";
                st.candidate_payload = t.select_payload;
                collect_required(schema, t.select_payload, req);
                const PayloadDecl* query = nullptr;
                for (const auto& name : reference_order(schema)) {
                    const PayloadDecl* q = schema.find_payload(name);
                    if (q->kind == PayloadKind::Singleton) query = q;
                }
                if (query) collect_required(schema, query->name, req);
                break;
            }
        }
        st.required_payloads.assign(req.begin(), req.end());
        sig.tasks.push_back(std::move(st));
    }
    std::set<std::string> all_inputs;
    for (const auto& st : sig.tasks)
        all_inputs.insert(st.required_payloads.begin(), st.required_payloads.end());
    for (const auto& name : all_inputs) {
        const PayloadDecl* p = schema.find_payload(name);
        SignatureInput in;
        in.name = name;
        in.kind = p->kind;
        if (p->kind == PayloadKind::Set)
            for (const auto& pi : p->inputs)
                if (pi.kind == PayloadInput::Kind::PayloadRef && pi.span_field) in.span_target = pi.name;
        sig.inputs.push_back(std::move(in));
    }
    return sig;
}

ModelIR compile(const Schema& schema, const ArchChoice& choice) {
    return Builder(schema, choice).build();
}

ServingSignature signature(const ModelIR& ir) { return ir.signature; }

void check_shapes(const ModelIR& ir) {
    auto shape_of = [&](int id) -> const NodeShape& { return ir.nodes[static_cast<size_t>(id)].shape; };
    for (const auto& n : ir.nodes) {
        for (int in : n.inputs)
            if (in < 0 || in >= n.id)
                throw ShapeError("node " + std::to_string(n.id) + " reads a non-preceding node");
        NodeShape expect = n.shape;
        switch (n.op) {
            case OpKind::EmbedLookup:
                break;  // shape fixed by the payload kind and embedding width
            case OpKind::MeanPool:
            case OpKind::MaxPool:
                if (shape_of(n.inputs[0]).len_of.empty())
                    throw ShapeError("pooling over a flat vector at node " + std::to_string(n.id));
                expect = NodeShape{"", shape_of(n.inputs[0]).dim};
                break;
            case OpKind::Conv1D:
            case OpKind::Relu:
            case OpKind::Softmax:
            case OpKind::Sigmoid:
                expect = shape_of(n.inputs[0]);
                break;
            case OpKind::Recurrent:
                expect = NodeShape{"", shape_of(n.inputs[0]).dim};
                break;
            case OpKind::SpanPool:
                expect = NodeShape{n.payload, shape_of(n.inputs[0]).dim};
                break;
            case OpKind::Concat: {
                int total = 0;
                for (int in : n.inputs) {
                    if (shape_of(in).len_of != shape_of(n.inputs[0]).len_of)
                        throw ShapeError("concat axis mismatch at node " + std::to_string(n.id));
                    total += shape_of(in).dim;
                }
                expect = NodeShape{shape_of(n.inputs[0]).len_of, total};
                break;
            }
            case OpKind::Linear: {
                const ParamSpec* w = ir.find_param(n.params[0]);
                if (!w || w->shape.size() != 2 || w->shape[0] != shape_of(n.inputs[0]).dim)
                    throw ShapeError("linear weight mismatch at node " + std::to_string(n.id));
                expect = NodeShape{shape_of(n.inputs[0]).len_of, static_cast<int>(w->shape[1])};
                break;
            }
            case OpKind::CandidateScore:
                expect = NodeShape{shape_of(n.inputs[1]).len_of, 1};
                break;
            case OpKind::SliceCombine: {
                if (n.inputs.size() < 2 || (n.inputs.size() - 2) % 3 != 0)
                    throw ShapeError("slice combine arity at node " + std::to_string(n.id));
                expect = shape_of(n.inputs[0]);
                break;
            }
        }
        if (!(expect == n.shape))
            throw ShapeError("shape mismatch at node " + std::to_string(n.id));
    }
    std::set<std::string> used;
    for (const auto& n : ir.nodes)
        for (const auto& p : n.params) used.insert(p);
    for (const auto& p : ir.params)
        if (!used.count(p.name)) throw ShapeError("unreferenced parameter " + p.name);
}

std::vector<ArchChoice> enumerate_candidates(const Schema& schema, const TuningSpec& tuning) {
    // Key -> candidate values, pinned keys excluded from the searched space.
    std::map<std::string, std::vector<HpValue>> space;
    for (const auto& [k, vals] : tuning.search_space) {
        if (tuning.pinned.count(k)) continue;
        if (vals.empty()) throw EmptySearchSpace("no candidates for \"" + k + "\"");
        space[k] = vals;
    }

    uint64_t total = 1;
    for (const auto& [k, vals] : space) {
        total *= vals.size();
        if (total > 1'000'000) break;  // avoid overflow; treated as "large"
    }

    // Payloads whose encoder the choice selects.
    std::vector<std::string> encoded_payloads;
    for (const auto& p : schema.payloads) {
        if (p.kind != PayloadKind::Singleton) continue;
        for (const auto& in : p.inputs)
            if (in.kind == PayloadInput::Kind::PayloadRef &&
                schema.find_payload(in.name)->kind == PayloadKind::Sequence) {
                encoded_payloads.push_back(p.name);
                break;
            }
    }

    auto as_int = [](const HpValue& v, const std::string& key) -> int64_t {
        if (const auto* i = std::get_if<int64_t>(&v)) return *i;
        if (const auto* d = std::get_if<double>(&v)) return static_cast<int64_t>(*d);
        throw Error("hyperparameter \"" + key + "\" must be numeric");
    };
    auto as_double = [](const HpValue& v, const std::string& key) -> double {
        if (const auto* i = std::get_if<int64_t>(&v)) return static_cast<double>(*i);
        if (const auto* d = std::get_if<double>(&v)) return *d;
        throw Error("hyperparameter \"" + key + "\" must be numeric");
    };

    auto make_choice = [&](const std::map<std::string, HpValue>& assignment) {
        ArchChoice c;
        auto get = [&](const std::string& key) -> const HpValue* {
            auto pit = tuning.pinned.find(key);
            if (pit != tuning.pinned.end()) return &pit->second;
            auto ait = assignment.find(key);
            if (ait != assignment.end()) return &ait->second;
            return nullptr;
        };
        if (const HpValue* v = get("embed_dim")) c.embed_dim = static_cast<int>(as_int(*v, "embed_dim"));
        if (const HpValue* v = get("hidden_dim")) c.hidden_dim = static_cast<int>(as_int(*v, "hidden_dim"));
        if (const HpValue* v = get("learning_rate")) c.learning_rate = as_double(*v, "learning_rate");
        if (const HpValue* v = get("epochs")) c.epochs = static_cast<int>(as_int(*v, "epochs"));
        if (const HpValue* v = get("batch_size")) c.batch_size = static_cast<int>(as_int(*v, "batch_size"));
        if (c.embed_dim < 1 || c.hidden_dim < 1 || c.epochs < 1 || c.batch_size < 1 ||
            c.learning_rate <= 0)
            throw Error("invalid hyperparameter value in tuning spec");
        for (const auto& p : encoded_payloads) {
            const HpValue* v = get("encoder." + p);
            if (!v) v = get("encoder");
            std::string name = v ? std::get<std::string>(*v) : "mean_pool";
            int w = 3;
            c.encoders[p] = encoder_from_string(name, &w);
            if (c.encoders[p] == EncoderKind::Conv1D) c.conv_widths[p] = w;
        }
        return c;
    };

    std::vector<std::string> keys;
    for (const auto& [k, vals] : space) keys.push_back(k);

    std::vector<ArchChoice> out;
    Rng rng(mix64(tuning.seed ^ 0x5eedc0deull));
    if (total <= static_cast<uint64_t>(tuning.budget)) {
        // Small space: every point once, in seeded order.
        std::vector<uint64_t> order(total);
        for (uint64_t i = 0; i < total; ++i) order[i] = i;
        rng.shuffle(order);
        for (uint64_t idx : order) {
            std::map<std::string, HpValue> assignment;
            uint64_t rem = idx;
            for (const auto& k : keys) {
                const auto& vals = space[k];
                assignment[k] = vals[rem % vals.size()];
                rem /= vals.size();
            }
            out.push_back(make_choice(assignment));
        }
    } else {
        for (int i = 0; i < tuning.budget; ++i) {
            std::map<std::string, HpValue> assignment;
            for (const auto& k : keys) {
                const auto& vals = space[k];
                assignment[k] = vals[rng.next_below(vals.size())];
            }
            out.push_back(make_choice(assignment));
        }
    }
    return out;
}

// --- serialization ---

namespace {

json shape_to_json(const NodeShape& s) { return json{{"len_of", s.len_of}, {"dim", s.dim}}; }
NodeShape shape_from_json(const json& j) {
    return NodeShape{j.at("len_of").get<std::string>(), j.at("dim").get<int>()};
}

json choice_to_json(const ArchChoice& c) {
    json enc = json::object();
    for (const auto& [p, e] : c.encoders) {
        std::string s = to_string(e);
        if (e == EncoderKind::Conv1D) s += ":" + std::to_string(c.conv_width_for(p));
        enc[p] = s;
    }
    return json{{"encoders", enc},
                {"embed_dim", c.embed_dim},
                {"hidden_dim", c.hidden_dim},
                {"learning_rate", c.learning_rate},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size}};
}

ArchChoice choice_from_json(const json& j) {
    ArchChoice c;
    for (const auto& [p, s] : j.at("encoders").items()) {
        int w = 3;
        c.encoders[p] = encoder_from_string(s.get<std::string>(), &w);
        if (c.encoders[p] == EncoderKind::Conv1D) c.conv_widths[p] = w;
    }
    c.embed_dim = j.at("embed_dim").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    return c;
}

json signature_task_to_json(const SignatureTask& t) {
    json j;
    j["name"] = t.name;
    j["kind"] = to_string(t.kind);
    if (t.kind == TaskKind::Select) j["candidates"] = t.candidate_payload;
    else j["labels"] = t.labels;
    j["inputs"] = t.required_payloads;
    j["output_type"] = t.output_type;
    j["per_token"] = t.per_token;
    return j;
}

SignatureTask signature_task_from_json(const json& j) {
    SignatureTask t;
    t.name = j.at("name").get<std::string>();
    std::string kind = j.at("kind").get<std::string>();
    t.kind = kind == "multiclass" ? TaskKind::Multiclass
             : kind == "bitvector" ? TaskKind::Bitvector
                                   : TaskKind::Select;
    if (t.kind == TaskKind::Select) t.candidate_payload = j.at("candidates").get<std::string>();
    else t.labels = j.at("labels").get<std::vector<std::string>>();
    t.required_payloads = j.at("inputs").get<std::vector<std::string>>();
    t.output_type = j.at("output_type").get<std::string>();
    t.per_token = j.at("per_token").get<bool>();
    return t;
}

json signature_json(const ServingSignature& sig) {
    json inputs = json::array();
    for (const auto& in : sig.inputs) {
        json ij{{"name", in.name}, {"kind", to_string(in.kind)}};
        if (!in.span_target.empty()) ij["span_target"] = in.span_target;
        inputs.push_back(ij);
    }
    json tasks = json::array();
    for (const auto& t : sig.tasks) tasks.push_back(signature_task_to_json(t));
    return json{{"sig_version", 1}, {"inputs", inputs}, {"tasks", tasks}};
}

}  // namespace

std::string signature_to_json(const ServingSignature& sig) {
    return signature_json(sig).dump(2) + "\n";
}

std::string ir_to_json(const ModelIR& ir) {
    json j;
    json nodes = json::array();
    for (const auto& n : ir.nodes) {
        json nj;
        nj["id"] = n.id;
        nj["op"] = to_string(n.op);
        nj["inputs"] = n.inputs;
        nj["params"] = n.params;
        if (!n.payload.empty()) nj["payload"] = n.payload;
        if (n.conv_width) nj["conv_width"] = n.conv_width;
        nj["shape"] = shape_to_json(n.shape);
        nodes.push_back(nj);
    }
    j["nodes"] = nodes;
    json params = json::array();
    for (const auto& p : ir.params)
        params.push_back(json{{"name", p.name},
                              {"shape", p.shape},
                              {"init", p.init == ParamInit::Zero ? "zero" : "xavier_uniform"}});
    j["params"] = params;
    json outs = json::object();
    for (const auto& [task, o] : ir.task_outputs)
        outs[task] = json{{"logits", o.logits}, {"probs", o.probs}};
    j["task_outputs"] = outs;
    json blocks = json::array();
    for (const auto& b : ir.slice_blocks)
        blocks.push_back(json{{"task", b.task},
                              {"slice", b.slice},
                              {"indicator_logit", b.indicator_logit},
                              {"indicator_prob", b.indicator_prob},
                              {"expert_repr", b.expert_repr},
                              {"expert_logits", b.expert_logits}});
    j["slice_blocks"] = blocks;
    j["payload_nodes"] = ir.payload_nodes;
    j["loss_weights"] = ir.loss_weights;
    j["signature"] = signature_json(ir.signature);
    j["choice"] = choice_to_json(ir.choice);
    return j.dump(2) + "\n";
}

ModelIR ir_from_json(const std::string& text) {
    json j = json::parse(text);
    ModelIR ir;
    for (const auto& nj : j.at("nodes")) {
        IRNode n;
        n.id = nj.at("id").get<int>();
        n.op = op_from_string(nj.at("op").get<std::string>());
        n.inputs = nj.at("inputs").get<std::vector<int>>();
        n.params = nj.at("params").get<std::vector<std::string>>();
        n.payload = nj.value("payload", "");
        n.conv_width = nj.value("conv_width", 0);
        n.shape = shape_from_json(nj.at("shape"));
        ir.nodes.push_back(std::move(n));
    }
    for (const auto& pj : j.at("params")) {
        ParamSpec p;
        p.name = pj.at("name").get<std::string>();
        p.shape = pj.at("shape").get<std::vector<int64_t>>();
        p.init = pj.at("init").get<std::string>() == "zero" ? ParamInit::Zero : ParamInit::XavierUniform;
        ir.params.push_back(std::move(p));
    }
    for (const auto& [task, oj] : j.at("task_outputs").items())
        ir.task_outputs[task] = TaskOutputs{oj.at("logits").get<int>(), oj.at("probs").get<int>()};
    for (const auto& bj : j.at("slice_blocks"))
        ir.slice_blocks.push_back(SliceBlock{bj.at("task").get<std::string>(),
                                             bj.at("slice").get<std::string>(),
                                             bj.at("indicator_logit").get<int>(),
                                             bj.at("indicator_prob").get<int>(),
                                             bj.at("expert_repr").get<int>(),
                                             bj.at("expert_logits").get<int>()});
    ir.payload_nodes = j.at("payload_nodes").get<std::map<std::string, int>>();
    ir.loss_weights = j.at("loss_weights").get<std::map<std::string, double>>();
    const json& sj = j.at("signature");
    for (const auto& ij : sj.at("inputs")) {
        SignatureInput in;
        in.name = ij.at("name").get<std::string>();
        std::string kind = ij.at("kind").get<std::string>();
        in.kind = kind == "singleton" ? PayloadKind::Singleton
                  : kind == "sequence" ? PayloadKind::Sequence
                                       : PayloadKind::Set;
        in.span_target = ij.value("span_target", "");
        ir.signature.inputs.push_back(std::move(in));
    }
    for (const auto& tj : sj.at("tasks")) ir.signature.tasks.push_back(signature_task_from_json(tj));
    ir.choice = choice_from_json(j.at("choice"));
    return ir;
}

}  // namespace overton
