#include "overton/numerics.hpp"

#include <algorithm>
#include <cmath>

#include "overton/common.hpp"
#include "overton/errors.hpp"

namespace overton {

Tensor Tensor::zeros(std::vector<int64_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(t.numel()), 0.0);
    return t;
}

Tensor Tensor::row_vector(std::vector<double> values) {
    Tensor t;
    t.shape = {static_cast<int64_t>(values.size())};
    t.data = std::move(values);
    return t;
}

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

bool Tensor::finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace ops {

Tensor mean_pool(const Tensor& x) {
    const int64_t rows = x.rows(), cols = x.cols();
    Tensor out = Tensor::zeros({cols});
    if (rows == 0) return out;  // empty sequence pools to the zero vector
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out.data[static_cast<size_t>(c)] += x.at(r, c);
    for (double& v : out.data) v /= static_cast<double>(rows);
    return out;
}

Tensor max_pool(const Tensor& x) {
    const int64_t rows = x.rows(), cols = x.cols();
    Tensor out = Tensor::zeros({cols});
    if (rows == 0) return out;
    for (int64_t c = 0; c < cols; ++c) {
        double best = x.at(0, c);
        for (int64_t r = 1; r < rows; ++r) best = std::max(best, x.at(r, c));
        out.data[static_cast<size_t>(c)] = best;
    }
    return out;
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    const int64_t rows = x.rows(), din = x.cols();
    const int64_t w = kernel.shape[0], dout = kernel.shape[2];
    const int64_t center = w / 2;
    Tensor out = Tensor::zeros({rows, dout});
    for (int64_t t = 0; t < rows; ++t)
        for (int64_t o = 0; o < dout; ++o) {
            double acc = bias.data[static_cast<size_t>(o)];
            for (int64_t k = 0; k < w; ++k) {
                int64_t s = t + k - center;
                if (s < 0 || s >= rows) continue;  // zero padding
                for (int64_t i = 0; i < din; ++i)
                    acc += kernel.data[static_cast<size_t>((k * din + i) * dout + o)] * x.at(s, i);
            }
            out.at(t, o) = acc;
        }
    return out;
}

Tensor recurrent(const Tensor& x, const Tensor& w, const Tensor& u, const Tensor& b) {
    const int64_t rows = x.rows(), din = x.cols(), dh = w.shape[1];
    Tensor h = Tensor::zeros({dh});
    for (int64_t t = 0; t < rows; ++t) {
        Tensor next = Tensor::zeros({dh});
        for (int64_t j = 0; j < dh; ++j) {
            double acc = b.data[static_cast<size_t>(j)];
            for (int64_t i = 0; i < din; ++i) acc += x.at(t, i) * w.at(i, j);
            for (int64_t i = 0; i < dh; ++i) acc += h.data[static_cast<size_t>(i)] * u.at(i, j);
            next.data[static_cast<size_t>(j)] = std::tanh(acc);
        }
        h = std::move(next);
    }
    return h;
}

Tensor span_pool(const Tensor& x, const std::vector<std::optional<std::pair<int, int>>>& spans) {
    const int64_t cols = x.cols();
    Tensor out = Tensor::zeros({static_cast<int64_t>(spans.size()), cols});
    for (size_t e = 0; e < spans.size(); ++e) {
        if (!spans[e]) continue;  // null span embeds as the zero vector
        auto [a, bnd] = *spans[e];
        for (int t = a; t < bnd; ++t)
            for (int64_t c = 0; c < cols; ++c)
                out.at(static_cast<int64_t>(e), c) += x.at(t, c) / (bnd - a);
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int64_t rows = x.rows(), din = x.cols(), dout = w.shape[1];
    Tensor out = x.shape.size() == 2 ? Tensor::zeros({rows, dout}) : Tensor::zeros({dout});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < dout; ++o) {
            double acc = b.data[static_cast<size_t>(o)];
            for (int64_t i = 0; i < din; ++i) acc += x.at(r, i) * w.at(i, o);
            out.at(r, o) = acc;
        }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) v = std::max(0.0, v);
    return out;
}

namespace {

void softmax_span(const double* in, double* out, int64_t n) {
    double mx = in[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double z = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        z += out[i];
    }
    for (int64_t i = 0; i < n; ++i) out[i] /= z;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    Tensor out = x;
    const int64_t rows = x.rows(), cols = x.cols();
    for (int64_t r = 0; r < rows; ++r)
        softmax_span(x.data.data() + r * cols, out.data.data() + r * cols, cols);
    return out;
}

Tensor softmax_flat(const Tensor& x) {
    Tensor out = x;
    if (!x.data.empty()) softmax_span(x.data.data(), out.data.data(), x.numel());
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return out;
}

Tensor candidate_score(const Tensor& q, const Tensor& w, const Tensor& cands) {
    const int64_t h = q.cols(), d = w.shape[1], n = cands.rows();
    // qw = q^T W, then score_i = <qw, c_i>
    std::vector<double> qw(static_cast<size_t>(d), 0.0);
    for (int64_t b = 0; b < d; ++b)
        for (int64_t a = 0; a < h; ++a) qw[static_cast<size_t>(b)] += q.data[static_cast<size_t>(a)] * w.at(a, b);
    Tensor out = Tensor::zeros({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int64_t b = 0; b < d; ++b) acc += qw[static_cast<size_t>(b)] * cands.at(i, b);
        out.at(i, 0) = acc;
    }
    return out;
}

// Shared by forward and backward: per-position attention internals.
struct SliceAttention {
    std::vector<std::vector<double>> q;  // per expert: softmax of its logits
    std::vector<double> entropy;
    std::vector<double> conf;
    std::vector<double> score;
    std::vector<double> weight;
    double total = 0.0;
};

static SliceAttention attention_at(const std::vector<const Tensor*>& inputs, int64_t pos) {
    const size_t m = 1 + (inputs.size() - 2) / 3;
    const int64_t k = inputs[1]->cols();
    const double ln_k = std::log(static_cast<double>(k));
    SliceAttention at;
    at.q.resize(m);
    at.entropy.resize(m);
    at.conf.resize(m);
    at.score.resize(m);
    at.weight.assign(m, 0.0);
    for (size_t e = 0; e < m; ++e) {
        const Tensor& logits = e == 0 ? *inputs[1] : *inputs[2 + 3 * (e - 1) + 2];
        at.q[e].resize(static_cast<size_t>(k));
        softmax_span(logits.data.data() + pos * k, at.q[e].data(), k);
        double h = 0.0;
        for (double p : at.q[e])
            if (p > 0) h -= p * std::log(p);
        at.entropy[e] = h;
        at.conf[e] = k > 1 ? std::max(0.0, 1.0 - h / ln_k) : 1.0;
        double ind = e == 0 ? 1.0 : inputs[2 + 3 * (e - 1)]->at(pos, 0);
        at.score[e] = ind * at.conf[e];
        at.total += at.score[e];
    }
    if (at.total > 0) {
        for (size_t e = 0; e < m; ++e) at.weight[e] = at.score[e] / at.total;
    } else {
        at.weight[0] = 1.0;  // all scores vanish: fall back to the base expert
    }
    return at;
}

Tensor slice_combine(const std::vector<const Tensor*>& inputs, Tensor* weights_out) {
    const Tensor& base_repr = *inputs[0];
    const size_t m = 1 + (inputs.size() - 2) / 3;
    const int64_t positions = base_repr.rows(), h = base_repr.cols();
    Tensor out = base_repr.shape.size() == 2 ? Tensor::zeros({positions, h}) : Tensor::zeros({h});
    if (weights_out) *weights_out = Tensor::zeros({positions, static_cast<int64_t>(m)});
    for (int64_t p = 0; p < positions; ++p) {
        SliceAttention at = attention_at(inputs, p);
        for (size_t e = 0; e < m; ++e) {
            const Tensor& repr = e == 0 ? base_repr : *inputs[2 + 3 * (e - 1) + 1];
            for (int64_t c = 0; c < h; ++c) out.at(p, c) += at.weight[e] * repr.at(p, c);
            if (weights_out) weights_out->at(p, static_cast<int64_t>(e)) = at.weight[e];
        }
    }
    return out;
}

}  // namespace ops

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw Error("unknown parameter: " + name);
    return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw Error("unknown parameter: " + name);
    return it->second;
}

ParamStore init_params(const ModelIR& ir, uint64_t seed) {
    ParamStore store;
    store.seed = seed;
    for (const auto& spec : ir.params) {
        Tensor t = Tensor::zeros(spec.shape);
        if (spec.init == ParamInit::XavierUniform) {
            int64_t fan_out = spec.shape.back();
            int64_t fan_in = t.numel() / fan_out;
            double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            uint64_t stream = fnv1a64(spec.name);
            for (size_t i = 0; i < t.data.size(); ++i)
                t.data[i] = (2.0 * unit_double(counter_rng(seed, stream, i)) - 1.0) * a;
        }
        store.values[spec.name] = std::move(t);
    }
    return store;
}

std::vector<uint8_t> ParamStore::to_bytes(const ModelIR& ir) const {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'O', 'V', 'P', 'M'});
    put_u32(out, 1);
    put_u64(out, seed);
    put_u32(out, static_cast<uint32_t>(ir.params.size()));
    uint64_t offset = 0;
    for (const auto& spec : ir.params) {
        const Tensor& t = at(spec.name);
        if (t.shape != spec.shape) throw ShapeError("parameter shape drift: " + spec.name);
        out.push_back(static_cast<uint8_t>(spec.name.size() >> 8));
        out.push_back(static_cast<uint8_t>(spec.name.size() & 0xff));
        out.insert(out.end(), spec.name.begin(), spec.name.end());
        out.push_back(static_cast<uint8_t>(t.shape.size()));
        for (int64_t d : t.shape) put_u64(out, static_cast<uint64_t>(d));
        put_u64(out, offset);
        offset += static_cast<uint64_t>(t.numel()) * 8;
    }
    put_u64(out, offset);
    for (const auto& spec : ir.params)
        for (double v : at(spec.name).data) put_f64(out, v);
    return out;
}

ParamStore ParamStore::from_bytes(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 20 || bytes[0] != 'O' || bytes[1] != 'V' || bytes[2] != 'P' || bytes[3] != 'M')
        throw FatalFormatError("not a parameter blob");
    if (get_u32(bytes.data() + 4) != 1) throw FatalFormatError("unsupported parameter blob version");
    ParamStore store;
    store.seed = get_u64(bytes.data() + 8);
    uint32_t count = get_u32(bytes.data() + 16);
    size_t pos = 20;
    struct Entry {
        std::string name;
        std::vector<int64_t> shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = static_cast<uint16_t>((bytes[pos] << 8) | bytes[pos + 1]);
        pos += 2;
        Entry e;
        e.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
        pos += name_len;
        uint8_t ndim = bytes[pos++];
        for (uint8_t d = 0; d < ndim; ++d) {
            e.shape.push_back(static_cast<int64_t>(get_u64(bytes.data() + pos)));
            pos += 8;
        }
        e.offset = get_u64(bytes.data() + pos);
        pos += 8;
        entries.push_back(std::move(e));
    }
    pos += 8;  // total data size
    for (const auto& e : entries) {
        Tensor t = Tensor::zeros(e.shape);
        const uint8_t* src = bytes.data() + pos + e.offset;
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = get_f64(src + 8 * i);
        store.values[e.name] = std::move(t);
    }
    return store;
}

int64_t EncodedExample::length_of(const std::string& payload) const {
    auto it = payloads.find(payload);
    if (it == payloads.end() || it->second.kind == EncodedPayload::Kind::Null) return 0;
    if (it->second.kind == EncodedPayload::Kind::Singleton) return 1;
    return static_cast<int64_t>(it->second.ids.size());
}

EncodedExample encode_example(const Record& record) {
    EncodedExample ex;
    for (const auto& [name, value] : record.payload_values) {
        EncodedPayload p;
        if (const auto* s = std::get_if<std::string>(&value)) {
            p.kind = EncodedPayload::Kind::Singleton;
            p.singleton_id = hash_token(*s);
        } else if (const auto* seq = std::get_if<std::vector<std::string>>(&value)) {
            p.kind = EncodedPayload::Kind::Sequence;
            for (const auto& tok : *seq) p.ids.push_back(hash_token(tok));
        } else if (const auto* set = std::get_if<std::vector<SetElement>>(&value)) {
            p.kind = EncodedPayload::Kind::Set;
            for (const auto& e : *set) {
                p.ids.push_back(hash_token(e.id));
                p.spans.push_back(e.span);
            }
        } else {
            p.kind = EncodedPayload::Kind::Null;
        }
        ex.payloads[name] = std::move(p);
    }
    return ex;
}

namespace {

const EncodedPayload* find_payload(const EncodedExample& ex, const std::string& name) {
    auto it = ex.payloads.find(name);
    return it == ex.payloads.end() ? nullptr : &it->second;
}

Tensor embed_lookup(const IRNode& n, const ParamStore& params, const EncodedExample& ex) {
    const Tensor& table = params.at(n.params[0]);
    const int64_t d = table.shape[1];
    const EncodedPayload* p = find_payload(ex, n.payload);
    if (n.shape.len_of.empty()) {
        Tensor out = Tensor::zeros({d});
        if (p && p->kind == EncodedPayload::Kind::Singleton && p->singleton_id >= 0)
            for (int64_t c = 0; c < d; ++c) out.data[static_cast<size_t>(c)] = table.at(p->singleton_id, c);
        return out;
    }
    const size_t len = p && p->kind != EncodedPayload::Kind::Null ? p->ids.size() : 0;
    Tensor out = Tensor::zeros({static_cast<int64_t>(len), d});
    for (size_t t = 0; t < len; ++t)
        for (int64_t c = 0; c < d; ++c) out.at(static_cast<int64_t>(t), c) = table.at(p->ids[t], c);
    return out;
}

bool softmax_over_candidates(const ModelIR& ir, const IRNode& n) {
    return n.op == OpKind::Softmax && ir.node(n.inputs[0]).op == OpKind::CandidateScore;
}

std::vector<const Tensor*> gather_inputs(const IRNode& n, const Forward& fwd) {
    std::vector<const Tensor*> in;
    for (int id : n.inputs) in.push_back(&fwd.value(id));
    return in;
}

}  // namespace

Forward forward(const ModelIR& ir, const ParamStore& params, const EncodedExample& ex) {
    Forward fwd;
    fwd.values.resize(ir.nodes.size());
    for (const auto& n : ir.nodes) {
        Tensor out;
        switch (n.op) {
            case OpKind::EmbedLookup:
                out = embed_lookup(n, params, ex);
                break;
            case OpKind::MeanPool:
                out = ops::mean_pool(fwd.value(n.inputs[0]));
                break;
            case OpKind::MaxPool:
                out = ops::max_pool(fwd.value(n.inputs[0]));
                break;
            case OpKind::Conv1D:
                out = ops::conv1d(fwd.value(n.inputs[0]), params.at(n.params[0]), params.at(n.params[1]));
                break;
            case OpKind::Recurrent:
                out = ops::recurrent(fwd.value(n.inputs[0]), params.at(n.params[0]),
                                     params.at(n.params[1]), params.at(n.params[2]));
                break;
            case OpKind::SpanPool: {
                const EncodedPayload* p = find_payload(ex, n.payload);
                static const std::vector<std::optional<std::pair<int, int>>> none;
                out = ops::span_pool(fwd.value(n.inputs[0]), p ? p->spans : none);
                break;
            }
            case OpKind::Concat: {
                auto ins = gather_inputs(n, fwd);
                int64_t rows = ins[0]->rows(), total = 0;
                for (const Tensor* t : ins) total += t->cols();
                out = ins[0]->shape.size() == 2 ? Tensor::zeros({rows, total}) : Tensor::zeros({total});
                for (int64_t r = 0; r < rows; ++r) {
                    int64_t off = 0;
                    for (const Tensor* t : ins) {
                        for (int64_t c = 0; c < t->cols(); ++c) out.at(r, off + c) = t->at(r, c);
                        off += t->cols();
                    }
                }
                break;
            }
            case OpKind::Linear:
                out = ops::linear(fwd.value(n.inputs[0]), params.at(n.params[0]), params.at(n.params[1]));
                break;
            case OpKind::Relu:
                out = ops::relu(fwd.value(n.inputs[0]));
                break;
            case OpKind::Softmax:
                out = softmax_over_candidates(ir, n) ? ops::softmax_flat(fwd.value(n.inputs[0]))
                                                     : ops::softmax_rows(fwd.value(n.inputs[0]));
                break;
            case OpKind::Sigmoid:
                out = ops::sigmoid(fwd.value(n.inputs[0]));
                break;
            case OpKind::CandidateScore:
                out = ops::candidate_score(fwd.value(n.inputs[0]), params.at(n.params[0]),
                                           fwd.value(n.inputs[1]));
                break;
            case OpKind::SliceCombine:
                out = ops::slice_combine(gather_inputs(n, fwd));
                break;
        }
        if (!out.finite())
            throw NonFiniteError("non-finite value at node " + std::to_string(n.id) + " (" +
                                 to_string(n.op) + ")");
        fwd.values[static_cast<size_t>(n.id)] = std::move(out);
    }
    return fwd;
}

namespace {

struct BackwardState {
    std::vector<Tensor> node_grads;
    std::vector<bool> has_grad;

    Tensor& grad_for(int id, const Tensor& like) {
        if (!has_grad[static_cast<size_t>(id)]) {
            node_grads[static_cast<size_t>(id)] = Tensor::zeros(like.shape);
            has_grad[static_cast<size_t>(id)] = true;
        }
        return node_grads[static_cast<size_t>(id)];
    }
};

Tensor& param_grad(GradMap& grads, const std::string& name, const Tensor& like) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Tensor::zeros(like.shape)).first;
    return it->second;
}

void softmax_backward_span(const double* y, const double* g, double* dx, int64_t n) {
    double dot = 0.0;
    for (int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
    for (int64_t i = 0; i < n; ++i) dx[i] += y[i] * (g[i] - dot);
}

}  // namespace

void backward(const ModelIR& ir, const ParamStore& params, const EncodedExample& ex,
              const Forward& fwd, const std::map<int, Tensor>& output_grads, GradMap& grads) {
    BackwardState st;
    st.node_grads.resize(ir.nodes.size());
    st.has_grad.assign(ir.nodes.size(), false);
    for (const auto& [id, g] : output_grads) {
        Tensor& slot = st.grad_for(id, fwd.value(id));
        for (size_t i = 0; i < g.data.size(); ++i) slot.data[i] += g.data[i];
    }

    for (auto it = ir.nodes.rbegin(); it != ir.nodes.rend(); ++it) {
        const IRNode& n = *it;
        if (!st.has_grad[static_cast<size_t>(n.id)]) continue;
        const Tensor& g = st.node_grads[static_cast<size_t>(n.id)];
        const Tensor& out = fwd.value(n.id);

        switch (n.op) {
            case OpKind::EmbedLookup: {
                const EncodedPayload* p = find_payload(ex, n.payload);
                Tensor& dE = param_grad(grads, n.params[0], params.at(n.params[0]));
                const int64_t d = dE.shape[1];
                if (n.shape.len_of.empty()) {
                    if (p && p->kind == EncodedPayload::Kind::Singleton && p->singleton_id >= 0)
                        for (int64_t c = 0; c < d; ++c)
                            dE.at(p->singleton_id, c) += g.data[static_cast<size_t>(c)];
                } else if (p && p->kind != EncodedPayload::Kind::Null) {
                    for (size_t t = 0; t < p->ids.size(); ++t)
                        for (int64_t c = 0; c < d; ++c)
                            dE.at(p->ids[t], c) += g.at(static_cast<int64_t>(t), c);
                }
                break;
            }
            case OpKind::MeanPool: {
                const Tensor& x = fwd.value(n.inputs[0]);
                if (x.rows() == 0) break;
                Tensor& dx = st.grad_for(n.inputs[0], x);
                double inv = 1.0 / static_cast<double>(x.rows());
                for (int64_t r = 0; r < x.rows(); ++r)
                    for (int64_t c = 0; c < x.cols(); ++c)
                        dx.at(r, c) += g.data[static_cast<size_t>(c)] * inv;
                break;
            }
            case OpKind::MaxPool: {
                const Tensor& x = fwd.value(n.inputs[0]);
                if (x.rows() == 0) break;
                Tensor& dx = st.grad_for(n.inputs[0], x);
                for (int64_t c = 0; c < x.cols(); ++c) {
                    int64_t best = 0;
                    for (int64_t r = 1; r < x.rows(); ++r)
                        if (x.at(r, c) > x.at(best, c)) best = r;
                    dx.at(best, c) += g.data[static_cast<size_t>(c)];
                }
                break;
            }
            case OpKind::Conv1D: {
                const Tensor& x = fwd.value(n.inputs[0]);
                const Tensor& kernel = params.at(n.params[0]);
                const int64_t rows = x.rows(), din = x.cols();
                const int64_t w = kernel.shape[0], dout = kernel.shape[2], center = w / 2;
                Tensor& dx = st.grad_for(n.inputs[0], x);
                Tensor& dK = param_grad(grads, n.params[0], kernel);
                Tensor& db = param_grad(grads, n.params[1], params.at(n.params[1]));
                for (int64_t t = 0; t < rows; ++t)
                    for (int64_t o = 0; o < dout; ++o) {
                        double go = g.at(t, o);
                        db.data[static_cast<size_t>(o)] += go;
                        for (int64_t k = 0; k < w; ++k) {
                            int64_t s = t + k - center;
                            if (s < 0 || s >= rows) continue;
                            for (int64_t i = 0; i < din; ++i) {
                                dK.data[static_cast<size_t>((k * din + i) * dout + o)] += x.at(s, i) * go;
                                dx.at(s, i) += kernel.data[static_cast<size_t>((k * din + i) * dout + o)] * go;
                            }
                        }
                    }
                break;
            }
            case OpKind::Recurrent: {
                const Tensor& x = fwd.value(n.inputs[0]);
                const Tensor& w = params.at(n.params[0]);
                const Tensor& u = params.at(n.params[1]);
                const Tensor& b = params.at(n.params[2]);
                const int64_t rows = x.rows(), din = x.cols(), hdim = w.shape[1];
                if (rows == 0) break;
                // Recompute the hidden trajectory for BPTT.
                std::vector<Tensor> hs(static_cast<size_t>(rows) + 1, Tensor::zeros({hdim}));
                for (int64_t t = 0; t < rows; ++t)
                    for (int64_t j = 0; j < hdim; ++j) {
                        double acc = b.data[static_cast<size_t>(j)];
                        for (int64_t i = 0; i < din; ++i) acc += x.at(t, i) * w.at(i, j);
                        for (int64_t i = 0; i < hdim; ++i)
                            acc += hs[static_cast<size_t>(t)].data[static_cast<size_t>(i)] * u.at(i, j);
                        hs[static_cast<size_t>(t) + 1].data[static_cast<size_t>(j)] = std::tanh(acc);
                    }
                Tensor& dx = st.grad_for(n.inputs[0], x);
                Tensor& dW = param_grad(grads, n.params[0], w);
                Tensor& dU = param_grad(grads, n.params[1], u);
                Tensor& db = param_grad(grads, n.params[2], b);
                Tensor dh = g;  // gradient flowing into h_t
                for (int64_t t = rows - 1; t >= 0; --t) {
                    const Tensor& ht = hs[static_cast<size_t>(t) + 1];
                    const Tensor& hprev = hs[static_cast<size_t>(t)];
                    Tensor dpre = Tensor::zeros({hdim});
                    for (int64_t j = 0; j < hdim; ++j) {
                        double hv = ht.data[static_cast<size_t>(j)];
                        dpre.data[static_cast<size_t>(j)] = dh.data[static_cast<size_t>(j)] * (1.0 - hv * hv);
                    }
                    for (int64_t j = 0; j < hdim; ++j) {
                        double dp = dpre.data[static_cast<size_t>(j)];
                        db.data[static_cast<size_t>(j)] += dp;
                        for (int64_t i = 0; i < din; ++i) {
                            dW.at(i, j) += x.at(t, i) * dp;
                            dx.at(t, i) += w.at(i, j) * dp;
                        }
                        for (int64_t i = 0; i < hdim; ++i) dU.at(i, j) += hprev.data[static_cast<size_t>(i)] * dp;
                    }
                    Tensor dnext = Tensor::zeros({hdim});
                    for (int64_t i = 0; i < hdim; ++i) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < hdim; ++j) acc += u.at(i, j) * dpre.data[static_cast<size_t>(j)];
                        dnext.data[static_cast<size_t>(i)] = acc;
                    }
                    dh = std::move(dnext);
                }
                break;
            }
            case OpKind::SpanPool: {
                const EncodedPayload* p = find_payload(ex, n.payload);
                if (!p) break;
                const Tensor& x = fwd.value(n.inputs[0]);
                Tensor& dx = st.grad_for(n.inputs[0], x);
                for (size_t e = 0; e < p->spans.size(); ++e) {
                    if (!p->spans[e]) continue;
                    auto [a, bnd] = *p->spans[e];
                    for (int t = a; t < bnd; ++t)
                        for (int64_t c = 0; c < x.cols(); ++c)
                            dx.at(t, c) += g.at(static_cast<int64_t>(e), c) / (bnd - a);
                }
                break;
            }
            case OpKind::Concat: {
                int64_t off = 0;
                for (int id : n.inputs) {
                    const Tensor& x = fwd.value(id);
                    Tensor& dx = st.grad_for(id, x);
                    for (int64_t r = 0; r < x.rows(); ++r)
                        for (int64_t c = 0; c < x.cols(); ++c) dx.at(r, c) += g.at(r, off + c);
                    off += x.cols();
                }
                break;
            }
            case OpKind::Linear: {
                const Tensor& x = fwd.value(n.inputs[0]);
                const Tensor& w = params.at(n.params[0]);
                Tensor& dx = st.grad_for(n.inputs[0], x);
                Tensor& dW = param_grad(grads, n.params[0], w);
                Tensor& db = param_grad(grads, n.params[1], params.at(n.params[1]));
                const int64_t rows = x.rows(), din = x.cols(), dout = w.shape[1];
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t o = 0; o < dout; ++o) {
                        double go = g.at(r, o);
                        db.data[static_cast<size_t>(o)] += go;
                        for (int64_t i = 0; i < din; ++i) {
                            dW.at(i, o) += x.at(r, i) * go;
                            dx.at(r, i) += w.at(i, o) * go;
                        }
                    }
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = fwd.value(n.inputs[0]);
                Tensor& dx = st.grad_for(n.inputs[0], x);
                for (size_t i = 0; i < x.data.size(); ++i)
                    if (out.data[i] > 0) dx.data[i] += g.data[i];
                break;
            }
            case OpKind::Softmax: {
                const Tensor& x = fwd.value(n.inputs[0]);
                Tensor& dx = st.grad_for(n.inputs[0], x);
                if (softmax_over_candidates(ir, n)) {
                    if (out.numel() > 0)
                        softmax_backward_span(out.data.data(), g.data.data(), dx.data.data(), out.numel());
                } else {
                    for (int64_t r = 0; r < out.rows(); ++r)
                        softmax_backward_span(out.data.data() + r * out.cols(),
                                              g.data.data() + r * out.cols(),
                                              dx.data.data() + r * out.cols(), out.cols());
                }
                break;
            }
            case OpKind::Sigmoid: {
                const Tensor& x = fwd.value(n.inputs[0]);
                Tensor& dx = st.grad_for(n.inputs[0], x);
                for (size_t i = 0; i < x.data.size(); ++i)
                    dx.data[i] += g.data[i] * out.data[i] * (1.0 - out.data[i]);
                break;
            }
            case OpKind::CandidateScore: {
                const Tensor& q = fwd.value(n.inputs[0]);
                const Tensor& cands = fwd.value(n.inputs[1]);
                const Tensor& w = params.at(n.params[0]);
                Tensor& dq = st.grad_for(n.inputs[0], q);
                Tensor& dc = st.grad_for(n.inputs[1], cands);
                Tensor& dW = param_grad(grads, n.params[0], w);
                const int64_t h = q.cols(), d = w.shape[1], cn = cands.rows();
                for (int64_t i = 0; i < cn; ++i) {
                    double gi = g.at(i, 0);
                    if (gi == 0.0) continue;
                    for (int64_t a = 0; a < h; ++a) {
                        double qa = q.data[static_cast<size_t>(a)];
                        for (int64_t bcol = 0; bcol < d; ++bcol) {
                            dW.at(a, bcol) += gi * qa * cands.at(i, bcol);
                            dq.data[static_cast<size_t>(a)] += gi * w.at(a, bcol) * cands.at(i, bcol);
                            dc.at(i, bcol) += gi * qa * w.at(a, bcol);
                        }
                    }
                }
                break;
            }
            case OpKind::SliceCombine: {
                auto ins = gather_inputs(n, fwd);
                const size_t m = 1 + (ins.size() - 2) / 3;
                const int64_t positions = ins[0]->rows(), h = ins[0]->cols();
                const int64_t k = ins[1]->cols();
                const double ln_k = std::log(static_cast<double>(k));
                for (int64_t p = 0; p < positions; ++p) {
                    ops::SliceAttention at = ops::attention_at(ins, p);
                    // dL/da_e = <g_p, repr_e[p]>
                    std::vector<double> da(m, 0.0);
                    for (size_t e = 0; e < m; ++e) {
                        const Tensor& repr = e == 0 ? *ins[0] : *ins[2 + 3 * (e - 1) + 1];
                        for (int64_t c = 0; c < h; ++c) da[e] += g.at(p, c) * repr.at(p, c);
                        // repr gradient
                        int repr_id = e == 0 ? n.inputs[0] : n.inputs[2 + 3 * (e - 1) + 1];
                        Tensor& drepr = st.grad_for(repr_id, repr);
                        for (int64_t c = 0; c < h; ++c) drepr.at(p, c) += at.weight[e] * g.at(p, c);
                    }
                    if (at.total <= 0) continue;  // flat fallback region: zero sensitivity
                    double wda = 0.0;
                    for (size_t e = 0; e < m; ++e) wda += at.weight[e] * da[e];
                    for (size_t e = 0; e < m; ++e) {
                        double ds = (da[e] - wda) / at.total;
                        double ind = e == 0 ? 1.0 : ins[2 + 3 * (e - 1)]->at(p, 0);
                        if (e > 0) {
                            Tensor& dind = st.grad_for(n.inputs[2 + 3 * (e - 1)],
                                                       *ins[2 + 3 * (e - 1)]);
                            dind.at(p, 0) += at.conf[e] * ds;
                        }
                        if (k <= 1 || at.conf[e] <= 0.0) continue;  // clamped: no entropy gradient
                        double dconf = ind * ds;
                        double dH = -dconf / ln_k;
                        std::vector<double> dq(static_cast<size_t>(k));
                        for (int64_t c = 0; c < k; ++c) {
                            double qv = std::max(at.q[e][static_cast<size_t>(c)], 1e-300);
                            dq[static_cast<size_t>(c)] = -(std::log(qv) + 1.0) * dH;
                        }
                        int logits_id = e == 0 ? n.inputs[1] : n.inputs[2 + 3 * (e - 1) + 2];
                        const Tensor& logits = fwd.value(logits_id);
                        Tensor& dlogits = st.grad_for(logits_id, logits);
                        softmax_backward_span(at.q[e].data(), dq.data(),
                                              dlogits.data.data() + p * k, k);
                    }
                }
                break;
            }
        }
    }
}

void verify_runtime_shapes(const ModelIR& ir, const EncodedExample& ex, const Forward& fwd) {
    for (const auto& n : ir.nodes) {
        const Tensor& v = fwd.value(n.id);
        if (n.shape.len_of.empty()) {
            if (v.shape.size() != 1 || v.shape[0] != n.shape.dim)
                throw ShapeError("runtime shape mismatch at node " + std::to_string(n.id));
        } else {
            int64_t len = ex.length_of(n.shape.len_of);
            if (v.shape.size() != 2 || v.shape[0] != len || v.shape[1] != n.shape.dim)
                throw ShapeError("runtime shape mismatch at node " + std::to_string(n.id));
        }
    }
}

GradCheckReport grad_check(const ModelIR& ir, const ParamStore& params,
                           const std::vector<EncodedExample>& examples, double tolerance,
                           const GradMap* override_grads) {
    // Scalar objective: a fixed pseudo-random linear functional of the task
    // probability outputs, summed over examples.
    auto coefficients = [&](size_t ex_idx, int node, const Tensor& value) {
        Tensor c = Tensor::zeros(value.shape);
        uint64_t stream = mix64(0x9dc4f00d ^ (static_cast<uint64_t>(node) << 20) ^ ex_idx);
        for (size_t i = 0; i < c.data.size(); ++i)
            c.data[i] = 2.0 * unit_double(counter_rng(0x77, stream, i)) - 1.0;
        return c;
    };
    std::vector<int> seed_nodes;
    for (const auto& [task, outs] : ir.task_outputs) seed_nodes.push_back(outs.probs);

    auto objective = [&](const ParamStore& p) {
        double total = 0.0;
        for (size_t e = 0; e < examples.size(); ++e) {
            Forward fwd = forward(ir, p, examples[e]);
            for (int node : seed_nodes) {
                Tensor c = coefficients(e, node, fwd.value(node));
                const Tensor& v = fwd.value(node);
                for (size_t i = 0; i < v.data.size(); ++i) total += c.data[i] * v.data[i];
            }
        }
        return total;
    };

    GradMap analytic;
    if (override_grads) {
        analytic = *override_grads;
    } else {
        for (size_t e = 0; e < examples.size(); ++e) {
            Forward fwd = forward(ir, params, examples[e]);
            std::map<int, Tensor> out_grads;
            for (int node : seed_nodes) out_grads[node] = coefficients(e, node, fwd.value(node));
            backward(ir, params, examples[e], fwd, out_grads, analytic);
        }
    }

    const double h = 1e-5;
    GradCheckReport report;
    ParamStore probe = params;
    for (const auto& spec : ir.params) {
        GradCheckEntry entry;
        entry.param = spec.name;
        Tensor& t = probe.at(spec.name);
        const Tensor* ga = analytic.count(spec.name) ? &analytic.at(spec.name) : nullptr;
        for (size_t i = 0; i < t.data.size(); ++i) {
            double orig = t.data[i];
            t.data[i] = orig + h;
            double up = objective(probe);
            t.data[i] = orig - h;
            double down = objective(probe);
            t.data[i] = orig;
            double fd = (up - down) / (2 * h);
            double an = ga ? ga->data[i] : 0.0;
            double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.pass = entry.max_rel_err <= tolerance;
        report.entries.push_back(entry);
        report.pass = report.pass && entry.pass;
    }
    return report;
}

}  // namespace overton
