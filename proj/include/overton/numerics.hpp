#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "overton/ir.hpp"
#include "overton/rowstore.hpp"

namespace overton {

// Dense row-major tensor of 64-bit reals. Per-example evaluation: shapes are
// (dim) or (len, dim); the batch axis lives in the caller's loop.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    static Tensor zeros(std::vector<int64_t> shape);
    static Tensor row_vector(std::vector<double> values);

    int64_t numel() const;
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }
    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }
    bool finite() const;
};

// Op-level kernels, shared by the graph interpreter and unit tests.
namespace ops {

Tensor mean_pool(const Tensor& x);
Tensor max_pool(const Tensor& x);
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);
Tensor recurrent(const Tensor& x, const Tensor& w, const Tensor& u, const Tensor& b);
Tensor span_pool(const Tensor& x, const std::vector<std::optional<std::pair<int, int>>>& spans);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);   // normalizes each row
Tensor softmax_flat(const Tensor& x);   // normalizes all entries (candidate axis)
Tensor sigmoid(const Tensor& x);
Tensor candidate_score(const Tensor& q, const Tensor& w, const Tensor& cands);

// Entropy-discounted slice attention: expert 0 is the base (indicator := 1).
// experts = [repr_0, logits_0, (ind_1, repr_1, logits_1), ...] laid out as in
// the SliceCombine node inputs. Returns the combined representation and, if
// `weights_out` is given, the per-position attention weights (positions x m).
Tensor slice_combine(const std::vector<const Tensor*>& inputs, Tensor* weights_out = nullptr);

}  // namespace ops

// Named parameter tensors plus the seed that initialized them.
struct ParamStore {
    uint64_t seed = 0;
    std::map<std::string, Tensor> values;

    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);

    // Flat binary blob; parameters laid out in IR declaration order.
    std::vector<uint8_t> to_bytes(const ModelIR& ir) const;
    static ParamStore from_bytes(const std::vector<uint8_t>& bytes);
};

// Xavier-uniform weights, zero biases, from a counter-based PRNG keyed by
// parameter name; identical (ir, seed) gives bit-identical stores.
ParamStore init_params(const ModelIR& ir, uint64_t seed);

// Raw model inputs for one record, hashed and unpacked per payload.
struct EncodedPayload {
    enum class Kind { Null, Singleton, Sequence, Set } kind = Kind::Null;
    int singleton_id = -1;
    std::vector<int> ids;  // token or element ids
    std::vector<std::optional<std::pair<int, int>>> spans;
};

struct EncodedExample {
    std::map<std::string, EncodedPayload> payloads;

    int64_t length_of(const std::string& payload) const;
};

EncodedExample encode_example(const Record& record);

// Per-node output tensors, indexed by node id.
struct Forward {
    std::vector<Tensor> values;
    const Tensor& value(int node) const { return values[static_cast<size_t>(node)]; }
};

Forward forward(const ModelIR& ir, const ParamStore& params, const EncodedExample& ex);

using GradMap = std::map<std::string, Tensor>;

// Reverse-mode gradients of sum_n <output_grads[n], value(n)> with respect to
// every parameter, accumulated into `grads` (missing entries are created).
void backward(const ModelIR& ir, const ParamStore& params, const EncodedExample& ex,
              const Forward& fwd, const std::map<int, Tensor>& output_grads, GradMap& grads);

// Runtime shapes must equal the IR's symbolic shapes.
void verify_runtime_shapes(const ModelIR& ir, const EncodedExample& ex, const Forward& fwd);

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool pass = true;
};

// Central finite differences (h = 1e-5) against the analytic gradients of a
// fixed linear functional of the task outputs. `override_grads` substitutes
// the analytic gradients, for fault-injection tests.
GradCheckReport grad_check(const ModelIR& ir, const ParamStore& params,
                           const std::vector<EncodedExample>& examples, double tolerance,
                           const GradMap* override_grads = nullptr);

}  // namespace overton
