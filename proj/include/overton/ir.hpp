#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "overton/schema.hpp"

namespace overton {

enum class EncoderKind { MeanPool, MaxPool, Conv1D, Recurrent };

const char* to_string(EncoderKind k);
EncoderKind encoder_from_string(const std::string& s, int* conv_width);

// One assignment of coarse architecture blocks and trainer hyperparameters.
struct ArchChoice {
    std::map<std::string, EncoderKind> encoders;  // per sequence-aggregating payload
    std::map<std::string, int> conv_widths;       // Conv1D encoders only
    int embed_dim = 32;
    int hidden_dim = 32;
    double learning_rate = 0.1;
    int epochs = 10;
    int batch_size = 16;
    bool operator==(const ArchChoice&) const = default;

    EncoderKind encoder_for(const std::string& payload) const;
    int conv_width_for(const std::string& payload) const;
    std::string describe() const;
};

enum class OpKind {
    EmbedLookup,
    MeanPool,
    MaxPool,
    Conv1D,
    Recurrent,
    SpanPool,
    Concat,
    Linear,
    Relu,
    Softmax,
    Sigmoid,
    CandidateScore,
    SliceCombine,
};

const char* to_string(OpKind k);

// Symbolic per-example shape: (dim,) or (len_of, dim) where len_of names the
// payload whose element count drives the leading axis.
struct NodeShape {
    std::string len_of;  // empty = flat vector
    int dim = 0;
    bool operator==(const NodeShape&) const = default;
};

struct IRNode {
    int id = -1;
    OpKind op = OpKind::Linear;
    std::vector<int> inputs;          // node ids
    std::vector<std::string> params;  // parameter names used by this op
    std::string payload;              // EmbedLookup/SpanPool: which payload's raw data
    int conv_width = 0;               // Conv1D
    NodeShape shape;
};

enum class ParamInit { XavierUniform, Zero };

struct ParamSpec {
    std::string name;
    std::vector<int64_t> shape;
    ParamInit init = ParamInit::XavierUniform;
};

struct TaskOutputs {
    int logits = -1;  // pre-activation head output (final path when sliced)
    int probs = -1;   // softmax / sigmoid output
};

struct SliceBlock {
    std::string task;
    std::string slice;
    int indicator_logit = -1;
    int indicator_prob = -1;
    int expert_repr = -1;
    int expert_logits = -1;
};

struct SignatureTask {
    std::string name;
    TaskKind kind = TaskKind::Multiclass;
    std::vector<std::string> labels;  // labels / bit names; empty for select
    std::string candidate_payload;    // select only
    std::vector<std::string> required_payloads;
    std::string output_type;  // "distribution" | "per_bit_probabilities" | "per_candidate_distribution"
    bool per_token = false;
};

// Typed description of one raw input field the model consumes.
struct SignatureInput {
    std::string name;
    PayloadKind kind = PayloadKind::Singleton;
    std::string span_target;  // set payloads: the sequence their spans index into
};

struct ServingSignature {
    std::vector<SignatureInput> inputs;  // sorted by name
    std::vector<SignatureTask> tasks;    // schema order
};

// Compiled dataflow graph plus parameter table and typed serving signature.
struct ModelIR {
    std::vector<IRNode> nodes;  // topologically ordered
    std::vector<ParamSpec> params;
    std::map<std::string, TaskOutputs> task_outputs;
    std::vector<SliceBlock> slice_blocks;
    std::map<std::string, int> payload_nodes;  // payload name -> representation node
    std::map<std::string, double> loss_weights;
    ServingSignature signature;
    ArchChoice choice;

    const IRNode& node(int id) const { return nodes[static_cast<size_t>(id)]; }
    const ParamSpec* find_param(const std::string& name) const;
    std::vector<SliceBlock> slices_for(const std::string& task) const;
};

inline constexpr int kHashedVocabSize = 1 << 15;

// Token -> embedding row in the fixed hashed vocabulary.
int hash_token(std::string_view token);

std::string ir_to_json(const ModelIR& ir);
ModelIR ir_from_json(const std::string& text);

std::string signature_to_json(const ServingSignature& sig);  // stable, sig_version 1

}  // namespace overton
