#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "overton/errors.hpp"

namespace overton {

enum class PayloadKind { Singleton, Sequence, Set };

const char* to_string(PayloadKind k);

// One input feeding a payload: either a raw record field or another payload,
// optionally with a span reference into a sequence payload.
struct PayloadInput {
    enum class Kind { DataField, PayloadRef } kind = Kind::DataField;
    std::string name;                       // field name or payload name
    std::optional<std::string> span_field;  // PayloadRef only
    bool operator==(const PayloadInput&) const = default;
};

struct PayloadDecl {
    std::string name;
    PayloadKind kind = PayloadKind::Singleton;
    std::vector<PayloadInput> inputs;
    std::optional<int> embed_dim;  // nullopt = "auto": the search picks it
    bool operator==(const PayloadDecl&) const = default;
};

enum class TaskKind { Multiclass, Bitvector, Select };

const char* to_string(TaskKind k);

struct TaskDecl {
    std::string name;
    std::string payload;
    TaskKind kind = TaskKind::Multiclass;
    std::vector<std::string> labels;  // Multiclass: labels; Bitvector: bit names
    std::string select_payload;       // Select only
    double loss_weight = 1.0;
    bool operator==(const TaskDecl&) const = default;

    // Number of output classes/bits; Select cardinality is per record.
    int label_count() const { return static_cast<int>(labels.size()); }
};

struct SliceDecl {
    std::string tag;
    std::vector<std::string> tasks;  // empty = applies to every eligible task
    bool operator==(const SliceDecl&) const = default;
};

// A hyperparameter value in the tuning spec.
using HpValue = std::variant<int64_t, double, std::string>;

std::string hp_to_string(const HpValue& v);

struct TuningSpec {
    std::map<std::string, std::vector<HpValue>> search_space;
    std::map<std::string, HpValue> pinned;
    int budget = 1;
    uint64_t seed = 0;
    bool operator==(const TuningSpec&) const = default;
};

struct Schema {
    std::vector<PayloadDecl> payloads;
    std::vector<TaskDecl> tasks;
    std::vector<SliceDecl> slices;
    TuningSpec tuning;
    bool operator==(const Schema&) const = default;

    const PayloadDecl* find_payload(const std::string& name) const;
    const TaskDecl* find_task(const std::string& name) const;
};

// Parses and validates a schema document (format: JSON, see README).
// Throws SyntaxError on malformed input, ValidationError on invariant violations.
Schema parse_schema(std::string_view text);

// Canonical serialization: sorted keys, declaration order preserved for
// payloads/tasks/slices, defaults elided. parse_schema(serialize_schema(s)) == s.
std::string serialize_schema(const Schema& schema);

// Payload names in dependency order: every payload after everything it
// references, ties broken by declaration order.
std::vector<std::string> reference_order(const Schema& schema);

// Digest of the canonical serialization; recorded by stores and models.
uint64_t schema_hash(const Schema& schema);

// Reserved split tags.
inline bool is_split_tag(const std::string& t) {
    return t == "train" || t == "test" || t == "dev";
}

}  // namespace overton
