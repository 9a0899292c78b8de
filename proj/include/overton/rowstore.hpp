#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "overton/schema.hpp"

namespace overton {

struct SetElement {
    std::string id;
    std::optional<std::pair<int, int>> span;  // [start, end) token indices
    bool operator==(const SetElement&) const = default;
};

// A payload's raw value in one record. Monostate = null.
using PayloadValue = std::variant<std::monostate,
                                  std::string,              // singleton
                                  std::vector<std::string>,  // sequence
                                  std::vector<SetElement>>;  // set

// Supervision vote values, normalized to class indices at ingest:
//   int                      multiclass label / select candidate index
//   vector<int>              per-token multiclass labels
//   vector<uint8_t>          bitvector mask
//   vector<vector<uint8_t>>  per-token bitvector masks
using VoteValue = std::variant<int, std::vector<int>, std::vector<uint8_t>,
                               std::vector<std::vector<uint8_t>>>;

struct LabeledVote {
    std::string source;
    VoteValue value;
    bool operator==(const LabeledVote&) const = default;
};

struct Record {
    std::map<std::string, PayloadValue> payload_values;
    std::map<std::string, std::vector<LabeledVote>> supervision;
    std::vector<std::string> tags;
    bool operator==(const Record&) const = default;

    bool has_tag(const std::string& t) const;
    // The reserved split tag (train/test/dev); records always carry exactly one.
    std::string split() const;
};

enum class RecordErrorKind {
    BadJson,
    UnknownPayload,
    UnknownTask,
    BadPayloadValue,
    BadSpan,
    BadVote,
    UnknownLabel,
    DuplicateSourceVote,
    ConflictingSplitTags,
};

const char* to_string(RecordErrorKind k);

struct RecordError {
    int line = 0;  // 1-based line in the data file
    RecordErrorKind kind = RecordErrorKind::BadJson;
    std::string message;
};

// Parses and validates one JSONL record against the schema. Assigns the
// default split tag when none of train/test/dev is present.
Record parse_record(const Schema& schema, std::string_view line);

// Immutable, offset-indexed binary store of validated records.
class RowStore {
public:
    int64_t count() const { return static_cast<int64_t>(offsets_.size()) - 1; }
    uint64_t schema_digest() const { return schema_hash_; }
    const std::string& path() const { return path_; }
    uint64_t file_digest() const { return file_digest_; }

    // Decodes row `id`; structurally identical to the ingested record.
    Record get(int64_t id) const;

    // Sorted ids of rows carrying `tag`; unknown tag yields an empty list.
    std::vector<int64_t> rows_with_tag(const std::string& tag) const;

    const std::map<std::string, std::vector<int64_t>>& tag_index() const { return tag_index_; }

    // Read-access tracking, used by the search-hygiene assertions. Tracking is
    // observational only; the store contents stay immutable.
    void reset_access_log() const;
    std::vector<int64_t> accessed_rows() const;

    static RowStore open(const std::string& path);

private:
    std::string path_;
    uint64_t schema_hash_ = 0;
    uint64_t file_digest_ = 0;
    std::vector<uint64_t> offsets_;          // count+1 absolute file offsets
    std::vector<uint8_t> bytes_;             // whole store file
    std::map<std::string, std::vector<int64_t>> tag_index_;
    mutable std::unique_ptr<std::atomic<uint8_t>[]> access_flags_;
};

struct IngestResult {
    RowStore store;
    std::vector<RecordError> errors;
};

// Validates the JSONL stream against the schema and writes the binary store to
// `out_path` (plus the `<out_path>.tags.json` sidecar). Malformed lines are
// reported and skipped; more than 50% rejected lines raises FatalFormatError.
IngestResult ingest(const Schema& schema, std::string_view jsonl, const std::string& out_path);

}  // namespace overton
