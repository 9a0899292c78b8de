#include "overton/rowstore.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/errors.hpp"

namespace overton {

using nlohmann::json;

const char* to_string(RecordErrorKind k) {
    switch (k) {
        case RecordErrorKind::BadJson: return "BadJson";
        case RecordErrorKind::UnknownPayload: return "UnknownPayload";
        case RecordErrorKind::UnknownTask: return "UnknownTask";
        case RecordErrorKind::BadPayloadValue: return "BadPayloadValue";
        case RecordErrorKind::BadSpan: return "BadSpan";
        case RecordErrorKind::BadVote: return "BadVote";
        case RecordErrorKind::UnknownLabel: return "UnknownLabel";
        case RecordErrorKind::DuplicateSourceVote: return "DuplicateSourceVote";
        case RecordErrorKind::ConflictingSplitTags: return "ConflictingSplitTags";
    }
    return "?";
}

bool Record::has_tag(const std::string& t) const {
    return std::find(tags.begin(), tags.end(), t) != tags.end();
}

std::string Record::split() const {
    for (const auto& t : tags)
        if (is_split_tag(t)) return t;
    return "";
}

namespace {

struct RecordParseError {
    RecordErrorKind kind;
    std::string message;
};

[[noreturn]] void fail(RecordErrorKind kind, const std::string& msg) {
    throw RecordParseError{kind, msg};
}

int label_index(const TaskDecl& task, const std::string& label) {
    for (size_t i = 0; i < task.labels.size(); ++i)
        if (task.labels[i] == label) return static_cast<int>(i);
    fail(RecordErrorKind::UnknownLabel,
         "task \"" + task.name + "\" has no label \"" + label + "\"");
}

std::vector<uint8_t> bit_mask(const TaskDecl& task, const json& names) {
    if (!names.is_array()) fail(RecordErrorKind::BadVote, "bitvector vote must be an array of bit names");
    std::vector<uint8_t> mask(task.labels.size(), 0);
    for (const auto& n : names) {
        if (!n.is_string()) fail(RecordErrorKind::BadVote, "bit names must be strings");
        mask[static_cast<size_t>(label_index(task, n.get<std::string>()))] = 1;
    }
    return mask;
}

size_t sequence_length(const Record& rec, const std::string& payload) {
    auto it = rec.payload_values.find(payload);
    if (it == rec.payload_values.end()) return 0;
    if (const auto* seq = std::get_if<std::vector<std::string>>(&it->second)) return seq->size();
    return 0;
}

// --- canonical binary encoding (CBOR of a kind-tagged JSON shape) ---

json encode_payload_value(const PayloadValue& v) {
    json j;
    j["k"] = static_cast<int>(v.index());
    switch (v.index()) {
        case 0: j["v"] = nullptr; break;
        case 1: j["v"] = std::get<std::string>(v); break;
        case 2: j["v"] = std::get<std::vector<std::string>>(v); break;
        case 3: {
            json arr = json::array();
            for (const auto& e : std::get<std::vector<SetElement>>(v)) {
                json ej;
                ej["id"] = e.id;
                if (e.span) ej["span"] = {e.span->first, e.span->second};
                else ej["span"] = nullptr;
                arr.push_back(ej);
            }
            j["v"] = arr;
            break;
        }
    }
    return j;
}

PayloadValue decode_payload_value(const json& j) {
    int k = j.at("k").get<int>();
    const json& v = j.at("v");
    switch (k) {
        case 0: return std::monostate{};
        case 1: return v.get<std::string>();
        case 2: return v.get<std::vector<std::string>>();
        default: {
            std::vector<SetElement> out;
            for (const auto& ej : v) {
                SetElement e;
                e.id = ej.at("id").get<std::string>();
                if (!ej.at("span").is_null())
                    e.span = std::make_pair(ej.at("span")[0].get<int>(), ej.at("span")[1].get<int>());
                out.push_back(std::move(e));
            }
            return out;
        }
    }
}

json encode_vote_value(const VoteValue& v) {
    json j;
    j["k"] = static_cast<int>(v.index());
    switch (v.index()) {
        case 0: j["v"] = std::get<int>(v); break;
        case 1: j["v"] = std::get<std::vector<int>>(v); break;
        case 2: j["v"] = std::get<std::vector<uint8_t>>(v); break;
        case 3: j["v"] = std::get<std::vector<std::vector<uint8_t>>>(v); break;
    }
    return j;
}

VoteValue decode_vote_value(const json& j) {
    int k = j.at("k").get<int>();
    const json& v = j.at("v");
    switch (k) {
        case 0: return v.get<int>();
        case 1: return v.get<std::vector<int>>();
        case 2: return v.get<std::vector<uint8_t>>();
        default: return v.get<std::vector<std::vector<uint8_t>>>();
    }
}

json encode_record_json(const Record& rec) {
    json j;
    json pv;
    for (const auto& [name, value] : rec.payload_values) pv[name] = encode_payload_value(value);
    j["p"] = pv.is_null() ? json::object() : pv;
    json sv = json::object();
    for (const auto& [task, votes] : rec.supervision) {
        json arr = json::array();
        for (const auto& vote : votes) {
            json vj = encode_vote_value(vote.value);
            vj["s"] = vote.source;
            arr.push_back(vj);
        }
        sv[task] = arr;
    }
    j["s"] = sv;
    j["t"] = rec.tags;
    return j;
}

std::vector<uint8_t> encode_record(const Record& rec) {
    return json::to_cbor(encode_record_json(rec));
}

Record decode_record(const uint8_t* data, size_t n) {
    json j = json::from_cbor(std::vector<uint8_t>(data, data + n));
    Record rec;
    for (const auto& [name, vj] : j.at("p").items())
        rec.payload_values[name] = decode_payload_value(vj);
    for (const auto& [task, arr] : j.at("s").items()) {
        std::vector<LabeledVote> votes;
        for (const auto& vj : arr)
            votes.push_back(LabeledVote{vj.at("s").get<std::string>(), decode_vote_value(vj)});
        rec.supervision[task] = std::move(votes);
    }
    rec.tags = j.at("t").get<std::vector<std::string>>();
    return rec;
}

PayloadValue parse_payload_value(const PayloadDecl& decl, const json& v) {
    if (v.is_null()) return std::monostate{};
    switch (decl.kind) {
        case PayloadKind::Singleton:
            if (!v.is_string())
                fail(RecordErrorKind::BadPayloadValue, "payload \"" + decl.name + "\" must be a string or null");
            return v.get<std::string>();
        case PayloadKind::Sequence: {
            if (!v.is_array())
                fail(RecordErrorKind::BadPayloadValue, "payload \"" + decl.name + "\" must be an array of strings or null");
            std::vector<std::string> toks;
            for (const auto& t : v) {
                if (!t.is_string())
                    fail(RecordErrorKind::BadPayloadValue, "payload \"" + decl.name + "\" tokens must be strings");
                toks.push_back(t.get<std::string>());
            }
            return toks;
        }
        case PayloadKind::Set: {
            if (!v.is_array())
                fail(RecordErrorKind::BadPayloadValue, "payload \"" + decl.name + "\" must be an array of elements or null");
            std::vector<SetElement> elems;
            for (const auto& ej : v) {
                if (!ej.is_object() || !ej.contains("id"))
                    fail(RecordErrorKind::BadPayloadValue, "set elements need an \"id\"");
                SetElement e;
                e.id = ej.at("id").get<std::string>();
                if (ej.contains("span") && !ej.at("span").is_null()) {
                    const json& sp = ej.at("span");
                    if (!sp.is_array() || sp.size() != 2 || !sp[0].is_number_integer() || !sp[1].is_number_integer())
                        fail(RecordErrorKind::BadSpan, "span must be [start, end)");
                    e.span = std::make_pair(sp[0].get<int>(), sp[1].get<int>());
                }
                elems.push_back(std::move(e));
            }
            return elems;
        }
    }
    fail(RecordErrorKind::BadPayloadValue, "unreachable");
}

// The sequence payload a set payload's spans point into, if it declares one.
const PayloadDecl* span_target(const Schema& schema, const PayloadDecl& set_decl) {
    for (const auto& in : set_decl.inputs)
        if (in.kind == PayloadInput::Kind::PayloadRef && in.span_field)
            return schema.find_payload(in.name);
    return nullptr;
}

VoteValue parse_vote_value(const Record& rec, const Schema& schema, const TaskDecl& task,
                           const json& v) {
    const PayloadDecl* payload = schema.find_payload(task.payload);
    switch (task.kind) {
        case TaskKind::Multiclass: {
            if (payload->kind == PayloadKind::Singleton) {
                if (!v.is_string()) fail(RecordErrorKind::BadVote, "multiclass vote must be a label string");
                return label_index(task, v.get<std::string>());
            }
            if (!v.is_array())
                fail(RecordErrorKind::BadVote, "per-token multiclass vote must be an array of labels");
            size_t len = sequence_length(rec, task.payload);
            if (v.size() != len)
                fail(RecordErrorKind::BadVote, "per-token vote length " + std::to_string(v.size()) +
                                                   " != sequence length " + std::to_string(len));
            std::vector<int> idx;
            for (const auto& l : v) {
                if (!l.is_string()) fail(RecordErrorKind::BadVote, "labels must be strings");
                idx.push_back(label_index(task, l.get<std::string>()));
            }
            return idx;
        }
        case TaskKind::Bitvector: {
            if (payload->kind == PayloadKind::Singleton) return bit_mask(task, v);
            if (!v.is_array())
                fail(RecordErrorKind::BadVote, "per-token bitvector vote must be an array");
            size_t len = sequence_length(rec, task.payload);
            if (v.size() != len)
                fail(RecordErrorKind::BadVote, "per-token vote length " + std::to_string(v.size()) +
                                                   " != sequence length " + std::to_string(len));
            std::vector<std::vector<uint8_t>> masks;
            for (const auto& names : v) masks.push_back(bit_mask(task, names));
            return masks;
        }
        case TaskKind::Select: {
            auto it = rec.payload_values.find(task.select_payload);
            const std::vector<SetElement>* elems =
                it == rec.payload_values.end() ? nullptr
                                               : std::get_if<std::vector<SetElement>>(&it->second);
            size_t n = elems ? elems->size() : 0;
            if (v.is_number_integer()) {
                int idx = v.get<int>();
                if (idx < 0 || static_cast<size_t>(idx) >= n)
                    fail(RecordErrorKind::BadVote, "candidate index " + std::to_string(idx) +
                                                       " out of range (" + std::to_string(n) + ")");
                return idx;
            }
            if (v.is_string()) {
                const std::string id = v.get<std::string>();
                for (size_t i = 0; i < n; ++i)
                    if ((*elems)[i].id == id) return static_cast<int>(i);
                fail(RecordErrorKind::BadVote, "no candidate with id \"" + id + "\"");
            }
            fail(RecordErrorKind::BadVote, "select vote must be a candidate index or id");
        }
    }
    fail(RecordErrorKind::BadVote, "unreachable");
}

Record parse_record_impl(const Schema& schema, std::string_view line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        fail(RecordErrorKind::BadJson, e.what());
    }
    if (!j.is_object()) fail(RecordErrorKind::BadJson, "record must be a JSON object");

    Record rec;
    // Payload values first; vote validation needs them.
    for (const auto& [key, value] : j.items()) {
        if (key == "supervision" || key == "tags") continue;
        const PayloadDecl* decl = schema.find_payload(key);
        if (!decl) fail(RecordErrorKind::UnknownPayload, "unknown record key \"" + key + "\"");
        rec.payload_values[key] = parse_payload_value(*decl, value);
    }

    // Span bounds, checked against the referenced sequence.
    for (const auto& decl : schema.payloads) {
        if (decl.kind != PayloadKind::Set) continue;
        auto it = rec.payload_values.find(decl.name);
        if (it == rec.payload_values.end()) continue;
        const auto* elems = std::get_if<std::vector<SetElement>>(&it->second);
        if (!elems) continue;
        const PayloadDecl* target = span_target(schema, decl);
        for (const auto& e : *elems) {
            if (!e.span) continue;
            if (!target) fail(RecordErrorKind::BadSpan,
                              "payload \"" + decl.name + "\" declares no span reference");
            size_t len = sequence_length(rec, target->name);
            if (e.span->first < 0 || e.span->first >= e.span->second ||
                static_cast<size_t>(e.span->second) > len)
                fail(RecordErrorKind::BadSpan,
                     "span [" + std::to_string(e.span->first) + "," + std::to_string(e.span->second) +
                         ") invalid for sequence of length " + std::to_string(len));
        }
    }

    if (j.contains("supervision")) {
        const json& sup = j.at("supervision");
        if (!sup.is_object()) fail(RecordErrorKind::BadJson, "\"supervision\" must be an object");
        for (const auto& [task_name, votes] : sup.items()) {
            const TaskDecl* task = schema.find_task(task_name);
            if (!task) fail(RecordErrorKind::UnknownTask, "unknown task \"" + task_name + "\"");
            if (!votes.is_array()) fail(RecordErrorKind::BadVote, "votes must be an array");
            std::set<std::string> seen_sources;
            std::vector<LabeledVote> out;
            for (const auto& vj : votes) {
                if (!vj.is_object() || !vj.contains("source") || !vj.contains("value"))
                    fail(RecordErrorKind::BadVote, "votes need \"source\" and \"value\"");
                std::string source = vj.at("source").get<std::string>();
                if (!seen_sources.insert(source).second)
                    fail(RecordErrorKind::DuplicateSourceVote,
                         "source \"" + source + "\" votes twice on task \"" + task_name + "\"");
                out.push_back(LabeledVote{std::move(source),
                                          parse_vote_value(rec, schema, *task, vj.at("value"))});
            }
            rec.supervision[task_name] = std::move(out);
        }
    }

    if (j.contains("tags")) {
        const json& tags = j.at("tags");
        if (!tags.is_array()) fail(RecordErrorKind::BadJson, "\"tags\" must be an array");
        for (const auto& t : tags) {
            if (!t.is_string()) fail(RecordErrorKind::BadJson, "tags must be strings");
            rec.tags.push_back(t.get<std::string>());
        }
    }

    int split_count = 0;
    for (const auto& t : rec.tags) split_count += is_split_tag(t) ? 1 : 0;
    if (split_count > 1)
        fail(RecordErrorKind::ConflictingSplitTags, "record carries more than one of train/test/dev");
    if (split_count == 0) {
        // Deterministic 80/10/10 assignment from the record's canonical bytes.
        auto bytes = encode_record(rec);
        uint64_t h = fnv1a64(bytes.data(), bytes.size());
        uint64_t r = h % 100;
        rec.tags.push_back(r < 80 ? "train" : r < 90 ? "dev" : "test");
    }
    return rec;
}

}  // namespace

Record parse_record(const Schema& schema, std::string_view line) {
    try {
        return parse_record_impl(schema, line);
    } catch (const RecordParseError& e) {
        throw Error(std::string(to_string(e.kind)) + ": " + e.message);
    }
}

IngestResult ingest(const Schema& schema, std::string_view jsonl, const std::string& out_path) {
    std::vector<std::vector<uint8_t>> rows;
    std::vector<RecordError> errors;
    std::map<std::string, std::vector<int64_t>> tag_index;

    int line_no = 0;
    int64_t attempted = 0;
    size_t pos = 0;
    while (pos <= jsonl.size()) {
        size_t nl = jsonl.find('\n', pos);
        std::string_view line = jsonl.substr(pos, nl == std::string_view::npos ? jsonl.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? jsonl.size() + 1 : nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        ++attempted;
        try {
            Record rec = parse_record_impl(schema, line);
            int64_t id = static_cast<int64_t>(rows.size());
            for (const auto& t : rec.tags) tag_index[t].push_back(id);
            rows.push_back(encode_record(rec));
        } catch (const RecordParseError& e) {
            errors.push_back(RecordError{line_no, e.kind, e.message});
        }
    }

    if (attempted > 0 && errors.size() * 2 > static_cast<size_t>(attempted))
        throw FatalFormatError("rejected " + std::to_string(errors.size()) + " of " +
                               std::to_string(attempted) + " lines; wrong data file?");

    // Store file: magic, version, schema hash, count, offset table, rows.
    std::vector<uint8_t> file;
    file.insert(file.end(), {'O', 'V', 'R', 'S'});
    put_u32(file, 1);
    put_u64(file, schema_hash(schema));
    put_u64(file, rows.size());
    size_t table_at = file.size();
    for (size_t i = 0; i <= rows.size(); ++i) put_u64(file, 0);
    std::vector<uint64_t> offsets;
    for (const auto& row : rows) {
        offsets.push_back(file.size());
        put_u32(file, static_cast<uint32_t>(row.size()));
        file.insert(file.end(), row.begin(), row.end());
    }
    offsets.push_back(file.size());
    for (size_t i = 0; i < offsets.size(); ++i) {
        uint64_t v = offsets[i];
        for (int b = 0; b < 8; ++b) file[table_at + 8 * i + b] = static_cast<uint8_t>(v >> (8 * b));
    }

    {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write store file: " + out_path);
        out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
    }
    {
        json tj = json::object();
        for (const auto& [tag, ids] : tag_index) tj[tag] = ids;
        std::ofstream out(out_path + ".tags.json", std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write tag sidecar for " + out_path);
        out << tj.dump(2) << "\n";
    }

    IngestResult result{RowStore::open(out_path), std::move(errors)};
    return result;
}

RowStore RowStore::open(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open store file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 24 || bytes[0] != 'O' || bytes[1] != 'V' || bytes[2] != 'R' || bytes[3] != 'S')
        throw FatalFormatError("not a row store file: " + path);
    if (get_u32(bytes.data() + 4) != 1)
        throw FatalFormatError("unsupported store version in " + path);

    RowStore store;
    store.path_ = path;
    store.schema_hash_ = get_u64(bytes.data() + 8);
    uint64_t count = get_u64(bytes.data() + 16);
    if (bytes.size() < 24 + 8 * (count + 1)) throw FatalFormatError("truncated store file: " + path);
    store.offsets_.resize(count + 1);
    for (uint64_t i = 0; i <= count; ++i) store.offsets_[i] = get_u64(bytes.data() + 24 + 8 * i);
    store.file_digest_ = fnv1a64(bytes.data(), bytes.size());
    store.bytes_ = std::move(bytes);

    std::ifstream tin(path + ".tags.json");
    if (!tin) throw IoError("missing tag sidecar: " + path + ".tags.json");
    json tj = json::parse(tin);
    for (const auto& [tag, ids] : tj.items())
        store.tag_index_[tag] = ids.get<std::vector<int64_t>>();

    store.access_flags_ = std::make_unique<std::atomic<uint8_t>[]>(count);
    for (uint64_t i = 0; i < count; ++i) store.access_flags_[i].store(0, std::memory_order_relaxed);
    return store;
}

Record RowStore::get(int64_t id) const {
    if (id < 0 || id >= count())
        throw OutOfRange("row id " + std::to_string(id) + " out of range (count " +
                         std::to_string(count()) + ")");
    if (access_flags_) access_flags_[id].store(1, std::memory_order_relaxed);
    uint64_t off = offsets_[static_cast<size_t>(id)];
    uint32_t len = get_u32(bytes_.data() + off);
    return decode_record(bytes_.data() + off + 4, len);
}

std::vector<int64_t> RowStore::rows_with_tag(const std::string& tag) const {
    auto it = tag_index_.find(tag);
    return it == tag_index_.end() ? std::vector<int64_t>{} : it->second;
}

void RowStore::reset_access_log() const {
    for (int64_t i = 0; i < count(); ++i) access_flags_[i].store(0, std::memory_order_relaxed);
}

std::vector<int64_t> RowStore::accessed_rows() const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < count(); ++i)
        if (access_flags_[i].load(std::memory_order_relaxed)) out.push_back(i);
    return out;
}

}  // namespace overton
