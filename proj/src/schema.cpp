#include "overton/schema.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"
#include "overton/common.hpp"

namespace overton {

using nlohmann::json;

const char* to_string(PayloadKind k) {
    switch (k) {
        case PayloadKind::Singleton: return "singleton";
        case PayloadKind::Sequence: return "sequence";
        case PayloadKind::Set: return "set";
    }
    return "?";
}

const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Multiclass: return "multiclass";
        case TaskKind::Bitvector: return "bitvector";
        case TaskKind::Select: return "select";
    }
    return "?";
}

std::string hp_to_string(const HpValue& v) {
    if (std::holds_alternative<int64_t>(v)) return std::to_string(std::get<int64_t>(v));
    if (std::holds_alternative<double>(v)) {
        json j = std::get<double>(v);
        return j.dump();
    }
    return std::get<std::string>(v);
}

const PayloadDecl* Schema::find_payload(const std::string& name) const {
    for (const auto& p : payloads)
        if (p.name == name) return &p;
    return nullptr;
}

const TaskDecl* Schema::find_task(const std::string& name) const {
    for (const auto& t : tasks)
        if (t.name == name) return &t;
    return nullptr;
}

namespace {

HpValue hp_from_json(const json& j, const std::string& path) {
    if (j.is_number_integer()) return HpValue{j.get<int64_t>()};
    if (j.is_number_unsigned()) return HpValue{static_cast<int64_t>(j.get<uint64_t>())};
    if (j.is_number_float()) return HpValue{j.get<double>()};
    if (j.is_string()) return HpValue{j.get<std::string>()};
    throw SyntaxError(0, "expected number or string at " + path);
}

json hp_to_json(const HpValue& v) {
    if (std::holds_alternative<int64_t>(v)) return json(std::get<int64_t>(v));
    if (std::holds_alternative<double>(v)) return json(std::get<double>(v));
    return json(std::get<std::string>(v));
}

const json& require(const json& j, const char* key, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) throw SyntaxError(0, "missing key \"" + std::string(key) + "\" in " + path);
    return *it;
}

std::string require_string(const json& j, const char* key, const std::string& path) {
    const json& v = require(j, key, path);
    if (!v.is_string()) throw SyntaxError(0, "key \"" + std::string(key) + "\" in " + path + " must be a string");
    return v.get<std::string>();
}

PayloadDecl parse_payload(const json& j, const std::string& path) {
    PayloadDecl p;
    p.name = require_string(j, "name", path);
    std::string kind = require_string(j, "kind", path);
    if (kind == "singleton") p.kind = PayloadKind::Singleton;
    else if (kind == "sequence") p.kind = PayloadKind::Sequence;
    else if (kind == "set") p.kind = PayloadKind::Set;
    else throw SyntaxError(0, "unknown payload kind \"" + kind + "\" in " + path);

    const json& inputs = require(j, "inputs", path);
    if (!inputs.is_array()) throw SyntaxError(0, "\"inputs\" must be an array in " + path);
    for (const auto& in : inputs) {
        PayloadInput pi;
        if (in.contains("field")) {
            pi.kind = PayloadInput::Kind::DataField;
            pi.name = require_string(in, "field", path);
        } else if (in.contains("payload")) {
            pi.kind = PayloadInput::Kind::PayloadRef;
            pi.name = require_string(in, "payload", path);
            if (in.contains("span_field")) pi.span_field = in.at("span_field").get<std::string>();
        } else {
            throw SyntaxError(0, "input needs \"field\" or \"payload\" in " + path);
        }
        p.inputs.push_back(std::move(pi));
    }
    if (j.contains("embed_dim")) {
        const json& d = j.at("embed_dim");
        if (d.is_string()) {
            if (d.get<std::string>() != "auto")
                throw SyntaxError(0, "embed_dim must be a positive integer or \"auto\" in " + path);
        } else if (d.is_number_integer() && d.get<int64_t>() >= 1) {
            p.embed_dim = static_cast<int>(d.get<int64_t>());
        } else {
            throw SyntaxError(0, "embed_dim must be a positive integer or \"auto\" in " + path);
        }
    }
    return p;
}

TaskDecl parse_task(const json& j, const std::string& path) {
    TaskDecl t;
    t.name = require_string(j, "name", path);
    t.payload = require_string(j, "payload", path);
    const json& kind = require(j, "kind", path);
    if (!kind.is_object() || kind.size() != 1)
        throw SyntaxError(0, "task kind must be an object with one key in " + path);
    if (kind.contains("multiclass")) {
        t.kind = TaskKind::Multiclass;
        for (const auto& l : kind.at("multiclass")) t.labels.push_back(l.get<std::string>());
    } else if (kind.contains("bitvector")) {
        t.kind = TaskKind::Bitvector;
        for (const auto& l : kind.at("bitvector")) t.labels.push_back(l.get<std::string>());
    } else if (kind.contains("select")) {
        t.kind = TaskKind::Select;
        t.select_payload = kind.at("select").get<std::string>();
    } else {
        throw SyntaxError(0, "task kind must be multiclass, bitvector, or select in " + path);
    }
    if (j.contains("loss_weight")) {
        double w = j.at("loss_weight").get<double>();
        if (w < 0) throw SyntaxError(0, "loss_weight must be nonnegative in " + path);
        t.loss_weight = w;
    }
    return t;
}

void validate(const Schema& s) {
    // Unique payload names.
    std::set<std::string> payload_names;
    for (const auto& p : s.payloads) {
        if (!payload_names.insert(p.name).second)
            throw ValidationError(ValidationKind::DuplicateName, "payloads/" + p.name);
    }

    // Input references resolve; span references point from a Set into a Sequence.
    for (const auto& p : s.payloads) {
        for (const auto& in : p.inputs) {
            const std::string path = "payloads/" + p.name;
            if (in.kind == PayloadInput::Kind::DataField) {
                // Record keys are payload names; a data field must name a payload
                // whose raw value the record carries.
                if (!payload_names.count(in.name))
                    throw ValidationError(ValidationKind::UnknownRef, path,
                                          "field \"" + in.name + "\" is not a declared payload");
            } else {
                const PayloadDecl* ref = s.find_payload(in.name);
                if (!ref)
                    throw ValidationError(ValidationKind::UnknownRef, path,
                                          "payload \"" + in.name + "\"");
                if (in.span_field) {
                    if (p.kind != PayloadKind::Set)
                        throw ValidationError(ValidationKind::UnknownRef, path,
                                              "span references are only valid on set payloads");
                    if (ref->kind != PayloadKind::Sequence)
                        throw ValidationError(ValidationKind::UnknownRef, path,
                                              "span reference target \"" + in.name +
                                                  "\" is not a sequence payload");
                }
            }
        }
    }

    // Acyclicity of PayloadRef edges (DFS, declaration order).
    std::map<std::string, int> state;  // 0 unseen, 1 on stack, 2 done
    std::vector<const PayloadDecl*> stack;
    auto dfs = [&](auto&& self, const PayloadDecl& p) -> void {
        state[p.name] = 1;
        for (const auto& in : p.inputs) {
            if (in.kind != PayloadInput::Kind::PayloadRef) continue;
            const PayloadDecl* ref = s.find_payload(in.name);
            if (state[ref->name] == 1)
                throw ValidationError(ValidationKind::CycleDetected, "payloads/" + p.name,
                                      "reference cycle through \"" + ref->name + "\"");
            if (state[ref->name] == 0) self(self, *ref);
        }
        state[p.name] = 2;
    };
    for (const auto& p : s.payloads)
        if (state[p.name] == 0) dfs(dfs, p);

    // Tasks.
    if (s.tasks.empty())
        throw ValidationError(ValidationKind::EmptyLabelSet, "tasks", "schema declares no tasks");
    std::set<std::string> task_names;
    for (const auto& t : s.tasks) {
        const std::string path = "tasks/" + t.name;
        if (!task_names.insert(t.name).second)
            throw ValidationError(ValidationKind::DuplicateName, path);
        const PayloadDecl* p = s.find_payload(t.payload);
        if (!p) throw ValidationError(ValidationKind::UnknownRef, path, "payload \"" + t.payload + "\"");
        if (t.kind == TaskKind::Select) {
            const PayloadDecl* sp = s.find_payload(t.select_payload);
            if (!sp || sp->kind != PayloadKind::Set)
                throw ValidationError(ValidationKind::UnknownRef, path,
                                      "\"" + t.select_payload + "\" is not a set payload");
            if (p->kind != PayloadKind::Set)
                throw ValidationError(ValidationKind::UnknownRef, path,
                                      "select tasks target a set payload");
        } else {
            if (p->kind == PayloadKind::Set)
                throw ValidationError(ValidationKind::UnknownRef, path,
                                      "multiclass/bitvector tasks target singleton or sequence payloads");
            if (t.labels.empty())
                throw ValidationError(ValidationKind::EmptyLabelSet, path);
            std::set<std::string> seen;
            for (const auto& l : t.labels)
                if (!seen.insert(l).second)
                    throw ValidationError(ValidationKind::DuplicateName, path, "label \"" + l + "\"");
        }
    }

    // Slices.
    for (const auto& sl : s.slices) {
        const std::string path = "slices/" + sl.tag;
        if (is_split_tag(sl.tag))
            throw ValidationError(ValidationKind::BadSliceTag, path,
                                  "reserved tags cannot be slices");
        if (sl.tag.empty()) throw ValidationError(ValidationKind::BadSliceTag, path, "empty tag");
        for (const auto& tn : sl.tasks)
            if (!s.find_task(tn))
                throw ValidationError(ValidationKind::UnknownRef, path, "task \"" + tn + "\"");
    }
    std::set<std::string> slice_tags;
    for (const auto& sl : s.slices)
        if (!slice_tags.insert(sl.tag).second)
            throw ValidationError(ValidationKind::DuplicateName, "slices/" + sl.tag);

    // Tuning.
    if (s.tuning.budget < 1) throw SyntaxError(0, "tuning budget must be >= 1");
}

}  // namespace

Schema parse_schema(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        // nlohmann reports byte offsets; recover the line for the diagnostic.
        int line = 1;
        for (size_t i = 0; i < std::min(text.size(), static_cast<size_t>(e.byte)); ++i)
            if (text[i] == '\n') ++line;
        throw SyntaxError(line, e.what());
    }
    if (!doc.is_object()) throw SyntaxError(1, "schema document must be a JSON object");

    Schema s;
    try {
        for (const auto& pj : doc.value("payloads", json::array()))
            s.payloads.push_back(parse_payload(pj, "payloads[" + std::to_string(s.payloads.size()) + "]"));
        for (const auto& tj : doc.value("tasks", json::array()))
            s.tasks.push_back(parse_task(tj, "tasks[" + std::to_string(s.tasks.size()) + "]"));
        for (const auto& sj : doc.value("slices", json::array())) {
            SliceDecl sl;
            sl.tag = require_string(sj, "tag", "slices");
            if (sj.contains("tasks"))
                for (const auto& t : sj.at("tasks")) sl.tasks.push_back(t.get<std::string>());
            s.slices.push_back(std::move(sl));
        }
        if (doc.contains("tuning")) {
            const json& tj = doc.at("tuning");
            if (tj.contains("search_space")) {
                for (const auto& [k, v] : tj.at("search_space").items()) {
                    std::vector<HpValue> vals;
                    if (!v.is_array()) throw SyntaxError(0, "search_space values must be arrays");
                    for (const auto& e : v) vals.push_back(hp_from_json(e, "tuning/search_space/" + k));
                    s.tuning.search_space[k] = std::move(vals);
                }
            }
            if (tj.contains("pinned"))
                for (const auto& [k, v] : tj.at("pinned").items())
                    s.tuning.pinned[k] = hp_from_json(v, "tuning/pinned/" + k);
            s.tuning.budget = tj.value("budget", 1);
            s.tuning.seed = tj.value("seed", uint64_t{0});
        }
    } catch (const json::exception& e) {
        throw SyntaxError(0, e.what());
    }

    validate(s);
    return s;
}

std::string serialize_schema(const Schema& s) {
    json doc;  // nlohmann::json keeps object keys sorted
    doc["payloads"] = json::array();
    for (const auto& p : s.payloads) {
        json pj;
        pj["name"] = p.name;
        pj["kind"] = to_string(p.kind);
        pj["inputs"] = json::array();
        for (const auto& in : p.inputs) {
            json ij;
            if (in.kind == PayloadInput::Kind::DataField) {
                ij["field"] = in.name;
            } else {
                ij["payload"] = in.name;
                if (in.span_field) ij["span_field"] = *in.span_field;
            }
            pj["inputs"].push_back(ij);
        }
        if (p.embed_dim) pj["embed_dim"] = *p.embed_dim;
        doc["payloads"].push_back(pj);
    }
    doc["tasks"] = json::array();
    for (const auto& t : s.tasks) {
        json tj;
        tj["name"] = t.name;
        tj["payload"] = t.payload;
        switch (t.kind) {
            case TaskKind::Multiclass: tj["kind"] = {{"multiclass", t.labels}}; break;
            case TaskKind::Bitvector: tj["kind"] = {{"bitvector", t.labels}}; break;
            case TaskKind::Select: tj["kind"] = {{"select", t.select_payload}}; break;
        }
        if (t.loss_weight != 1.0) tj["loss_weight"] = t.loss_weight;
        doc["tasks"].push_back(tj);
    }
    if (!s.slices.empty()) {
        doc["slices"] = json::array();
        for (const auto& sl : s.slices) {
            json sj;
            sj["tag"] = sl.tag;
            if (!sl.tasks.empty()) sj["tasks"] = sl.tasks;
            doc["slices"].push_back(sj);
        }
    }
    json tu;
    if (!s.tuning.search_space.empty()) {
        json sp;
        for (const auto& [k, vals] : s.tuning.search_space) {
            json arr = json::array();
            for (const auto& v : vals) arr.push_back(hp_to_json(v));
            sp[k] = arr;
        }
        tu["search_space"] = sp;
    }
    if (!s.tuning.pinned.empty()) {
        json pn;
        for (const auto& [k, v] : s.tuning.pinned) pn[k] = hp_to_json(v);
        tu["pinned"] = pn;
    }
    if (s.tuning.budget != 1) tu["budget"] = s.tuning.budget;
    if (s.tuning.seed != 0) tu["seed"] = s.tuning.seed;
    if (!tu.empty()) doc["tuning"] = tu;
    return doc.dump(2) + "\n";
}

std::vector<std::string> reference_order(const Schema& s) {
    // Kahn's algorithm; the ready queue is kept in declaration order.
    std::map<std::string, size_t> decl_index;
    for (size_t i = 0; i < s.payloads.size(); ++i) decl_index[s.payloads[i].name] = i;

    std::map<std::string, int> in_degree;
    std::map<std::string, std::vector<std::string>> dependents;
    for (const auto& p : s.payloads) in_degree[p.name] = 0;
    for (const auto& p : s.payloads)
        for (const auto& in : p.inputs)
            if (in.kind == PayloadInput::Kind::PayloadRef && in.name != p.name) {
                ++in_degree[p.name];
                dependents[in.name].push_back(p.name);
            }

    std::vector<std::string> ready, out;
    for (const auto& p : s.payloads)
        if (in_degree[p.name] == 0) ready.push_back(p.name);
    while (!ready.empty()) {
        std::sort(ready.begin(), ready.end(),
                  [&](const std::string& a, const std::string& b) { return decl_index[a] < decl_index[b]; });
        std::string n = ready.front();
        ready.erase(ready.begin());
        out.push_back(n);
        for (const auto& d : dependents[n])
            if (--in_degree[d] == 0) ready.push_back(d);
    }
    return out;
}

uint64_t schema_hash(const Schema& schema) { return fnv1a64(serialize_schema(schema)); }

}  // namespace overton
