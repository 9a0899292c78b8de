#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/rowstore.hpp"
#include "testutil.hpp"

using namespace overton;
using nlohmann::json;

namespace {

const std::string kDir = testutil::scratch_dir("rowstore");

Schema intent_schema() { return parse_schema(testutil::intent_schema_json()); }

std::string valid_line(const std::string& split, const std::string& extra_tag = "") {
    json rec;
    rec["tokens"] = {"how", "tall", "is", "obama"};
    rec["entities"] = json::array({json{{"id", "e:obama"}, {"span", {3, 4}}},
                                   json{{"id", "d:x"}, {"span", nullptr}}});
    rec["supervision"] = json{
        {"intent", json::array({json{{"source", "a"}, {"value", "height"}}})},
        {"intent_arg", json::array({json{{"source", "a"}, {"value", 0}}})},
    };
    json tags = json::array({split});
    if (!extra_tag.empty()) tags.push_back(extra_tag);
    rec["tags"] = tags;
    return rec.dump();
}

}  // namespace

TEST_CASE("bad span is reported with its line number and skipped") {
    Schema schema = intent_schema();
    std::string jsonl = valid_line("train") + "\n" + valid_line("dev") + "\n" + valid_line("test") + "\n";
    // span end beyond the 4-token sequence
    json bad = json::parse(valid_line("train"));
    bad["entities"][0]["span"] = {3, 9};
    jsonl += bad.dump() + "\n";

    auto result = ingest(schema, jsonl, kDir + "/badspan.ovrs");
    CHECK(result.store.count() == 3);
    REQUIRE(result.errors.size() == 1);
    CHECK(result.errors[0].line == 4);
    CHECK(result.errors[0].kind == RecordErrorKind::BadSpan);
}

TEST_CASE("empty input produces an empty store") {
    auto result = ingest(intent_schema(), "", kDir + "/empty.ovrs");
    CHECK(result.store.count() == 0);
    CHECK(result.errors.empty());
    CHECK(result.store.rows_with_tag("train").empty());
}

TEST_CASE("tag index matches an independent scan of the JSONL") {
    Schema schema = intent_schema();
    Rng rng(7);
    std::ostringstream jsonl;
    int expected = 0;
    std::vector<int64_t> expected_ids;
    int64_t id = 0;
    for (int i = 0; i < 400; ++i) {
        bool tagged = rng.next_below(4) == 0;
        jsonl << valid_line(i % 10 == 9 ? "test" : "train", tagged ? "nutrition" : "") << "\n";
        if (tagged) {
            ++expected;
            expected_ids.push_back(id);
        }
        ++id;
    }
    auto result = ingest(schema, jsonl.str(), kDir + "/tags.ovrs");
    auto ids = result.store.rows_with_tag("nutrition");
    CHECK(static_cast<int>(ids.size()) == expected);
    CHECK(ids == expected_ids);
    CHECK(std::is_sorted(ids.begin(), ids.end()));
}

TEST_CASE("get returns the ingested record; boundary ids fail") {
    Schema schema = intent_schema();
    auto result = ingest(schema, valid_line("train") + "\n", kDir + "/get.ovrs");
    Record direct = parse_record(schema, valid_line("train"));
    CHECK(result.store.get(0) == direct);
    CHECK_THROWS_AS(result.store.get(1), OutOfRange);
    CHECK_THROWS_AS(result.store.get(-1), OutOfRange);
}

TEST_CASE("random sample of rows equals direct JSONL re-parse") {
    Schema schema = intent_schema();
    Rng rng(13);
    std::vector<std::string> lines;
    for (int i = 0; i < 120; ++i) {
        json rec = json::parse(valid_line(i % 3 == 0 ? "train" : i % 3 == 1 ? "dev" : "test"));
        rec["tokens"].push_back("x" + std::to_string(rng.next_below(40)));
        lines.push_back(rec.dump());
    }
    std::string jsonl;
    for (const auto& l : lines) jsonl += l + "\n";
    auto result = ingest(schema, jsonl, kDir + "/reparse.ovrs");
    REQUIRE(result.store.count() == 120);
    for (int trial = 0; trial < 30; ++trial) {
        int64_t i = static_cast<int64_t>(rng.next_below(120));
        REQUIRE(result.store.get(i) == parse_record(schema, lines[static_cast<size_t>(i)]));
    }
}

TEST_CASE("rows_with_tag agrees with a full-scan oracle") {
    Schema schema = intent_schema();
    Rng rng(3);
    std::string jsonl;
    for (int i = 0; i < 200; ++i)
        jsonl += valid_line(i % 5 == 0 ? "test" : "train", rng.next_below(3) == 0 ? "nutrition" : "") + "\n";
    auto store = testutil::ingest_jsonl(schema, jsonl, kDir, "oracle");

    for (const std::string tag : {"train", "test", "nutrition", "xyz"}) {
        std::vector<int64_t> scan;
        for (int64_t i = 0; i < store.count(); ++i)
            if (store.get(i).has_tag(tag)) scan.push_back(i);
        CHECK(store.rows_with_tag(tag) == scan);
    }
    CHECK(store.rows_with_tag("xyz").empty());
}

TEST_CASE("ingest is deterministic: identical bytes, bit-identical store") {
    Schema schema = intent_schema();
    std::string jsonl;
    for (int i = 0; i < 50; ++i) jsonl += valid_line("train") + "\n";
    ingest(schema, jsonl, kDir + "/det1.ovrs");
    ingest(schema, jsonl, kDir + "/det2.ovrs");
    CHECK(testutil::read_file(kDir + "/det1.ovrs") == testutil::read_file(kDir + "/det2.ovrs"));
    CHECK(testutil::read_file(kDir + "/det1.ovrs.tags.json") ==
          testutil::read_file(kDir + "/det2.ovrs.tags.json"));
}

TEST_CASE("train/dev/test partition the store") {
    Schema schema = intent_schema();
    std::string jsonl;
    json rec = json::parse(valid_line("train"));
    rec.erase("tags");  // exercise the default assignment path
    for (int i = 0; i < 300; ++i) {
        json r = rec;
        r["tokens"].push_back("w" + std::to_string(i));
        jsonl += r.dump() + "\n";
    }
    auto store = testutil::ingest_jsonl(schema, jsonl, kDir, "partition");
    auto train = store.rows_with_tag("train");
    auto dev = store.rows_with_tag("dev");
    auto test = store.rows_with_tag("test");
    CHECK(static_cast<int64_t>(train.size() + dev.size() + test.size()) == store.count());
    std::set<int64_t> all;
    all.insert(train.begin(), train.end());
    all.insert(dev.begin(), dev.end());
    all.insert(test.begin(), test.end());
    CHECK(static_cast<int64_t>(all.size()) == store.count());
    // roughly 80/10/10
    CHECK(train.size() > 200);
    CHECK(dev.size() > 10);
    CHECK(test.size() > 10);
}

TEST_CASE("more than half rejected lines aborts the ingest") {
    Schema schema = intent_schema();
    std::string jsonl = valid_line("train") + "\n{\"nope\": 1}\n{\"nope\": 2}\n";
    CHECK_THROWS_AS(ingest(schema, jsonl, kDir + "/fatal.ovrs"), FatalFormatError);
}

TEST_CASE("record-level validation errors") {
    Schema schema = intent_schema();
    SUBCASE("duplicate source vote") {
        json rec = json::parse(valid_line("train"));
        rec["supervision"]["intent"] = json::array(
            {json{{"source", "a"}, {"value", "height"}}, json{{"source", "a"}, {"value", "age"}}});
        CHECK_THROWS_WITH_AS(parse_record(schema, rec.dump()),
                             doctest::Contains("DuplicateSourceVote"), Error);
    }
    SUBCASE("conflicting split tags") {
        json rec = json::parse(valid_line("train"));
        rec["tags"] = {"train", "test"};
        CHECK_THROWS_WITH_AS(parse_record(schema, rec.dump()),
                             doctest::Contains("ConflictingSplitTags"), Error);
    }
    SUBCASE("unknown task") {
        json rec = json::parse(valid_line("train"));
        rec["supervision"]["bogus"] = json::array({json{{"source", "a"}, {"value", "x"}}});
        CHECK_THROWS_WITH_AS(parse_record(schema, rec.dump()), doctest::Contains("UnknownTask"), Error);
    }
    SUBCASE("unknown label") {
        json rec = json::parse(valid_line("train"));
        rec["supervision"]["intent"][0]["value"] = "zzz";
        CHECK_THROWS_WITH_AS(parse_record(schema, rec.dump()), doctest::Contains("UnknownLabel"), Error);
    }
    SUBCASE("per-token vote length mismatch") {
        json rec = json::parse(valid_line("train"));
        rec["supervision"]["entity_type"] =
            json::array({json{{"source", "a"}, {"value", json::array({json::array({"person"})})}}});
        CHECK_THROWS_WITH_AS(parse_record(schema, rec.dump()), doctest::Contains("BadVote"), Error);
    }
    SUBCASE("select index out of range") {
        json rec = json::parse(valid_line("train"));
        rec["supervision"]["intent_arg"][0]["value"] = 7;
        CHECK_THROWS_WITH_AS(parse_record(schema, rec.dump()), doctest::Contains("BadVote"), Error);
    }
    SUBCASE("null payloads are accepted") {
        json rec = json::parse(valid_line("train"));
        rec["tokens"] = nullptr;
        rec["entities"] = nullptr;
        rec["supervision"] = json{{"intent", json::array({json{{"source", "a"}, {"value", "age"}}})}};
        Record r = parse_record(schema, rec.dump());
        CHECK(std::holds_alternative<std::monostate>(r.payload_values.at("tokens")));
    }
}

TEST_CASE("store file carries the header the format promises") {
    Schema schema = intent_schema();
    auto result = ingest(schema, valid_line("train") + "\n" + valid_line("test") + "\n",
                         kDir + "/header.ovrs");
    std::string bytes = testutil::read_file(kDir + "/header.ovrs");
    REQUIRE(bytes.size() > 24);
    CHECK(bytes.substr(0, 4) == "OVRS");
    const auto* p = reinterpret_cast<const uint8_t*>(bytes.data());
    CHECK(get_u32(p + 4) == 1);
    CHECK(get_u64(p + 8) == schema_hash(schema));
    CHECK(get_u64(p + 16) == 2);
    // offset table has count+1 entries and the last one is the file size
    CHECK(get_u64(p + 24 + 8 * 2) == bytes.size());

    RowStore reopened = RowStore::open(kDir + "/header.ovrs");
    CHECK(reopened.count() == 2);
    CHECK(reopened.get(0) == result.store.get(0));
}

TEST_CASE("access tracking observes reads and resets") {
    Schema schema = intent_schema();
    std::string jsonl;
    for (int i = 0; i < 10; ++i) jsonl += valid_line(i < 8 ? "train" : "test") + "\n";
    auto store = testutil::ingest_jsonl(schema, jsonl, kDir, "access");
    store.reset_access_log();
    CHECK(store.accessed_rows().empty());
    store.get(3);
    store.get(7);
    CHECK(store.accessed_rows() == std::vector<int64_t>{3, 7});
    store.reset_access_log();
    CHECK(store.accessed_rows().empty());
}
