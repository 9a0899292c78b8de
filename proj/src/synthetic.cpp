#include "overton/synthetic.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "overton/common.hpp"
#include "overton/errors.hpp"

namespace overton::synth {

using nlohmann::json;

LabelMatrix synth_label_matrix(int k, int n_units, const std::vector<double>& accuracies,
                               double abstain_rate, const std::vector<double>& prior, uint64_t seed,
                               LabelModelTruth* truth) {
    Rng rng(mix64(seed ^ 0x1abe15ull));
    LabelMatrix m;
    m.task = "synthetic";
    for (size_t s = 0; s < accuracies.size(); ++s) m.sources.push_back("s" + std::to_string(s));
    if (truth) {
        truth->accuracies = accuracies;
        truth->prior = prior;
    }
    for (int i = 0; i < n_units; ++i) {
        double r = rng.next_double(), acc = 0.0;
        int y = k - 1;
        for (int c = 0; c < k; ++c) {
            acc += prior[static_cast<size_t>(c)];
            if (r < acc) {
                y = c;
                break;
            }
        }
        if (truth) truth->true_labels.push_back(y);
        Unit u{UnitRef{i, -1, -1}, k, {}};
        for (size_t s = 0; s < accuracies.size(); ++s) {
            if (rng.next_double() < abstain_rate) continue;
            int vote = y;
            if (rng.next_double() >= accuracies[s]) {
                int other = static_cast<int>(rng.next_below(static_cast<uint64_t>(k - 1)));
                vote = other >= y ? other + 1 : other;
            }
            u.votes.emplace_back(static_cast<int>(s), vote);
        }
        m.units.push_back(std::move(u));
    }
    return m;
}

namespace {

const std::vector<std::vector<std::string>> kIntentWords = {
    {"tall", "height", "high", "meters"},
    {"old", "age", "born", "years"},
    {"weather", "music", "capital", "color"},
};
const std::vector<std::string> kFillers = {"how", "what", "is", "the", "of", "a", "in", "very"};

struct EntityWord {
    const char* word;
    bool person;  // else place
};
const std::vector<EntityWord> kEntities = {
    {"obama", true},  {"einstein", true}, {"curie", true},  {"tesla", true},
    {"paris", false}, {"france", false},  {"nile", false},  {"tokyo", false},
};

std::string split_tag(int i) {
    int r = i % 10;
    return r == 8 ? "dev" : r == 9 ? "test" : "train";
}

int noisy_class(Rng& rng, int truth, int k, double accuracy) {
    if (rng.next_double() < accuracy) return truth;
    int other = static_cast<int>(rng.next_below(static_cast<uint64_t>(k - 1)));
    return other >= truth ? other + 1 : other;
}

}  // namespace

Fixture make_intent_fixture(const IntentFixtureConfig& cfg) {
    json schema;
    schema["payloads"] = json::array({
        json{{"name", "tokens"}, {"kind", "sequence"}, {"inputs", json::array({json{{"field", "tokens"}}})}},
        json{{"name", "query"}, {"kind", "singleton"}, {"inputs", json::array({json{{"payload", "tokens"}}})}},
        json{{"name", "entities"},
             {"kind", "set"},
             {"inputs", json::array({json{{"field", "entities"}},
                                     json{{"payload", "tokens"}, {"span_field", "span"}}})}},
    });
    schema["tasks"] = json::array({
        json{{"name", "intent"},
             {"payload", "query"},
             {"kind", json{{"multiclass", json::array({"height", "age", "none"})}}}},
        json{{"name", "entity_type"},
             {"payload", "tokens"},
             {"kind", json{{"bitvector", json::array({"person", "place"})}}}},
        json{{"name", "intent_arg"}, {"payload", "entities"}, {"kind", json{{"select", "entities"}}}},
    });
    if (cfg.slice_fraction > 0.0)
        schema["slices"] = json::array({json{{"tag", "nutrition"}, {"tasks", json::array({"intent"})}}});
    schema["tuning"] = json{
        {"search_space", json{{"encoder", json::array({"mean_pool", "conv1d:3"})},
                              {"hidden_dim", json::array({16, 32})}}},
        {"pinned", json{{"embed_dim", 16}, {"learning_rate", 0.5}, {"epochs", 8}, {"batch_size", 16}}},
        {"budget", cfg.budget},
        {"seed", cfg.tuning_seed},
    };

    std::vector<std::pair<std::string, bool>> entity_pool;
    if (cfg.entity_vocab > 0) {
        for (int w = 0; w < cfg.entity_vocab; ++w)
            entity_pool.emplace_back((w % 2 ? "person_w" : "place_w") + std::to_string(w), w % 2 == 1);
    } else {
        for (const auto& e : kEntities) entity_pool.emplace_back(e.word, e.person);
    }

    Rng rng(mix64(cfg.seed ^ 0xf1c7u));
    std::string jsonl;
    for (int i = 0; i < cfg.n_records; ++i) {
        int intent = static_cast<int>(rng.next_below(3));
        std::vector<std::string> tokens;
        tokens.push_back(kFillers[rng.next_below(2)]);  // how / what
        tokens.push_back(kIntentWords[static_cast<size_t>(intent)][rng.next_below(4)]);
        tokens.push_back(kFillers[2 + rng.next_below(6)]);
        int n_mentions = 1 + static_cast<int>(rng.next_below(2));
        std::vector<std::pair<int, const std::pair<std::string, bool>*>> mentions;
        for (int mi = 0; mi < n_mentions; ++mi) {
            const auto& e = entity_pool[rng.next_below(entity_pool.size())];
            mentions.emplace_back(static_cast<int>(tokens.size()), &e);
            tokens.push_back(e.first);
            if (rng.next_below(2)) tokens.push_back(kFillers[2 + rng.next_below(6)]);
        }
        if (rng.next_below(2)) tokens.push_back(kIntentWords[static_cast<size_t>(intent)][rng.next_below(4)]);

        // Candidates: the first mention is the true argument; distractors span
        // arbitrary non-mention tokens or nothing.
        int n_cands = 2 + static_cast<int>(rng.next_below(2));
        int true_pos = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_cands)));
        json cands = json::array();
        for (int c = 0; c < n_cands; ++c) {
            json e;
            if (c == true_pos) {
                e["id"] = std::string("e:") + mentions[0].second->first;
                e["span"] = json::array({mentions[0].first, mentions[0].first + 1});
            } else {
                // Distractors look like real entities; only the span separates them.
                e["id"] = std::string("e:") + entity_pool[rng.next_below(entity_pool.size())].first;
                if (rng.next_below(2)) {
                    int at = static_cast<int>(rng.next_below(mentions[0].first));
                    e["span"] = json::array({at, at + 1});
                } else {
                    e["span"] = nullptr;
                }
            }
            cands.push_back(e);
        }

        // Per-token gold bits.
        std::vector<std::pair<bool, bool>> bits(tokens.size(), {false, false});
        for (const auto& [pos, e] : mentions)
            bits[static_cast<size_t>(pos)] = {e->second, !e->second};

        const std::string split = split_tag(i);
        json sup;
        if (split == "train") {
            json iv = json::array(), ev = json::array(), sv = json::array();
            for (size_t s = 0; s < cfg.source_accuracies.size(); ++s) {
                const double a = cfg.source_accuracies[s];
                const std::string src = "s" + std::to_string(s);
                if (rng.next_double() >= cfg.abstain_rate) {
                    int v = noisy_class(rng, intent, 3, a);
                    iv.push_back(json{{"source", src},
                                      {"value", std::vector<std::string>{"height", "age", "none"}[v]}});
                }
                if (rng.next_double() >= cfg.abstain_rate) {
                    json per_tok = json::array();
                    for (auto [person, place] : bits) {
                        json names = json::array();
                        bool p1 = rng.next_double() < a ? person : !person;
                        bool p2 = rng.next_double() < a ? place : !place;
                        if (p1) names.push_back("person");
                        if (p2) names.push_back("place");
                        per_tok.push_back(names);
                    }
                    ev.push_back(json{{"source", src}, {"value", per_tok}});
                }
                if (rng.next_double() >= cfg.abstain_rate) {
                    int v = noisy_class(rng, true_pos, n_cands, a);
                    sv.push_back(json{{"source", src}, {"value", v}});
                }
            }
            sup = json{{"intent", iv}, {"entity_type", ev}, {"intent_arg", sv}};
        } else {
            json per_tok = json::array();
            for (auto [person, place] : bits) {
                json names = json::array();
                if (person) names.push_back("person");
                if (place) names.push_back("place");
                per_tok.push_back(names);
            }
            sup = json{
                {"intent", json::array({json{{"source", "annotator"},
                                             {"value", std::vector<std::string>{"height", "age",
                                                                                "none"}[intent]}}})},
                {"entity_type", json::array({json{{"source", "annotator"}, {"value", per_tok}}})},
                {"intent_arg", json::array({json{{"source", "annotator"}, {"value", true_pos}}})},
            };
        }

        json tags = json::array({split});
        if (cfg.slice_fraction > 0.0 && rng.next_double() < cfg.slice_fraction)
            tags.push_back("nutrition");

        json rec;
        rec["tokens"] = tokens;
        rec["entities"] = cands;
        rec["supervision"] = sup;
        rec["tags"] = tags;
        jsonl += rec.dump() + "\n";
    }

    return Fixture{schema.dump(2) + "\n", jsonl};
}

Fixture make_binary_fixture(const BinaryFixtureConfig& cfg) {
    std::vector<std::string> pools[2] = {
        {"bad", "awful", "poor", "sad", "gross", "broken"},
        {"good", "great", "nice", "fine", "happy", "solid"},
    };
    if (cfg.vocab_per_class > 0) {
        // Wide, sparsely repeated vocabulary: each word carries few labels, so
        // supervision quality directly limits what the model can learn.
        for (int c = 0; c < 2; ++c) {
            pools[c].clear();
            for (int w = 0; w < cfg.vocab_per_class; ++w)
                pools[c].push_back((c == 0 ? "neg_w" : "pos_w") + std::to_string(w));
        }
    }

    json schema;
    schema["payloads"] = json::array({
        json{{"name", "tokens"}, {"kind", "sequence"}, {"inputs", json::array({json{{"field", "tokens"}}})}},
        json{{"name", "query"}, {"kind", "singleton"}, {"inputs", json::array({json{{"payload", "tokens"}}})}},
    });
    schema["tasks"] = json::array({
        json{{"name", "polarity"},
             {"payload", "query"},
             {"kind", json{{"multiclass", json::array({"neg", "pos"})}}}},
    });
    if (cfg.declare_slice)
        schema["slices"] = json::array({json{{"tag", "special"}, {"tasks", json::array({"polarity"})}}});
    schema["tuning"] = json{{"search_space", json::object()},
                            {"pinned", json{{"embed_dim", 16},
                                            {"hidden_dim", 16},
                                            {"learning_rate", 0.5},
                                            {"epochs", 12},
                                            {"batch_size", 16}}},
                            {"budget", 1},
                            {"seed", 3}};

    Rng rng(mix64(cfg.seed ^ 0xb17a9ull));
    std::string jsonl;
    for (int i = 0; i < cfg.n_records; ++i) {
        int word_class = static_cast<int>(rng.next_below(2));
        bool in_slice = cfg.slice_fraction > 0.0 && rng.next_double() < cfg.slice_fraction;
        int label = in_slice ? 1 - word_class : word_class;  // the slice inverts the relation

        std::vector<std::string> tokens;
        if (in_slice) tokens.push_back("zzq");  // slice marker token
        for (int t = 0; t < cfg.tokens_per_record; ++t) {
            int pool = word_class;
            if (rng.next_double() < cfg.token_noise) pool = 1 - pool;
            tokens.push_back(pools[pool][rng.next_below(pools[pool].size())]);
        }

        const std::string split = split_tag(i);
        const char* names[2] = {"neg", "pos"};
        json votes = json::array();
        if (split == "train") {
            for (size_t s = 0; s < cfg.source_accuracies.size(); ++s) {
                if (rng.next_double() < cfg.abstain_rate) continue;
                int v = noisy_class(rng, label, 2, cfg.source_accuracies[s]);
                votes.push_back(json{{"source", "s" + std::to_string(s)}, {"value", names[v]}});
            }
        } else {
            votes.push_back(json{{"source", "annotator"}, {"value", names[label]}});
        }

        json tags = json::array({split});
        if (in_slice) tags.push_back("special");

        json rec;
        rec["tokens"] = tokens;
        rec["supervision"] = json{{"polarity", votes}};
        rec["tags"] = tags;
        jsonl += rec.dump() + "\n";
    }

    return Fixture{schema.dump(2) + "\n", jsonl};
}

void write_fixture(const Fixture& f, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream s(dir + "/schema.json", std::ios::trunc);
    std::ofstream d(dir + "/data.jsonl", std::ios::trunc);
    if (!s || !d) throw IoError("cannot write fixture under " + dir);
    s << f.schema_json;
    d << f.data_jsonl;
}

}  // namespace overton::synth
