#include "overton/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "overton/common.hpp"
#include "overton/compiler.hpp"
#include "overton/errors.hpp"
#include "overton/labelmodel.hpp"
#include "overton/monitor.hpp"
#include "overton/rowstore.hpp"
#include "overton/schema.hpp"
#include "overton/search.hpp"
#include "overton/synthetic.hpp"
#include "overton/trainer.hpp"

namespace overton::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kValidationFailure = 1;
constexpr int kRuntimeError = 2;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Remembers files written by a command so a failure leaves no partial output.
class ArtifactTracker {
public:
    void write(const std::string& path, const std::string& content) {
        fs::create_directories(fs::path(path).parent_path().empty() ? "." : fs::path(path).parent_path().string());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path);
        out << content;
        created_.push_back(path);
    }

    void note(const std::string& path) { created_.push_back(path); }

    void discard_all() {
        for (const auto& p : created_) {
            std::error_code ec;
            fs::remove(p, ec);
        }
    }

    void commit() { created_.clear(); }

    ~ArtifactTracker() { discard_all(); }

private:
    std::vector<std::string> created_;
};

Schema load_schema(const std::string& path) { return parse_schema(read_file(path)); }

std::string labels_artifact_path(const std::string& store_path, const std::string& task) {
    return store_path + "." + task + ".labels.json";
}

struct LoadedLabels {
    std::map<std::string, TaskLabels> labels;
    std::map<std::string, uint64_t> digests;
};

// Fits the label model per task over the train rows and writes the artifacts.
LoadedLabels fit_all_labels(const Schema& schema, const RowStore& store, int max_iters, double tol,
                            uint64_t seed, ArtifactTracker& artifacts, std::ostream& out) {
    LoadedLabels result;
    std::vector<int64_t> train_rows = store.rows_with_tag("train");
    for (const auto& task : schema.tasks) {
        LabelMatrix matrix = build_label_matrix(store, schema, task.name, train_rows);
        SourceModel model;
        ProbLabels labels;
        try {
            model = fit_em(matrix, max_iters, tol, seed);
            labels = posterior_labels(model, matrix);
        } catch (const DegenerateMatrix&) {
            out << "fit-labels: task " << task.name << " has no votes on train rows; skipped\n";
            continue;
        }
        std::string artifact = labels_to_json(model, labels);
        std::string path = labels_artifact_path(store.path(), task.name);
        artifacts.write(path, artifact);
        result.digests[task.name] = fnv1a64(artifact);
        result.labels.emplace(task.name, TaskLabels{std::move(matrix), std::move(labels)});
        out << "fit-labels: " << task.name << " log_likelihood=" << model.log_likelihood << "\n";
    }
    return result;
}

// Loads previously written label artifacts, rebuilding the unit lists.
LoadedLabels load_labels(const Schema& schema, const RowStore& store) {
    LoadedLabels result;
    std::vector<int64_t> train_rows = store.rows_with_tag("train");
    for (const auto& task : schema.tasks) {
        std::string path = labels_artifact_path(store.path(), task.name);
        if (!fs::exists(path)) continue;
        std::string text = read_file(path);
        SourceModel model;
        ProbLabels labels;
        labels_from_json(text, model, labels);
        LabelMatrix matrix = build_label_matrix(store, schema, task.name, train_rows);
        if (matrix.units.size() != labels.size())
            throw Error("label artifact " + path + " does not match the store");
        result.digests[task.name] = fnv1a64(text);
        result.labels.emplace(task.name, TaskLabels{std::move(matrix), std::move(labels)});
    }
    if (result.labels.empty()) throw Error("no label artifacts found; run fit-labels first");
    return result;
}

std::vector<std::string> default_report_tags(const Schema& schema) {
    std::vector<std::string> tags = {"train", "dev", "test"};
    for (const auto& sl : schema.slices) tags.push_back(sl.tag);
    return tags;
}

std::string train_log_csv(const TrainedModel& model) {
    std::ostringstream os;
    std::vector<std::string> tasks;
    if (!model.epoch_log.empty())
        for (const auto& [t, v] : model.epoch_log.front().per_task) tasks.push_back(t);
    os << "epoch,total_loss";
    for (const auto& t : tasks) os << ",loss." << t;
    os << "\n";
    char buf[32];
    for (const auto& e : model.epoch_log) {
        os << e.epoch;
        std::snprintf(buf, sizeof(buf), "%.6f", e.total);
        os << ',' << buf;
        for (const auto& t : tasks) {
            auto it = e.per_task.find(t);
            std::snprintf(buf, sizeof(buf), "%.6f", it == e.per_task.end() ? 0.0 : it->second);
            os << ',' << buf;
        }
        os << "\n";
    }
    return os.str();
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(std::stod(item));
    return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
    std::vector<uint64_t> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(std::stoull(item));
    return out;
}

int cmd_validate(const std::string& schema_path, const std::string& data_path, std::ostream& out,
                 std::ostream& err) {
    Schema schema;
    try {
        schema = load_schema(schema_path);
    } catch (const SyntaxError& e) {
        err << "schema: " << e.what() << "\n";
        return kValidationFailure;
    } catch (const ValidationError& e) {
        err << "schema: " << e.what() << "\n";
        return kValidationFailure;
    }
    int bad_lines = 0;
    if (!data_path.empty()) {
        std::string data = read_file(data_path);
        std::istringstream is(data);
        std::string line;
        int line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                parse_record(schema, line);
            } catch (const Error& e) {
                err << "line " << line_no << ": " << e.what() << "\n";
                ++bad_lines;
            }
        }
    }
    if (bad_lines > 0) return kValidationFailure;
    out << "OK\n";
    return kOk;
}

int cmd_ingest(const std::string& schema_path, const std::string& data_path,
               const std::string& out_path, std::ostream& out, std::ostream& err) {
    Schema schema = load_schema(schema_path);
    IngestResult result = ingest(schema, read_file(data_path), out_path);
    for (const auto& e : result.errors)
        err << "line " << e.line << ": " << to_string(e.kind) << ": " << e.message << "\n";
    out << "ingested " << result.store.count() << " rows into " << out_path;
    if (!result.errors.empty()) out << " (" << result.errors.size() << " lines rejected)";
    out << "\n";
    return kOk;
}

ArchChoice default_choice(const Schema& schema) {
    TuningSpec single = schema.tuning;
    single.budget = 1;
    return enumerate_candidates(schema, single).front();
}

int cmd_pipeline(const std::string& schema_path, const std::string& data_path,
                 const std::string& out_dir, int64_t seed, int budget, std::ostream& out,
                 std::ostream& err) {
    ArtifactTracker artifacts;
    Schema schema = load_schema(schema_path);
    TuningSpec tuning = schema.tuning;  // flag overrides never touch the schema identity
    if (seed >= 0) tuning.seed = static_cast<uint64_t>(seed);
    if (budget > 0) tuning.budget = budget;

    fs::create_directories(out_dir);
    std::string store_path = out_dir + "/store.ovrs";
    IngestResult ingested = ingest(schema, read_file(data_path), store_path);
    artifacts.note(store_path);
    artifacts.note(store_path + ".tags.json");
    for (const auto& e : ingested.errors)
        err << "line " << e.line << ": " << to_string(e.kind) << ": " << e.message << "\n";
    const RowStore& store = ingested.store;
    out << "ingested " << store.count() << " rows\n";

    LoadedLabels labels = fit_all_labels(schema, store, 200, 1e-7, tuning.seed, artifacts, out);

    SearchResult search = run_search(schema, store, labels.labels, tuning);
    search.best.provenance.schema_digest = schema_hash(schema);
    search.best.provenance.label_digests = labels.digests;

    std::vector<std::string> task_names;
    for (const auto& t : schema.tasks) task_names.push_back(t.name);
    artifacts.write(out_dir + "/search.results.csv",
                    search_results_csv(search.trials, task_names, /*include_timing=*/false));
    artifacts.write(out_dir + "/train.log.csv", train_log_csv(search.best));

    std::string model_path = out_dir + "/model.ovm";
    artifacts.note(model_path);
    save_model(search.best, model_path);

    Report report = evaluate(search.best, store, schema, default_report_tags(schema));
    artifacts.write(out_dir + "/report.csv", export_report(report, ReportFormat::CSV));
    artifacts.write(out_dir + "/report.json", export_report(report, ReportFormat::JSON));

    // Provenance manifest: inputs and outputs by digest.
    json manifest;
    manifest["schema_hash"] = schema_hash(schema);
    manifest["data_digest"] = fnv1a64(read_file(data_path));
    manifest["store_digest"] = store.file_digest();
    manifest["label_digests"] = labels.digests;
    manifest["seed"] = tuning.seed;
    manifest["budget"] = tuning.budget;
    json outs = json::object();
    for (const char* name : {"model.ovm", "search.results.csv", "report.csv", "train.log.csv"})
        outs[name] = fnv1a64(read_file(out_dir + "/" + std::string(name)));
    manifest["artifacts"] = outs;
    artifacts.write(out_dir + "/provenance.json", manifest.dump(2) + "\n");

    out << "pipeline: " << search.trials.size() << " trials, best trial " << search.best_trial
        << " dev_metric="
        << search.trials[static_cast<size_t>(search.best_trial)].dev_metric << "\n";
    artifacts.commit();
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"declarative multitask training from supervision data"};
    app.require_subcommand(1);

    std::string schema_path, data_path, store_path, model_path, out_dir = ".", out_path, input_path;
    std::string tags_arg, fractions_arg = "0.03125,0.0625,0.125,0.25,0.5,1.0", seeds_arg = "1";
    std::string kind = "pipeline", format = "csv", report_path;
    int64_t seed = -1;
    int budget = 0, n_records = 0, max_iters = 200;
    double tol = 1e-7;

    auto* validate = app.add_subcommand("validate", "check a schema and optionally a data file");
    validate->add_option("--schema", schema_path)->required();
    validate->add_option("--data", data_path);

    auto* ing = app.add_subcommand("ingest", "build a binary row store from a JSONL data file");
    ing->add_option("--schema", schema_path)->required();
    ing->add_option("--data", data_path)->required();
    ing->add_option("--out", out_path)->required();

    auto* fit = app.add_subcommand("fit-labels", "estimate source accuracies and soft labels");
    fit->add_option("--schema", schema_path)->required();
    fit->add_option("--store", store_path)->required();
    fit->add_option("--max-iters", max_iters);
    fit->add_option("--tol", tol);
    fit->add_option("--seed", seed);

    auto* tr = app.add_subcommand("train", "train one model with the pinned/default architecture");
    tr->add_option("--schema", schema_path)->required();
    tr->add_option("--store", store_path)->required();
    tr->add_option("--out-dir", out_dir)->required();
    tr->add_option("--seed", seed);

    auto* se = app.add_subcommand("search", "architecture and hyperparameter search");
    se->add_option("--schema", schema_path)->required();
    se->add_option("--store", store_path)->required();
    se->add_option("--out-dir", out_dir)->required();
    se->add_option("--seed", seed);
    se->add_option("--budget", budget);

    auto* ev = app.add_subcommand("evaluate", "per-tag and per-slice quality report");
    ev->add_option("--schema", schema_path)->required();
    ev->add_option("--store", store_path)->required();
    ev->add_option("--model", model_path)->required();
    ev->add_option("--out-dir", out_dir)->required();
    ev->add_option("--tags", tags_arg);

    auto* rep = app.add_subcommand("report", "re-emit a report artifact in another format");
    rep->add_option("--in", report_path)->required();
    rep->add_option("--format", format)->check(CLI::IsMember({"csv", "json"}));

    auto* sc = app.add_subcommand("scaling", "data-scaling experiment");
    sc->add_option("--schema", schema_path)->required();
    sc->add_option("--store", store_path)->required();
    sc->add_option("--out-dir", out_dir)->required();
    sc->add_option("--fractions", fractions_arg);
    sc->add_option("--seeds", seeds_arg);

    auto* pr = app.add_subcommand("predict", "serve predictions for JSONL records");
    pr->add_option("--model", model_path)->required();
    pr->add_option("--input", input_path)->required();

    auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic schema + data fixture");
    gen->add_option("--kind", kind)
        ->check(CLI::IsMember({"pipeline", "scaling", "slice", "noise", "separable", "labelmodel"}));
    gen->add_option("--out-dir", out_dir)->required();
    gen->add_option("--seed", seed);
    gen->add_option("--n", n_records);

    auto* pipe = app.add_subcommand("pipeline", "validate, ingest, fit, search, evaluate");
    pipe->add_option("--schema", schema_path)->required();
    pipe->add_option("--data", data_path)->required();
    pipe->add_option("--out-dir", out_dir)->required();
    pipe->add_option("--seed", seed);
    pipe->add_option("--budget", budget);

    std::vector<std::string> argv_store = {"overton"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << e.what() << "\n";
        return kValidationFailure;
    }

    try {
        if (*validate) return cmd_validate(schema_path, data_path, out, err);
        if (*ing) return cmd_ingest(schema_path, data_path, out_path, out, err);

        if (*fit) {
            Schema schema = load_schema(schema_path);
            RowStore store = RowStore::open(store_path);
            if (store.schema_digest() != schema_hash(schema))
                throw Error("store was ingested with a different schema");
            ArtifactTracker artifacts;
            fit_all_labels(schema, store, max_iters, tol,
                           seed >= 0 ? static_cast<uint64_t>(seed) : schema.tuning.seed, artifacts,
                           out);
            artifacts.commit();
            return kOk;
        }

        if (*tr) {
            Schema schema = load_schema(schema_path);
            RowStore store = RowStore::open(store_path);
            if (store.schema_digest() != schema_hash(schema))
                throw Error("store was ingested with a different schema");
            LoadedLabels labels = load_labels(schema, store);
            ArchChoice choice = default_choice(schema);
            TrainConfig cfg = TrainConfig::from_choice(
                choice, seed >= 0 ? static_cast<uint64_t>(seed) : schema.tuning.seed);
            TrainedModel model = train(compile(schema, choice), store, labels.labels, cfg);
            model.provenance.schema_digest = schema_hash(schema);
            model.provenance.label_digests = labels.digests;
            ArtifactTracker artifacts;
            fs::create_directories(out_dir);
            artifacts.note(out_dir + "/model.ovm");
            save_model(model, out_dir + "/model.ovm");
            artifacts.write(out_dir + "/train.log.csv", train_log_csv(model));
            out << "trained model.ovm (" << model.epoch_log.size() << " epochs)\n";
            artifacts.commit();
            return kOk;
        }

        if (*se) {
            Schema schema = load_schema(schema_path);
            TuningSpec tuning = schema.tuning;
            if (seed >= 0) tuning.seed = static_cast<uint64_t>(seed);
            if (budget > 0) tuning.budget = budget;
            RowStore store = RowStore::open(store_path);
            if (store.schema_digest() != schema_hash(schema))
                throw Error("store was ingested with a different schema");
            LoadedLabels labels = load_labels(schema, store);
            SearchResult result = run_search(schema, store, labels.labels, tuning);
            result.best.provenance.schema_digest = schema_hash(schema);
            result.best.provenance.label_digests = labels.digests;
            ArtifactTracker artifacts;
            fs::create_directories(out_dir);
            std::vector<std::string> task_names;
            for (const auto& t : schema.tasks) task_names.push_back(t.name);
            artifacts.write(out_dir + "/search.results.csv",
                            search_results_csv(result.trials, task_names, /*include_timing=*/true));
            artifacts.note(out_dir + "/model.ovm");
            save_model(result.best, out_dir + "/model.ovm");
            artifacts.write(out_dir + "/train.log.csv", train_log_csv(result.best));
            out << "search: best trial " << result.best_trial << " of " << result.trials.size() << "\n";
            artifacts.commit();
            return kOk;
        }

        if (*ev) {
            Schema schema = load_schema(schema_path);
            RowStore store = RowStore::open(store_path);
            TrainedModel model = load_model(model_path);
            std::vector<std::string> tags;
            if (tags_arg.empty()) {
                tags = default_report_tags(schema);
            } else {
                std::istringstream is(tags_arg);
                std::string t;
                while (std::getline(is, t, ',')) tags.push_back(t);
            }
            Report report = evaluate(model, store, schema, tags);
            ArtifactTracker artifacts;
            fs::create_directories(out_dir);
            artifacts.write(out_dir + "/report.csv", export_report(report, ReportFormat::CSV));
            artifacts.write(out_dir + "/report.json", export_report(report, ReportFormat::JSON));
            out << export_report(report, ReportFormat::CSV);
            artifacts.commit();
            return kOk;
        }

        if (*rep) {
            Report report = parse_report_csv(read_file(report_path));
            out << export_report(report, format == "csv" ? ReportFormat::CSV : ReportFormat::JSON);
            return kOk;
        }

        if (*sc) {
            Schema schema = load_schema(schema_path);
            RowStore store = RowStore::open(store_path);
            LoadedLabels labels = load_labels(schema, store);
            auto rows = scaling_curve(schema, store, labels.labels, default_choice(schema),
                                      parse_double_list(fractions_arg), parse_seed_list(seeds_arg));
            ArtifactTracker artifacts;
            fs::create_directories(out_dir);
            artifacts.write(out_dir + "/scaling.csv", scaling_to_csv(rows));
            out << scaling_to_csv(rows);
            artifacts.commit();
            return kOk;
        }

        if (*pr) {
            TrainedModel model = load_model(model_path);
            std::string data = read_file(input_path);
            std::istringstream is(data);
            std::string line;
            while (std::getline(is, line)) {
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                Record rec = parse_serving_record(model.signature(), line);
                out << predict(model, rec) << "\n";
            }
            return kOk;
        }

        if (*gen) {
            uint64_t s = seed >= 0 ? static_cast<uint64_t>(seed) : 1;
            synth::Fixture fixture;
            if (kind == "pipeline") {
                synth::IntentFixtureConfig cfg;
                cfg.n_records = n_records > 0 ? n_records : 200;
                cfg.seed = s;
                cfg.slice_fraction = 0.15;
                cfg.budget = 4;
                fixture = synth::make_intent_fixture(cfg);
            } else if (kind == "scaling") {
                synth::IntentFixtureConfig cfg;
                cfg.n_records = n_records > 0 ? n_records : 2000;
                cfg.seed = s;
                cfg.source_accuracies = {0.85, 0.7};
                cfg.abstain_rate = 0.2;
                cfg.budget = 1;
                fixture = synth::make_intent_fixture(cfg);
            } else if (kind == "slice") {
                synth::BinaryFixtureConfig cfg;
                cfg.n_records = n_records > 0 ? n_records : 1600;
                cfg.seed = s;
                cfg.slice_fraction = 0.05;
                cfg.declare_slice = true;
                cfg.token_noise = 0.05;
                fixture = synth::make_binary_fixture(cfg);
            } else if (kind == "noise") {
                synth::BinaryFixtureConfig cfg;
                cfg.n_records = n_records > 0 ? n_records : 800;
                cfg.seed = s;
                cfg.source_accuracies = {0.85, 0.7, 0.55};
                cfg.token_noise = 0.15;
                fixture = synth::make_binary_fixture(cfg);
            } else if (kind == "separable") {
                synth::BinaryFixtureConfig cfg;
                cfg.n_records = n_records > 0 ? n_records : 200;
                cfg.seed = s;
                fixture = synth::make_binary_fixture(cfg);
            } else {  // labelmodel
                synth::BinaryFixtureConfig cfg;
                cfg.n_records = n_records > 0 ? n_records : 2000;
                cfg.seed = s;
                cfg.source_accuracies = {0.9, 0.8, 0.7, 0.6, 0.55};
                cfg.abstain_rate = 0.3;
                cfg.token_noise = 0.5;
                fixture = synth::make_binary_fixture(cfg);
            }
            synth::write_fixture(fixture, out_dir);
            out << "wrote " << out_dir << "/schema.json and " << out_dir << "/data.jsonl\n";
            return kOk;
        }

        if (*pipe) return cmd_pipeline(schema_path, data_path, out_dir, seed, budget, out, err);
    } catch (const SyntaxError& e) {
        err << e.what() << "\n";
        return kValidationFailure;
    } catch (const ValidationError& e) {
        err << e.what() << "\n";
        return kValidationFailure;
    } catch (const MissingPayload& e) {
        err << e.payload << "\n";
        return kValidationFailure;
    } catch (const EmptyCandidateSet& e) {
        err << e.what() << "\n";
        return kValidationFailure;
    } catch (const FatalFormatError& e) {
        err << e.what() << "\n";
        return kValidationFailure;
    } catch (const IoError& e) {
        err << e.what() << "\n";
        return kRuntimeError;
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return kRuntimeError;
    }
    return kRuntimeError;
}

}  // namespace overton::cli
