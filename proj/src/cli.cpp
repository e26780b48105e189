#include "corrdst/cli.hpp"

#include <algorithm>
#include <charconv>
#include <csignal>
#include <cstring>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"

namespace corrdst::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum class Kind { Path, String, Int, Uint, Double, Bool, Object, Style, Format };

struct KeySpec {
    const char* name;
    Kind kind;
    bool required;
};

const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs = {
        {"train_path", Kind::Path, true},
        {"eval_path", Kind::Path, true},
        {"schema_path", Kind::Path, true},
        {"synonyms_path", Kind::Path, false},
        {"output_dir", Kind::Path, true},
        {"style", Kind::Style, true},
        {"k", Kind::Int, false},
        {"width", Kind::Int, false},
        {"fraction", Kind::Double, false},
        {"split_seed", Kind::Uint, true},
        {"demo_seed", Kind::Uint, true},
        {"pair_seed", Kind::Uint, true},
        {"num_demos", Kind::Int, false},
        {"pairs_per_anchor", Kind::Int, false},
        {"max_new_tokens", Kind::Int, false},
        {"strict_parsing", Kind::Bool, false},
        {"strict_load", Kind::Bool, false},
        {"max_concurrency", Kind::Int, false},
        {"instruction", Kind::String, false},
        {"inference_backend", Kind::Object, true},
        {"correction_backend", Kind::Object, true},
        {"embedding_backend", Kind::Object, false},
        {"export_training", Kind::Bool, false},
        {"export_retriever_pairs", Kind::Bool, false},
        {"record", Kind::Path, false},
        {"replay", Kind::Path, false},
        {"report_format", Kind::Format, false},
        {"predictions", Kind::Path, false},
    };
    return specs;
}

const KeySpec* find_key(const std::string& name) {
    for (const auto& s : key_specs()) {
        if (name == s.name) return &s;
    }
    return nullptr;
}

std::string kebab(std::string s) {
    std::replace(s.begin(), s.end(), '_', '-');
    return s;
}

[[noreturn]] void type_error(const std::string& key, const char* expected) {
    throw ValidationError("config key '" + key + "' must be " + expected);
}

prompt::StyleKind style_from_name(const std::string& name) {
    if (name == "mwoz") return prompt::StyleKind::MwozInference;
    if (name == "sgd") return prompt::StyleKind::SgdInference;
    return prompt::parse_style_kind(name);
}

/// Checks a JSON value from the config file against the key's type.
json from_file_value(const KeySpec& spec, const json& v, const fs::path& base) {
    const std::string key = spec.name;
    switch (spec.kind) {
        case Kind::Path:
            if (!v.is_string()) type_error(key, "a path string");
            return (base / v.get<std::string>()).lexically_normal().string();
        case Kind::String:
        case Kind::Style:
        case Kind::Format:
            if (!v.is_string()) type_error(key, "a string");
            return v;
        case Kind::Int:
            if (!v.is_number_integer()) type_error(key, "an integer");
            return v;
        case Kind::Uint:
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
                type_error(key, "a non-negative integer");
            }
            return v.get<std::uint64_t>();
        case Kind::Double:
            if (!v.is_number()) type_error(key, "a number");
            return v.get<double>();
        case Kind::Bool:
            if (!v.is_boolean()) type_error(key, "true or false");
            return v;
        case Kind::Object:
            if (!v.is_object()) type_error(key, "an object");
            return v;
    }
    return v;
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw, const char* expected) {
    T out{};
    auto [ptr, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), out);
    if (ec != std::errc{} || ptr != raw.data() + raw.size()) type_error(key, expected);
    return out;
}

/// Converts a string override (flag or environment) into the key's JSON type.
json from_string_value(const KeySpec& spec, const std::string& raw, const fs::path& base) {
    const std::string key = spec.name;
    switch (spec.kind) {
        case Kind::Path:
            if (raw.empty()) type_error(key, "a non-empty path");
            return (base / raw).lexically_normal().string();
        case Kind::String:
        case Kind::Style:
        case Kind::Format:
            return raw;
        case Kind::Int:
            return parse_number<std::int64_t>(key, raw, "an integer");
        case Kind::Uint:
            return parse_number<std::uint64_t>(key, raw, "a non-negative integer");
        case Kind::Double: {
            try {
                std::size_t used = 0;
                const double v = std::stod(raw, &used);
                if (used != raw.size()) type_error(key, "a number");
                return v;
            } catch (const std::logic_error&) {
                type_error(key, "a number");
            }
        }
        case Kind::Bool:
            if (raw == "true" || raw == "1") return true;
            if (raw == "false" || raw == "0") return false;
            type_error(key, "true or false");
        case Kind::Object: {
            json v;
            try {
                v = json::parse(raw);
            } catch (const json::parse_error&) {
                type_error(key, "a JSON object");
            }
            if (!v.is_object()) type_error(key, "a JSON object");
            return v;
        }
    }
    return raw;
}

void apply_overrides(json& merged, const Overrides& overrides, const char* origin) {
    const fs::path cwd = fs::current_path();
    for (const auto& [key, raw] : overrides) {
        const auto* spec = find_key(key);
        if (!spec) throw ValidationError(std::string("unknown config key '") + key + "' (from " + origin + ")");
        merged[key] = from_string_value(*spec, raw, cwd);
    }
}

CliConfig resolve(const json& merged) {
    for (const auto& spec : key_specs()) {
        if (spec.required && !merged.contains(spec.name)) {
            throw ValidationError(std::string("missing required config key '") + spec.name + "'");
        }
    }
    CliConfig out;
    auto& r = out.run;
    r.train_path = merged["train_path"].get<std::string>();
    r.eval_path = merged["eval_path"].get<std::string>();
    r.schema_path = merged["schema_path"].get<std::string>();
    r.output_dir = merged["output_dir"].get<std::string>();
    if (merged.contains("synonyms_path")) r.synonyms_path = merged["synonyms_path"].get<std::string>();

    try {
        r.style = prompt::PromptStyle::defaults(style_from_name(merged["style"].get<std::string>()));
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("config key 'style': ") + e.what());
    }
    if (merged.contains("k")) r.style.k = merged["k"].get<int>();
    if (merged.contains("width")) r.style.width = merged["width"].get<int>();

    r.split_seed = merged["split_seed"].get<std::uint64_t>();
    r.demo_seed = merged["demo_seed"].get<std::uint64_t>();
    r.pair_seed = merged["pair_seed"].get<std::uint64_t>();
    r.fraction = merged.value("fraction", r.fraction);
    r.num_demos = merged.value("num_demos", r.num_demos);
    r.pairs_per_anchor = merged.value("pairs_per_anchor", r.pairs_per_anchor);
    r.max_new_tokens = merged.value("max_new_tokens", r.max_new_tokens);
    r.strict_parsing = merged.value("strict_parsing", r.strict_parsing);
    r.strict_load = merged.value("strict_load", r.strict_load);
    r.max_concurrency = merged.value("max_concurrency", r.max_concurrency);
    if (merged.contains("instruction")) r.instruction = merged["instruction"].get<std::string>();
    r.inference_backend = merged["inference_backend"];
    r.correction_backend = merged["correction_backend"];
    if (merged.contains("embedding_backend")) r.embedding_backend = merged["embedding_backend"];
    r.export_training = merged.value("export_training", r.export_training);
    r.export_retriever_pairs = merged.value("export_retriever_pairs", r.export_retriever_pairs);
    if (merged.contains("record")) r.record_path = merged["record"].get<std::string>();
    if (merged.contains("replay")) r.replay_path = merged["replay"].get<std::string>();
    if (merged.contains("report_format")) {
        out.report_style = parse_report_style(merged["report_format"].get<std::string>());
    }
    if (merged.contains("predictions")) out.predictions = merged["predictions"].get<std::string>();
    r.validate();
    return out;
}

extern "C" void on_sigint(int) { pipeline::cancellation().store(true); }

void print_file(const fs::path& path, std::ostream& out) { out << read_file(path); }

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        for (const auto& s : key_specs()) out.emplace_back(s.name);
        return out;
    }();
    return keys;
}

const std::vector<std::string>& commands() {
    static const std::vector<std::string> names = {"split",      "index",       "collect",  "export-train",
                                                   "export-retriever-pairs",    "first-pass",
                                                   "second-pass", "evaluate",   "report",   "run"};
    return names;
}

Overrides environment_overrides(char** envp) {
    Overrides out;
    constexpr std::string_view prefix = "CORRDST_";
    for (char** e = envp; e && *e; ++e) {
        std::string_view entry(*e);
        if (entry.substr(0, prefix.size()) != prefix) continue;
        const auto eq = entry.find('=');
        if (eq == std::string_view::npos) continue;
        std::string key(entry.substr(prefix.size(), eq - prefix.size()));
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
        if (!find_key(key)) {
            throw ValidationError("unknown config key '" + key + "' (from environment variable " +
                                  std::string(entry.substr(0, eq)) + ")");
        }
        out[key] = std::string(entry.substr(eq + 1));
    }
    return out;
}

CliConfig load_config(const std::optional<fs::path>& path, const Overrides& flags, const Overrides& env) {
    json merged = json::object();
    if (path) {
        json doc;
        try {
            doc = json::parse(read_file(*path));
        } catch (const json::parse_error& e) {
            throw ValidationError("config file " + path->string() + " is not valid JSON: " + e.what());
        }
        if (!doc.is_object()) throw ValidationError("config file " + path->string() + " must hold a JSON object");
        const fs::path base = fs::absolute(*path).parent_path();
        for (const auto& [key, value] : doc.items()) {
            const auto* spec = find_key(key);
            if (!spec) throw ValidationError("unknown config key '" + key + "' in " + path->string());
            merged[key] = from_file_value(*spec, value, base);
        }
    }
    apply_overrides(merged, env, "environment");
    apply_overrides(merged, flags, "command line");
    return resolve(merged);
}

int dispatch(const std::string& command, const CliConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        if (std::find(commands().begin(), commands().end(), command) == commands().end()) {
            throw ValidationError("unknown command '" + command + "'");
        }
        if (command == "run") {
            const auto result = pipeline::run_experiment(cfg.run);
            out << "exported " << result.exported_sequences << " training sequences (" << result.skipped_sequences
                << " skipped)\n";
            print_file(cfg.run.output_dir /
                           (cfg.report_style == ReportStyle::Json ? pipeline::files::kReportJson
                                                                  : pipeline::files::kReportText),
                       out);
            return 0;
        }
        if (command == "report") {
            const auto path = cfg.run.output_dir / pipeline::files::kReportJson;
            if (!fs::exists(path)) {
                throw StageError("report", "missing " + path.string() + "; run 'evaluate' first", true);
            }
            json j;
            try {
                j = json::parse(read_file(path));
            } catch (const json::parse_error& e) {
                throw ValidationError(path.string() + " is not valid JSON: " + e.what());
            }
            out << format_report(rows_from_json(j), lm::ledger_from_json(j.value("ledger", json::object())),
                                 cfg.report_style);
            return 0;
        }

        pipeline::Workspace ws(cfg.run);
        if (command == "split") {
            ws.run_split();
            out << "split: " << ws.train_split().dialogues.size() << " dialogues, " << ws.train_split().turn_count()
                << " turns\n";
        } else if (command == "index") {
            ws.run_index();
            out << "index: " << ws.index().size() << " entries\n";
        } else if (command == "collect") {
            ws.run_collect();
            const auto& d = ws.demonstrations();
            out << "collect: " << d.hypotheses.size() << " hypotheses, " << d.failures.size() << " failures\n";
        } else if (command == "export-train") {
            const auto s = ws.run_export_train();
            out << "export-train: " << s.sequences.size() << " sequences, " << s.skipped << " skipped\n";
        } else if (command == "export-retriever-pairs") {
            const auto s = ws.run_export_pairs();
            out << "export-retriever-pairs: " << s.lines << " pairs over " << s.anchors << " anchors\n";
        } else if (command == "first-pass") {
            ws.run_first_pass();
            out << "first-pass: " << ws.first_runs().size() << " dialogues\n";
        } else if (command == "second-pass") {
            ws.run_second_pass();
            out << "second-pass: " << ws.final_runs().size() << " dialogues\n";
        } else if (command == "evaluate") {
            ws.run_evaluate(cfg.predictions);
            print_file(ws.dir() / (cfg.report_style == ReportStyle::Json ? pipeline::files::kReportJson
                                                                         : pipeline::files::kReportText),
                       out);
        }
        return 0;
    } catch (const StageError& e) {
        err << "error: " << e.what() << "\n";
        return e.is_validation() ? 1 : 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

int run_main(int argc, char** argv, char** envp, std::ostream& out, std::ostream& err) {
    CLI::App app{"Two-pass dialogue state tracking toolkit"};
    std::string command;
    std::string config_path;
    std::map<std::string, std::string> values;
    app.add_option("command", command, "one of: split, index, collect, export-train, export-retriever-pairs, "
                                       "first-pass, second-pass, evaluate, report, run")
        ->required();
    app.add_option("-c,--config", config_path, "JSON config file");
    for (const auto& key : config_keys()) {
        app.add_option("--" + kebab(key), values[key], "overrides '" + key + "'");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 1;
    }

    Overrides flags;
    for (const auto& key : config_keys()) {
        if (app.get_option("--" + kebab(key))->count() > 0) flags[key] = values[key];
    }

    CliConfig cfg;
    try {
        cfg = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path), flags,
                          environment_overrides(envp));
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    std::signal(SIGINT, on_sigint);
    return dispatch(command, cfg, out, err);
}

}  // namespace corrdst::cli
