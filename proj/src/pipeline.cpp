#include "corrdst/pipeline.hpp"

#include <algorithm>
#include <sstream>
#include <type_traits>

#include "corrdst/digest.hpp"
#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"
#include "corrdst/parallel.hpp"
#include "corrdst/report.hpp"
#include "corrdst/rng.hpp"

namespace corrdst::pipeline {

using nlohmann::json;

namespace {

constexpr const char* kFirstPass = "first";
constexpr const char* kSecondPass = "second";
constexpr const char* kCollectPass = "collect";

const std::vector<std::string> kRequiredStages = {"load",       "split",       "index",   "collect",
                                                  "first-pass", "second-pass", "evaluate"};
const std::vector<std::string> kCallingStages = {"collect", "first-pass", "second-pass"};

void check_keys(const json& spec, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!spec.is_object()) throw ValidationError(where + ": backend spec must be an object");
    for (const auto& [key, value] : spec.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
            throw ValidationError(where + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
T get_or(const json& spec, const char* key, T fallback, const std::string& where) {
    if (!spec.contains(key)) return fallback;
    try {
        return spec.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(where + ": key '" + key + "' has the wrong type");
    }
}

template <typename T>
T get_required(const json& spec, const char* key, const std::string& where) {
    if (!spec.contains(key)) throw ValidationError(where + ": missing key '" + key + "'");
    return get_or<T>(spec, key, T{}, where);
}

std::string kind_of(const json& spec, const std::string& where) {
    if (!spec.is_object() || !spec.contains("kind") || !spec["kind"].is_string()) {
        throw ValidationError(where + ": backend spec needs a string 'kind'");
    }
    return spec["kind"].get<std::string>();
}

std::string fmt_double(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

std::set<std::string> ids_of_dialogue(const retrieval::Index& index, const std::string& dialogue_id) {
    std::set<std::string> out;
    for (const auto& e : index.entries()) {
        if (e.payload.dialogue_id == dialogue_id) out.insert(e.example_id);
    }
    return out;
}

json trace_to_json(const PassTrace& t) {
    return {{"prompt_digest", t.prompt_digest},
            {"completion", t.completion},
            {"diagnostics", t.diagnostics},
            {"prompt_tokens", t.prompt_tokens},
            {"completion_tokens", t.completion_tokens}};
}

PassTrace trace_from_json(const json& j) {
    PassTrace t;
    t.prompt_digest = j.at("prompt_digest").get<std::string>();
    t.completion = j.at("completion").get<std::string>();
    t.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
    t.prompt_tokens = j.at("prompt_tokens").get<std::int64_t>();
    t.completion_tokens = j.at("completion_tokens").get<std::int64_t>();
    return t;
}

struct Completed {
    PassTrace trace;
    TurnBelief tlb;
};

/// One backend call plus parse. Strict-mode parse failures surface as ValidationError.
Completed complete_and_parse(lm::Backend& backend, const std::string& prompt_text, const std::string& tag,
                             const RunConfig& cfg) {
    lm::CompletionRequest req;
    req.prompt_text = prompt_text;
    req.max_new_tokens = cfg.max_new_tokens;
    req.request_tag = tag;
    auto resp = backend.complete(req);
    auto parsed = prompt::parse_tlb(resp.text, cfg.strict_parsing);
    return {PassTrace{lm::request_digest(req), resp.text, std::move(parsed.diagnostics), resp.prompt_tokens,
                      resp.completion_tokens},
            std::move(parsed.tlb)};
}

std::string turn_tag(const std::string& dialogue_id, int turn, const char* pass) {
    return example_id(dialogue_id, turn) + ":" + pass;
}

lm::LedgerSnapshot subtract(const lm::LedgerSnapshot& after, const lm::LedgerSnapshot& before) {
    lm::LedgerSnapshot out;
    for (const auto& [id, a] : after) {
        lm::LedgerTotals d = a;
        if (auto it = before.find(id); it != before.end()) {
            d.calls -= it->second.calls;
            d.prompt_tokens -= it->second.prompt_tokens;
            d.completion_tokens -= it->second.completion_tokens;
            d.errors -= it->second.errors;
            d.retries -= it->second.retries;
        }
        if (d.calls || d.errors || d.retries) out[id] = d;
    }
    return out;
}

}  // namespace

void RunConfig::validate() const {
    auto need_path = [](const std::filesystem::path& p, const char* key) {
        if (p.empty()) throw ValidationError(std::string("missing required key '") + key + "'");
    };
    need_path(train_path, "train_path");
    need_path(eval_path, "eval_path");
    need_path(schema_path, "schema_path");
    need_path(output_dir, "output_dir");
    style.validate();
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("'fraction' must lie in (0, 1]");
    if (num_demos < 1) throw ValidationError("'num_demos' must be >= 1");
    if (pairs_per_anchor < 1) throw ValidationError("'pairs_per_anchor' must be >= 1");
    if (max_new_tokens < 1) throw ValidationError("'max_new_tokens' must be >= 1");
    if (max_concurrency < 1) throw ValidationError("'max_concurrency' must be >= 1");
    if (record_path && replay_path) throw ValidationError("'record' and 'replay' are mutually exclusive");
    kind_of(inference_backend, "inference_backend");
    kind_of(correction_backend, "correction_backend");
    kind_of(embedding_backend, "embedding_backend");
}

json RunConfig::to_json() const {
    auto opt_path = [](const std::optional<std::filesystem::path>& p) { return p ? json(p->string()) : json(); };
    return {{"train_path", train_path.string()},
            {"eval_path", eval_path.string()},
            {"schema_path", schema_path.string()},
            {"synonyms_path", opt_path(synonyms_path)},
            {"output_dir", output_dir.string()},
            {"style", std::string(prompt::to_string(style.kind))},
            {"k", style.k},
            {"width", style.width},
            {"fraction", fraction},
            {"split_seed", split_seed},
            {"demo_seed", demo_seed},
            {"pair_seed", pair_seed},
            {"num_demos", num_demos},
            {"pairs_per_anchor", pairs_per_anchor},
            {"max_new_tokens", max_new_tokens},
            {"strict_parsing", strict_parsing},
            {"strict_load", strict_load},
            {"max_concurrency", max_concurrency},
            {"instruction", instruction ? json(*instruction) : json()},
            {"inference_backend", inference_backend},
            {"correction_backend", correction_backend},
            {"embedding_backend", embedding_backend},
            {"export_training", export_training},
            {"export_retriever_pairs", export_retriever_pairs},
            {"record", opt_path(record_path)},
            {"replay", opt_path(replay_path)}};
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

std::map<std::string, TurnBelief> gold_lookup(const std::vector<const DatasetSplit*>& splits) {
    std::map<std::string, TurnBelief> out;
    for (const auto* split : splits) {
        for (const auto& d : split->dialogues) {
            for (const auto& t : d.turns) out.emplace(example_id(d.dialogue_id, t.index), t.gold_tlb);
        }
    }
    return out;
}

void Backends::flush() const {
    if (recording) recording->save();
}

std::shared_ptr<lm::Backend> make_lm_backend(const json& spec, const std::string& role,
                                             const std::map<std::string, TurnBelief>& gold, const SchemaTable& schema,
                                             const std::shared_ptr<lm::CostLedger>& ledger) {
    const std::string where = role + "_backend";
    const std::string kind = kind_of(spec, where);
    if (kind == "oracle") {
        check_keys(spec, {"kind", "p", "seed", "params"}, where);
        const double p = get_or<double>(spec, "p", 0.0, where);
        const auto seed = get_or<std::uint64_t>(spec, "seed", 0, where);
        const double params = get_or<double>(spec, "params", lm::Backend::kDefaultParams, where);
        const std::string id = role + ":oracle(p=" + fmt_double(p) + ",seed=" + std::to_string(seed) + ")";
        return std::make_shared<lm::OracleNoiseBackend>(id, p, seed, gold, schema, ledger, params);
    }
    if (kind == "echo") {
        check_keys(spec, {"kind", "params"}, where);
        return std::make_shared<lm::EchoBackend>(role + ":echo", ledger,
                                                 get_or<double>(spec, "params", lm::Backend::kDefaultParams, where));
    }
    if (kind == "http") {
        check_keys(spec, {"kind", "url", "model", "chat", "api_key_env", "timeout_seconds", "max_attempts",
                          "backoff_ms", "max_concurrency", "params"},
                   where);
        lm::HttpOptions o;
        o.url = get_required<std::string>(spec, "url", where);
        o.model = get_required<std::string>(spec, "model", where);
        o.chat = get_or<bool>(spec, "chat", o.chat, where);
        o.api_key_env = get_or<std::string>(spec, "api_key_env", o.api_key_env, where);
        o.timeout_seconds = get_or<double>(spec, "timeout_seconds", o.timeout_seconds, where);
        o.max_attempts = get_or<int>(spec, "max_attempts", o.max_attempts, where);
        o.backoff_ms = get_or<int>(spec, "backoff_ms", o.backoff_ms, where);
        o.max_concurrency = get_or<int>(spec, "max_concurrency", o.max_concurrency, where);
        const double params = get_or<double>(spec, "params", lm::Backend::kDefaultParams, where);
        const std::string id = role + ":http(" + o.model + ")";
        return std::make_shared<lm::HttpBackend>(id, std::move(o), ledger, params);
    }
    if (kind == "replay") {
        check_keys(spec, {"kind", "path", "params"}, where);
        const std::filesystem::path path = get_required<std::string>(spec, "path", where);
        if (!std::filesystem::exists(path)) throw ValidationError(where + ": recording " + path.string() + " not found");
        return std::make_shared<lm::ReplayBackend>(role + ":replay", lm::RecordingStore::open(path), ledger,
                                                   get_or<double>(spec, "params", lm::Backend::kDefaultParams, where));
    }
    if (kind == "record") {
        check_keys(spec, {"kind", "path", "inner"}, where);
        const std::filesystem::path path = get_required<std::string>(spec, "path", where);
        if (!spec.contains("inner")) throw ValidationError(where + ": missing key 'inner'");
        auto inner = make_lm_backend(spec["inner"], role, gold, schema, ledger);
        return std::make_shared<lm::RecordBackend>(std::move(inner), lm::RecordingStore::open(path));
    }
    throw ValidationError(where + ": unknown backend kind '" + kind + "'");
}

std::shared_ptr<retrieval::EmbeddingBackend> make_embedding_backend(const json& spec) {
    const std::string where = "embedding_backend";
    const std::string kind = kind_of(spec, where);
    if (kind == "hash") {
        check_keys(spec, {"kind", "dim", "seed"}, where);
        const int dim = get_or<int>(spec, "dim", 256, where);
        if (dim < 1) throw ValidationError(where + ": 'dim' must be positive");
        return std::make_shared<retrieval::HashEmbeddingBackend>(static_cast<std::size_t>(dim),
                                                                 get_or<std::uint64_t>(spec, "seed", 0, where));
    }
    if (kind == "http") {
        check_keys(spec, {"kind", "url", "model", "api_key_env", "timeout_seconds", "max_attempts", "backoff_ms",
                          "max_concurrency", "batch_size"},
                   where);
        retrieval::HttpEmbeddingOptions o;
        o.url = get_required<std::string>(spec, "url", where);
        o.model = get_or<std::string>(spec, "model", o.model, where);
        o.api_key_env = get_or<std::string>(spec, "api_key_env", o.api_key_env, where);
        o.timeout_seconds = get_or<double>(spec, "timeout_seconds", o.timeout_seconds, where);
        o.max_attempts = get_or<int>(spec, "max_attempts", o.max_attempts, where);
        o.backoff_ms = get_or<int>(spec, "backoff_ms", o.backoff_ms, where);
        o.max_concurrency = get_or<int>(spec, "max_concurrency", o.max_concurrency, where);
        o.batch_size = get_or<std::size_t>(spec, "batch_size", o.batch_size, where);
        return std::make_shared<retrieval::HttpEmbeddingBackend>(std::move(o));
    }
    throw ValidationError(where + ": unknown backend kind '" + kind + "'");
}

Backends make_backends(const RunConfig& cfg, const std::map<std::string, TurnBelief>& gold, const SchemaTable& schema) {
    Backends b;
    b.ledger = std::make_shared<lm::CostLedger>();
    b.embedding = make_embedding_backend(cfg.embedding_backend);
    if (cfg.replay_path) {
        if (!std::filesystem::exists(*cfg.replay_path)) {
            throw ValidationError("replay recording " + cfg.replay_path->string() + " not found");
        }
        auto store = lm::RecordingStore::open(*cfg.replay_path);
        auto params = [&](const json& spec) {
            return spec.is_object() && spec.contains("params") ? spec["params"].get<double>()
                                                                : lm::Backend::kDefaultParams;
        };
        b.inference = std::make_shared<lm::ReplayBackend>("inference:replay", store, b.ledger,
                                                          params(cfg.inference_backend));
        b.correction = std::make_shared<lm::ReplayBackend>("correction:replay", store, b.ledger,
                                                           params(cfg.correction_backend));
        return b;
    }
    b.inference = make_lm_backend(cfg.inference_backend, "inference", gold, schema, b.ledger);
    b.correction = make_lm_backend(cfg.correction_backend, "correction", gold, schema, b.ledger);
    if (cfg.record_path) {
        b.recording = lm::RecordingStore::open(*cfg.record_path);
        b.inference = std::make_shared<lm::RecordBackend>(b.inference, b.recording);
        b.correction = std::make_shared<lm::RecordBackend>(b.correction, b.recording);
    }
    return b;
}

std::atomic<bool>& cancellation() {
    static std::atomic<bool> flag{false};
    return flag;
}

prompt::Exemplar to_exemplar(const retrieval::IndexEntry& entry, const prompt::PromptStyle& style,
                             const SchemaTable& schema) {
    prompt::Exemplar ex;
    if (style.is_sgd()) ex.schema_local = prompt::schema_subset(schema, entry.payload.domains);
    ex.prev_state = entry.payload.prev_state;
    ex.ctx = entry.payload.ctx;
    if (style.is_correction()) {
        if (!entry.payload.hypothesis) {
            throw ValidationError("exemplar '" + entry.example_id + "' has no stored hypothesis");
        }
        ex.hypothesis = entry.payload.hypothesis;
    }
    ex.gold_tlb = entry.payload.gold_tlb;
    return ex;
}

SchemaTable target_schema(const prompt::PromptStyle& style, const SchemaTable& schema, const Dialogue& d) {
    return style.is_sgd() ? prompt::schema_subset(schema, d.domains) : schema;
}

DialogueRun first_pass_dialogue(const Dialogue& d, const retrieval::Index& index, const SchemaTable& schema,
                                lm::Backend& inference, retrieval::EmbeddingBackend& embedding, const RunConfig& cfg) {
    const auto style = cfg.style.as_inference();
    const auto tschema = target_schema(style, schema, d);
    const auto exclude = ids_of_dialogue(index, d.dialogue_id);

    DialogueRun run{d.dialogue_id, {}, std::nullopt};
    DialogueState state;
    for (const auto& turn : d.turns) {
        if (cancellation()) {
            run.error = "cancelled";
            break;
        }
        PredictionRecord rec;
        rec.turn.dialogue_id = d.dialogue_id;
        rec.turn.turn = turn.index;
        rec.turn.gold_tlb = turn.gold_tlb;
        rec.turn.gold_state = turn.gold_state;

        const auto ctx = context_window(d, turn.index, style.width);
        std::vector<prompt::Exemplar> exemplars;
        try {
            const auto query = embedding.embed(retrieval::serialize_for_embedding(state, ctx));
            for (const auto& hit : retrieval::retrieve(index, query, style.k, exclude).hits) {
                rec.retrieved.push_back({hit.entry->example_id, hit.score});
                exemplars.push_back(to_exemplar(*hit.entry, style, schema));
            }
        } catch (const BackendError& e) {
            run.error = example_id(d.dialogue_id, turn.index) + ": " + e.what();
            break;
        }
        const auto prompt = prompt::build_inference_prompt(style, tschema, exemplars, state, ctx);
        try {
            auto done = complete_and_parse(inference, prompt.text, turn_tag(d.dialogue_id, turn.index, kFirstPass), cfg);
            rec.first = std::move(done.trace);
            rec.turn.hyp_tlb_first = std::move(done.tlb);
        } catch (const Error& e) {
            if (!dynamic_cast<const BackendError*>(&e) && !cfg.strict_parsing) throw;
            run.error = example_id(d.dialogue_id, turn.index) + ": " + e.what();
            break;
        }
        state = aggregate_state(state, rec.turn.hyp_tlb_first);
        rec.turn.hyp_state_first = state;
        run.records.push_back(std::move(rec));
    }
    if (run.error) {
        for (auto& r : run.records) r.error = run.error;
    }
    return run;
}

DialogueRun second_pass_dialogue(const Dialogue& d, std::vector<PredictionRecord> records,
                                 const retrieval::Index& index_with_hypotheses, const SchemaTable& schema,
                                 lm::Backend& correction, const RunConfig& cfg) {
    if (records.size() != d.turns.size()) {
        throw ValidationError("dialogue '" + d.dialogue_id + "' has an incomplete first pass (" +
                              std::to_string(records.size()) + " of " + std::to_string(d.turns.size()) + " turns)");
    }
    const auto style = cfg.style.as_correction();
    const auto tschema = target_schema(style, schema, d);

    std::vector<std::vector<prompt::Exemplar>> exemplars(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (const auto& r : records[i].retrieved) {
            const auto* entry = index_with_hypotheses.find(r.example_id);
            if (!entry) throw ValidationError("retrieved exemplar '" + r.example_id + "' is not in the index");
            if (!entry->payload.hypothesis) {
                throw ValidationError("retrieved exemplar '" + r.example_id +
                                      "' has no stored hypothesis; run collect first");
            }
            exemplars[i].push_back(to_exemplar(*entry, style, schema));
        }
    }

    DialogueRun run{d.dialogue_id, {}, std::nullopt};
    DialogueState prev_first;
    DialogueState prev_final;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& rec = records[i];
        rec.second.reset();
        rec.turn.hyp_tlb_final.reset();
        rec.turn.hyp_state_final.reset();
        if (cancellation()) {
            run.error = "cancelled";
            break;
        }
        const int t = rec.turn.turn;
        const auto ctx = context_window(d, t, style.width);
        const auto prompt = prompt::build_correction_prompt(style, tschema, exemplars[i], prev_first, ctx,
                                                            rec.turn.hyp_tlb_first, cfg.instruction);
        try {
            auto done = complete_and_parse(correction, prompt.text, turn_tag(d.dialogue_id, t, kSecondPass), cfg);
            rec.second = std::move(done.trace);
            prev_final = aggregate_state(prev_final, done.tlb);
            rec.turn.hyp_tlb_final = std::move(done.tlb);
            rec.turn.hyp_state_final = prev_final;
        } catch (const Error& e) {
            if (!dynamic_cast<const BackendError*>(&e) && !cfg.strict_parsing) throw;
            run.error = example_id(d.dialogue_id, t) + ": " + e.what();
            break;
        }
        prev_first = rec.turn.hyp_state_first;
    }
    if (run.error) {
        for (auto& r : records) r.error = run.error;
    }
    run.records = std::move(records);
    return run;
}

std::vector<DialogueRun> run_first_pass(const DatasetSplit& eval, const retrieval::Index& index,
                                        const SchemaTable& schema, const Backends& backends, const RunConfig& cfg) {
    std::vector<DialogueRun> out(eval.dialogues.size());
    parallel_for(eval.dialogues.size(), cfg.max_concurrency, [&](std::size_t i) {
        out[i] = first_pass_dialogue(eval.dialogues[i], index, schema, *backends.inference, *backends.embedding, cfg);
    });
    return out;
}

std::vector<DialogueRun> run_second_pass(const DatasetSplit& eval, std::vector<DialogueRun> first,
                                         const retrieval::Index& index_with_hypotheses, const SchemaTable& schema,
                                         const Backends& backends, const RunConfig& cfg) {
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < first.size(); ++i) by_id.emplace(first[i].dialogue_id, i);
    std::vector<DialogueRun> out(eval.dialogues.size());
    parallel_for(eval.dialogues.size(), cfg.max_concurrency, [&](std::size_t i) {
        const auto& d = eval.dialogues[i];
        auto it = by_id.find(d.dialogue_id);
        if (it == by_id.end()) throw ValidationError("no first-pass records for dialogue '" + d.dialogue_id + "'");
        out[i] = second_pass_dialogue(d, std::move(first[it->second].records), index_with_hypotheses, schema,
                                      *backends.correction, cfg);
    });
    return out;
}

json Demonstrations::to_json() const {
    json hyps = json::object();
    for (const auto& [id, tlb] : hypotheses) hyps[id] = corrdst::to_json(tlb);
    return {{"demo_ids", demo_ids},
            {"hypotheses", hyps},
            {"exemplars_used", exemplars_used},
            {"diagnostics", diagnostics},
            {"failures", failures},
            {"prev_state_source", "gold"}};
}

Demonstrations Demonstrations::from_json(const json& j) {
    Demonstrations d;
    try {
        d.demo_ids = j.at("demo_ids").get<std::vector<std::string>>();
        for (const auto& [id, tlb] : j.at("hypotheses").items()) d.hypotheses.emplace(id, tlb_from_json(tlb));
        d.exemplars_used = j.at("exemplars_used").get<std::map<std::string, std::vector<std::string>>>();
        d.diagnostics = j.at("diagnostics").get<std::map<std::string, std::vector<std::string>>>();
        d.failures = j.at("failures").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed demonstrations file: ") + e.what());
    }
    return d;
}

Demonstrations collect_demonstrations(const DatasetSplit& train, const SchemaTable& schema, lm::Backend& backend,
                                      const RunConfig& cfg) {
    auto style = cfg.style.as_inference();
    style.k = std::max(style.k, cfg.num_demos);
    const auto examples = retrieval::training_examples(train, style.width);
    if (examples.empty()) throw ValidationError("cannot collect demonstrations from an empty training split");
    const auto n = static_cast<std::size_t>(cfg.num_demos);
    if (examples.size() < n) {
        throw ValidationError("training split has " + std::to_string(examples.size()) + " turns, fewer than the " +
                              std::to_string(n) + " demonstrations required");
    }

    std::vector<std::string> ids;
    ids.reserve(examples.size());
    for (const auto& ex : examples) ids.push_back(example_id(ex.dialogue_id, ex.turn));

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
    Rng rng(cfg.demo_seed, "demonstrations");
    for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
    std::vector<std::size_t> demo_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(demo_idx.begin(), demo_idx.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });

    std::vector<prompt::Exemplar> demos;
    Demonstrations out;
    for (auto i : demo_idx) {
        const auto& ex = examples[i];
        prompt::Exemplar e;
        if (style.is_sgd()) e.schema_local = prompt::schema_subset(schema, ex.domains);
        e.prev_state = ex.prev_state;
        e.ctx = ex.ctx;
        e.gold_tlb = ex.gold_tlb;
        demos.push_back(std::move(e));
        out.demo_ids.push_back(ids[i]);
    }

    struct Slot {
        std::optional<Completed> done;
        std::vector<std::string> used;
        std::string failure;
    };
    std::vector<Slot> slots(examples.size());
    parallel_for(examples.size(), cfg.max_concurrency, [&](std::size_t i) {
        if (cancellation()) throw Cancelled();
        const auto& ex = examples[i];
        std::vector<prompt::Exemplar> shown;
        for (std::size_t j = 0; j < demo_idx.size(); ++j) {
            if (demo_idx[j] == i) continue;
            shown.push_back(demos[j]);
            slots[i].used.push_back(out.demo_ids[j]);
        }
        const SchemaTable tschema = style.is_sgd() ? prompt::schema_subset(schema, ex.domains) : schema;
        const auto prompt = prompt::build_inference_prompt(style, tschema, shown, ex.prev_state, ex.ctx);
        try {
            slots[i].done = complete_and_parse(backend, prompt.text, turn_tag(ex.dialogue_id, ex.turn, kCollectPass), cfg);
        } catch (const Error& e) {
            if (!dynamic_cast<const BackendError*>(&e) && !cfg.strict_parsing) throw;
            slots[i].failure = e.what();
        }
    });

    for (std::size_t i = 0; i < examples.size(); ++i) {
        out.exemplars_used[ids[i]] = slots[i].used;
        if (slots[i].done) {
            out.hypotheses[ids[i]] = slots[i].done->tlb;
            if (!slots[i].done->trace.diagnostics.empty()) out.diagnostics[ids[i]] = slots[i].done->trace.diagnostics;
        } else {
            out.failures[ids[i]] = slots[i].failure;
        }
    }
    return out;
}

ExportSummary build_training_sequences(const DatasetSplit& train, const retrieval::Index& index_with_hypotheses,
                                       const SchemaTable& schema, const RunConfig& cfg) {
    const auto style = cfg.style.as_correction();
    std::set<std::string> without_hypothesis;
    for (const auto& e : index_with_hypotheses.entries()) {
        if (!e.payload.hypothesis) without_hypothesis.insert(e.example_id);
    }

    ExportSummary summary;
    for (const auto& d : train.dialogues) {
        const auto tschema = target_schema(style, schema, d);
        for (const auto& turn : d.turns) {
            const auto id = example_id(d.dialogue_id, turn.index);
            const auto* entry = index_with_hypotheses.find(id);
            if (!entry) throw ValidationError("index does not cover training turn '" + id + "'");
            if (!entry->payload.hypothesis) {
                ++summary.skipped;
                continue;
            }
            auto exclude = without_hypothesis;
            exclude.insert(id);
            TrainingSequence seq;
            seq.example_id = id;
            seq.style = std::string(prompt::to_string(style.kind));
            std::vector<prompt::Exemplar> exemplars;
            for (const auto& hit : retrieval::retrieve(index_with_hypotheses, entry->vector, style.k, exclude).hits) {
                seq.retrieved.push_back(hit.entry->example_id);
                exemplars.push_back(to_exemplar(*hit.entry, style, schema));
            }
            const auto& p = entry->payload;
            auto text = prompt::render_training_sequence(style, tschema, exemplars, p.prev_state, p.ctx, *p.hypothesis,
                                                         p.gold_tlb, cfg.instruction);
            seq.full_text = std::move(text.full_text);
            seq.target_start = text.target_start;
            seq.target_end = text.target_end;
            summary.sequences.push_back(std::move(seq));
        }
    }
    return summary;
}

void write_training_sequences(const std::filesystem::path& path, const ExportSummary& summary) {
    std::string out;
    for (const auto& s : summary.sequences) {
        json j = {{"example_id", s.example_id},
                  {"text", s.full_text},
                  {"target_start", s.target_start},
                  {"target_end", s.target_end},
                  {"meta", {{"retrieved", s.retrieved}, {"style", s.style}}}};
        out += dump_line(j);
        out += '\n';
    }
    write_file(path, out);
}

json record_to_json(const PredictionRecord& r, const Dialogue& d) {
    const auto& t = r.turn;
    const auto& turn = d.turn(t.turn);
    json retrieved = json::array();
    for (const auto& h : r.retrieved) retrieved.push_back({{"example_id", h.example_id}, {"score", h.score}});
    json j = {{"dialogue_id", t.dialogue_id},
              {"turn", t.turn},
              {"system", turn.system_utterance},
              {"user", turn.user_utterance},
              {"tlb", to_json(t.gold_tlb)},
              {"state", to_json(t.gold_state)},
              {"hyp_tlb_first", to_json(t.hyp_tlb_first)},
              {"hyp_state_first", to_json(t.hyp_state_first)},
              {"retrieved", retrieved}};
    if (r.first) j["first"] = trace_to_json(*r.first);
    if (t.hyp_tlb_final) j["hyp_tlb_final"] = to_json(*t.hyp_tlb_final);
    if (t.hyp_state_final) j["hyp_state_final"] = to_json(*t.hyp_state_final);
    if (r.second) j["second"] = trace_to_json(*r.second);
    if (r.error) j["error"] = *r.error;
    return j;
}

void write_predictions(const std::filesystem::path& path, const DatasetSplit& eval, const std::vector<DialogueRun>& runs) {
    std::vector<const DialogueRun*> sorted;
    for (const auto& r : runs) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(),
              [](const DialogueRun* a, const DialogueRun* b) { return a->dialogue_id < b->dialogue_id; });
    std::string out;
    for (const auto* run : sorted) {
        const auto* d = eval.find(run->dialogue_id);
        if (!d) throw ValidationError("dialogue '" + run->dialogue_id + "' is not in the evaluation split");
        for (const auto& r : run->records) {
            out += dump_line(record_to_json(r, *d));
            out += '\n';
        }
    }
    write_file(path, out);
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
    std::vector<PredictionRecord> out;
    std::size_t lineno = 0;
    for (const auto& j : read_jsonl(path)) {
        ++lineno;
        PredictionRecord r;
        try {
            auto& t = r.turn;
            t.dialogue_id = j.at("dialogue_id").get<std::string>();
            t.turn = j.at("turn").get<int>();
            t.gold_tlb = tlb_from_json(j.at("tlb"));
            t.gold_state = state_from_json(j.at("state"));
            t.hyp_tlb_first = tlb_from_json(j.at("hyp_tlb_first"));
            t.hyp_state_first = state_from_json(j.at("hyp_state_first"));
            if (j.contains("hyp_tlb_final")) t.hyp_tlb_final = tlb_from_json(j["hyp_tlb_final"]);
            if (j.contains("hyp_state_final")) t.hyp_state_final = state_from_json(j["hyp_state_final"]);
            if (j.contains("retrieved")) {
                for (const auto& h : j["retrieved"]) {
                    r.retrieved.push_back({h.at("example_id").get<std::string>(), h.at("score").get<double>()});
                }
            }
            if (j.contains("first")) r.first = trace_from_json(j["first"]);
            if (j.contains("second")) r.second = trace_from_json(j["second"]);
            if (j.contains("error")) r.error = j["error"].get<std::string>();
        } catch (const json::exception& e) {
            throw ParseError(path.string(), lineno, e.what());
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), lineno, e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<DialogueRun> group_by_dialogue(const DatasetSplit& eval, const std::vector<PredictionRecord>& records) {
    std::map<std::string, std::vector<PredictionRecord>> grouped;
    for (const auto& r : records) {
        if (!eval.find(r.turn.dialogue_id)) {
            throw ValidationError("prediction for dialogue '" + r.turn.dialogue_id + "' is not in the evaluation split");
        }
        grouped[r.turn.dialogue_id].push_back(r);
    }
    std::vector<DialogueRun> out;
    for (const auto& d : eval.dialogues) {
        auto it = grouped.find(d.dialogue_id);
        if (it == grouped.end()) continue;
        DialogueRun run{d.dialogue_id, std::move(it->second), std::nullopt};
        std::sort(run.records.begin(), run.records.end(),
                  [](const PredictionRecord& a, const PredictionRecord& b) { return a.turn.turn < b.turn.turn; });
        for (const auto& r : run.records) {
            if (r.error) run.error = r.error;
        }
        out.push_back(std::move(run));
    }
    return out;
}

std::vector<metrics::TurnRecord> turn_records(const std::vector<DialogueRun>& runs) {
    std::vector<metrics::TurnRecord> out;
    for (const auto& run : runs) {
        for (const auto& r : run.records) out.push_back(r.turn);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Workspace

namespace {

json split_to_json(const DatasetSplit& split, const RunConfig& cfg) {
    std::vector<std::string> ids;
    for (const auto& d : split.dialogues) ids.push_back(d.dialogue_id);
    return {{"name", split.name},
            {"fraction", cfg.fraction},
            {"seed", cfg.split_seed},
            {"dialogue_ids", ids},
            {"turns", split.turn_count()}};
}

DatasetSplit split_from_json(const json& j, const DatasetSplit& full) {
    DatasetSplit out;
    out.name = j.at("name").get<std::string>();
    auto ids = j.at("dialogue_ids").get<std::vector<std::string>>();
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
        const auto* d = full.find(id);
        if (!d) throw ValidationError("split lists unknown dialogue '" + id + "'");
        out.dialogues.push_back(*d);
        out.domain_set.insert(d->domains.begin(), d->domains.end());
    }
    return out;
}

}  // namespace

Workspace::Workspace(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto manifest = dir() / files::kManifest;
    if (std::filesystem::exists(manifest)) {
        try {
            const auto j = json::parse(read_file(manifest));
            if (j.value("config_hash", "") == cfg_.hash() && j.contains("stages")) stages_ = j["stages"];
        } catch (const json::exception&) {
        }
    }
}

Workspace::~Workspace() {
    try {
        if (backends_) backends_->flush();
    } catch (...) {
    }
}

template <typename Fn>
auto Workspace::stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    if (cancellation()) throw Cancelled();
    const auto before = backends_ ? backends_->ledger->snapshot() : lm::LedgerSnapshot{};
    auto finish = [&](const std::string& status, const std::string& detail) {
        std::filesystem::create_directories(dir());
        write_stage_ledger(name, before);
        record_stage(name, status, detail);
    };
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            finish("ok", "");
        } else {
            auto result = fn();
            finish("ok", "");
            return result;
        }
    } catch (const Cancelled&) {
        finish("interrupted", "cancelled");
        throw;
    } catch (const StageError& e) {
        finish("failed", e.what());
        throw;
    } catch (const ValidationError& e) {
        finish("failed", e.what());
        throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
        finish("failed", e.what());
        throw StageError(name, e.what(), false);
    }
}

void Workspace::require_file(const char* file, const char* producer) const {
    if (!std::filesystem::exists(dir() / file)) {
        throw DependencyError("missing " + (dir() / file).string() + "; run '" + producer + "' first");
    }
}

void Workspace::record_stage(const std::string& name, const std::string& status, const std::string& detail) {
    json entry = {{"status", status}};
    if (!detail.empty()) entry["detail"] = detail;
    stages_[name] = entry;
    write_manifest();
}

void Workspace::write_manifest() const {
    bool complete = true;
    for (const auto& s : kRequiredStages) {
        complete = complete && stages_.contains(s) && stages_[s].value("status", "") == "ok";
    }
    json seeds = {{"split", cfg_.split_seed}, {"demos", cfg_.demo_seed}, {"pairs", cfg_.pair_seed}};
    for (const char* role : {"inference_backend", "correction_backend", "embedding_backend"}) {
        const auto& spec = role == std::string("inference_backend")    ? cfg_.inference_backend
                           : role == std::string("correction_backend") ? cfg_.correction_backend
                                                                        : cfg_.embedding_backend;
        if (spec.is_object() && spec.contains("seed")) seeds[role] = spec["seed"];
    }
    json m = {{"config_hash", cfg_.hash()},
              {"config", cfg_.to_json()},
              {"seeds", seeds},
              {"stages", stages_},
              {"complete", complete},
              {"collection_prev_state", "gold"},
              {"correction_prev_state", "first-pass prediction"}};
    if (inputs_) m["warnings"] = inputs_->warnings;
    std::filesystem::create_directories(dir());
    write_file(dir() / files::kManifest, m.dump(2) + "\n");
}

void Workspace::write_stage_ledger(const std::string& name, const lm::LedgerSnapshot& before) {
    if (std::find(kCallingStages.begin(), kCallingStages.end(), name) == kCallingStages.end()) return;
    const auto delta = backends_ ? subtract(backends_->ledger->snapshot(), before) : lm::LedgerSnapshot{};
    write_file(dir() / ("ledger_" + name + ".json"), lm::ledger_to_json(delta).dump(2) + "\n");
    write_file(dir() / files::kLedger, lm::ledger_to_json(ledger_summary()).dump(2) + "\n");
}

lm::LedgerSnapshot Workspace::ledger_summary() const {
    std::vector<lm::LedgerSnapshot> parts;
    for (const auto& s : kCallingStages) {
        const auto path = dir() / ("ledger_" + s + ".json");
        if (std::filesystem::exists(path)) parts.push_back(lm::ledger_from_json(json::parse(read_file(path))));
    }
    return lm::merge_ledgers(parts);
}

const Inputs& Workspace::inputs() {
    if (inputs_) return *inputs_;
    stage("load", [&] {
        Inputs in;
        in.schema = SchemaTable::load(cfg_.schema_path);
        if (cfg_.synonyms_path) in.synonyms = metrics::SynonymTable::load(*cfg_.synonyms_path);
        auto train = load_dataset(cfg_.train_path, in.schema, {"train", cfg_.strict_load});
        auto eval = load_dataset(cfg_.eval_path, in.schema, {"eval", cfg_.strict_load});
        in.train_full = std::move(train.split);
        in.eval = std::move(eval.split);
        for (auto& w : train.warnings) in.warnings.push_back("train: " + w);
        for (auto& w : eval.warnings) in.warnings.push_back("eval: " + w);
        inputs_ = std::move(in);
    });
    return *inputs_;
}

Backends& Workspace::backends() {
    if (!backends_) {
        const auto& in = inputs();
        if (!gold_) gold_ = gold_lookup({&in.train_full, &in.eval});
        backends_ = make_backends(cfg_, *gold_, in.schema);
    }
    return *backends_;
}

const DatasetSplit& Workspace::train_split() {
    if (!split_) {
        require_file(files::kSplit, "split");
        const auto j = json::parse(read_file(dir() / files::kSplit));
        if (j.value("fraction", -1.0) != cfg_.fraction || j.value("seed", std::uint64_t{0}) != cfg_.split_seed) {
            throw DependencyError(std::string(files::kSplit) +
                                  " was written with a different fraction or seed; rerun 'split'");
        }
        split_ = split_from_json(j, inputs().train_full);
    }
    return *split_;
}

const retrieval::Index& Workspace::index() {
    if (!index_) {
        require_file(files::kIndex, "index");
        index_ = retrieval::Index::load(dir() / files::kIndex, train_split(), cfg_.style.width);
    }
    return *index_;
}

const Demonstrations& Workspace::demonstrations() {
    if (!demos_) {
        require_file(files::kDemonstrations, "collect");
        demos_ = Demonstrations::from_json(json::parse(read_file(dir() / files::kDemonstrations)));
    }
    return *demos_;
}

const std::vector<DialogueRun>& Workspace::first_runs() {
    if (!first_) {
        require_file(files::kPredictionsFirst, "first-pass");
        first_ = group_by_dialogue(inputs().eval, read_predictions(dir() / files::kPredictionsFirst));
    }
    return *first_;
}

const std::vector<DialogueRun>& Workspace::final_runs() {
    if (!final_) {
        require_file(files::kPredictions, "second-pass");
        final_ = group_by_dialogue(inputs().eval, read_predictions(dir() / files::kPredictions));
    }
    return *final_;
}

void Workspace::run_split() {
    stage("split", [&] {
        auto split = sample_low_resource(inputs().train_full, cfg_.fraction, cfg_.split_seed);
        write_file(dir() / files::kSplit, split_to_json(split, cfg_).dump(2) + "\n");
        split_ = std::move(split);
        index_.reset();
    });
}

void Workspace::run_index() {
    stage("index", [&] {
        const auto examples = retrieval::training_examples(train_split(), cfg_.style.width);
        auto idx = retrieval::build_index(examples, *backends().embedding, cfg_.max_concurrency);
        idx.save(dir() / files::kIndex);
        index_ = std::move(idx);
    });
}

void Workspace::run_collect() {
    stage("collect", [&] {
        const auto& split = train_split();
        auto demos = collect_demonstrations(split, inputs().schema, *backends().inference, cfg_);
        write_file(dir() / files::kDemonstrations, demos.to_json().dump(2) + "\n");
        demos_ = std::move(demos);
    });
}

ExportSummary Workspace::run_export_train() {
    return stage("export-train", [&] {
        const auto indexed = index().with_hypotheses(demonstrations().hypotheses);
        auto summary = build_training_sequences(train_split(), indexed, inputs().schema, cfg_);
        write_training_sequences(dir() / files::kTrainingSequences, summary);
        return summary;
    });
}

retrieval::PairExportSummary Workspace::run_export_pairs() {
    return stage("export-retriever-pairs", [&] {
        return retrieval::export_retriever_pairs(train_split(), cfg_.style.width, cfg_.pairs_per_anchor,
                                                 cfg_.pair_seed, dir() / files::kRetrieverPairs);
    });
}

namespace {

void raise_on_failures(const std::vector<DialogueRun>& runs) {
    if (cancellation()) throw Cancelled();
    std::size_t failed = 0;
    std::string first;
    for (const auto& r : runs) {
        if (!r.error) continue;
        if (failed++ == 0) first = *r.error;
    }
    if (failed) {
        throw BackendError(std::to_string(failed) + " dialogue(s) aborted; first failure: " + first);
    }
}

}  // namespace

void Workspace::run_first_pass() {
    stage("first-pass", [&] {
        const auto& in = inputs();
        const auto& idx = index();
        auto runs = pipeline::run_first_pass(in.eval, idx, in.schema, backends(), cfg_);
        write_predictions(dir() / files::kPredictionsFirst, in.eval, runs);
        first_ = std::move(runs);
        final_.reset();
        raise_on_failures(*first_);
    });
}

void Workspace::run_second_pass() {
    stage("second-pass", [&] {
        const auto& in = inputs();
        const auto& first = first_runs();
        const auto indexed = index().with_hypotheses(demonstrations().hypotheses);
        auto runs = pipeline::run_second_pass(in.eval, first, indexed, in.schema, backends(), cfg_);
        write_predictions(dir() / files::kPredictions, in.eval, runs);
        final_ = std::move(runs);
        raise_on_failures(*final_);
    });
}

Evaluation Workspace::run_evaluate(const std::optional<std::filesystem::path>& predictions) {
    return stage("evaluate", [&] {
        const auto& in = inputs();
        std::vector<DialogueRun> runs;
        if (predictions) {
            runs = group_by_dialogue(in.eval, read_predictions(*predictions));
        } else if (final_ || std::filesystem::exists(dir() / files::kPredictions)) {
            runs = final_runs();
        } else if (first_ || std::filesystem::exists(dir() / files::kPredictionsFirst)) {
            runs = first_runs();
        } else {
            throw DependencyError("evaluate needs predictions; run 'first-pass' first");
        }
        const auto records = turn_records(runs);
        const auto& train_domains = std::filesystem::exists(dir() / files::kSplit) || split_
                                        ? train_split().domain_set
                                        : in.train_full.domain_set;
        Evaluation ev;
        ev.first = metrics::breakdown_by_category(records, in.eval, train_domains, in.synonyms, metrics::Mode::First);
        const bool has_final =
            !records.empty() && std::all_of(records.begin(), records.end(),
                                            [](const metrics::TurnRecord& r) { return r.hyp_tlb_final.has_value(); });
        std::vector<cli::ReportRow> rows = {{"first-pass", ev.first}};
        if (has_final) {
            ev.final =
                metrics::breakdown_by_category(records, in.eval, train_domains, in.synonyms, metrics::Mode::Final);
            rows.push_back({"two-pass", *ev.final});
        }
        const auto ledger = ledger_summary();
        write_file(dir() / files::kReportJson, cli::format_report(rows, ledger, cli::ReportStyle::Json));
        write_file(dir() / files::kReportText, cli::format_report(rows, ledger, cli::ReportStyle::Table));
        write_file(dir() / files::kLedger, lm::ledger_to_json(ledger).dump(2) + "\n");
        return ev;
    });
}

ExperimentResult run_experiment(const RunConfig& cfg) {
    Workspace ws(cfg);
    ws.inputs();
    ws.run_split();
    ws.run_index();
    ws.run_collect();
    ExperimentResult result;
    if (cfg.export_training) {
        const auto summary = ws.run_export_train();
        result.exported_sequences = summary.sequences.size();
        result.skipped_sequences = summary.skipped;
    }
    if (cfg.export_retriever_pairs) ws.run_export_pairs();
    ws.run_first_pass();
    ws.run_second_pass();
    result.evaluation = ws.run_evaluate();
    ws.backends().flush();
    result.predictions_path = ws.dir() / files::kPredictions;
    result.ledger = ws.ledger_summary();
    return result;
}

}  // namespace corrdst::pipeline
