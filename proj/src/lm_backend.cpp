#include "corrdst/lm_backend.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "corrdst/digest.hpp"
#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"
#include "corrdst/prompting.hpp"
#include "corrdst/rng.hpp"

namespace corrdst::lm {

void CompletionRequest::validate() const {
    if (max_new_tokens < 1) throw ValidationError("completion request: max_new_tokens must be >= 1");
    if (!(temperature >= 0.0)) throw ValidationError("completion request: temperature must be >= 0");
}

std::string request_digest(const CompletionRequest& req) {
    nlohmann::json j;
    j["prompt"] = req.prompt_text;
    j["max_new_tokens"] = req.max_new_tokens;
    j["temperature"] = req.temperature;
    j["stop"] = req.stop_sequences;
    return sha256_hex(j.dump());
}

double estimate_flops(double params, std::int64_t prompt_tokens, std::int64_t completion_tokens) {
    return 2.0 * params * static_cast<double>(prompt_tokens + completion_tokens);
}

double LedgerTotals::flops() const {
    return estimate_flops(params, static_cast<std::int64_t>(prompt_tokens), static_cast<std::int64_t>(completion_tokens));
}

void CostLedger::register_backend(const std::string& backend_id, double params) {
    std::lock_guard lock(mu_);
    totals_[backend_id].params = params;
}

void CostLedger::record_call(const std::string& backend_id, std::int64_t prompt_tokens, std::int64_t completion_tokens) {
    std::lock_guard lock(mu_);
    auto& t = totals_[backend_id];
    t.calls += 1;
    t.prompt_tokens += static_cast<std::uint64_t>(std::max<std::int64_t>(0, prompt_tokens));
    t.completion_tokens += static_cast<std::uint64_t>(std::max<std::int64_t>(0, completion_tokens));
}

void CostLedger::record_error(const std::string& backend_id) {
    std::lock_guard lock(mu_);
    totals_[backend_id].errors += 1;
}

void CostLedger::record_retry(const std::string& backend_id) {
    std::lock_guard lock(mu_);
    totals_[backend_id].retries += 1;
}

LedgerSnapshot CostLedger::snapshot() const {
    std::lock_guard lock(mu_);
    return totals_;
}

double CostLedger::total_flops() const {
    double sum = 0.0;
    for (const auto& [_, t] : snapshot()) sum += t.flops();
    return sum;
}

nlohmann::json ledger_to_json(const LedgerSnapshot& snapshot) {
    nlohmann::json backends = nlohmann::json::object();
    double total = 0.0;
    for (const auto& [id, t] : snapshot) {
        backends[id] = {{"calls", t.calls},
                        {"prompt_tokens", t.prompt_tokens},
                        {"completion_tokens", t.completion_tokens},
                        {"errors", t.errors},
                        {"retries", t.retries},
                        {"params", t.params},
                        {"flops", t.flops()},
                        {"teraflops", t.teraflops()}};
        total += t.flops();
    }
    return {{"backends", backends},
            {"total_flops", total},
            {"total_teraflops", total / 1e12},
            {"flops_formula", "2 * params * (prompt_tokens + completion_tokens), forward-pass estimate"}};
}

LedgerSnapshot ledger_from_json(const nlohmann::json& j) {
    LedgerSnapshot out;
    if (!j.contains("backends")) return out;
    for (const auto& [id, b] : j.at("backends").items()) {
        LedgerTotals t;
        t.calls = b.value("calls", std::uint64_t{0});
        t.prompt_tokens = b.value("prompt_tokens", std::uint64_t{0});
        t.completion_tokens = b.value("completion_tokens", std::uint64_t{0});
        t.errors = b.value("errors", std::uint64_t{0});
        t.retries = b.value("retries", std::uint64_t{0});
        t.params = b.value("params", 0.0);
        out[id] = t;
    }
    return out;
}

LedgerSnapshot merge_ledgers(const std::vector<LedgerSnapshot>& parts) {
    LedgerSnapshot out;
    for (const auto& part : parts) {
        for (const auto& [id, t] : part) {
            auto& m = out[id];
            m.calls += t.calls;
            m.prompt_tokens += t.prompt_tokens;
            m.completion_tokens += t.completion_tokens;
            m.errors += t.errors;
            m.retries += t.retries;
            m.params = t.params;
        }
    }
    return out;
}

Backend::Backend(std::string id, double params, std::shared_ptr<CostLedger> ledger, bool accounts)
    : id_(std::move(id)), params_(params), ledger_(std::move(ledger)), accounts_(accounts) {
    if (!ledger_) ledger_ = std::make_shared<CostLedger>();
    if (accounts_) ledger_->register_backend(id_, params_);
}

namespace {

std::string truncate_at_stop(std::string text, const std::vector<std::string>& stops) {
    // Stops only count once the completion has started: leading blank lines are skipped.
    const auto start = text.find_first_not_of(" \t\r\n");
    if (start == std::string::npos) return {};
    std::size_t cut = text.size();
    for (const auto& s : stops) {
        if (s.empty()) continue;
        cut = std::min(cut, text.find(s, start));
    }
    text.resize(cut);
    return text;
}

}  // namespace

CompletionResponse Backend::complete(const CompletionRequest& req) {
    req.validate();
    Raw raw;
    try {
        raw = do_complete(req);
    } catch (const BackendError&) {
        if (accounts_) ledger_->record_error(id_);
        throw;
    }
    CompletionResponse resp;
    resp.backend_id = id_;
    resp.text = truncate_at_stop(std::move(raw.text), req.stop_sequences);
    resp.prompt_tokens = raw.prompt_tokens.value_or(static_cast<std::int64_t>(prompt::estimate_tokens(req.prompt_text)));
    resp.completion_tokens = raw.completion_tokens.value_or(static_cast<std::int64_t>(prompt::estimate_tokens(resp.text)));
    if (accounts_) ledger_->record_call(id_, resp.prompt_tokens, resp.completion_tokens);
    return resp;
}

RequestTag RequestTag::parse(std::string_view tag) {
    const auto last = tag.rfind(':');
    if (last == std::string_view::npos || last == 0) {
        throw ValidationError("malformed request tag '" + std::string(tag) + "'");
    }
    const auto mid = tag.rfind(':', last - 1);
    if (mid == std::string_view::npos || mid == 0) {
        throw ValidationError("malformed request tag '" + std::string(tag) + "'");
    }
    RequestTag out;
    out.dialogue_id = std::string(tag.substr(0, mid));
    out.pass = std::string(tag.substr(last + 1));
    const auto num = tag.substr(mid + 1, last - mid - 1);
    auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), out.turn);
    if (ec != std::errc{} || ptr != num.data() + num.size() || out.turn < 1) {
        throw ValidationError("malformed turn number in request tag '" + std::string(tag) + "'");
    }
    return out;
}

std::string oracle_noise_complete(const TurnBelief& gold, double p, std::uint64_t seed, std::string_view turn_key,
                                  const SchemaTable& schema) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("oracle noise rate must lie in [0, 1]");
    Rng rng(seed, turn_key);
    if (rng.uniform01() >= p) return prompt::render_tlb(gold);

    std::vector<std::string> spare_slots;
    for (const auto& slot : schema.qualified_slots()) {
        if (!gold.contains(slot)) spare_slots.push_back(slot);
    }
    enum class Op { Drop, Perturb, Inject };
    std::vector<Op> ops;
    if (!gold.empty()) {
        ops.push_back(Op::Drop);
        ops.push_back(Op::Perturb);
    }
    if (!spare_slots.empty()) ops.push_back(Op::Inject);
    if (ops.empty()) return prompt::render_tlb(gold);

    auto pick_value = [&](const std::string& slot, std::string_view avoid) -> std::string {
        std::vector<std::string> options;
        if (const SlotSpec* spec = schema.find_slot(slot)) {
            for (const auto& v : spec->values) {
                if (v != avoid) options.push_back(v);
            }
        }
        if (options.empty()) options.push_back(avoid == "dontcare" ? std::string(avoid) + " x" : "dontcare");
        return options[rng.below(options.size())];
    };

    TurnBelief out = gold;
    const auto pairs = gold.to_vector();
    switch (ops[rng.below(ops.size())]) {
        case Op::Drop:
            out.erase(pairs[rng.below(pairs.size())].slot);
            break;
        case Op::Perturb: {
            const auto& victim = pairs[rng.below(pairs.size())];
            out.set(victim.slot, pick_value(victim.slot, victim.value));
            break;
        }
        case Op::Inject: {
            const auto& slot = spare_slots[rng.below(spare_slots.size())];
            out.set(slot, pick_value(slot, ""));
            break;
        }
    }
    return prompt::render_tlb(out);
}

OracleNoiseBackend::OracleNoiseBackend(std::string id, double p, std::uint64_t seed,
                                       std::map<std::string, TurnBelief> gold_by_turn, SchemaTable schema,
                                       std::shared_ptr<CostLedger> ledger, double params)
    : Backend(std::move(id), params, std::move(ledger)),
      p_(p),
      seed_(seed),
      gold_(std::move(gold_by_turn)),
      schema_(std::move(schema)) {
    if (!(p_ >= 0.0 && p_ <= 1.0)) throw ValidationError("oracle noise rate must lie in [0, 1]");
}

Backend::Raw OracleNoiseBackend::do_complete(const CompletionRequest& req) {
    const RequestTag tag = RequestTag::parse(req.request_tag);
    auto it = gold_.find(tag.turn_key());
    if (it == gold_.end()) throw BackendError("oracle backend has no gold belief for '" + tag.turn_key() + "'");
    return {" " + oracle_noise_complete(it->second, p_, seed_, req.request_tag, schema_) + "\n", std::nullopt,
            std::nullopt};
}

EchoBackend::EchoBackend(std::string id, std::shared_ptr<CostLedger> ledger, double params)
    : Backend(std::move(id), params, std::move(ledger)) {}

Backend::Raw EchoBackend::do_complete(const CompletionRequest& req) {
    const std::string marker = std::string(prompt::kHypMarker) + " ";
    const auto& p = req.prompt_text;
    auto pos = p.rfind(marker);
    if (pos == std::string::npos) return {std::string(prompt::kNoPairs), std::nullopt, std::nullopt};
    pos += marker.size();
    const auto end = p.find('\n', pos);
    return {p.substr(pos, end == std::string::npos ? std::string::npos : end - pos), std::nullopt, std::nullopt};
}

RecordingStore::~RecordingStore() {
    try {
        if (dirty_ && !path_.empty()) save();
    } catch (...) {
    }
}

std::shared_ptr<RecordingStore> RecordingStore::open(const std::filesystem::path& path) {
    auto store = std::make_shared<RecordingStore>(path);
    if (!std::filesystem::exists(path)) return store;
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open recording " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        RecordingEntry e;
        try {
            auto j = nlohmann::json::parse(line);
            e.digest = j.at("digest").get<std::string>();
            e.request_summary = j.value("request_summary", nlohmann::json::object());
            e.text = j.at("text").get<std::string>();
            e.prompt_tokens = j.at("prompt_tokens").get<std::int64_t>();
            e.completion_tokens = j.at("completion_tokens").get<std::int64_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(path.string(), lineno, ex.what());
        }
        if (e.digest.size() != 64) throw ParseError(path.string(), lineno, "digest is not a SHA-256 hex string");
        auto digest = e.digest;
        if (!store->entries_.emplace(digest, std::move(e)).second) {
            throw ParseError(path.string(), lineno, "duplicate digest " + digest);
        }
    }
    return store;
}

void RecordingStore::put(RecordingEntry entry) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(entry.digest);
    if (it != entries_.end()) {
        if (it->second.text != entry.text) {
            throw BackendError("digest collision for " + entry.digest + ": a different response is already recorded");
        }
        return;
    }
    auto digest = entry.digest;
    entries_.emplace(std::move(digest), std::move(entry));
    dirty_ = true;
}

std::optional<RecordingEntry> RecordingStore::get(const std::string& digest) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(digest);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

std::size_t RecordingStore::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

void RecordingStore::save() const {
    std::lock_guard lock(mu_);
    if (path_.empty()) throw Error("recording store has no path");
    std::string out;
    for (const auto& [digest, e] : entries_) {
        nlohmann::json j = {{"digest", e.digest},
                            {"request_summary", e.request_summary},
                            {"text", e.text},
                            {"prompt_tokens", e.prompt_tokens},
                            {"completion_tokens", e.completion_tokens}};
        out += dump_line(j);
        out += '\n';
    }
    write_file(path_, out);
    dirty_ = false;
}

RecordBackend::RecordBackend(std::shared_ptr<Backend> inner, std::shared_ptr<RecordingStore> store)
    : Backend(inner->id(), inner->params(), inner->ledger(), /*accounts=*/false),
      inner_(std::move(inner)),
      store_(std::move(store)) {}

Backend::Raw RecordBackend::do_complete(const CompletionRequest& req) {
    CompletionResponse resp = inner_->complete(req);
    RecordingEntry e;
    e.digest = request_digest(req);
    e.request_summary = {{"prompt_chars", req.prompt_text.size()},
                         {"prompt_head", req.prompt_text.substr(0, 80)},
                         {"max_new_tokens", req.max_new_tokens},
                         {"temperature", req.temperature}};
    e.text = resp.text;
    e.prompt_tokens = resp.prompt_tokens;
    e.completion_tokens = resp.completion_tokens;
    store_->put(std::move(e));
    return {resp.text, resp.prompt_tokens, resp.completion_tokens};
}

ReplayBackend::ReplayBackend(std::string id, std::shared_ptr<RecordingStore> store, std::shared_ptr<CostLedger> ledger,
                             double params)
    : Backend(std::move(id), params, std::move(ledger)), store_(std::move(store)) {}

Backend::Raw ReplayBackend::do_complete(const CompletionRequest& req) {
    const auto digest = request_digest(req);
    auto e = store_->get(digest);
    if (!e) throw MissingRecordingError(digest);
    return {e->text, e->prompt_tokens, e->completion_tokens};
}

}  // namespace corrdst::lm
