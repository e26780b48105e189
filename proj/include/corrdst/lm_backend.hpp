#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "corrdst/dialogue.hpp"
#include "corrdst/schema.hpp"

namespace corrdst::lm {

struct CompletionRequest {
    std::string prompt_text;
    int max_new_tokens = 256;
    double temperature = 0.0;
    std::vector<std::string> stop_sequences = {"\n"};
    /// "<dialogue_id>:<turn>:<pass>"; identifies the call, never part of the digest.
    std::string request_tag;

    void validate() const;
};

struct CompletionResponse {
    std::string text;
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    std::string backend_id;
};

/// Content address of a request: SHA-256 over prompt and decoding parameters.
std::string request_digest(const CompletionRequest& req);

/// Forward-pass approximation, 2 * params * tokens.
double estimate_flops(double params, std::int64_t prompt_tokens, std::int64_t completion_tokens);

struct LedgerTotals {
    std::uint64_t calls = 0;
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;
    std::uint64_t errors = 0;
    std::uint64_t retries = 0;
    double params = 0.0;

    double flops() const;
    double teraflops() const { return flops() / 1e12; }
};

using LedgerSnapshot = std::map<std::string, LedgerTotals>;

/// Token and FLOP accounting per backend id. Thread-safe. FLOPs are derived
/// from integer token totals, so the totals do not depend on call order.
class CostLedger {
public:
    void register_backend(const std::string& backend_id, double params);
    void record_call(const std::string& backend_id, std::int64_t prompt_tokens, std::int64_t completion_tokens);
    void record_error(const std::string& backend_id);
    void record_retry(const std::string& backend_id);

    LedgerSnapshot snapshot() const;
    double total_flops() const;

private:
    mutable std::mutex mu_;
    LedgerSnapshot totals_;
};

nlohmann::json ledger_to_json(const LedgerSnapshot& snapshot);
LedgerSnapshot ledger_from_json(const nlohmann::json& j);
/// Sums entries with the same id.
LedgerSnapshot merge_ledgers(const std::vector<LedgerSnapshot>& parts);

/// Completion contract. `complete` validates the request, truncates the raw
/// text at the first stop sequence, fills missing token counts with an
/// estimate and records the call in the ledger.
class Backend {
public:
    static constexpr double kDefaultParams = 8e9;

    Backend(std::string id, double params, std::shared_ptr<CostLedger> ledger, bool accounts = true);
    virtual ~Backend() = default;
    Backend(const Backend&) = delete;
    Backend& operator=(const Backend&) = delete;

    CompletionResponse complete(const CompletionRequest& req);

    const std::string& id() const { return id_; }
    double params() const { return params_; }
    const std::shared_ptr<CostLedger>& ledger() const { return ledger_; }

protected:
    struct Raw {
        std::string text;
        std::optional<std::int64_t> prompt_tokens;
        std::optional<std::int64_t> completion_tokens;
    };
    virtual Raw do_complete(const CompletionRequest& req) = 0;

private:
    std::string id_;
    double params_;
    std::shared_ptr<CostLedger> ledger_;
    bool accounts_;
};

/// Splits "<dialogue_id>:<turn>:<pass>" from the right; dialogue ids may contain ':'.
struct RequestTag {
    std::string dialogue_id;
    int turn = 0;
    std::string pass;

    static RequestTag parse(std::string_view tag);
    std::string turn_key() const { return example_id(dialogue_id, turn); }
};

/// With probability 1-p renders `gold`; otherwise applies one seeded
/// corruption (drop a pair, perturb a value, or inject a schema slot). All
/// draws come from (seed, turn_key), and the keep/corrupt draw is taken first,
/// so for a fixed key the set of corrupted turns only grows with p.
std::string oracle_noise_complete(const TurnBelief& gold, double p, std::uint64_t seed, std::string_view turn_key,
                                  const SchemaTable& schema);

/// Emits the gold belief of the tagged turn, corrupted with probability p.
class OracleNoiseBackend final : public Backend {
public:
    OracleNoiseBackend(std::string id, double p, std::uint64_t seed, std::map<std::string, TurnBelief> gold_by_turn,
                       SchemaTable schema, std::shared_ptr<CostLedger> ledger, double params = kDefaultParams);

protected:
    Raw do_complete(const CompletionRequest& req) override;

private:
    double p_;
    std::uint64_t seed_;
    std::map<std::string, TurnBelief> gold_;
    SchemaTable schema_;
};

/// Returns the last [HYP] line of the prompt unchanged: an identity corrector.
class EchoBackend final : public Backend {
public:
    EchoBackend(std::string id, std::shared_ptr<CostLedger> ledger, double params = kDefaultParams);

protected:
    Raw do_complete(const CompletionRequest& req) override;
};

struct RecordingEntry {
    std::string digest;
    nlohmann::json request_summary;
    std::string text;
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
};

/// digest -> response map backed by a JSONL file
/// {digest, request_summary, text, prompt_tokens, completion_tokens}.
/// Saved sorted by digest so recordings are byte-stable.
class RecordingStore {
public:
    RecordingStore() = default;
    explicit RecordingStore(std::filesystem::path path) : path_(std::move(path)) {}
    ~RecordingStore();

    /// Throws ParseError naming the line of any malformed entry.
    static std::shared_ptr<RecordingStore> open(const std::filesystem::path& path);

    /// Throws BackendError if `digest` already maps to a different text.
    void put(RecordingEntry entry);
    std::optional<RecordingEntry> get(const std::string& digest) const;
    std::size_t size() const;

    void save() const;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::map<std::string, RecordingEntry> entries_;
    mutable bool dirty_ = false;
};

/// Passes calls through to `inner` and stores every response. Accounting is
/// left to the inner backend.
class RecordBackend final : public Backend {
public:
    RecordBackend(std::shared_ptr<Backend> inner, std::shared_ptr<RecordingStore> store);

protected:
    Raw do_complete(const CompletionRequest& req) override;

private:
    std::shared_ptr<Backend> inner_;
    std::shared_ptr<RecordingStore> store_;
};

/// Serves recorded responses; unknown digests raise MissingRecordingError.
class ReplayBackend final : public Backend {
public:
    ReplayBackend(std::string id, std::shared_ptr<RecordingStore> store, std::shared_ptr<CostLedger> ledger,
                  double params = kDefaultParams);

protected:
    Raw do_complete(const CompletionRequest& req) override;

private:
    std::shared_ptr<RecordingStore> store_;
};

struct HttpOptions {
    std::string url;  // full endpoint, e.g. http://localhost:8000/v1/completions
    std::string model;
    bool chat = false;  // chat-completions payload instead of plain completions
    std::string api_key_env = "OPENAI_API_KEY";
    double timeout_seconds = 120.0;
    int max_attempts = 3;
    int backoff_ms = 500;
    int max_concurrency = 4;
};

/// OpenAI-compatible completions client. Retries transport failures and 5xx
/// responses with exponential backoff; other failures surface immediately.
class HttpBackend final : public Backend {
public:
    HttpBackend(std::string id, HttpOptions options, std::shared_ptr<CostLedger> ledger,
                double params = kDefaultParams);

protected:
    Raw do_complete(const CompletionRequest& req) override;

private:
    HttpOptions options_;
    std::counting_semaphore<1024> slots_;
};

/// Splits "http://host:port/path" into ("http://host:port", "/path").
std::pair<std::string, std::string> split_url(const std::string& url);

}  // namespace corrdst::lm
