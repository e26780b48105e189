#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "corrdst/errors.hpp"
#include "corrdst/lm_backend.hpp"
#include "corrdst/retrieval.hpp"

namespace corrdst {

namespace {

struct SlotGuard {
    std::counting_semaphore<1024>& sem;
    explicit SlotGuard(std::counting_semaphore<1024>& s) : sem(s) { sem.acquire(); }
    ~SlotGuard() { sem.release(); }
};

int clamp_slots(int n) { return std::clamp(n, 1, 1024); }

/// POSTs `body` with retries on transport errors and 5xx. Returns the parsed
/// JSON of the first 2xx response. `on_retry` runs before each retry.
template <typename OnRetry>
nlohmann::json post_json(const std::string& url, const std::string& api_key_env, double timeout_seconds,
                         int max_attempts, int backoff_ms, const nlohmann::json& body, OnRetry on_retry) {
    const auto [base, path] = lm::split_url(url);
    httplib::Headers headers;
    if (!api_key_env.empty()) {
        if (const char* key = std::getenv(api_key_env.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 1; attempt <= std::max(1, max_attempts); ++attempt) {
        if (attempt > 1) {
            on_retry();
            std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long>(backoff_ms) << (attempt - 2)));
        }
        httplib::Client client(base);
        const auto secs = static_cast<time_t>(timeout_seconds);
        const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);
        auto res = client.Post(path, headers, payload, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server error " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            throw BackendError(url + " returned " + std::to_string(res->status) + ": " + res->body.substr(0, 500));
        }
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error& e) {
            throw BackendError(url + " returned malformed JSON: " + e.what());
        }
        if (parsed.contains("error") && !parsed["error"].is_null()) {
            throw BackendError(url + " returned an error payload: " + parsed["error"].dump());
        }
        return parsed;
    }
    throw TransportError(url + ": giving up after " + std::to_string(std::max(1, max_attempts)) +
                         " attempts; last failure: " + last_error);
}

}  // namespace

namespace lm {

std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ValidationError("URL '" + url + "' has no scheme");
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
}

HttpBackend::HttpBackend(std::string id, HttpOptions options, std::shared_ptr<CostLedger> ledger, double params)
    : Backend(std::move(id), params, std::move(ledger)),
      options_(std::move(options)),
      slots_(clamp_slots(options_.max_concurrency)) {
    split_url(options_.url);
    if (options_.model.empty()) throw ValidationError("HTTP backend needs a model name");
}

Backend::Raw HttpBackend::do_complete(const CompletionRequest& req) {
    nlohmann::json body = {{"model", options_.model},
                           {"max_tokens", req.max_new_tokens},
                           {"temperature", req.temperature}};
    if (!req.stop_sequences.empty()) body["stop"] = req.stop_sequences;
    if (options_.chat) {
        body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", req.prompt_text}}});
    } else {
        body["prompt"] = req.prompt_text;
    }

    SlotGuard guard(slots_);
    const auto reply = post_json(options_.url, options_.api_key_env, options_.timeout_seconds, options_.max_attempts,
                                 options_.backoff_ms, body, [&] { ledger()->record_retry(id()); });
    Raw raw;
    try {
        const auto& choice = reply.at("choices").at(0);
        raw.text = options_.chat ? choice.at("message").at("content").get<std::string>()
                                 : choice.at("text").get<std::string>();
        if (reply.contains("usage") && reply["usage"].is_object()) {
            const auto& usage = reply["usage"];
            if (usage.contains("prompt_tokens")) raw.prompt_tokens = usage["prompt_tokens"].get<std::int64_t>();
            if (usage.contains("completion_tokens")) {
                raw.completion_tokens = usage["completion_tokens"].get<std::int64_t>();
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(options_.url + ": unexpected completion payload: " + e.what());
    }
    return raw;
}

}  // namespace lm

namespace retrieval {

HttpEmbeddingBackend::HttpEmbeddingBackend(HttpEmbeddingOptions options)
    : options_(std::move(options)), slots_(clamp_slots(options_.max_concurrency)) {
    lm::split_url(options_.url);
}

std::size_t HttpEmbeddingBackend::dim() const {
    std::lock_guard lock(mu_);
    return dim_;
}

EmbeddingVector HttpEmbeddingBackend::embed(std::string_view text) {
    return post({std::string(text)}).at(0);
}

std::vector<EmbeddingVector> HttpEmbeddingBackend::embed_batch(const std::vector<std::string>& texts) {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    const std::size_t step = std::max<std::size_t>(1, options_.batch_size);
    for (std::size_t i = 0; i < texts.size(); i += step) {
        std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(i),
                                       texts.begin() + static_cast<std::ptrdiff_t>(std::min(texts.size(), i + step)));
        for (auto& v : post(chunk)) out.push_back(std::move(v));
    }
    return out;
}

std::vector<EmbeddingVector> HttpEmbeddingBackend::post(const std::vector<std::string>& texts) {
    nlohmann::json body = {{"input", texts}};
    if (!options_.model.empty()) body["model"] = options_.model;
    SlotGuard guard(slots_);
    const auto reply = post_json(options_.url, options_.api_key_env, options_.timeout_seconds, options_.max_attempts,
                                 options_.backoff_ms, body, [] {});
    std::vector<EmbeddingVector> out;
    try {
        const auto& data = reply.at("data");
        if (data.size() != texts.size()) {
            throw BackendError(options_.url + ": expected " + std::to_string(texts.size()) + " embeddings, got " +
                               std::to_string(data.size()));
        }
        for (const auto& item : data) out.push_back({item.at("embedding").get<std::vector<double>>()});
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(options_.url + ": unexpected embedding payload: " + e.what());
    }
    std::lock_guard lock(mu_);
    for (const auto& v : out) {
        if (dim_ == 0) dim_ = v.dim();
        if (v.dim() != dim_) throw BackendError(options_.url + ": embedding dimension changed between calls");
    }
    return out;
}

}  // namespace retrieval

}  // namespace corrdst
