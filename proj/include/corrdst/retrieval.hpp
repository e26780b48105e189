#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <semaphore>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "corrdst/dialogue.hpp"

namespace corrdst::retrieval {

struct EmbeddingVector {
    std::vector<double> values;

    std::size_t dim() const { return values.size(); }
    double norm() const;
    /// Unit-length copy. Throws ValidationError for zero or non-finite vectors.
    EmbeddingVector normalized() const;
};

double dot(const EmbeddingVector& a, const EmbeddingVector& b);

/// Text encoder contract. Implementations must be deterministic for identical
/// text and safe to call from several threads.
class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::string id() const = 0;
    /// 0 while unknown (remote encoders report it after the first call).
    virtual std::size_t dim() const = 0;
    virtual EmbeddingVector embed(std::string_view text) = 0;
    virtual std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts);
};

/// Bag-of-tokens random projection: every lowercase alphanumeric token maps
/// to a pseudo-random vector seeded by (seed, token) and the text embeds as
/// their sum. Texts sharing words land close together, which is enough for
/// exercising retrieval without a neural encoder.
class HashEmbeddingBackend final : public EmbeddingBackend {
public:
    HashEmbeddingBackend(std::size_t dim, std::uint64_t seed);

    std::string id() const override;
    std::size_t dim() const override { return dim_; }
    EmbeddingVector embed(std::string_view text) override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

struct HttpEmbeddingOptions {
    std::string url;  // e.g. http://localhost:8000/v1/embeddings
    std::string model;
    std::string api_key_env = "OPENAI_API_KEY";
    double timeout_seconds = 60.0;
    int max_attempts = 3;
    int backoff_ms = 500;
    int max_concurrency = 4;
    std::size_t batch_size = 32;
};

/// POST {"model", "input": [texts]} -> {"data": [{"embedding": [...]}]}.
class HttpEmbeddingBackend final : public EmbeddingBackend {
public:
    explicit HttpEmbeddingBackend(HttpEmbeddingOptions options);

    std::string id() const override { return "http-embedding:" + options_.model; }
    std::size_t dim() const override;
    EmbeddingVector embed(std::string_view text) override;
    std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override;

private:
    std::vector<EmbeddingVector> post(const std::vector<std::string>& texts);

    HttpEmbeddingOptions options_;
    std::counting_semaphore<1024> slots_;
    mutable std::mutex mu_;
    std::size_t dim_ = 0;
};

/// Everything a demonstration needs, keyed by the turn it was taken from.
struct ExamplePayload {
    std::string dialogue_id;
    int turn = 0;
    std::set<std::string> domains;
    DialogueState prev_state;  // gold state before the turn
    ContextWindow ctx;
    TurnBelief gold_tlb;
    std::optional<TurnBelief> hypothesis;
};

struct IndexEntry {
    std::string example_id;
    EmbeddingVector vector;  // unit length
    ExamplePayload payload;
};

struct Hit {
    const IndexEntry* entry = nullptr;
    double score = 0.0;
};

/// Ordered by descending score, ties by ascending example id.
struct RetrievalResult {
    std::vector<Hit> hits;

    std::vector<std::string> ids() const;
};

/// "[STATE] <pairs> [SYS] <a> [USER] <u> ..." over every exchange of `ctx`.
std::string serialize_for_embedding(const DialogueState& prev_state, const ContextWindow& ctx);

/// One payload per turn of `split`, in dialogue order, using gold previous states.
std::vector<ExamplePayload> training_examples(const DatasetSplit& split, int width);

/// Exhaustive-scan cosine index. Immutable once built; concurrent retrieve
/// calls are safe.
class Index {
public:
    Index() = default;

    std::size_t size() const { return entries_.size(); }
    std::size_t dim() const { return dim_; }
    bool empty() const { return entries_.empty(); }
    const std::vector<IndexEntry>& entries() const { return entries_; }
    const IndexEntry* find(std::string_view example_id) const;

    /// Copy with stored hypotheses attached; ids absent from the map keep none.
    Index with_hypotheses(const std::map<std::string, TurnBelief>& hypotheses) const;

    /// JSONL sidecar {example_id, vector, payload_ref: {dialogue_id, turn}}.
    void save(const std::filesystem::path& path) const;
    /// Rebuilds payloads from `split`; every payload_ref must resolve.
    static Index load(const std::filesystem::path& path, const DatasetSplit& split, int width);

    /// Entries must have unique ids and finite, non-zero vectors of equal dimension.
    static Index from_entries(std::vector<IndexEntry> entries);

private:
    std::vector<IndexEntry> entries_;  // sorted by example_id
    std::map<std::string, std::size_t, std::less<>> by_id_;
    std::size_t dim_ = 0;
};

/// Embeds every example (up to `concurrency` calls in flight) and L2-normalizes
/// the vectors. Backend failures are rethrown with the example id attached.
Index build_index(const std::vector<ExamplePayload>& examples, EmbeddingBackend& backend, int concurrency = 1);

RetrievalResult retrieve(const Index& index, const EmbeddingVector& query, int k,
                         const std::set<std::string>& exclude = {});

/// F1 between two beliefs with exact value matching.
double similarity_label(const TurnBelief& a, const TurnBelief& b);

struct PairExportSummary {
    std::size_t anchors = 0;
    std::size_t lines = 0;
};

/// JSONL of {anchor_id, candidate_id, anchor_text, candidate_text, label}.
/// Per anchor, `per_anchor` distinct other turns are drawn by seed; when
/// present, at least one candidate with label >= 0.5 and one with label 0
/// are included.
PairExportSummary export_retriever_pairs(const DatasetSplit& train, int width, int per_anchor, std::uint64_t seed,
                                         const std::filesystem::path& out);

}  // namespace corrdst::retrieval
