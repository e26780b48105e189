#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corrdst/dialogue.hpp"
#include "corrdst/errors.hpp"
#include "corrdst/lm_backend.hpp"
#include "corrdst/metrics.hpp"
#include "corrdst/prompting.hpp"
#include "corrdst/retrieval.hpp"
#include "corrdst/schema.hpp"

namespace corrdst::pipeline {

struct RunConfig {
    std::filesystem::path train_path;
    std::filesystem::path eval_path;
    std::filesystem::path schema_path;
    std::optional<std::filesystem::path> synonyms_path;
    std::filesystem::path output_dir;

    /// Inference variant; the correction variant is derived with as_correction().
    prompt::PromptStyle style = prompt::PromptStyle::defaults(prompt::StyleKind::MwozInference);
    double fraction = 0.05;
    std::uint64_t split_seed = 0;
    std::uint64_t demo_seed = 0;
    std::uint64_t pair_seed = 0;
    int num_demos = 5;
    int pairs_per_anchor = 4;
    int max_new_tokens = 256;
    bool strict_parsing = false;
    bool strict_load = false;
    int max_concurrency = 4;
    /// Preamble for correction prompts (used by the non-finetuned corrector).
    std::optional<std::string> instruction;

    /// Backend specs, e.g. {"kind": "oracle", "p": 0.3, "seed": 1}.
    nlohmann::json inference_backend;
    nlohmann::json correction_backend;
    nlohmann::json embedding_backend = {{"kind", "hash"}, {"dim", 256}, {"seed", 0}};

    bool export_training = true;
    bool export_retriever_pairs = false;
    std::optional<std::filesystem::path> record_path;
    std::optional<std::filesystem::path> replay_path;

    void validate() const;
    nlohmann::json to_json() const;
    /// SHA-256 of the canonical JSON form.
    std::string hash() const;
};

/// Gold beliefs keyed by "<dialogue_id>:<turn>", the lookup oracle backends answer from.
std::map<std::string, TurnBelief> gold_lookup(const std::vector<const DatasetSplit*>& splits);

struct Backends {
    std::shared_ptr<lm::CostLedger> ledger;
    std::shared_ptr<lm::Backend> inference;
    std::shared_ptr<lm::Backend> correction;
    std::shared_ptr<retrieval::EmbeddingBackend> embedding;
    std::shared_ptr<lm::RecordingStore> recording;

    /// Persists any pending recordings.
    void flush() const;
};

/// Builds a completion backend from its JSON spec. Kinds: oracle, echo, http,
/// replay, record. Throws ValidationError naming any bad key.
std::shared_ptr<lm::Backend> make_lm_backend(const nlohmann::json& spec, const std::string& role,
                                             const std::map<std::string, TurnBelief>& gold, const SchemaTable& schema,
                                             const std::shared_ptr<lm::CostLedger>& ledger);

/// Kinds: hash, http.
std::shared_ptr<retrieval::EmbeddingBackend> make_embedding_backend(const nlohmann::json& spec);

/// All three backends, with --record / --replay wrapping applied to both LM roles.
Backends make_backends(const RunConfig& cfg, const std::map<std::string, TurnBelief>& gold, const SchemaTable& schema);

struct Retrieved {
    std::string example_id;
    double score = 0.0;
};

struct PassTrace {
    std::string prompt_digest;
    std::string completion;
    std::vector<std::string> diagnostics;
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
};

struct PredictionRecord {
    metrics::TurnRecord turn;
    std::vector<Retrieved> retrieved;
    std::optional<PassTrace> first;
    std::optional<PassTrace> second;
    /// Set on the last record of a dialogue whose pass was aborted.
    std::optional<std::string> error;
};

struct DialogueRun {
    std::string dialogue_id;
    std::vector<PredictionRecord> records;
    std::optional<std::string> error;
};

/// Ambient flag checked between turns; set it to stop a run early.
std::atomic<bool>& cancellation();

class Cancelled : public Error {
public:
    Cancelled() : Error("run cancelled") {}
};

/// The exemplar view of an index entry for `style` (local schema for SGD
/// styles, stored hypothesis for correction styles).
prompt::Exemplar to_exemplar(const retrieval::IndexEntry& entry, const prompt::PromptStyle& style,
                             const SchemaTable& schema);

/// Schema shown for a target dialogue: the full table for MultiWOZ styles,
/// the dialogue's own domains for SGD styles.
SchemaTable target_schema(const prompt::PromptStyle& style, const SchemaTable& schema, const Dialogue& d);

/// Sequential first pass over one dialogue: retrieve with the predicted
/// previous state, prompt, parse, accumulate. Backend failures stop the
/// dialogue and are reported in DialogueRun::error with the records so far.
DialogueRun first_pass_dialogue(const Dialogue& d, const retrieval::Index& index, const SchemaTable& schema,
                                lm::Backend& inference, retrieval::EmbeddingBackend& embedding, const RunConfig& cfg);

/// Correction pass reusing each turn's first-pass retrieval. Every retrieved
/// exemplar must carry a stored hypothesis; otherwise ValidationError.
DialogueRun second_pass_dialogue(const Dialogue& d, std::vector<PredictionRecord> records,
                                 const retrieval::Index& index_with_hypotheses, const SchemaTable& schema,
                                 lm::Backend& correction, const RunConfig& cfg);

/// Dialogue-parallel drivers; results come back in eval-split order.
std::vector<DialogueRun> run_first_pass(const DatasetSplit& eval, const retrieval::Index& index,
                                        const SchemaTable& schema, const Backends& backends, const RunConfig& cfg);
std::vector<DialogueRun> run_second_pass(const DatasetSplit& eval, std::vector<DialogueRun> first,
                                         const retrieval::Index& index_with_hypotheses, const SchemaTable& schema,
                                         const Backends& backends, const RunConfig& cfg);

struct Demonstrations {
    std::vector<std::string> demo_ids;
    std::map<std::string, TurnBelief> hypotheses;
    std::map<std::string, std::vector<std::string>> exemplars_used;
    std::map<std::string, std::vector<std::string>> diagnostics;
    std::map<std::string, std::string> failures;

    nlohmann::json to_json() const;
    static Demonstrations from_json(const nlohmann::json& j);
};

/// Draws cfg.num_demos fixed demonstration turns and predicts every training
/// turn with them (a demo turn never sees itself), using gold previous states.
Demonstrations collect_demonstrations(const DatasetSplit& train, const SchemaTable& schema, lm::Backend& backend,
                                      const RunConfig& cfg);

struct TrainingSequence {
    std::string example_id;
    std::string full_text;
    std::size_t target_start = 0;
    std::size_t target_end = 0;
    std::vector<std::string> retrieved;
    std::string style;
};

struct ExportSummary {
    std::vector<TrainingSequence> sequences;
    std::size_t skipped = 0;
};

/// One correction-tuning sequence per training turn with a stored hypothesis.
ExportSummary build_training_sequences(const DatasetSplit& train, const retrieval::Index& index_with_hypotheses,
                                       const SchemaTable& schema, const RunConfig& cfg);

/// JSONL {"example_id", "text", "target_start", "target_end", "meta"}.
void write_training_sequences(const std::filesystem::path& path, const ExportSummary& summary);

nlohmann::json record_to_json(const PredictionRecord& r, const Dialogue& d);
void write_predictions(const std::filesystem::path& path, const DatasetSplit& eval, const std::vector<DialogueRun>& runs);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);
std::vector<DialogueRun> group_by_dialogue(const DatasetSplit& eval, const std::vector<PredictionRecord>& records);
std::vector<metrics::TurnRecord> turn_records(const std::vector<DialogueRun>& runs);

/// Canonical file names inside the output directory.
namespace files {
inline constexpr const char* kSplit = "split.json";
inline constexpr const char* kIndex = "index.jsonl";
inline constexpr const char* kDemonstrations = "demonstrations.json";
inline constexpr const char* kTrainingSequences = "training_sequences.jsonl";
inline constexpr const char* kRetrieverPairs = "retriever_pairs.jsonl";
inline constexpr const char* kPredictionsFirst = "predictions_first.jsonl";
inline constexpr const char* kPredictions = "predictions.jsonl";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kReportText = "report.txt";
inline constexpr const char* kLedger = "ledger.json";
inline constexpr const char* kManifest = "MANIFEST.json";
}  // namespace files

struct Inputs {
    SchemaTable schema;
    metrics::SynonymTable synonyms;
    DatasetSplit train_full;
    DatasetSplit eval;
    std::vector<std::string> warnings;
};

struct Evaluation {
    metrics::MetricsReport first;
    std::optional<metrics::MetricsReport> final;
};

/// Stage runner over one output directory. Each stage either reuses the
/// in-memory result of an earlier stage or reloads it from its file, so the
/// same object drives both the monolithic run and single-stage commands.
/// Stage failures surface as StageError; every stage updates the MANIFEST.
class Workspace {
public:
    explicit Workspace(RunConfig cfg);
    ~Workspace();
    Workspace(const Workspace&) = delete;
    Workspace& operator=(const Workspace&) = delete;

    const RunConfig& config() const { return cfg_; }
    const std::filesystem::path& dir() const { return cfg_.output_dir; }

    const Inputs& inputs();
    Backends& backends();

    /// Current results, loaded from disk when this object has not produced them.
    const DatasetSplit& train_split();
    const retrieval::Index& index();
    const Demonstrations& demonstrations();
    const std::vector<DialogueRun>& first_runs();
    const std::vector<DialogueRun>& final_runs();

    void run_split();
    void run_index();
    void run_collect();
    ExportSummary run_export_train();
    retrieval::PairExportSummary run_export_pairs();
    void run_first_pass();
    void run_second_pass();
    /// Scores `predictions` (default: the second-pass file, else the first-pass one).
    Evaluation run_evaluate(const std::optional<std::filesystem::path>& predictions = std::nullopt);

    /// Per-stage ledgers merged into one snapshot.
    lm::LedgerSnapshot ledger_summary() const;

private:
    template <typename Fn>
    auto stage(const std::string& name, Fn&& fn) -> decltype(fn());
    void require_file(const char* file, const char* producer) const;
    void record_stage(const std::string& name, const std::string& status, const std::string& detail);
    void write_manifest() const;
    void write_stage_ledger(const std::string& name, const lm::LedgerSnapshot& before);

    RunConfig cfg_;
    std::optional<Inputs> inputs_;
    std::optional<std::map<std::string, TurnBelief>> gold_;
    std::optional<Backends> backends_;
    std::optional<DatasetSplit> split_;
    std::optional<retrieval::Index> index_;
    std::optional<Demonstrations> demos_;
    std::optional<std::vector<DialogueRun>> first_;
    std::optional<std::vector<DialogueRun>> final_;
    nlohmann::json stages_ = nlohmann::json::object();
};

struct ExperimentResult {
    std::filesystem::path predictions_path;
    Evaluation evaluation;
    lm::LedgerSnapshot ledger;
    std::size_t exported_sequences = 0;
    std::size_t skipped_sequences = 0;
};

/// split -> index -> collect (+ exports) -> first pass -> second pass ->
/// evaluation, writing every artifact and a MANIFEST into cfg.output_dir. A
/// failing stage raises StageError after the partial outputs and a MANIFEST
/// marked incomplete have been written.
ExperimentResult run_experiment(const RunConfig& cfg);

}  // namespace corrdst::pipeline
