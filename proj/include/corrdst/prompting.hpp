#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "corrdst/dialogue.hpp"
#include "corrdst/schema.hpp"

namespace corrdst::prompt {

// Fixed block markers. Changing any of these changes every golden prompt.
inline constexpr std::string_view kSchemaMarker = "[SCHEMA]";
inline constexpr std::string_view kDomainMarker = "[DOMAIN]";
inline constexpr std::string_view kExampleMarker = "[EXAMPLE";
inline constexpr std::string_view kTargetMarker = "[TARGET]";
inline constexpr std::string_view kStateMarker = "[STATE]";
inline constexpr std::string_view kSysMarker = "[SYS]";
inline constexpr std::string_view kUserMarker = "[USER]";
inline constexpr std::string_view kHypMarker = "[HYP]";
inline constexpr std::string_view kTlbMarker = "[TLB]";
inline constexpr std::string_view kEmptyUtterance = "[NONE]";
inline constexpr std::string_view kNoPairs = "NONE";

enum class StyleKind { MwozInference, MwozCorrection, SgdInference, SgdCorrection };

struct PromptStyle {
    StyleKind kind = StyleKind::MwozInference;
    int k = 10;
    int width = 1;

    /// k=10, width=1 for MultiWOZ styles; k=3, width=3 for SGD styles.
    static PromptStyle defaults(StyleKind kind);

    bool is_sgd() const { return kind == StyleKind::SgdInference || kind == StyleKind::SgdCorrection; }
    bool is_correction() const { return kind == StyleKind::MwozCorrection || kind == StyleKind::SgdCorrection; }

    /// Same dataset family and sizes, switched to the inference/correction variant.
    PromptStyle as_inference() const;
    PromptStyle as_correction() const;

    void validate() const;
};

std::string_view to_string(StyleKind kind);
StyleKind parse_style_kind(std::string_view name);

/// One demonstration block. `schema_local` is set for SGD styles only and
/// `hypothesis` for correction styles only.
struct Exemplar {
    std::optional<SchemaTable> schema_local;
    DialogueState prev_state;
    ContextWindow ctx;
    std::optional<TurnBelief> hypothesis;
    TurnBelief gold_tlb;
};

struct RenderedPrompt {
    std::string text;
    std::size_t token_estimate = 0;
    PromptStyle style;
};

/// Rough token count: one per short word or punctuation mark, with long
/// alphanumeric runs counted at four characters per token.
std::size_t estimate_tokens(std::string_view text);

/// Sub-table restricted to `domains`. Throws ValidationError on unknown or
/// empty domain sets.
SchemaTable schema_subset(const SchemaTable& schema, const std::set<std::string>& domains);

std::string render_schema(const SchemaTable& schema, const std::set<std::string>& domains);

/// "slot: value; slot: value" in slot order, or "NONE".
std::string render_tlb(const TurnBelief& tlb);
std::string render_state(const DialogueState& state);

RenderedPrompt build_inference_prompt(const PromptStyle& style, const SchemaTable& schema,
                                      const std::vector<Exemplar>& exemplars, const DialogueState& prev_state,
                                      const ContextWindow& ctx);

RenderedPrompt build_correction_prompt(const PromptStyle& style, const SchemaTable& schema,
                                       const std::vector<Exemplar>& exemplars, const DialogueState& prev_state,
                                       const ContextWindow& ctx, const TurnBelief& hypothesis,
                                       const std::optional<std::string>& instruction = std::nullopt);

struct TrainingText {
    std::string full_text;
    /// Byte offsets of the rendered gold belief inside full_text.
    std::size_t target_start = 0;
    std::size_t target_end = 0;
};

TrainingText render_training_sequence(const PromptStyle& style, const SchemaTable& schema,
                                      const std::vector<Exemplar>& exemplars, const DialogueState& prev_state,
                                      const ContextWindow& ctx, const TurnBelief& hypothesis, const TurnBelief& gold,
                                      const std::optional<std::string>& instruction = std::nullopt);

struct ParsedBelief {
    TurnBelief tlb;
    std::vector<std::string> diagnostics;
};

/// Inverse of render_tlb over the first line of a completion. In lenient mode
/// malformed items become diagnostics; in strict mode they throw
/// ValidationError. Empty completions give an empty belief plus a diagnostic
/// in both modes.
ParsedBelief parse_tlb(std::string_view completion, bool strict = false);

}  // namespace corrdst::prompt
