#include "corrdst/prompting.hpp"

#include <algorithm>
#include <cctype>

#include "corrdst/errors.hpp"

namespace corrdst::prompt {

PromptStyle PromptStyle::defaults(StyleKind kind) {
    PromptStyle s;
    s.kind = kind;
    const bool sgd = kind == StyleKind::SgdInference || kind == StyleKind::SgdCorrection;
    s.k = sgd ? 3 : 10;
    s.width = sgd ? 3 : 1;
    return s;
}

PromptStyle PromptStyle::as_inference() const {
    PromptStyle s = *this;
    s.kind = is_sgd() ? StyleKind::SgdInference : StyleKind::MwozInference;
    return s;
}

PromptStyle PromptStyle::as_correction() const {
    PromptStyle s = *this;
    s.kind = is_sgd() ? StyleKind::SgdCorrection : StyleKind::MwozCorrection;
    return s;
}

void PromptStyle::validate() const {
    if (k < 1) throw ValidationError("prompt style: k must be >= 1");
    if (width < 1) throw ValidationError("prompt style: context width must be >= 1");
}

std::string_view to_string(StyleKind kind) {
    switch (kind) {
        case StyleKind::MwozInference: return "mwoz-inference";
        case StyleKind::MwozCorrection: return "mwoz-correction";
        case StyleKind::SgdInference: return "sgd-inference";
        case StyleKind::SgdCorrection: return "sgd-correction";
    }
    return "?";
}

StyleKind parse_style_kind(std::string_view name) {
    for (auto k : {StyleKind::MwozInference, StyleKind::MwozCorrection, StyleKind::SgdInference,
                   StyleKind::SgdCorrection}) {
        if (to_string(k) == name) return k;
    }
    throw ValidationError("unknown prompt style '" + std::string(name) + "'");
}

std::size_t estimate_tokens(std::string_view text) {
    std::size_t tokens = 0;
    std::size_t run = 0;
    auto flush = [&] {
        if (run > 0) tokens += run <= 8 ? 1 : (run + 3) / 4;
        run = 0;
    };
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            ++run;
        } else {
            flush();
            if (!std::isspace(c)) ++tokens;
        }
    }
    flush();
    return tokens;
}

SchemaTable schema_subset(const SchemaTable& schema, const std::set<std::string>& domains) {
    if (domains.empty()) throw ValidationError("schema: empty domain set");
    SchemaTable out;
    for (const auto& d : domains) {
        auto it = schema.table().find(d);
        if (it == schema.table().end()) throw ValidationError("schema: unknown domain '" + d + "'");
        for (const auto& [_, spec] : it->second) out.add_slot(d, spec);
    }
    return out;
}

std::string render_schema(const SchemaTable& schema, const std::set<std::string>& domains) {
    if (domains.empty()) throw ValidationError("render_schema: empty domain set");
    std::string out;
    for (const auto& d : domains) {
        auto it = schema.table().find(d);
        if (it == schema.table().end()) throw ValidationError("render_schema: unknown domain '" + d + "'");
        if (!out.empty()) out += '\n';
        out += kDomainMarker;
        out += ' ' + d;
        for (const auto& [name, spec] : it->second) {
            out += '\n' + d + '-' + name;
            if (!spec.description.empty()) out += ": " + spec.description;
            if (!spec.values.empty()) {
                out += " (values: ";
                for (std::size_t i = 0; i < spec.values.size(); ++i) {
                    if (i) out += ", ";
                    out += spec.values[i];
                }
                out += ')';
            }
        }
    }
    return out;
}

namespace {

template <typename Set>
std::string render_pairs(const Set& set) {
    if (set.empty()) return std::string(kNoPairs);
    std::string out;
    for (const auto& [slot, value] : set) {
        if (!out.empty()) out += "; ";
        out += slot;
        out += ": ";
        out += value;
    }
    return out;
}

std::string one_line(std::string_view utterance) {
    std::string out;
    out.reserve(utterance.size());
    for (char c : utterance) out.push_back(c == '\n' || c == '\r' ? ' ' : c);
    if (out.find_first_not_of(" \t") == std::string::npos) return std::string(kEmptyUtterance);
    return out;
}

void append_line(std::string& out, std::string_view marker, std::string_view body) {
    out += marker;
    out += ' ';
    out += body;
    out += '\n';
}

/// State, context and (optionally) hypothesis lines shared by exemplar and target blocks.
void append_turn_body(std::string& out, const DialogueState& prev_state, const ContextWindow& ctx,
                      const std::optional<TurnBelief>& hypothesis) {
    append_line(out, kStateMarker, render_state(prev_state));
    for (const auto& ex : ctx.exchanges) {
        append_line(out, kSysMarker, one_line(ex.system));
        append_line(out, kUserMarker, one_line(ex.user));
    }
    if (hypothesis) append_line(out, kHypMarker, render_tlb(*hypothesis));
}

std::string schema_block(const SchemaTable& schema) {
    return std::string(kSchemaMarker) + '\n' + render_schema(schema, schema.domains());
}

std::string exemplar_block(const PromptStyle& style, std::size_t index, const Exemplar& ex) {
    std::string out = std::string(kExampleMarker) + ' ' + std::to_string(index) + "]\n";
    if (style.is_sgd()) out += schema_block(*ex.schema_local) + '\n';
    append_turn_body(out, ex.prev_state, ex.ctx, style.is_correction() ? ex.hypothesis : std::nullopt);
    out += kTlbMarker;
    out += ' ' + render_tlb(ex.gold_tlb);
    return out;
}

void check_exemplars(const PromptStyle& style, const std::vector<Exemplar>& exemplars) {
    style.validate();
    if (exemplars.size() > static_cast<std::size_t>(style.k)) {
        throw ValidationError("prompt: " + std::to_string(exemplars.size()) + " exemplars exceed k=" +
                              std::to_string(style.k));
    }
    for (std::size_t i = 0; i < exemplars.size(); ++i) {
        const auto& ex = exemplars[i];
        const std::string where = "exemplar " + std::to_string(i + 1);
        if (style.is_sgd() && !ex.schema_local) throw ValidationError(where + " lacks the local schema required by " + std::string(to_string(style.kind)));
        if (!style.is_sgd() && ex.schema_local) throw ValidationError(where + " carries a local schema but the style is " + std::string(to_string(style.kind)));
        if (style.is_correction() && !ex.hypothesis) throw ValidationError(where + " has no hypothesis");
        if (!style.is_correction() && ex.hypothesis) throw ValidationError(where + " carries a hypothesis but the style is " + std::string(to_string(style.kind)));
    }
}

std::string assemble(const PromptStyle& style, const SchemaTable& schema, const std::vector<Exemplar>& exemplars,
                     const DialogueState& prev_state, const ContextWindow& ctx,
                     const std::optional<TurnBelief>& hypothesis, const std::optional<std::string>& instruction) {
    std::vector<std::string> blocks;
    if (instruction && !instruction->empty()) blocks.push_back(*instruction);
    if (!style.is_sgd()) blocks.push_back(schema_block(schema));
    for (std::size_t i = 0; i < exemplars.size(); ++i) blocks.push_back(exemplar_block(style, i + 1, exemplars[i]));
    if (style.is_sgd()) blocks.push_back(schema_block(schema));

    std::string target = std::string(kTargetMarker) + '\n';
    append_turn_body(target, prev_state, ctx, hypothesis);
    target += kTlbMarker;
    blocks.push_back(std::move(target));

    std::string text;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (i) text += "\n\n";
        text += blocks[i];
    }
    return text;
}

}  // namespace

std::string render_tlb(const TurnBelief& tlb) { return render_pairs(tlb); }
std::string render_state(const DialogueState& state) { return render_pairs(state); }

RenderedPrompt build_inference_prompt(const PromptStyle& style, const SchemaTable& schema,
                                      const std::vector<Exemplar>& exemplars, const DialogueState& prev_state,
                                      const ContextWindow& ctx) {
    if (style.is_correction()) {
        throw ValidationError("build_inference_prompt called with correction style " + std::string(to_string(style.kind)));
    }
    check_exemplars(style, exemplars);
    RenderedPrompt p;
    p.text = assemble(style, schema, exemplars, prev_state, ctx, std::nullopt, std::nullopt);
    p.token_estimate = estimate_tokens(p.text);
    p.style = style;
    return p;
}

RenderedPrompt build_correction_prompt(const PromptStyle& style, const SchemaTable& schema,
                                       const std::vector<Exemplar>& exemplars, const DialogueState& prev_state,
                                       const ContextWindow& ctx, const TurnBelief& hypothesis,
                                       const std::optional<std::string>& instruction) {
    if (!style.is_correction()) {
        throw ValidationError("build_correction_prompt called with inference style " + std::string(to_string(style.kind)));
    }
    check_exemplars(style, exemplars);
    RenderedPrompt p;
    p.text = assemble(style, schema, exemplars, prev_state, ctx, hypothesis, instruction);
    p.token_estimate = estimate_tokens(p.text);
    p.style = style;
    return p;
}

TrainingText render_training_sequence(const PromptStyle& style, const SchemaTable& schema,
                                      const std::vector<Exemplar>& exemplars, const DialogueState& prev_state,
                                      const ContextWindow& ctx, const TurnBelief& hypothesis, const TurnBelief& gold,
                                      const std::optional<std::string>& instruction) {
    TrainingText t;
    t.full_text = build_correction_prompt(style, schema, exemplars, prev_state, ctx, hypothesis, instruction).text;
    t.full_text += ' ';
    t.target_start = t.full_text.size();
    t.full_text += render_tlb(gold);
    t.target_end = t.full_text.size();
    return t;
}

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool iequals(std::string_view a, std::string_view b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i]))) {
            return false;
        }
    }
    return true;
}

}  // namespace

ParsedBelief parse_tlb(std::string_view completion, bool strict) {
    ParsedBelief out;
    std::string_view line = completion;
    // Stop at the first line break or at any block marker the model starts to emit.
    std::size_t cut = line.size();
    for (std::string_view stop : {std::string_view("\n"), kTlbMarker, kExampleMarker, kTargetMarker, kStateMarker,
                                  kSchemaMarker, kHypMarker}) {
        cut = std::min(cut, line.find(stop));
    }
    line = trim(line.substr(0, cut));
    while (!line.empty() && line.back() == ';') line = trim(line.substr(0, line.size() - 1));

    if (line.empty()) {
        out.diagnostics.push_back("empty completion");
        return out;
    }
    if (iequals(line, kNoPairs)) return out;

    std::size_t pos = 0;
    while (pos <= line.size()) {
        auto sep = line.find("; ", pos);
        if (sep == std::string_view::npos) sep = line.size();
        const std::string_view item = trim(line.substr(pos, sep - pos));
        pos = sep + 2;
        if (item.empty()) continue;

        std::string problem;
        const auto colon = item.find(": ");
        if (colon == std::string_view::npos) {
            problem = "malformed item '" + std::string(item) + "': expected 'slot: value'";
        } else {
            try {
                out.tlb.set(item.substr(0, colon), item.substr(colon + 2));
            } catch (const ValidationError& e) {
                problem = "malformed item '" + std::string(item) + "': " + e.what();
            }
        }
        if (!problem.empty()) {
            if (strict) throw ValidationError("parse_tlb: " + problem);
            out.diagnostics.push_back(std::move(problem));
        }
    }
    return out;
}

}  // namespace corrdst::prompt
