#pragma once

// Prompts rendered from the fixture corpus and compared byte-for-byte with
// the files under tests/golden/.

#include <map>
#include <string>
#include <vector>

#include "corrdst/prompting.hpp"
#include "support.hpp"

namespace golden_cases {

using namespace corrdst;

inline DialogueState prev_gold_state(const Dialogue& d, int t) { return t > 1 ? d.turn(t - 1).gold_state : DialogueState{}; }

/// Two training turns as exemplars, with hand-set hypotheses: the first one
/// misses a pair and invents another, the second one is already correct.
inline std::vector<prompt::Exemplar> exemplars(const prompt::PromptStyle& style) {
    const auto& train = testing_support::fixture_train();
    const auto& schema = testing_support::fixture_schema();
    std::vector<prompt::Exemplar> out;
    for (const auto& [id, t] : std::vector<std::pair<std::string, int>>{{"train-000", 3}, {"train-005", 2}}) {
        const Dialogue& d = *train.find(id);
        prompt::Exemplar ex;
        ex.prev_state = prev_gold_state(d, t);
        ex.ctx = context_window(d, t, style.width);
        ex.gold_tlb = d.turn(t).gold_tlb;
        if (style.is_sgd()) ex.schema_local = prompt::schema_subset(schema, d.domains);
        if (style.is_correction()) ex.hypothesis = ex.gold_tlb;
        out.push_back(std::move(ex));
    }
    if (style.is_correction()) {
        TurnBelief wrong = out[0].gold_tlb;
        wrong.erase("hotel-stars");
        wrong.set("hotel-area", "centre");
        out[0].hypothesis = wrong;
    }
    return out;
}

struct Target {
    SchemaTable schema;
    DialogueState prev_state;
    ContextWindow ctx;
    TurnBelief hypothesis;
    TurnBelief gold;
};

inline Target target(const prompt::PromptStyle& style) {
    const auto& test = testing_support::fixture_test();
    const auto& schema = testing_support::fixture_schema();
    const Dialogue& d = *test.find("test-004");
    const int t = 4;
    Target tg;
    tg.schema = style.is_sgd() ? prompt::schema_subset(schema, d.domains) : schema;
    tg.prev_state = prev_gold_state(d, t);
    tg.ctx = context_window(d, t, style.width);
    tg.gold = d.turn(t).gold_tlb;
    tg.hypothesis = tg.gold;
    if (!tg.gold.empty()) tg.hypothesis.erase(tg.gold.begin()->first);
    tg.hypothesis.set("hotel-parking", "yes");
    return tg;
}

inline std::string render(prompt::StyleKind kind) {
    const auto style = prompt::PromptStyle::defaults(kind);
    const auto ex = exemplars(style);
    const auto tg = target(style);
    if (style.is_correction()) {
        return prompt::build_correction_prompt(style, tg.schema, ex, tg.prev_state, tg.ctx, tg.hypothesis).text;
    }
    return prompt::build_inference_prompt(style, tg.schema, ex, tg.prev_state, tg.ctx).text;
}

inline std::string render_training(prompt::StyleKind kind) {
    const auto style = prompt::PromptStyle::defaults(kind);
    const auto tg = target(style);
    return prompt::render_training_sequence(style, tg.schema, exemplars(style), tg.prev_state, tg.ctx, tg.hypothesis,
                                            tg.gold)
        .full_text;
}

/// File name -> rendered text.
inline std::map<std::string, std::string> all() {
    return {
        {"mwoz_inference.txt", render(prompt::StyleKind::MwozInference)},
        {"mwoz_correction.txt", render(prompt::StyleKind::MwozCorrection)},
        {"sgd_inference.txt", render(prompt::StyleKind::SgdInference)},
        {"sgd_correction.txt", render(prompt::StyleKind::SgdCorrection)},
        {"mwoz_training.txt", render_training(prompt::StyleKind::MwozCorrection)},
        {"sgd_training.txt", render_training(prompt::StyleKind::SgdCorrection)},
    };
}

}  // namespace golden_cases
