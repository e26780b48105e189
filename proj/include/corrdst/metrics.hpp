#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "corrdst/dialogue.hpp"

namespace corrdst::metrics {

/// Acceptable surface strings for a (slot, gold value). The gold value always
/// matches itself, so an empty table means exact matching.
class SynonymTable {
public:
    SynonymTable() = default;

    void add(std::string_view slot, std::string_view gold_value, std::string_view synonym);
    bool accepts(const std::string& slot, const std::string& gold_value, const std::string& hyp_value) const;
    bool empty() const { return table_.empty(); }

    /// {"domain-slot": {"gold value": ["synonym", ...]}}
    static SynonymTable load(const std::filesystem::path& path);

private:
    std::map<std::pair<std::string, std::string>, std::set<std::string>> table_;
};

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

bool pair_matches(const SlotValuePair& hyp, const SlotValuePair& gold, const SynonymTable& syn);

/// Number of gold pairs matched by the hypothesis. Slots are unique keys, so
/// each gold pair has at most one candidate.
template <typename Set>
std::size_t matched_pairs(const Set& hyp, const Set& gold, const SynonymTable& syn) {
    std::size_t tp = 0;
    for (const auto& [slot, value] : gold) {
        auto h = hyp.get(slot);
        if (h && syn.accepts(slot, value, std::string(*h))) ++tp;
    }
    return tp;
}

/// Precision/recall/F1 from pooled counts; empty-vs-empty is (1, 1, 1).
PRF prf_from_counts(std::size_t matched, std::size_t hyp_size, std::size_t gold_size);

template <typename Set>
PRF set_f1(const Set& hyp, const Set& gold, const SynonymTable& syn = {}) {
    return prf_from_counts(matched_pairs(hyp, gold, syn), hyp.size(), gold.size());
}

template <typename Set>
int joint_goal(const Set& hyp, const Set& gold, const SynonymTable& syn = {}) {
    if (hyp.size() != gold.size()) return 0;
    return matched_pairs(hyp, gold, syn) == gold.size() ? 1 : 0;
}

struct TurnRecord {
    std::string dialogue_id;
    int turn = 0;
    TurnBelief gold_tlb;
    DialogueState gold_state;
    TurnBelief hyp_tlb_first;
    DialogueState hyp_state_first;
    std::optional<TurnBelief> hyp_tlb_final;
    std::optional<DialogueState> hyp_state_final;
};

enum class Mode { First, Final };

enum class DomainCategory { InDomain, HalfOOD, OOD };

std::string_view to_string(DomainCategory c);
std::string_view to_string(Mode m);

struct Scores {
    double dst_jga = 0.0;
    double dst_f1 = 0.0;
    double tlb_jga = 0.0;
    double tlb_f1 = 0.0;
    std::size_t turns = 0;
};

struct MetricsReport {
    Scores overall;
    /// Present only after a category breakdown; empty categories are omitted.
    std::map<DomainCategory, Scores> categories;
};

/// JGA is the mean of per-turn joint goal indicators; F1 is micro-averaged
/// over pooled pair counts. Throws ValidationError on an empty record list,
/// on dialogues with missing turns, or when `mode` is Final and a record has
/// no final hypothesis.
MetricsReport evaluate_run(const std::vector<TurnRecord>& records, const SynonymTable& syn, Mode mode);

DomainCategory categorize_dialogue(const std::set<std::string>& dialogue_domains,
                                   const std::set<std::string>& train_domains);

MetricsReport breakdown_by_category(const std::vector<TurnRecord>& records, const DatasetSplit& dialogues,
                                    const std::set<std::string>& train_domains, const SynonymTable& syn, Mode mode);

}  // namespace corrdst::metrics
