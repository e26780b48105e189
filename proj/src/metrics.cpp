#include "corrdst/metrics.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"

namespace corrdst::metrics {

void SynonymTable::add(std::string_view slot, std::string_view gold_value, std::string_view synonym) {
    auto key = std::make_pair(normalize_value(slot), normalize_value(gold_value));
    auto& set = table_[key];
    set.insert(key.second);
    set.insert(normalize_value(synonym));
}

bool SynonymTable::accepts(const std::string& slot, const std::string& gold_value, const std::string& hyp_value) const {
    if (hyp_value == gold_value) return true;
    auto it = table_.find({slot, gold_value});
    return it != table_.end() && it->second.contains(hyp_value);
}

SynonymTable SynonymTable::load(const std::filesystem::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("synonym file " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ValidationError("synonym file " + path.string() + ": expected an object");
    SynonymTable table;
    for (const auto& [slot, values] : doc.items()) {
        if (!values.is_object()) throw ValidationError("synonym file: entry for '" + slot + "' must be an object");
        for (const auto& [gold, syns] : values.items()) {
            if (!syns.is_array()) throw ValidationError("synonym file: synonyms of '" + slot + "' must be an array");
            for (const auto& s : syns) table.add(slot, gold, s.get<std::string>());
        }
    }
    return table;
}

bool pair_matches(const SlotValuePair& hyp, const SlotValuePair& gold, const SynonymTable& syn) {
    return hyp.slot == gold.slot && syn.accepts(gold.slot, gold.value, hyp.value);
}

PRF prf_from_counts(std::size_t matched, std::size_t hyp_size, std::size_t gold_size) {
    if (hyp_size == 0 && gold_size == 0) return {1.0, 1.0, 1.0};
    PRF r;
    r.precision = hyp_size == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(hyp_size);
    r.recall = gold_size == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(gold_size);
    const double denom = r.precision + r.recall;
    r.f1 = denom == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / denom;
    return r;
}

std::string_view to_string(DomainCategory c) {
    switch (c) {
        case DomainCategory::InDomain: return "in-domain";
        case DomainCategory::HalfOOD: return "half-ood";
        case DomainCategory::OOD: return "ood";
    }
    return "?";
}

std::string_view to_string(Mode m) { return m == Mode::First ? "first" : "final"; }

namespace {

void check_complete(const std::vector<TurnRecord>& records) {
    std::map<std::string, std::vector<int>> turns;
    for (const auto& r : records) turns[r.dialogue_id].push_back(r.turn);
    for (auto& [id, ts] : turns) {
        std::sort(ts.begin(), ts.end());
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (ts[i] != static_cast<int>(i) + 1) {
                throw ValidationError("dialogue '" + id + "' is missing turn " + std::to_string(i + 1) +
                                      " in the evaluated records");
            }
        }
    }
}

}  // namespace

MetricsReport evaluate_run(const std::vector<TurnRecord>& records, const SynonymTable& syn, Mode mode) {
    if (records.empty()) throw ValidationError("cannot evaluate an empty record list");
    check_complete(records);

    std::size_t dst_hits = 0, tlb_hits = 0;
    std::size_t dst_tp = 0, dst_hyp = 0, dst_gold = 0;
    std::size_t tlb_tp = 0, tlb_hyp = 0, tlb_gold = 0;
    for (const auto& r : records) {
        const TurnBelief* hyp_tlb = &r.hyp_tlb_first;
        const DialogueState* hyp_state = &r.hyp_state_first;
        if (mode == Mode::Final) {
            if (!r.hyp_tlb_final || !r.hyp_state_final) {
                throw ValidationError("record " + example_id(r.dialogue_id, r.turn) + " has no final hypothesis");
            }
            hyp_tlb = &*r.hyp_tlb_final;
            hyp_state = &*r.hyp_state_final;
        }
        dst_hits += static_cast<std::size_t>(joint_goal(*hyp_state, r.gold_state, syn));
        tlb_hits += static_cast<std::size_t>(joint_goal(*hyp_tlb, r.gold_tlb, syn));
        dst_tp += matched_pairs(*hyp_state, r.gold_state, syn);
        dst_hyp += hyp_state->size();
        dst_gold += r.gold_state.size();
        tlb_tp += matched_pairs(*hyp_tlb, r.gold_tlb, syn);
        tlb_hyp += hyp_tlb->size();
        tlb_gold += r.gold_tlb.size();
    }
    const auto n = static_cast<double>(records.size());
    MetricsReport report;
    report.overall.turns = records.size();
    report.overall.dst_jga = static_cast<double>(dst_hits) / n;
    report.overall.tlb_jga = static_cast<double>(tlb_hits) / n;
    report.overall.dst_f1 = prf_from_counts(dst_tp, dst_hyp, dst_gold).f1;
    report.overall.tlb_f1 = prf_from_counts(tlb_tp, tlb_hyp, tlb_gold).f1;
    return report;
}

DomainCategory categorize_dialogue(const std::set<std::string>& dialogue_domains,
                                   const std::set<std::string>& train_domains) {
    if (dialogue_domains.empty()) throw ValidationError("cannot categorize a dialogue with no domains");
    std::size_t seen = 0;
    for (const auto& d : dialogue_domains) seen += train_domains.contains(d) ? 1 : 0;
    if (seen == dialogue_domains.size()) return DomainCategory::InDomain;
    if (seen == 0) return DomainCategory::OOD;
    return DomainCategory::HalfOOD;
}

MetricsReport breakdown_by_category(const std::vector<TurnRecord>& records, const DatasetSplit& dialogues,
                                    const std::set<std::string>& train_domains, const SynonymTable& syn, Mode mode) {
    MetricsReport report = evaluate_run(records, syn, mode);
    std::map<std::string, DomainCategory> category_of;
    std::map<DomainCategory, std::vector<TurnRecord>> parts;
    for (const auto& r : records) {
        auto it = category_of.find(r.dialogue_id);
        if (it == category_of.end()) {
            const Dialogue* d = dialogues.find(r.dialogue_id);
            if (!d) throw ValidationError("record refers to unknown dialogue '" + r.dialogue_id + "'");
            it = category_of.emplace(r.dialogue_id, categorize_dialogue(d->domains, train_domains)).first;
        }
        parts[it->second].push_back(r);
    }
    for (const auto& [category, part] : parts) {
        report.categories[category] = evaluate_run(part, syn, mode).overall;
    }
    return report;
}

}  // namespace corrdst::metrics
