#pragma once

// Independent reference implementations used by unit and acceptance tests.
// They work on plain std::map / std::vector data and share no code with the
// library beyond the types they read from.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "corrdst/dialogue.hpp"
#include "corrdst/errors.hpp"
#include "corrdst/metrics.hpp"
#include "corrdst/retrieval.hpp"
#include "corrdst/rng.hpp"
#include "support.hpp"

namespace oracle {

using Pairs = std::vector<std::pair<std::string, std::string>>;
using SynonymList = std::vector<std::tuple<std::string, std::string, std::string>>;

template <typename Set>
Pairs pairs_of(const Set& s) {
    return Pairs(s.begin(), s.end());
}

inline bool accepts(const SynonymList& syn, const std::string& slot, const std::string& gold, const std::string& hyp) {
    if (gold == hyp) return true;
    return std::find(syn.begin(), syn.end(), std::make_tuple(slot, gold, hyp)) != syn.end();
}

/// Counts (hyp, gold) pairs that match, scanning the full cross product.
inline std::size_t brute_matches(const Pairs& hyp, const Pairs& gold, const SynonymList& syn) {
    std::size_t n = 0;
    for (const auto& g : gold) {
        for (const auto& h : hyp) {
            if (h.first == g.first && accepts(syn, g.first, g.second, h.second)) ++n;
        }
    }
    return n;
}

/// 1 iff every gold pair has a matching hyp pair and vice versa.
inline int brute_joint(const Pairs& hyp, const Pairs& gold, const SynonymList& syn) {
    for (const auto& g : gold) {
        bool found = false;
        for (const auto& h : hyp) found = found || (h.first == g.first && accepts(syn, g.first, g.second, h.second));
        if (!found) return 0;
    }
    for (const auto& h : hyp) {
        bool found = false;
        for (const auto& g : gold) found = found || (h.first == g.first && accepts(syn, g.first, g.second, h.second));
        if (!found) return 0;
    }
    return 1;
}

inline double brute_f1(std::size_t tp, std::size_t nh, std::size_t ng) {
    if (nh == 0 && ng == 0) return 1.0;
    const double p = nh ? double(tp) / double(nh) : 0.0;
    const double r = ng ? double(tp) / double(ng) : 0.0;
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

struct BruteScores {
    double dst_jga, dst_f1, tlb_jga, tlb_f1;
};

inline BruteScores brute_evaluate(const std::vector<corrdst::metrics::TurnRecord>& records, const SynonymList& syn,
                                  bool final_mode) {
    double dj = 0, tj = 0;
    std::size_t dtp = 0, dh = 0, dg = 0, ttp = 0, th = 0, tg = 0;
    for (const auto& r : records) {
        const auto ht = pairs_of(final_mode ? *r.hyp_tlb_final : r.hyp_tlb_first);
        const auto hs = pairs_of(final_mode ? *r.hyp_state_final : r.hyp_state_first);
        const auto gt = pairs_of(r.gold_tlb);
        const auto gs = pairs_of(r.gold_state);
        dj += brute_joint(hs, gs, syn);
        tj += brute_joint(ht, gt, syn);
        dtp += brute_matches(hs, gs, syn);
        dh += hs.size();
        dg += gs.size();
        ttp += brute_matches(ht, gt, syn);
        th += ht.size();
        tg += gt.size();
    }
    const double n = double(records.size());
    return {dj / n, brute_f1(dtp, dh, dg), tj / n, brute_f1(ttp, th, tg)};
}

/// Hypothesis derived from gold: kept, dropped, extended or rewritten pairs.
template <typename Set>
Set perturb(const Set& gold, corrdst::Rng& rng, const testing_support::BeliefGen& gen) {
    Set out;
    for (const auto& [slot, value] : gold) {
        const double u = rng.uniform01();
        if (u < 0.6) out.set(slot, value);
        else if (u < 0.8) out.set(slot, gen.values[rng.below(gen.values.size())]);
    }
    if (rng.uniform01() < 0.3) out.set(gen.slots[rng.below(gen.slots.size())], gen.values[rng.below(gen.values.size())]);
    return out;
}

struct TurnSet {
    std::vector<corrdst::metrics::TurnRecord> records;
    SynonymList synonyms;
    corrdst::metrics::SynonymTable table;
};

/// Records for 1-4 dialogues of 1-5 turns with first and final hypotheses and
/// a random synonym table over the generator alphabet.
inline TurnSet random_turn_set(corrdst::Rng& rng) {
    testing_support::BeliefGen gen;
    TurnSet ts;
    const auto syn_count = rng.below(4);
    for (std::size_t i = 0; i < syn_count; ++i) {
        const auto& slot = gen.slots[rng.below(gen.slots.size())];
        const auto& gold = gen.values[rng.below(gen.values.size())];
        const auto& alt = gen.values[rng.below(gen.values.size())];
        ts.synonyms.emplace_back(slot, gold, alt);
        ts.table.add(slot, gold, alt);
    }
    const auto dialogues = 1 + rng.below(4);
    for (std::size_t d = 0; d < dialogues; ++d) {
        const auto turns = 1 + rng.below(5);
        for (std::size_t t = 1; t <= turns; ++t) {
            corrdst::metrics::TurnRecord r;
            r.dialogue_id = "r" + std::to_string(d);
            r.turn = static_cast<int>(t);
            r.gold_tlb = gen.draw<corrdst::TurnBelief>(rng);
            r.gold_state = gen.draw<corrdst::DialogueState>(rng);
            r.hyp_tlb_first = perturb(r.gold_tlb, rng, gen);
            r.hyp_state_first = perturb(r.gold_state, rng, gen);
            r.hyp_tlb_final = perturb(r.gold_tlb, rng, gen);
            r.hyp_state_final = perturb(r.gold_state, rng, gen);
            ts.records.push_back(std::move(r));
        }
    }
    return ts;
}

/// Exhaustive top-k: score everything, sort by (score desc, id asc), cut.
inline std::vector<std::pair<std::string, double>> exhaustive_top_k(
    const std::vector<std::pair<std::string, std::vector<double>>>& items, const std::vector<double>& query, int k,
    const std::set<std::string>& exclude = {}) {
    auto unit = [](const std::vector<double>& v) {
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        std::vector<double> out(v);
        for (double& x : out) x /= n;
        return out;
    };
    const auto q = unit(query);
    std::vector<std::pair<std::string, double>> scored;
    for (const auto& [id, v] : items) {
        if (exclude.count(id)) continue;
        const auto u = unit(v);
        double s = 0;
        for (std::size_t i = 0; i < u.size(); ++i) s += q[i] * u[i];
        scored.emplace_back(id, s);
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (scored.size() > static_cast<std::size_t>(k)) scored.resize(static_cast<std::size_t>(k));
    return scored;
}

}  // namespace oracle

namespace oracle {

/// TurnBeliefs over a wide character set, for parser round-trips. Draws that
/// the belief type itself rejects are retried.
inline corrdst::TurnBelief rich_belief(corrdst::Rng& rng) {
    static const std::string chars = "abcdefghijklmnopqrstuvwxyz0123456789 -:'/&.;";
    static const std::vector<std::string> domains = {"hotel", "restaurant", "taxi", "train", "flight"};
    corrdst::TurnBelief out;
    const auto n = rng.below(7);
    while (out.size() < n) {
        std::string slot = domains[rng.below(domains.size())] + "-";
        const auto slot_len = 1 + rng.below(10);
        for (std::size_t i = 0; i < slot_len; ++i) slot.push_back("abcdefghijklmnopqrstuvwxyz "[rng.below(27)]);
        std::string value;
        if (rng.uniform01() < 0.1) {
            value = corrdst::kDeleteValue;
        } else {
            const auto len = 1 + rng.below(14);
            for (std::size_t i = 0; i < len; ++i) value.push_back(chars[rng.below(chars.size())]);
        }
        try {
            out.set(slot, value);
        } catch (const corrdst::ValidationError&) {
        }
    }
    return out;
}

/// Arbitrary byte strings biased toward separators and block markers.
inline std::string garbage(corrdst::Rng& rng) {
    static const std::vector<std::string> pieces = {"; ", ": ", ":", ";", "\n", "[TLB]", "[HYP]", "NONE", "[DELETE]",
                                                    "hotel-area", "east", "  ", "-", "\t", "\xff\xfe", "{", "}", "\"",
                                                    "[EXAMPLE 1]", "slot", "value"};
    std::string out;
    const auto n = rng.below(25);
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform01() < 0.3) {
            out.push_back(static_cast<char>(rng.below(256)));
        } else {
            out += pieces[rng.below(pieces.size())];
        }
    }
    return out;
}

}  // namespace oracle
