#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "corrdst/schema.hpp"

namespace corrdst {

/// Reserved TurnBelief value that clears a slot when aggregated into a state.
inline constexpr std::string_view kDeleteValue = "[DELETE]";

/// Lowercases, trims and collapses internal whitespace runs to one space.
/// Throws ValidationError when the result is empty.
std::string normalize_value(std::string_view raw);

/// normalize_value, except that the deletion marker keeps its canonical
/// spelling regardless of input case.
std::string normalize_belief_value(std::string_view raw);

/// Checks the "domain-slot" shape and returns the domain part.
/// Throws ValidationError for anything else.
std::string_view slot_domain(std::string_view qualified_slot);

struct SlotValuePair {
    std::string slot;
    std::string value;

    auto operator<=>(const SlotValuePair&) const = default;
};

/// A set of slot/value pairs with at most one value per slot, iterated in
/// lexicographic slot order. `AllowDelete` distinguishes turn-level beliefs
/// (which may carry the deletion marker) from accumulated dialogue states.
template <bool AllowDelete>
class SlotSet {
public:
    using container = std::map<std::string, std::string>;
    using const_iterator = container::const_iterator;

    SlotSet() = default;
    SlotSet(std::initializer_list<std::pair<std::string_view, std::string_view>> pairs) {
        for (const auto& [slot, value] : pairs) set(slot, value);
    }

    /// Inserts or overwrites. Both parts are normalized and validated.
    void set(std::string_view slot, std::string_view value);
    bool erase(const std::string& slot) { return pairs_.erase(slot) > 0; }

    std::optional<std::string_view> get(const std::string& slot) const {
        auto it = pairs_.find(slot);
        if (it == pairs_.end()) return std::nullopt;
        return it->second;
    }
    bool contains(const std::string& slot) const { return pairs_.contains(slot); }

    std::size_t size() const { return pairs_.size(); }
    bool empty() const { return pairs_.empty(); }
    const_iterator begin() const { return pairs_.begin(); }
    const_iterator end() const { return pairs_.end(); }
    const container& pairs() const { return pairs_; }

    std::vector<SlotValuePair> to_vector() const {
        std::vector<SlotValuePair> out;
        out.reserve(pairs_.size());
        for (const auto& [s, v] : pairs_) out.push_back({s, v});
        return out;
    }

    /// Domain prefixes of every slot.
    std::set<std::string> domains() const;

    bool operator==(const SlotSet&) const = default;

private:
    container pairs_;
};

using TurnBelief = SlotSet<true>;
using DialogueState = SlotSet<false>;

extern template class SlotSet<true>;
extern template class SlotSet<false>;

/// Applies one turn's belief to the previous state: the deletion marker
/// removes a slot, any other value inserts or overwrites.
DialogueState aggregate_state(const DialogueState& prev, const TurnBelief& tlb);

/// Running aggregation from an empty initial state; output[i] is the state
/// after tlbs[i].
std::vector<DialogueState> accumulate(const std::vector<TurnBelief>& tlbs);

struct Turn {
    int index = 0;  // 1-based
    std::string system_utterance;  // empty at turn 1
    std::string user_utterance;
    TurnBelief gold_tlb;
    DialogueState gold_state;
};

struct Dialogue {
    std::string dialogue_id;
    std::set<std::string> domains;
    std::vector<Turn> turns;

    const Turn& turn(int t) const;
};

struct Exchange {
    std::string system;
    std::string user;

    bool operator==(const Exchange&) const = default;
};

/// The last `width` exchanges ending at some turn, front-padded with empty
/// exchanges near the start of a dialogue.
struct ContextWindow {
    std::vector<Exchange> exchanges;

    bool operator==(const ContextWindow&) const = default;
};

ContextWindow context_window(const Dialogue& d, int t, int width);

struct DatasetSplit {
    std::string name;
    std::vector<Dialogue> dialogues;
    std::set<std::string> domain_set;

    const Dialogue* find(std::string_view dialogue_id) const;
    std::size_t turn_count() const;
};

struct LoadOptions {
    std::string name = "train";
    /// Promote consistency warnings to errors.
    bool strict = false;
};

struct LoadedDataset {
    DatasetSplit split;
    std::vector<std::string> warnings;
};

/// Reads a dialogue-per-line JSONL file:
/// {"dialogue_id", "domains", "turns": [{"system", "user", "tlb", "state"}]}
LoadedDataset load_dataset(const std::filesystem::path& path, const SchemaTable& schema,
                           const LoadOptions& options = {});

/// Same, over an in-memory JSONL document. `source` names it in errors.
LoadedDataset parse_dataset(std::string_view jsonl, const SchemaTable& schema,
                            const LoadOptions& options = {}, std::string_view source = "<memory>");

/// Picks ceil(fraction * N) whole dialogues uniformly without replacement.
/// The result is sorted by dialogue id.
DatasetSplit sample_low_resource(const DatasetSplit& split, double fraction, std::uint64_t seed);

/// Stable identifier of a turn: "<dialogue_id>:<turn>".
std::string example_id(std::string_view dialogue_id, int turn);

}  // namespace corrdst
