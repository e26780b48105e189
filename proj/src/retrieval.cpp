#include "corrdst/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <nlohmann/json.hpp>

#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"
#include "corrdst/metrics.hpp"
#include "corrdst/parallel.hpp"
#include "corrdst/prompting.hpp"
#include "corrdst/rng.hpp"

namespace corrdst::retrieval {

double EmbeddingVector::norm() const { return std::sqrt(dot(*this, *this)); }

EmbeddingVector EmbeddingVector::normalized() const {
    for (double v : values) {
        if (!std::isfinite(v)) throw ValidationError("embedding contains a non-finite entry");
    }
    const double n = norm();
    if (!(n > 0.0)) throw ValidationError("cannot normalize a zero embedding");
    EmbeddingVector out{values};
    for (double& v : out.values) v /= n;
    return out;
}

double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim() != b.dim()) {
        throw ValidationError("embedding dimension mismatch: " + std::to_string(a.dim()) + " vs " +
                              std::to_string(b.dim()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
    return s;
}

std::vector<EmbeddingVector> EmbeddingBackend::embed_batch(const std::vector<std::string>& texts) {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t));
    return out;
}

HashEmbeddingBackend::HashEmbeddingBackend(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw ValidationError("hash embedding dimension must be positive");
}

std::string HashEmbeddingBackend::id() const {
    return "hash-embedding(dim=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_) + ")";
}

EmbeddingVector HashEmbeddingBackend::embed(std::string_view text) {
    EmbeddingVector v{std::vector<double>(dim_, 0.0)};
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        Rng rng(seed_, token);
        for (double& x : v.values) x += 2.0 * rng.uniform01() - 1.0;
        token.clear();
    };
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            token.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return v;
}

std::vector<std::string> RetrievalResult::ids() const {
    std::vector<std::string> out;
    out.reserve(hits.size());
    for (const auto& h : hits) out.push_back(h.entry->example_id);
    return out;
}

std::string serialize_for_embedding(const DialogueState& prev_state, const ContextWindow& ctx) {
    std::string out = "[STATE] " + prompt::render_state(prev_state);
    for (const auto& ex : ctx.exchanges) {
        out += " [SYS] ";
        out += ex.system.empty() ? std::string(prompt::kEmptyUtterance) : ex.system;
        out += " [USER] ";
        out += ex.user.empty() ? std::string(prompt::kEmptyUtterance) : ex.user;
    }
    return out;
}

std::vector<ExamplePayload> training_examples(const DatasetSplit& split, int width) {
    std::vector<ExamplePayload> out;
    for (const auto& d : split.dialogues) {
        DialogueState prev;
        for (const auto& turn : d.turns) {
            ExamplePayload p;
            p.dialogue_id = d.dialogue_id;
            p.turn = turn.index;
            p.domains = d.domains;
            p.prev_state = prev;
            p.ctx = context_window(d, turn.index, width);
            p.gold_tlb = turn.gold_tlb;
            out.push_back(std::move(p));
            prev = turn.gold_state;
        }
    }
    return out;
}

const IndexEntry* Index::find(std::string_view example_id) const {
    auto it = by_id_.find(example_id);
    return it == by_id_.end() ? nullptr : &entries_[it->second];
}

Index Index::from_entries(std::vector<IndexEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const IndexEntry& a, const IndexEntry& b) { return a.example_id < b.example_id; });
    Index index;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (i > 0 && entries[i - 1].example_id == e.example_id) {
            throw ValidationError("duplicate example id '" + e.example_id + "' in index");
        }
        if (e.vector.dim() == 0) throw ValidationError("empty vector for example '" + e.example_id + "'");
        if (index.dim_ == 0) index.dim_ = e.vector.dim();
        if (e.vector.dim() != index.dim_) {
            throw ValidationError("vector of example '" + e.example_id + "' has dimension " +
                                  std::to_string(e.vector.dim()) + ", expected " + std::to_string(index.dim_));
        }
        for (double v : e.vector.values) {
            if (!std::isfinite(v)) throw ValidationError("non-finite vector for example '" + e.example_id + "'");
        }
        index.by_id_.emplace(e.example_id, i);
    }
    index.entries_ = std::move(entries);
    return index;
}

Index Index::with_hypotheses(const std::map<std::string, TurnBelief>& hypotheses) const {
    Index copy = *this;
    for (auto& e : copy.entries_) {
        auto it = hypotheses.find(e.example_id);
        e.payload.hypothesis = it == hypotheses.end() ? std::nullopt : std::optional<TurnBelief>(it->second);
    }
    return copy;
}

void Index::save(const std::filesystem::path& path) const {
    std::string out;
    for (const auto& e : entries_) {
        nlohmann::json j = {{"example_id", e.example_id},
                            {"vector", e.vector.values},
                            {"payload_ref", {{"dialogue_id", e.payload.dialogue_id}, {"turn", e.payload.turn}}}};
        out += dump_line(j);
        out += '\n';
    }
    write_file(path, out);
}

Index Index::load(const std::filesystem::path& path, const DatasetSplit& split, int width) {
    std::map<std::string, ExamplePayload> payloads;
    for (auto& p : training_examples(split, width)) {
        auto id = example_id(p.dialogue_id, p.turn);
        payloads.emplace(std::move(id), std::move(p));
    }
    std::vector<IndexEntry> entries;
    std::size_t lineno = 0;
    for (const auto& j : read_jsonl(path)) {
        ++lineno;
        IndexEntry e;
        try {
            e.example_id = j.at("example_id").get<std::string>();
            e.vector.values = j.at("vector").get<std::vector<double>>();
            const auto& ref = j.at("payload_ref");
            auto key = example_id(ref.at("dialogue_id").get<std::string>(), ref.at("turn").get<int>());
            auto it = payloads.find(key);
            if (it == payloads.end()) {
                throw ValidationError("payload_ref " + key + " does not resolve against the training split");
            }
            e.payload = it->second;
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(path.string(), lineno, ex.what());
        } catch (const ValidationError& ex) {
            throw ParseError(path.string(), lineno, ex.what());
        }
        entries.push_back(std::move(e));
    }
    return from_entries(std::move(entries));
}

Index build_index(const std::vector<ExamplePayload>& examples, EmbeddingBackend& backend, int concurrency) {
    if (examples.empty()) throw ValidationError("cannot build an index from zero examples");
    std::vector<IndexEntry> entries(examples.size());
    {
        std::set<std::string> seen;
        for (std::size_t i = 0; i < examples.size(); ++i) {
            entries[i].example_id = example_id(examples[i].dialogue_id, examples[i].turn);
            if (!seen.insert(entries[i].example_id).second) {
                throw ValidationError("duplicate example id '" + entries[i].example_id + "'");
            }
        }
    }
    parallel_for(examples.size(), concurrency, [&](std::size_t i) {
        const auto& ex = examples[i];
        auto& entry = entries[i];
        try {
            entry.vector = backend.embed(serialize_for_embedding(ex.prev_state, ex.ctx)).normalized();
        } catch (const BackendError& e) {
            throw BackendError("embedding example '" + entry.example_id + "': " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("embedding example '" + entry.example_id + "': " + e.what());
        }
        entry.payload = ex;
    });
    return Index::from_entries(std::move(entries));
}

RetrievalResult retrieve(const Index& index, const EmbeddingVector& query, int k, const std::set<std::string>& exclude) {
    if (k < 1) throw ValidationError("retrieve: k must be >= 1");
    const EmbeddingVector q = query.normalized();
    if (q.dim() != index.dim()) {
        throw ValidationError("retrieve: query dimension " + std::to_string(q.dim()) + " does not match index dimension " +
                              std::to_string(index.dim()));
    }
    std::vector<Hit> hits;
    hits.reserve(index.size());
    for (const auto& e : index.entries()) {
        if (exclude.contains(e.example_id)) continue;
        hits.push_back({&e, dot(q, e.vector)});
    }
    if (hits.empty()) throw ValidationError("retrieve: index is empty after exclusion");
    const auto keep = std::min<std::size_t>(hits.size(), static_cast<std::size_t>(k));
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                      [](const Hit& a, const Hit& b) {
                          if (a.score != b.score) return a.score > b.score;
                          return a.entry->example_id < b.entry->example_id;
                      });
    hits.resize(keep);
    return {std::move(hits)};
}

double similarity_label(const TurnBelief& a, const TurnBelief& b) { return metrics::set_f1(a, b).f1; }

PairExportSummary export_retriever_pairs(const DatasetSplit& train, int width, int per_anchor, std::uint64_t seed,
                                         const std::filesystem::path& out) {
    if (per_anchor < 1) throw ValidationError("per_anchor must be >= 1");
    const auto examples = training_examples(train, width);
    if (examples.empty()) throw ValidationError("cannot export retriever pairs from an empty split");

    std::vector<std::string> ids, texts;
    for (const auto& ex : examples) {
        ids.push_back(example_id(ex.dialogue_id, ex.turn));
        texts.push_back(serialize_for_embedding(ex.prev_state, ex.ctx));
    }

    PairExportSummary summary;
    std::string body;
    for (std::size_t a = 0; a < examples.size(); ++a) {
        std::vector<std::size_t> order;
        for (std::size_t c = 0; c < examples.size(); ++c) {
            if (c != a) order.push_back(c);
        }
        Rng rng(seed, ids[a]);
        rng.shuffle(order);

        const std::size_t want = std::min<std::size_t>(order.size(), static_cast<std::size_t>(per_anchor));
        std::vector<std::size_t> picked;
        std::map<std::size_t, double> labels;
        auto label_of = [&](std::size_t c) {
            auto it = labels.find(c);
            if (it == labels.end()) it = labels.emplace(c, similarity_label(examples[a].gold_tlb, examples[c].gold_tlb)).first;
            return it->second;
        };
        auto pick_first = [&](auto pred) {
            if (picked.size() >= want) return;
            for (auto c : order) {
                if (std::find(picked.begin(), picked.end(), c) == picked.end() && pred(label_of(c))) {
                    picked.push_back(c);
                    return;
                }
            }
        };
        pick_first([](double l) { return l >= 0.5; });
        pick_first([](double l) { return l == 0.0; });
        for (auto c : order) {
            if (picked.size() >= want) break;
            if (std::find(picked.begin(), picked.end(), c) == picked.end()) picked.push_back(c);
        }

        for (auto c : picked) {
            nlohmann::json j = {{"anchor_id", ids[a]},
                                {"candidate_id", ids[c]},
                                {"anchor_text", texts[a]},
                                {"candidate_text", texts[c]},
                                {"label", label_of(c)}};
            body += dump_line(j);
            body += '\n';
            ++summary.lines;
        }
        ++summary.anchors;
    }
    try {
        write_file(out, body);
    } catch (const std::exception& e) {
        throw Error(std::string("writing retriever pairs: ") + e.what());
    }
    return summary;
}

}  // namespace corrdst::retrieval
