#include <gtest/gtest.h>

#include <map>

#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"
#include "corrdst/retrieval.hpp"
#include "oracle.hpp"
#include "vector_table.hpp"
#include "support.hpp"

using namespace corrdst;
using namespace corrdst::retrieval;
using namespace vector_table;

namespace {

void expect_matches_oracle(const RetrievalResult& got, const std::vector<std::pair<std::string, double>>& want) {
    ASSERT_EQ(got.hits.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        EXPECT_EQ(got.hits[i].entry->example_id, want[i].first) << "rank " << i;
        EXPECT_NEAR(got.hits[i].score, want[i].second, 1e-12) << "rank " << i;
    }
}

}  // namespace

TEST(SerializeForEmbedding, WorkedExamples) {
    EXPECT_EQ(serialize_for_embedding({}, {{{"hi", "book a hotel"}}}), "[STATE] NONE [SYS] hi [USER] book a hotel");
    EXPECT_TRUE(serialize_for_embedding({{"hotel-area", "east"}}, {{{"", "x"}}}).starts_with("[STATE] hotel-area: east"));
    EXPECT_EQ(serialize_for_embedding({}, {{{"", ""}, {"a", "b"}}}), "[STATE] NONE [SYS] [NONE] [USER] [NONE] [SYS] a [USER] b");
}

TEST(EmbeddingVector, NormalizeRejectsDegenerateVectors) {
    EXPECT_THROW((EmbeddingVector{{0.0, 0.0}}).normalized(), ValidationError);
    EXPECT_THROW((EmbeddingVector{{1.0, std::nan("")}}).normalized(), ValidationError);
    EXPECT_NEAR((EmbeddingVector{{3.0, 4.0}}).normalized().values[0], 0.6, 1e-15);
    EXPECT_THROW(dot(EmbeddingVector{{1.0}}, EmbeddingVector{{1.0, 2.0}}), ValidationError);
}

TEST(HashEmbedding, DeterministicAndTokenBased) {
    HashEmbeddingBackend a(64, 9), b(64, 9), c(64, 10);
    EXPECT_EQ(a.embed("book a hotel").values, b.embed("book a hotel").values);
    EXPECT_EQ(a.embed("Book, a HOTEL!").values, a.embed("book a hotel").values);
    EXPECT_NE(a.embed("book a hotel").values, c.embed("book a hotel").values);
    EXPECT_EQ(a.embed("x").dim(), 64u);
    const auto h = a.embed("the hotel in the east").normalized();
    const auto near = a.embed("a hotel in the east").normalized();
    const auto far = a.embed("taxi to the airport at noon").normalized();
    EXPECT_GT(dot(h, near), dot(h, far));
    EXPECT_THROW(HashEmbeddingBackend(0, 1), ValidationError);
}

TEST(BuildIndex, SizeDuplicatesAndFailures) {
    TableBackend backend({{"a", {1, 0}}, {"b", {0, 1}}, {"c", {1, 1}}, {"z", {0, 0}}});
    const auto idx = build_index({payload("d", 1, "a"), payload("d", 2, "b"), payload("d", 3, "c")}, backend);
    EXPECT_EQ(idx.size(), 3u);
    EXPECT_EQ(idx.dim(), 2u);
    for (const auto& e : idx.entries()) EXPECT_NEAR(e.vector.norm(), 1.0, 1e-12);
    EXPECT_THROW(build_index({payload("d", 1, "a"), payload("d", 1, "b")}, backend), ValidationError);
    try {
        build_index({payload("d", 1, "a"), payload("d", 2, "z")}, backend);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("d:2"), std::string::npos) << e.what();
    }
    try {
        build_index({payload("q", 4, "explode")}, backend);
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_NE(std::string(e.what()).find("q:4"), std::string::npos) << e.what();
    }
    EXPECT_THROW(build_index({}, backend), ValidationError);
}

TEST(Retrieve, WorkedExamples) {
    TableBackend backend({{"a", {1, 0, 0}}, {"b", {0, 1, 0}}, {"c", {0, 2, 0}}});
    const auto idx = build_index({payload("d", 1, "a"), payload("d", 2, "b"), payload("d", 3, "c")}, backend);
    const auto exact = retrieve(idx, {{5, 0, 0}}, 1);
    EXPECT_EQ(exact.ids(), std::vector<std::string>{"d:1"});
    EXPECT_NEAR(exact.hits[0].score, 1.0, 1e-12);
    const auto ortho = retrieve(idx, {{0, 0, 1}}, 3);
    EXPECT_EQ(ortho.ids(), (std::vector<std::string>{"d:1", "d:2", "d:3"}));
    for (const auto& h : ortho.hits) EXPECT_EQ(h.score, 0.0);
    // b and c normalize to the same vector: tie broken by id.
    EXPECT_EQ(retrieve(idx, {{0, 1, 0}}, 2).ids(), (std::vector<std::string>{"d:2", "d:3"}));
    EXPECT_EQ(retrieve(idx, {{0, 1, 0}}, 2, {"d:2"}).ids(), (std::vector<std::string>{"d:3", "d:1"}));
    EXPECT_THROW(retrieve(idx, {{1, 0, 0}}, 0), ValidationError);
    EXPECT_THROW(retrieve(idx, {{1, 0, 0}}, 1, {"d:1", "d:2", "d:3"}), ValidationError);
    EXPECT_THROW(retrieve(idx, {{1, 0}}, 1), ValidationError);
}

TEST(Retrieve, MatchesExhaustiveOracle) {
    Rng rng(61);
    const auto ri = random_index(rng, 500, 12);
    for (int q = 0; q < 40; ++q) {
        std::vector<double> query(12);
        if (q % 5 == 0) {
            query = ri.items[rng.below(ri.items.size())].second;
        } else {
            for (auto& x : query) x = 2.0 * rng.uniform01() - 1.0;
        }
        std::set<std::string> exclude;
        if (q % 3 == 0) exclude = {ri.items[rng.below(500)].first, ri.items[rng.below(500)].first};
        for (int k : {1, 3, 10}) {
            expect_matches_oracle(retrieve(ri.index, {query}, k, exclude),
                                  oracle::exhaustive_top_k(ri.items, query, k, exclude));
        }
    }
}

TEST(Retrieve, PrefixConsistencyAndFullSort) {
    Rng rng(67);
    const auto ri = random_index(rng, 200, 6);
    for (int q = 0; q < 20; ++q) {
        std::vector<double> query(6);
        for (auto& x : query) x = 2.0 * rng.uniform01() - 1.0;
        const auto all = retrieve(ri.index, {query}, 200).ids();
        ASSERT_EQ(all.size(), 200u);
        const auto ten = retrieve(ri.index, {query}, 10).ids();
        const auto three = retrieve(ri.index, {query}, 3).ids();
        EXPECT_TRUE(std::equal(three.begin(), three.end(), ten.begin()));
        EXPECT_TRUE(std::equal(ten.begin(), ten.end(), all.begin()));
        const auto hits = retrieve(ri.index, {query}, 500).hits;
        for (std::size_t i = 1; i < hits.size(); ++i) {
            EXPECT_TRUE(hits[i - 1].score > hits[i].score ||
                        (hits[i - 1].score == hits[i].score &&
                         hits[i - 1].entry->example_id < hits[i].entry->example_id));
        }
    }
}

TEST(Retrieve, InvariantUnderPositiveQueryScaling) {
    Rng rng(71);
    const auto ri = random_index(rng, 150, 8);
    for (int q = 0; q < 30; ++q) {
        std::vector<double> query(8);
        for (auto& x : query) x = 2.0 * rng.uniform01() - 1.0;
        const auto base = retrieve(ri.index, {query}, 10).ids();
        for (double s : {0.001, 2.0, 1e6}) {
            auto scaled = query;
            for (auto& x : scaled) x *= s;
            EXPECT_EQ(retrieve(ri.index, {scaled}, 10).ids(), base) << "scale " << s;
        }
    }
}

TEST(Index, SaveLoadRoundTrip) {
    testing_support::TempDir dir("index");
    const auto& train = testing_support::fixture_train();
    HashEmbeddingBackend backend(32, 1);
    const auto idx = build_index(training_examples(train, 1), backend, 2);
    EXPECT_EQ(idx.size(), train.turn_count());
    idx.save(dir / "index.jsonl");
    const auto back = Index::load(dir / "index.jsonl", train, 1);
    ASSERT_EQ(back.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        EXPECT_EQ(back.entries()[i].example_id, idx.entries()[i].example_id);
        EXPECT_EQ(back.entries()[i].vector.values, idx.entries()[i].vector.values);
        EXPECT_EQ(back.entries()[i].payload.gold_tlb, idx.entries()[i].payload.gold_tlb);
        EXPECT_EQ(back.entries()[i].payload.ctx, idx.entries()[i].payload.ctx);
    }
    const auto* first = back.find("train-000:2");
    ASSERT_NE(first, nullptr);
    EXPECT_EQ(first->payload.prev_state, train.find("train-000")->turn(1).gold_state);
    EXPECT_EQ(back.find("nope:1"), nullptr);

    DatasetSplit partial = train;
    partial.dialogues.erase(partial.dialogues.begin());
    EXPECT_THROW(Index::load(dir / "index.jsonl", partial, 1), ParseError);
}

TEST(Index, WithHypothesesAttachesByIdOnly) {
    TableBackend backend({{"a", {1, 0}}, {"b", {0, 1}}});
    const auto idx = build_index({payload("d", 1, "a"), payload("d", 2, "b")}, backend);
    const auto with = idx.with_hypotheses({{"d:2", TurnBelief{{"hotel-area", "east"}}}, {"x:1", TurnBelief{}}});
    EXPECT_FALSE(with.find("d:1")->payload.hypothesis);
    EXPECT_EQ(*with.find("d:2")->payload.hypothesis, (TurnBelief{{"hotel-area", "east"}}));
    EXPECT_FALSE(idx.find("d:2")->payload.hypothesis);
}

TEST(SimilarityLabel, WorkedExamplesAndSymmetry) {
    const TurnBelief a{{"a-x", "1"}, {"a-y", "2"}};
    EXPECT_EQ(similarity_label(a, a), 1.0);
    EXPECT_EQ(similarity_label(a, TurnBelief{{"a-z", "1"}}), 0.0);
    EXPECT_DOUBLE_EQ(similarity_label(a, TurnBelief{{"a-x", "1"}, {"a-z", "3"}}), 0.5);
    Rng rng(73);
    testing_support::BeliefGen gen;
    for (int i = 0; i < 1000; ++i) {
        const auto p = gen.draw<TurnBelief>(rng, 4);
        const auto q = gen.draw<TurnBelief>(rng, 4);
        EXPECT_EQ(similarity_label(p, q), similarity_label(q, p));
        EXPECT_EQ(similarity_label(p, q) == 1.0, p == q);
    }
}

namespace {

DatasetSplit ten_turn_split() {
    DatasetSplit s;
    for (int d = 0; d < 2; ++d) {
        Dialogue dlg;
        dlg.dialogue_id = "p" + std::to_string(d);
        for (int t = 1; t <= 5; ++t) {
            Turn turn;
            turn.index = t;
            turn.user_utterance = "u" + std::to_string(t);
            turn.gold_tlb.set("hotel-area", t % 2 ? "east" : "west");
            if (t == 3) turn.gold_tlb.set("hotel-stars", "4");
            dlg.turns.push_back(turn);
        }
        s.dialogues.push_back(dlg);
    }
    return s;
}

}  // namespace

TEST(RetrieverPairs, CountsSelfExclusionAndDeterminism) {
    testing_support::TempDir dir("pairs");
    const auto split = ten_turn_split();
    const auto summary = export_retriever_pairs(split, 1, 2, 5, dir / "a.jsonl");
    EXPECT_EQ(summary.anchors, 10u);
    EXPECT_EQ(summary.lines, 20u);
    const auto lines = read_jsonl(dir / "a.jsonl");
    ASSERT_EQ(lines.size(), 20u);
    std::map<std::string, std::vector<double>> labels;
    for (const auto& j : lines) {
        EXPECT_NE(j["anchor_id"], j["candidate_id"]);
        const double label = j["label"].get<double>();
        EXPECT_GE(label, 0.0);
        EXPECT_LE(label, 1.0);
        labels[j["anchor_id"].get<std::string>()].push_back(label);
    }
    for (const auto& [anchor, ls] : labels) {
        EXPECT_TRUE(std::any_of(ls.begin(), ls.end(), [](double l) { return l >= 0.5; })) << anchor;
        EXPECT_TRUE(std::any_of(ls.begin(), ls.end(), [](double l) { return l == 0.0; })) << anchor;
    }
    export_retriever_pairs(split, 1, 2, 5, dir / "b.jsonl");
    EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
    export_retriever_pairs(split, 1, 2, 6, dir / "c.jsonl");
    EXPECT_NE(read_file(dir / "a.jsonl"), read_file(dir / "c.jsonl"));
    EXPECT_EQ(export_retriever_pairs(split, 1, 50, 5, dir / "d.jsonl").lines, 90u);
    EXPECT_THROW(export_retriever_pairs(split, 1, 0, 5, dir / "e.jsonl"), ValidationError);
}
