#include <gtest/gtest.h>

#include "corrdst/errors.hpp"
#include "corrdst/metrics.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace corrdst;
using namespace corrdst::metrics;

namespace {

SynonymTable east_table() {
    SynonymTable syn;
    syn.add("a-x", "east", "e");
    return syn;
}

TurnRecord record(const std::string& id, int turn, TurnBelief gold_tlb, DialogueState gold_state, TurnBelief hyp_tlb,
                  DialogueState hyp_state) {
    TurnRecord r;
    r.dialogue_id = id;
    r.turn = turn;
    r.gold_tlb = std::move(gold_tlb);
    r.gold_state = std::move(gold_state);
    r.hyp_tlb_first = std::move(hyp_tlb);
    r.hyp_state_first = std::move(hyp_state);
    return r;
}

}  // namespace

TEST(PairMatches, WorkedExamples) {
    EXPECT_TRUE(pair_matches({"a-x", "east"}, {"a-x", "east"}, {}));
    EXPECT_TRUE(pair_matches({"a-x", "e"}, {"a-x", "east"}, east_table()));
    EXPECT_FALSE(pair_matches({"a-x", "east"}, {"a-y", "east"}, {}));
}

TEST(PairMatches, SynonymsAreDirectional) {
    const auto syn = east_table();
    EXPECT_FALSE(pair_matches({"a-x", "east"}, {"a-x", "e"}, syn));
    EXPECT_FALSE(pair_matches({"a-y", "e"}, {"a-y", "east"}, syn));
}

TEST(SetF1, WorkedExamples) {
    const TurnBelief a{{"a-x", "1"}, {"a-y", "2"}};
    auto r = set_f1(a, a);
    EXPECT_EQ(r.precision, 1.0);
    EXPECT_EQ(r.f1, 1.0);
    r = set_f1(TurnBelief{{"a-x", "1"}, {"a-y", "2"}}, TurnBelief{{"a-x", "1"}, {"a-z", "3"}});
    EXPECT_DOUBLE_EQ(r.precision, 0.5);
    EXPECT_DOUBLE_EQ(r.recall, 0.5);
    EXPECT_DOUBLE_EQ(r.f1, 0.5);
    r = set_f1(TurnBelief{}, TurnBelief{});
    EXPECT_EQ(r.precision, 1.0);
    EXPECT_EQ(r.recall, 1.0);
    EXPECT_EQ(r.f1, 1.0);
}

TEST(SetF1, ZeroWhenNothingMatches) {
    EXPECT_EQ(set_f1(TurnBelief{{"a-x", "1"}}, TurnBelief{}).f1, 0.0);
    EXPECT_EQ(set_f1(TurnBelief{}, TurnBelief{{"a-x", "1"}}).f1, 0.0);
    EXPECT_EQ(set_f1(TurnBelief{{"a-x", "1"}}, TurnBelief{{"a-x", "2"}}).f1, 0.0);
}

TEST(JointGoal, WorkedExamples) {
    const DialogueState gold{{"a-x", "1"}, {"a-y", "2"}};
    EXPECT_EQ(joint_goal(gold, gold), 1);
    EXPECT_EQ(joint_goal(DialogueState{{"a-x", "1"}}, gold), 0);
    EXPECT_EQ(joint_goal(DialogueState{{"a-x", "1"}, {"a-y", "2"}, {"a-z", "3"}}, gold), 0);
    EXPECT_EQ(joint_goal(DialogueState{{"a-x", "e"}}, DialogueState{{"a-x", "east"}}, east_table()), 1);
}

TEST(MetricProperties, JointGoalIffPerfectF1) {
    Rng rng(31);
    testing_support::BeliefGen gen;
    for (int i = 0; i < 2000; ++i) {
        const auto a = gen.draw<DialogueState>(rng, 4);
        const auto b = rng.uniform01() < 0.3 ? a : gen.draw<DialogueState>(rng, 4);
        EXPECT_EQ(joint_goal(a, b) == 1, set_f1(a, b).f1 == 1.0);
    }
}

TEST(MetricProperties, SwappingSwapsPrecisionAndRecall) {
    Rng rng(37);
    testing_support::BeliefGen gen;
    for (int i = 0; i < 2000; ++i) {
        const auto a = gen.draw<TurnBelief>(rng, 5, 0.1);
        const auto b = gen.draw<TurnBelief>(rng, 5, 0.1);
        const auto ab = set_f1(a, b);
        const auto ba = set_f1(b, a);
        EXPECT_DOUBLE_EQ(ab.precision, ba.recall);
        EXPECT_DOUBLE_EQ(ab.recall, ba.precision);
        EXPECT_DOUBLE_EQ(ab.f1, ba.f1);
    }
}

TEST(MetricProperties, AddingSynonymsNeverLowersScores) {
    Rng rng(41);
    for (int i = 0; i < 300; ++i) {
        auto ts = oracle::random_turn_set(rng);
        const auto before = evaluate_run(ts.records, ts.table, Mode::First).overall;
        testing_support::BeliefGen gen;
        auto grown = ts.table;
        for (int j = 0; j < 3; ++j) {
            grown.add(gen.slots[rng.below(gen.slots.size())], gen.values[rng.below(gen.values.size())],
                      gen.values[rng.below(gen.values.size())]);
        }
        const auto after = evaluate_run(ts.records, grown, Mode::First).overall;
        EXPECT_GE(after.dst_jga, before.dst_jga);
        EXPECT_GE(after.dst_f1, before.dst_f1);
        EXPECT_GE(after.tlb_jga, before.tlb_jga);
        EXPECT_GE(after.tlb_f1, before.tlb_f1);
    }
}

TEST(EvaluateRun, AllCorrect) {
    std::vector<TurnRecord> rs = {record("d", 1, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "1"}}),
                                  record("d", 2, {}, {{"a-x", "1"}}, {}, {{"a-x", "1"}})};
    const auto s = evaluate_run(rs, {}, Mode::First).overall;
    EXPECT_EQ(s.dst_jga, 1.0);
    EXPECT_EQ(s.dst_f1, 1.0);
    EXPECT_EQ(s.tlb_jga, 1.0);
    EXPECT_EQ(s.tlb_f1, 1.0);
    EXPECT_EQ(s.turns, 2u);
}

TEST(EvaluateRun, WrongTurnBeliefWithRecoveredState) {
    // Turn 1 predicts the wrong value; turn 2 overwrites it with the gold one.
    const std::vector<TurnBelief> hyp_tlbs = {{{"a-x", "2"}}, {{"a-x", "1"}, {"a-y", "3"}}};
    const std::vector<TurnBelief> gold_tlbs = {{{"a-x", "1"}}, {{"a-y", "3"}}};
    const auto hyp_states = accumulate(hyp_tlbs);
    const auto gold_states = accumulate(gold_tlbs);
    std::vector<TurnRecord> rs;
    for (int t = 0; t < 2; ++t) rs.push_back(record("d", t + 1, gold_tlbs[t], gold_states[t], hyp_tlbs[t], hyp_states[t]));
    const auto s = evaluate_run(rs, {}, Mode::First).overall;
    // Frozen by hand: TLB joint 0/2 (turn 2 has an extra pair), states 0 then 1.
    EXPECT_DOUBLE_EQ(s.tlb_jga, 0.0);
    EXPECT_DOUBLE_EQ(s.dst_jga, 0.5);
    // TLB pairs: tp 1, hyp 3, gold 2 -> P 1/3, R 1/2, F1 0.4.
    EXPECT_NEAR(s.tlb_f1, 0.4, 1e-15);
    // State pairs: tp 2, hyp 3, gold 3 -> F1 2/3.
    EXPECT_NEAR(s.dst_f1, 2.0 / 3.0, 1e-15);
}

TEST(EvaluateRun, HalfRightTurnBeliefs) {
    std::vector<TurnRecord> rs = {record("d", 1, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "2"}}, {{"a-x", "2"}}),
                                  record("d", 2, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "1"}})};
    const auto s = evaluate_run(rs, {}, Mode::First).overall;
    EXPECT_DOUBLE_EQ(s.tlb_jga, 0.5);
    EXPECT_DOUBLE_EQ(s.dst_jga, 0.5);
}

TEST(EvaluateRun, Errors) {
    EXPECT_THROW(evaluate_run({}, {}, Mode::First), ValidationError);
    std::vector<TurnRecord> gap = {record("d", 1, {}, {}, {}, {}), record("d", 3, {}, {}, {}, {})};
    EXPECT_THROW(evaluate_run(gap, {}, Mode::First), ValidationError);
    std::vector<TurnRecord> no_final = {record("d", 1, {}, {}, {}, {})};
    EXPECT_THROW(evaluate_run(no_final, {}, Mode::Final), ValidationError);
}

TEST(EvaluateRun, MatchesBruteForceOracle) {
    Rng rng(43);
    for (int i = 0; i < 300; ++i) {
        const auto ts = oracle::random_turn_set(rng);
        for (bool final_mode : {false, true}) {
            const auto got = evaluate_run(ts.records, ts.table, final_mode ? Mode::Final : Mode::First).overall;
            const auto want = oracle::brute_evaluate(ts.records, ts.synonyms, final_mode);
            EXPECT_NEAR(got.dst_jga, want.dst_jga, 1e-9);
            EXPECT_NEAR(got.dst_f1, want.dst_f1, 1e-9);
            EXPECT_NEAR(got.tlb_jga, want.tlb_jga, 1e-9);
            EXPECT_NEAR(got.tlb_f1, want.tlb_f1, 1e-9);
        }
    }
}

TEST(Categorize, WorkedExamples) {
    const std::set<std::string> train = {"hotel", "taxi"};
    EXPECT_EQ(categorize_dialogue({"hotel"}, train), DomainCategory::InDomain);
    EXPECT_EQ(categorize_dialogue({"flights"}, train), DomainCategory::OOD);
    EXPECT_EQ(categorize_dialogue({"hotel", "flights"}, train), DomainCategory::HalfOOD);
    EXPECT_THROW(categorize_dialogue({}, train), ValidationError);
}

namespace {

DatasetSplit category_split() {
    DatasetSplit s;
    auto add = [&](std::string id, std::set<std::string> domains) {
        Dialogue d;
        d.dialogue_id = std::move(id);
        d.domains = std::move(domains);
        s.dialogues.push_back(d);
    };
    add("in", {"hotel"});
    add("half", {"hotel", "flight"});
    add("ood", {"flight"});
    return s;
}

}  // namespace

TEST(Breakdown, OneDialoguePerCategory) {
    std::vector<TurnRecord> rs;
    for (int t = 1; t <= 2; ++t) rs.push_back(record("in", t, {}, {}, {}, {}));
    for (int t = 1; t <= 3; ++t) rs.push_back(record("half", t, {}, {}, {{"a-x", "1"}}, {}));
    rs.push_back(record("ood", 1, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "1"}}, {{"a-x", "1"}}));
    const auto rep = breakdown_by_category(rs, category_split(), {"hotel", "taxi"}, {}, Mode::First);
    ASSERT_EQ(rep.categories.size(), 3u);
    EXPECT_EQ(rep.categories.at(DomainCategory::InDomain).turns, 2u);
    EXPECT_EQ(rep.categories.at(DomainCategory::HalfOOD).turns, 3u);
    EXPECT_EQ(rep.categories.at(DomainCategory::OOD).turns, 1u);
    EXPECT_EQ(rep.categories.at(DomainCategory::HalfOOD).tlb_jga, 0.0);
    EXPECT_EQ(rep.categories.at(DomainCategory::OOD).dst_jga, 1.0);
    EXPECT_EQ(rep.categories.at(DomainCategory::OOD).tlb_f1, 1.0);
    EXPECT_EQ(rep.overall.turns, 6u);
}

TEST(Breakdown, AllTrainDomainsMeansAllInDomain) {
    std::vector<TurnRecord> rs = {record("in", 1, {}, {}, {}, {}), record("ood", 1, {}, {}, {}, {})};
    const auto rep = breakdown_by_category(rs, category_split(), {"hotel", "flight"}, {}, Mode::First);
    ASSERT_EQ(rep.categories.size(), 1u);
    EXPECT_EQ(rep.categories.begin()->first, DomainCategory::InDomain);
}

TEST(Breakdown, UnknownDialogueIsAnError) {
    std::vector<TurnRecord> rs = {record("nope", 1, {}, {}, {}, {})};
    EXPECT_THROW(breakdown_by_category(rs, category_split(), {"hotel"}, {}, Mode::First), ValidationError);
}

TEST(SynonymTableLoad, FixtureFile) {
    const auto syn = SynonymTable::load(testing_support::fixture("synonyms.json"));
    EXPECT_FALSE(syn.empty());
    EXPECT_TRUE(syn.accepts("hotel-area", "centre", "center"));
    EXPECT_TRUE(syn.accepts("hotel-area", "centre", "centre"));
    EXPECT_FALSE(syn.accepts("hotel-area", "center", "centre"));
}
