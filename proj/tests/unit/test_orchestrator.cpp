#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "helpers.hpp"
#include "lev/errors.hpp"
#include "lev/orchestrator.hpp"
#include "lev/toy_backend.hpp"

namespace lev {
namespace {

using Json = nlohmann::json;

EvolveConfig cheap(std::size_t period) {
    EvolveConfig c;
    c.l_prime = 2;
    c.toy.max_output_length = 3;
    c.K = 2;
    c.M_samples = 2;
    c.period_T = period;
    c.weaver_hidden = 8;
    c.weaver_train.epochs = 3;
    c.run_seed = 5;
    return c;
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);) {
        out.push_back(line);
    }
    return out;
}

std::vector<QueryContext> stream(std::size_t n, std::uint64_t seed) { return synthetic_modular_tasks(n, seed); }

TEST(Orchestrator, NoConsolidationBeforeThePeriodEnds) {
    const auto cfg = cheap(200);
    const ToyBackend b(cfg.toy);
    const ConstantScorer one(1.0);
    const auto qs = stream(199, 1);
    const auto r = run_stream(cfg, b, one, qs);
    EXPECT_TRUE(r.consolidations.empty());
    EXPECT_EQ(r.state.totals.consolidations, 0U);
    EXPECT_EQ(r.state.queries_processed, 199U);
    EXPECT_EQ(r.state.cycles_completed, 0U);
}

TEST(Orchestrator, ConsolidatesAfterEveryPeriod) {
    const auto cfg = cheap(200);
    const ToyBackend b(cfg.toy);
    const ConstantScorer one(1.0);
    const auto qs = stream(400, 2);
    std::ostringstream log;
    const auto r = run_stream(cfg, b, one, qs, &log);
    ASSERT_EQ(r.consolidations.size(), 2U);
    EXPECT_EQ(r.consolidations[0].query_index, 200U);
    EXPECT_EQ(r.consolidations[1].query_index, 400U);
    EXPECT_EQ(r.consolidations[0].cycle, 0U);
    EXPECT_EQ(r.consolidations[1].cycle, 1U);
    EXPECT_EQ(r.state.weaver->version(), 2U);
    EXPECT_EQ(r.state.cycles_completed, 2U);

    const auto lines = lines_of(log.str());
    ASSERT_EQ(lines.size(), 402U);
    EXPECT_EQ(Json::parse(lines[200])["event"], "consolidation");
    EXPECT_EQ(Json::parse(lines[401])["event"], "consolidation");
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto j = Json::parse(lines[i]);
        if (j["event"] == "query") {
            EXPECT_FALSE(j.contains("wall_ms"));
            EXPECT_EQ(j["weaver_version"], i < 200 ? 0 : 1);
        }
    }
    // Queries of the second cycle see the weaver published by the first night.
    ASSERT_TRUE(r.queries[200].result);
    EXPECT_EQ(r.queries[200].result->weaver_version, 1U);
    EXPECT_EQ(r.queries[199].result->weaver_version, 0U);
}

TEST(Orchestrator, NightIsDeferredUntilEnoughTriplets) {
    auto cfg = cheap(3);
    cfg.min_consolidation_triplets = 5;
    const ToyBackend b(cfg.toy);
    const ConstantScorer one(1.0);
    const auto r = run_stream(cfg, b, one, stream(9, 3));
    ASSERT_EQ(r.consolidations.size(), 2U);
    EXPECT_EQ(r.consolidations[0].query_index, 6U);
    EXPECT_EQ(r.consolidations[1].query_index, 9U);
    EXPECT_EQ(r.state.totals.deferred_consolidations, 1U);
    EXPECT_EQ(r.state.totals.consolidations, 2U);
}

TEST(Orchestrator, FailingQueriesAreLoggedAndSkipped) {
    const auto cfg = cheap(200);
    const ToyBackend b(cfg.toy);
    const RuleScorer rule;
    auto qs = stream(5, 4);
    qs[2] = QueryContext("abc", "bad", "1", std::string(kModularGrammar));
    std::ostringstream log;
    const auto r = run_stream(cfg, b, rule, qs, &log);
    EXPECT_EQ(r.state.totals.query_errors, 1U);
    EXPECT_EQ(r.state.totals.queries_ok, 4U);
    EXPECT_FALSE(r.queries[2].result);
    EXPECT_FALSE(r.queries[2].error.empty());
    const auto lines = lines_of(log.str());
    ASSERT_EQ(lines.size(), 5U);
    const auto bad = Json::parse(lines[2]);
    EXPECT_EQ(bad["event"], "query_error");
    EXPECT_EQ(bad["task_id"], "bad");

    // The other queries are unaffected: their records match a run without the bad one.
    std::ostringstream clean;
    auto good = stream(5, 4);
    run_stream(cfg, b, rule, good, &clean);
    const auto clean_lines = lines_of(clean.str());
    for (std::size_t i : {0U, 1U, 3U, 4U}) {
        auto a = Json::parse(lines[i]);
        auto c = Json::parse(clean_lines[i]);
        a.erase("buffer_size");
        c.erase("buffer_size");
        a.erase("neighbors");
        c.erase("neighbors");
        if (i < 2) {
            EXPECT_EQ(a, c) << i;
        } else {
            EXPECT_EQ(a["task_id"], c["task_id"]);
            EXPECT_EQ(a["query_index"], c["query_index"]);
        }
    }
}

TEST(Orchestrator, ScorerOutOfRangeIsAQueryError) {
    const auto cfg = cheap(200);
    const ToyBackend b(cfg.toy);
    const ConstantScorer bad(2.0);
    const auto r = run_stream(cfg, b, bad, stream(2, 5));
    EXPECT_EQ(r.state.totals.query_errors, 2U);
}

TEST(Orchestrator, CheckpointResumeContinuesIdentically) {
    auto cfg = cheap(100);
    cfg.min_consolidation_triplets = 2;
    const ToyBackend b(cfg.toy);
    const RuleScorer rule;
    const auto qs = stream(260, 6);

    std::ostringstream full;
    const auto whole = run_stream(cfg, b, rule, qs, &full);

    testing::TempDir dir("orch");
    std::ostringstream first;
    const auto part = run_stream(cfg, b, rule, std::span(qs).first(250), &first);
    checkpoint(part.state, cfg, dir.path());
    auto resumed = resume(dir.path());
    EXPECT_EQ(format_config(resumed.config), format_config(cfg));
    EXPECT_EQ(resumed.state.queries_processed, 250U);
    std::ostringstream second;
    const auto rest = run_stream(resumed.config, b, rule, std::span(qs).subspan(250), &second, std::move(resumed.state));

    EXPECT_EQ(first.str() + second.str(), full.str());
    EXPECT_EQ(rest.state.totals, whole.state.totals);
    EXPECT_EQ(rest.state.buffer.serialize(), whole.state.buffer.serialize());
    EXPECT_EQ(*rest.state.weaver, *whole.state.weaver);
}

TEST(Orchestrator, CheckpointIsByteStable) {
    const auto cfg = cheap(4);
    const ToyBackend b(cfg.toy);
    const ConstantScorer one(1.0);
    auto tweaked = cfg;
    tweaked.min_consolidation_triplets = 1;
    const auto r = run_stream(tweaked, b, one, stream(9, 7));
    testing::TempDir a("ckpt-a"), c("ckpt-b");
    checkpoint(r.state, tweaked, a.path());
    checkpoint(r.state, tweaked, c.path());
    for (const char* f : {"state.txt", "buffer.bin", "weaver.bin", "config.txt"}) {
        EXPECT_EQ(testing::slurp(a / f), testing::slurp(c / f)) << f;
        EXPECT_FALSE(testing::slurp(a / f).empty()) << f;
    }
    // Round trip, then checkpoint again.
    const auto back = resume(a.path());
    testing::TempDir d("ckpt-c");
    checkpoint(back.state, back.config, d.path());
    for (const char* f : {"state.txt", "buffer.bin", "weaver.bin", "config.txt"}) {
        EXPECT_EQ(testing::slurp(a / f), testing::slurp(d / f)) << f;
    }
}

TEST(Orchestrator, ResumeReportsMissingAndDamagedFiles) {
    testing::TempDir empty("empty");
    try {
        resume(empty.path());
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.kind(), LoadError::Kind::NotFound);
    }

    const auto cfg = cheap(4);
    const ToyBackend b(cfg.toy);
    const ConstantScorer one(1.0);
    const auto r = run_stream(cfg, b, one, stream(3, 8));
    testing::TempDir dir("damaged");
    checkpoint(r.state, cfg, dir.path());
    auto bytes = testing::slurp(dir / "buffer.bin");
    bytes[bytes.size() / 2] ^= 1;
    testing::spit(dir / "buffer.bin", bytes);
    try {
        resume(dir.path());
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("buffer.bin"), std::string::npos);
    }
}

TEST(Orchestrator, ForcedConsolidationNeedsATriplet) {
    const auto cfg = cheap(100);
    const ToyBackend b(cfg.toy);
    const ConstantScorer zero(0.0);
    Orchestrator orch(cfg, b, zero, RunState::fresh(cfg, b.descriptor()));
    orch.step(stream(1, 9).front());
    EXPECT_THROW(orch.consolidate_now(), PreconditionError);
}

TEST(Orchestrator, RejectsMismatchedState) {
    const auto cfg = cheap(100);
    const ToyBackend b(cfg.toy);
    const ConstantScorer one(1.0);
    auto other = cfg;
    other.l_prime = 3;
    EXPECT_THROW(Orchestrator(cfg, b, one, RunState::fresh(other, b.descriptor())), ConfigError);
    EXPECT_THROW(run_stream(cfg, b, one, std::span<const QueryContext>{}), PreconditionError);
}

TEST(QuerySeed, IndependentOfOtherQueries) {
    EXPECT_EQ(query_seed(1, 5), query_seed(1, 5));
    EXPECT_NE(query_seed(1, 5), query_seed(1, 6));
    EXPECT_NE(query_seed(1, 5), query_seed(2, 5));
}

TEST(QueryRecord, ParsesAndFormats) {
    const QueryContext q("1+2=", "id-1", "3", std::string(kModularGrammar));
    EXPECT_EQ(parse_query_record(format_query_record(q)), q);
    const auto bare = parse_query_record(R"({"task_id":"x","text":"9"})");
    EXPECT_FALSE(bare.rule_target);
    for (const char* bad : {"", "not json", "[]", R"({"task_id":"x"})", R"({"task_id":1,"text":"9"})",
                            R"({"task_id":"x","text":""})", R"({"task_id":"x","text":"9","rule_target":3})"}) {
        EXPECT_THROW(parse_query_record(bad), ConfigError) << bad;
    }
}

TEST(QueryRecord, LoadSkipsBlankLinesAndNamesBadOnes) {
    testing::TempDir dir("queries");
    const std::string good = format_query_record(QueryContext("1", "a"));
    const std::string text = good + "\n\n" + good + "\n{oops\n";
    testing::spit(dir / "q.jsonl", std::vector<std::uint8_t>(text.begin(), text.end()));
    try {
        load_queries(dir / "q.jsonl");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("q.jsonl:4"), std::string::npos);
    }
    EXPECT_THROW(load_queries(dir / "none.jsonl"), LoadError);
}

}  // namespace
}  // namespace lev
