#include <atomic>
#include <random>
#include <sstream>

#include "groundprobe/csv.hpp"
#include "groundprobe/parallel.hpp"
#include "groundprobe/text.hpp"
#include "support.hpp"

using namespace gp_test;

TEST(Text, Utf8RoundTrip) {
    const std::string s = "tench \xE2\x80\x94 \xF0\x9F\x90\x9F caf\xC3\xA9";
    EXPECT_EQ(text::to_utf8(text::to_u32(s)), s);
    EXPECT_EQ(text::to_u32(s).size(), 14u);
}

TEST(Text, InvalidUtf8BecomesReplacementCharacter) {
    auto u = text::to_u32("a\xFF" "b");
    ASSERT_EQ(u.size(), 3u);
    EXPECT_EQ(u[1], U'�');
}

TEST(Text, TrimCollapseSplit) {
    EXPECT_EQ(text::trim("  a b \n"), "a b");
    EXPECT_EQ(text::collapse_whitespace(" a \t b\n\nc "), "a b c");
    EXPECT_EQ(text::split_whitespace("  x  y "), (std::vector<std::string>{"x", "y"}));
    EXPECT_TRUE(text::split_whitespace(" \t ").empty());
}

TEST(Text, ContainsNormalized) {
    EXPECT_TRUE(text::contains_normalized("What is the order of the Tench?", "tench"));
    EXPECT_FALSE(text::contains_normalized("What is it called?", "tench"));
    EXPECT_FALSE(text::contains_normalized("anything", ""));
}

TEST(Text, FoldSimpleKeepsLength) {
    const auto u = text::to_u32("\xC3\x84" "Bc\xC3\x9F");
    const auto f = text::fold_simple(u);
    ASSERT_EQ(f.size(), u.size());
    EXPECT_EQ(text::to_utf8(f), "\xC3\xA4" "bc\xC3\x9F");
}

TEST(Csv, EscapeAndParseRoundTrip) {
    std::mt19937_64 rng(5);
    const std::string alphabet = "ab,\"\n \r";
    for (int c = 0; c < 300; ++c) {
        std::vector<csv::Row> rows(1 + rng() % 4);
        const std::size_t cols = 1 + rng() % 4;
        for (auto& row : rows) {
            for (std::size_t k = 0; k < cols; ++k) {
                std::string f;
                for (std::size_t n = rng() % 6; n > 0; --n) f += alphabet[rng() % alphabet.size()];
                row.push_back(f);
            }
            if (cols == 1 && row[0].empty()) row[0] = "x";
        }
        std::ostringstream out;
        for (const auto& r : rows) csv::write_row(out, r);
        auto back = csv::parse(out.str());
        ASSERT_EQ(back, rows) << out.str();
    }
}

TEST(Csv, MalformedInputIsDataError) {
    EXPECT_THROW(csv::parse("a,\"b\n"), DataError);
    EXPECT_THROW(csv::parse("ab\"c,d\n"), DataError);
}

TEST(Csv, CrLfLineEndings) {
    auto rows = csv::parse("a,b\r\nc,d\r\n");
    EXPECT_EQ(rows, (std::vector<csv::Row>{{"a", "b"}, {"c", "d"}}));
}

TEST(Csv, FormatDoubleRoundTrips) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng) / (1 + rng() % 1000);
        EXPECT_EQ(std::stod(csv::format_double(v)), v);
    }
    EXPECT_EQ(csv::format_double(0.5), "0.5");
}

TEST(Parallel, VisitsEveryIndexOnceForAnyThreadCount) {
    for (unsigned threads : {1u, 2u, 3u, 8u}) {
        std::vector<std::atomic<int>> hits(101);
        parallel_for(hits.size(), threads, [&](std::size_t i) { ++hits[i]; });
        for (auto& h : hits) EXPECT_EQ(h.load(), 1);
    }
    parallel_for(0, 4, [](std::size_t) { FAIL(); });
}

TEST(Parallel, RethrowsWorkerException) {
    EXPECT_THROW(parallel_for(50, 4,
                              [](std::size_t i) {
                                  if (i == 37) throw DataError("boom");
                              }),
                 DataError);
}
