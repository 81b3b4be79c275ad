#include <gtest/gtest.h>

#include <sstream>

#include "trimlab/pipeline.hpp"

using namespace trimlab;

namespace {

std::vector<SweepRow> rows_with(std::initializer_list<double> ratios) {
    std::vector<SweepRow> rows;
    double t = 0.3;
    for (double r : ratios) {
        rows.push_back({t, r, 0.9, 100, 1000});
        t += 0.1;
    }
    return rows;
}

}  // namespace

TEST(Sweep, NearestRowPerTarget) {
    const auto rows = rows_with({0.80, 0.52, 0.30, 0.10});
    const auto picks = select_nearest(rows, {0.25, 0.50, 0.75});
    ASSERT_EQ(picks.size(), 3u);
    EXPECT_EQ(picks[0].row, 2u);
    EXPECT_EQ(picks[1].row, 1u);
    EXPECT_EQ(picks[2].row, 0u);
}

TEST(Sweep, TiesGoToEarlierRow) {
    const auto picks = select_nearest(rows_with({0.6, 0.4}), {0.5});
    EXPECT_EQ(picks[0].row, 0u);
}

TEST(Sweep, EmptyGridIsAConfigError) { EXPECT_THROW(select_nearest({}, {0.5}), ConfigError); }

TEST(Sweep, MonotonePairsCountsNonIncreasingSteps) {
    EXPECT_EQ(monotone_pairs(rows_with({0.8, 0.6, 0.6, 0.2})), 3u);
    EXPECT_EQ(monotone_pairs(rows_with({0.2, 0.6, 0.4})), 1u);
    EXPECT_EQ(monotone_pairs(rows_with({0.5})), 0u);
}

TEST(Sweep, CsvHasGridThenSelections) {
    const auto rows = rows_with({0.7, 0.3});
    std::istringstream in(sweep_csv(rows, select_nearest(rows, {0.25, 0.75})));
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    ASSERT_EQ(lines.size(), 5u);
    EXPECT_EQ(lines[0], "kind,target,t,trim_ratio,metric,params,macs");
    EXPECT_EQ(lines[1].rfind("grid,,0.3,0.7,", 0), 0u);
    EXPECT_EQ(lines[3].rfind("select,0.25,0.4,0.3,", 0), 0u);
    EXPECT_EQ(lines[4].rfind("select,0.75,0.3,0.7,", 0), 0u);
}
