#ifndef SEGPIPE_TESTS_TABLE_ORACLE_H
#define SEGPIPE_TESTS_TABLE_ORACLE_H

#include <cstddef>

// Frozen architecture oracle shared by the unit and acceptance suites:
// (row name, output resolution, output width, repetition) for a 512x512
// input at scale 1.

struct TableRowOracle {
    const char* name;
    int res;
    int width;
    int rep;
};

inline constexpr TableRowOracle kFcnTableOracle[] = {
    {"Input", 512, 1, 1},     {"Down 1", 512, 16, 2},   {"Pooling 1", 256, 16, 1},
    {"Down 2", 256, 32, 2},   {"Pooling 2", 128, 32, 1}, {"Down 3", 128, 64, 2},
    {"Pooling 3", 64, 64, 1}, {"Down 4", 64, 128, 2},   {"Pooling 4", 32, 128, 1},
    {"Across", 32, 256, 2},   {"Up 1", 64, 256, 1},     {"Merge 1", 64, 384, 1},
    {"Up 2", 64, 128, 1},     {"Up 3", 64, 128, 2},     {"Up 4", 128, 128, 1},
    {"Merge 2", 128, 192, 1}, {"Up 5", 128, 64, 1},     {"Up 6", 128, 64, 2},
    {"Up 7", 256, 64, 1},     {"Merge 3", 256, 96, 1},  {"Up 8", 256, 32, 1},
    {"Up 9", 256, 32, 2},     {"Up 10", 512, 32, 1},    {"Merge 4", 512, 48, 1},
    {"Up 11", 512, 16, 1},    {"Up 12", 512, 16, 2},    {"Output", 512, 1, 1},
};
inline constexpr std::size_t kFcnTableOracleSize =
    sizeof(kFcnTableOracle) / sizeof(kFcnTableOracle[0]);

inline constexpr TableRowOracle kResnetTableOracle[] = {
    {"Down 1", 512, 32, 1}, {"Down 2", 256, 32, 1},  {"Down 3", 128, 128, 3},
    {"Down 4", 64, 256, 8}, {"Down 5", 32, 512, 10}, {"Across", 32, 1024, 3},
    {"Up 1", 64, 512, 10},  {"Up 2", 128, 256, 8},   {"Up 3", 256, 128, 3},
    {"Up 4", 512, 32, 1},   {"Up 5", 512, 32, 1},    {"Classifier", 512, 1, 1},
};
inline constexpr std::size_t kResnetTableOracleSize =
    sizeof(kResnetTableOracle) / sizeof(kResnetTableOracle[0]);

#endif
