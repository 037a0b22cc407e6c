#pragma once

#include <vector>

namespace djgp {

// Mean-of-ranks reduction across runs: score_rows[r][m] is method m's score
// in run r (lower is better); ties within a run share the average rank.
std::vector<double> mean_ranks(const std::vector<std::vector<double>>& score_rows);

// Full command-line tool: generate / train / predict / evaluate / experiment.
// Returns the process exit code (0 ok, 2 input error, 3 numerical error,
// 4 i/o error).
int run_cli(int argc, char** argv);

}  // namespace djgp
