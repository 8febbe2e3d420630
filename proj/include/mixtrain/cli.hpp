#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mixtrain/config.hpp"

namespace mixtrain::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// MIXTRAIN_OUT when set, else ./runs.
std::filesystem::path default_output_root();

std::string run_id_of(const RunConfig& cfg);

struct TrainRunFlags {
  bool resume = false;  // continue from <dir>/checkpoint.bin when present
  bool quiet = false;
  std::size_t checkpoint_every = 0;  // epochs; the final checkpoint is always written
};

// One training run into `dir`: config.txt (written before any compute),
// metrics.jsonl, checkpoint.bin and summary.json. Throws on failure.
RunResult train_into(const RunConfig& cfg, const std::filesystem::path& dir, const TrainRunFlags& flags,
                     std::ostream& out);

struct GridAxis {
  std::string key;  // a config key, or "epochs" for e_ssl = e_sl
  std::vector<std::string> values;
};

// "alpha=0.1,0.5;rho=0.25,0.5" (axes may also come from separate strings).
std::vector<GridAxis> parse_grid(const std::vector<std::string>& specs);

struct SweepCell {
  std::string name;  // directory name, e.g. alpha-0.5_seed-1
  RunConfig config;
};

// Cartesian product in axis order. Without a seed axis every cell is
// repeated for each of `seeds`.
std::vector<SweepCell> expand_grid(const RunConfig& base, const std::vector<GridAxis>& axes,
                                   const std::vector<std::uint64_t>& seeds);

std::vector<std::uint64_t> parse_seeds(const std::string& text);

// Entry point: parses argv and maps errors to exit codes (0 ok, 2 config
// error, 3 runtime abort).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mixtrain::cli
