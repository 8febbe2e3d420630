#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixtrain/data.hpp"
#include "mixtrain/engine.hpp"

namespace mixtrain {

using Json = nlohmann::json;

// ---------------------------------------------------------------- checkpoints

inline constexpr int kCheckpointVersion = 1;

// Header (JSON text) followed by a little-endian f32 payload: parameters,
// first moments, second moments, then the random stream states as raw
// bytes. The header records every offset. Written to a temp file and
// renamed into place.
void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& config_echo = {});

// Restores parameters, optimizer state, stream states, epoch index, ledger
// and epoch records into a trainer built with the same configuration.
void load_checkpoint(Trainer& trainer, const std::filesystem::path& path);

// Header only, for inspection.
Json read_checkpoint_header(const std::filesystem::path& path);

// ---------------------------------------------------------------- metrics log

struct RunInfo {
  std::string run_id;
  std::string method;
  std::string dataset;
  double p = 1.0;
  std::uint64_t seed = 0;
  std::size_t total_epochs = 0;
};

Json ledger_json(const FlopLedger& ledger);
FlopLedger ledger_from_json(const Json& j);
Json record_json(const EpochRecord& rec);
EpochRecord record_from_json(const Json& j);

// One JSON object per line:
//   run_id, method, dataset, p, seed, phase, epoch, epoch_in_phase,
//   total_epochs, lr, weight_ssl, l_ssl, l_sl, l_sl_tasks, joint, acc,
//   ledger{...}, wall_clock_s, timestamp
Json metrics_line(const RunInfo& run, const EpochRecord& rec);

/// Append-only writer; each record is flushed as a complete line.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void append(const RunInfo& run, const EpochRecord& rec);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct LogReadResult {
  std::vector<Json> records;
  std::vector<std::string> warnings;
};

// Malformed complete lines are reported and skipped; a trailing line
// without a newline is treated as an in-progress append and ignored.
LogReadResult read_metrics(const std::filesystem::path& path);

// ---------------------------------------------------------------- report

double relative_gain(double a, double b);  // 100 * (a - b) / b
double absolute_gain(double a, double b);  // a - b
double speedup(double latency_baseline, double latency);

struct RunSummary {
  std::string run_id;
  std::string method;
  std::string dataset;
  double p = 1.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;  // mean over tasks at the last epoch
  double latency_s = 0.0;
  bool complete = false;
};

// Last record of every run in the logs.
std::vector<RunSummary> summarize_runs(const std::vector<Json>& records);

struct ReportRow {
  std::string dataset;
  double p = 1.0;
  std::string method;
  std::size_t runs = 0;
  bool missing = false;
  double mean_accuracy = 0.0;
  double mean_latency_s = 0.0;
  std::optional<double> speedup_vs_ssl_sl;
  std::optional<double> abs_gain_vs_ssl_sl;
  std::optional<double> rel_gain_vs_ssl_sl;
  std::optional<double> abs_gain_vs_sl;
  std::optional<double> rel_gain_vs_sl;
};

// Groups complete runs by dataset x p x method. Every method seen in the
// logs gets a row in every (dataset, p) cell; rows without a complete run
// are marked missing.
std::vector<ReportRow> build_report(const std::vector<RunSummary>& runs);

std::string report_csv(const std::vector<ReportRow>& rows);
std::string report_text(const std::vector<ReportRow>& rows);
std::string pareto_csv(const std::vector<RunSummary>& runs);

struct ReportOutput {
  std::vector<ReportRow> rows;
  std::vector<RunSummary> runs;
  std::vector<std::string> warnings;
};

// Reads every metrics.jsonl below `dir`. Pure function of the files.
ReportOutput report_directory(const std::filesystem::path& dir);

// ---------------------------------------------------------------- reconstructions

// Writes sample_<i>.ppm (original left, reconstruction right) and
// reconstructions.csv with the per-sample MSE. Images are [n, C, H, W]
// with C of 1 or 3. Returns the MSE column.
std::vector<double> dump_reconstruction_pairs(const Tensor<float>& originals, const Tensor<float>& reconstructions,
                                              const std::filesystem::path& dir);

// Runs the model on dataset rows (unmasked when `plan` is empty) and dumps
// the pairs.
std::vector<double> dump_reconstructions(const MixModel<float>& model, const Dataset& samples,
                                         const std::vector<std::size_t>& rows, const std::filesystem::path& dir,
                                         const std::optional<MaskPlan>& plan = std::nullopt);

void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<unsigned char>& rgb);

}  // namespace mixtrain
