#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mixtrain/data.hpp"
#include "mixtrain/nn.hpp"
#include "mixtrain/rng.hpp"
#include "mixtrain/schedule.hpp"

namespace mixtrain {

/// Pass counts in sample-passes plus the multiply-accumulate total they
/// imply. Evaluation forwards are kept apart from training passes.
struct FlopLedger {
  std::uint64_t backbone_fwd = 0;
  std::uint64_t backbone_bwd = 0;
  std::uint64_t ssl_head_fwd = 0;
  std::uint64_t ssl_head_bwd = 0;
  std::uint64_t sl_head_fwd = 0;
  std::uint64_t sl_head_bwd = 0;
  std::uint64_t eval_fwd = 0;
  std::uint64_t mac_total = 0;
  double wall_clock_s = 0.0;

  FlopLedger& operator+=(const FlopLedger& other);
  // Equality of every counter; wall clock is ignored.
  bool same_counts(const FlopLedger& other) const;
};

// Per-sample forward MAC counts for one classification head and the
// shared parts; backward passes are charged at twice the forward cost.
struct StepCost {
  std::uint64_t backbone = 0;
  std::uint64_t recon_head = 0;
  std::uint64_t cls_head = 0;
};

StepCost step_cost(const MacProfile& profile, std::size_t head_index);

struct LossTerms {
  double l_ssl = 0.0;
  double l_sl = 0.0;
  double joint = 0.0;
};

struct StepResult {
  LossTerms losses;
  FlopLedger delta;
};

// All step functions clear every parameter gradient first and leave the
// new gradients on the parameters; the caller runs the optimizer.

// Reconstruction only: one backbone forward/backward plus the decoder.
template <typename T>
StepResult ssl_step(const MixModel<T>& model, const Tensor<T>& tokens, const MaskPlan& plan, LossTarget target,
                    const StepCost& cost = {});

// Classification only through the task's head.
template <typename T>
StepResult sl_step(const MixModel<T>& model, const Tensor<T>& tokens, const std::vector<int>& labels, int task_id,
                   const StepCost& cost = {});

// Merged pass: one backbone forward, both heads on the shared features,
// one backbone backward on the summed upstream gradient (reconstruction
// contribution first, then classification). With head_parallel the two
// heads run on separate threads; the reduction order is unchanged so
// results are bit-identical to the serial path.
template <typename T>
StepResult mix_step(const MixModel<T>& model, const Tensor<T>& tokens, const std::vector<int>& labels, int task_id,
                    const MaskPlan& plan, double alpha, LossTarget target, bool head_parallel = false,
                    const StepCost& cost = {});

/// One classification task: training split (already subsampled) and the
/// held-out split used for per-epoch evaluation.
struct TaskData {
  int task_id = 0;
  Dataset train;
  Dataset held_out;
};

enum class SslSource { subset, full };

std::string to_string(SslSource source);
SslSource parse_ssl_source(const std::string& text);

struct DataPlan {
  double held_out_fraction = 0.1;
  std::uint64_t split_seed = 0;  // fixed across run seeds
  SslSource ssl_source = SslSource::subset;
};

/// Inputs for a run: tasks plus the self-supervised pool of each task.
struct PreparedData {
  std::vector<TaskData> tasks;
  std::vector<Dataset> ssl_sources;  // per task; same data as train for subset
  bool identity_mix = true;
};

// Holds out a stratified split, then subsamples the rest at cfg.p with the
// run's subsample stream.
PreparedData prepare_data(const std::vector<Dataset>& raw, const TrainConfig& cfg, const DataPlan& plan,
                          StreamSet& streams);

struct EpochRecord {
  std::size_t epoch = 0;
  Phase phase = Phase::ssl;
  std::size_t epoch_in_phase = 0;
  double lr = 0.0;
  double weight_ssl = 0.0;  // 1 in the ssl phase, alpha in mix, 0 in sl
  double l_ssl = 0.0;       // 0 when the phase has no reconstruction term
  double l_sl = 0.0;        // mean over tasks of l_sl_tasks
  double joint = 0.0;       // weight_ssl * l_ssl + (1 - weight_ssl) * l_sl
  std::vector<double> l_sl_tasks;
  std::vector<double> accuracy;  // percent, per task in task order
  FlopLedger ledger;             // cumulative
};

// Equal losses, accuracies, learning rates and counters; wall clock ignored.
bool same_metrics(const EpochRecord& a, const EpochRecord& b);

struct RunResult {
  std::string run_id;
  Method method = Method::mixtraining;
  TrainConfig config;
  std::string config_echo;
  std::uint64_t seed = 0;
  PhaseSchedule schedule;
  std::vector<int> task_ids;
  std::vector<EpochRecord> epochs;
  std::vector<double> final_accuracy;
  double mean_accuracy = 0.0;
  double recon_mse = 0.0;  // held-out, fixed mask plans, loss target masked
  FlopLedger ledger;
};

struct TrainOptions {
  AugmentConfig augment;
  std::size_t eval_batch = 256;
  bool final_recon_eval = true;
};

/// Epoch-at-a-time driver for all three methods. State between epochs is
/// fully described by the parameters, optimizer state, epoch index, ledger,
/// epoch records and the random streams, which makes checkpoints exact.
class Trainer {
 public:
  Trainer(ModelConfig model_config, TrainConfig config, PreparedData data, TrainOptions options = {});

  const TrainConfig& config() const { return config_; }
  const PhaseSchedule& schedule() const { return schedule_; }
  MixModel<float>& model() { return model_; }
  const MixModel<float>& model() const { return model_; }
  AdamW<float>& optimizer() { return optimizer_; }
  const AdamW<float>& optimizer() const { return optimizer_; }
  StreamSet& streams() { return streams_; }
  const StreamSet& streams() const { return streams_; }
  const PreparedData& data() const { return data_; }

  std::size_t epoch() const { return epoch_; }
  bool done() const { return epoch_ >= schedule_.total_epochs; }
  const std::vector<EpochRecord>& records() const { return records_; }
  const FlopLedger& ledger() const { return ledger_; }

  // Runs the next epoch; returns its record. Non-finite losses or
  // gradients throw TrainingAbort carrying the epoch index.
  const EpochRecord& run_epoch();
  RunResult run(const std::function<void(const EpochRecord&)>& on_epoch = {});
  RunResult result() const;

  // Restores a mid-run state (used by checkpoint loading).
  void restore(std::size_t epoch, FlopLedger ledger, std::vector<EpochRecord> records);

  std::vector<double> evaluate_accuracy();
  double evaluate_reconstruction() const;

 private:
  struct PhasePosition {
    Phase phase;
    std::size_t epoch_in_phase;
    std::size_t length;
  };
  PhasePosition locate(std::size_t epoch) const;
  std::size_t task_index(int task_id) const;

  ModelConfig model_config_;
  TrainConfig config_;
  PreparedData data_;
  TrainOptions options_;
  PhaseSchedule schedule_;
  StreamSet streams_;
  MixModel<float> model_;
  std::vector<NamedParameter<float>> params_;
  AdamW<float> optimizer_;
  MacProfile macs_;
  Dataset ssl_pool_;  // union of the tasks' self-supervised sources

  std::size_t epoch_ = 0;
  FlopLedger ledger_;
  std::vector<EpochRecord> records_;
};

// Seeds the run streams, prepares the data and builds a trainer whose heads
// follow the task datasets (task ids 0..T-1).
std::unique_ptr<Trainer> make_trainer(const ModelConfig& model_config, const TrainConfig& config,
                                      const std::vector<Dataset>& task_datasets, const DataPlan& plan = {},
                                      const TrainOptions& options = {});

// make_trainer followed by a full run.
RunResult train(const ModelConfig& model_config, const TrainConfig& config, const Dataset& dataset,
                const DataPlan& plan = {}, const TrainOptions& options = {});
RunResult train_multitask(const ModelConfig& model_config, const TrainConfig& config,
                          const std::vector<Dataset>& task_datasets, const DataPlan& plan = {},
                          const TrainOptions& options = {});

struct BenchRow {
  Method method = Method::mixtraining;
  std::vector<double> latencies_s;  // per (seed, repeat)
  std::vector<double> accuracies;
  double mean_latency_s = 0.0;
  double mean_accuracy = 0.0;
  double mean_recon_mse = 0.0;
  std::uint64_t mac_total = 0;  // of the first run
  // latency(ssl_sl) / latency(this) when ssl_sl is part of the benchmark
  std::optional<double> speedup;
  std::optional<double> predicted_speedup;  // MAC-model ratio
};

// Every method under the same configuration and seeds. At least two
// methods are required.
std::vector<BenchRow> benchmark(const std::vector<Method>& methods, const ModelConfig& model_config,
                                const TrainConfig& config, const std::vector<Dataset>& task_datasets,
                                const std::vector<std::uint64_t>& seeds, std::size_t repeat = 1,
                                const DataPlan& plan = {}, const TrainOptions& options = {});

}  // namespace mixtrain
