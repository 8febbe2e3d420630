#include "mixtrain/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <numeric>

#include "mixtrain/errors.hpp"
#include "mixtrain/ops.hpp"

namespace mixtrain {

FlopLedger& FlopLedger::operator+=(const FlopLedger& o) {
  backbone_fwd += o.backbone_fwd;
  backbone_bwd += o.backbone_bwd;
  ssl_head_fwd += o.ssl_head_fwd;
  ssl_head_bwd += o.ssl_head_bwd;
  sl_head_fwd += o.sl_head_fwd;
  sl_head_bwd += o.sl_head_bwd;
  eval_fwd += o.eval_fwd;
  mac_total += o.mac_total;
  wall_clock_s += o.wall_clock_s;
  return *this;
}

bool FlopLedger::same_counts(const FlopLedger& o) const {
  return backbone_fwd == o.backbone_fwd && backbone_bwd == o.backbone_bwd && ssl_head_fwd == o.ssl_head_fwd &&
         ssl_head_bwd == o.ssl_head_bwd && sl_head_fwd == o.sl_head_fwd && sl_head_bwd == o.sl_head_bwd &&
         eval_fwd == o.eval_fwd && mac_total == o.mac_total;
}

StepCost step_cost(const MacProfile& profile, std::size_t head_index) {
  return {profile.backbone, profile.recon_head,
          head_index < profile.cls_heads.size() ? profile.cls_heads[head_index] : 0};
}

namespace {

template <typename T>
void clear_grads(const MixModel<T>& model) {
  for (const auto& p : model.parameters()) {
    auto t = p.tensor;
    t.clear_grad();
  }
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw TrainingAbort(std::string("non-finite ") + what + " loss", -1);
}

// Detached copy of the features that collects one head's upstream gradient.
template <typename T>
Tensor<T> head_input(const Tensor<T>& features) {
  auto leaf = features.detach();
  leaf.set_requires_grad(true);
  return leaf;
}

template <typename T>
double run_recon_head(const MixModel<T>& model, const Tensor<T>& leaf, const MaskPlan& plan, const Tensor<T>& tokens,
                      LossTarget target, double weight) {
  GradientTape<T> tape;
  Tensor<T> loss;
  {
    TapeScope<T> scope(tape);
    loss = model.reconstruct(leaf, plan, tokens, target);
  }
  const double value = static_cast<double>(loss.item());
  check_finite(value, "reconstruction");
  tape.backward(loss, static_cast<T>(weight));
  return value;
}

template <typename T>
double run_cls_head(const MixModel<T>& model, const Tensor<T>& leaf, const std::vector<int>& labels, int task_id,
                    double weight) {
  GradientTape<T> tape;
  Tensor<T> loss;
  {
    TapeScope<T> scope(tape);
    loss = softmax_cross_entropy(model.classify(leaf, task_id), labels);
  }
  const double value = static_cast<double>(loss.item());
  check_finite(value, "classification");
  tape.backward(loss, static_cast<T>(weight));
  return value;
}

}  // namespace

template <typename T>
StepResult ssl_step(const MixModel<T>& model, const Tensor<T>& tokens, const MaskPlan& plan, LossTarget target,
                    const StepCost& cost) {
  clear_grads(model);
  GradientTape<T> tape;
  Tensor<T> loss;
  {
    TapeScope<T> scope(tape);
    loss = model.reconstruct(model.encode(tokens), plan, tokens, target);
  }
  StepResult r;
  r.losses.l_ssl = static_cast<double>(loss.item());
  check_finite(r.losses.l_ssl, "reconstruction");
  r.losses.joint = r.losses.l_ssl;
  tape.backward(loss);
  const std::uint64_t b = tokens.dim(0);
  r.delta.backbone_fwd = r.delta.backbone_bwd = b;
  r.delta.ssl_head_fwd = r.delta.ssl_head_bwd = b;
  r.delta.mac_total = 3 * b * (cost.backbone + cost.recon_head);
  return r;
}

template <typename T>
StepResult sl_step(const MixModel<T>& model, const Tensor<T>& tokens, const std::vector<int>& labels, int task_id,
                   const StepCost& cost) {
  clear_grads(model);
  GradientTape<T> tape;
  Tensor<T> loss;
  {
    TapeScope<T> scope(tape);
    loss = softmax_cross_entropy(model.classify(model.encode(tokens), task_id), labels);
  }
  StepResult r;
  r.losses.l_sl = static_cast<double>(loss.item());
  check_finite(r.losses.l_sl, "classification");
  r.losses.joint = r.losses.l_sl;
  tape.backward(loss);
  const std::uint64_t b = tokens.dim(0);
  r.delta.backbone_fwd = r.delta.backbone_bwd = b;
  r.delta.sl_head_fwd = r.delta.sl_head_bwd = b;
  r.delta.mac_total = 3 * b * (cost.backbone + cost.cls_head);
  return r;
}

template <typename T>
StepResult mix_step(const MixModel<T>& model, const Tensor<T>& tokens, const std::vector<int>& labels, int task_id,
                    const MaskPlan& plan, double alpha, LossTarget target, bool head_parallel, const StepCost& cost) {
  if (!model.has_task(task_id))
    throw ValidationError("mix step: no classification head for task " + std::to_string(task_id));
  clear_grads(model);

  GradientTape<T> backbone_tape;
  Tensor<T> features;
  {
    TapeScope<T> scope(backbone_tape);
    features = model.encode(tokens);
  }
  auto recon_in = head_input(features);
  auto cls_in = head_input(features);

  StepResult r;
  if (head_parallel) {
    auto recon = std::async(std::launch::async, [&] {
      return run_recon_head(model, recon_in, plan, tokens, target, alpha);
    });
    r.losses.l_sl = run_cls_head(model, cls_in, labels, task_id, 1.0 - alpha);
    r.losses.l_ssl = recon.get();
  } else {
    r.losses.l_ssl = run_recon_head(model, recon_in, plan, tokens, target, alpha);
    r.losses.l_sl = run_cls_head(model, cls_in, labels, task_id, 1.0 - alpha);
  }
  r.losses.joint = alpha * r.losses.l_ssl + (1.0 - alpha) * r.losses.l_sl;

  // fixed reduction order: reconstruction, then classification
  std::vector<T> upstream(recon_in.grad().begin(), recon_in.grad().end());
  auto cls_grad = cls_in.grad();
  for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] += cls_grad[i];
  backbone_tape.backward(features, upstream);

  const std::uint64_t b = tokens.dim(0);
  r.delta.backbone_fwd = r.delta.backbone_bwd = b;
  r.delta.ssl_head_fwd = r.delta.ssl_head_bwd = b;
  r.delta.sl_head_fwd = r.delta.sl_head_bwd = b;
  r.delta.mac_total = 3 * b * (cost.backbone + cost.recon_head + cost.cls_head);
  return r;
}

#define MIXTRAIN_INSTANTIATE_STEPS(T)                                                                           \
  template StepResult ssl_step(const MixModel<T>&, const Tensor<T>&, const MaskPlan&, LossTarget,              \
                               const StepCost&);                                                              \
  template StepResult sl_step(const MixModel<T>&, const Tensor<T>&, const std::vector<int>&, int,              \
                              const StepCost&);                                                               \
  template StepResult mix_step(const MixModel<T>&, const Tensor<T>&, const std::vector<int>&, int,             \
                               const MaskPlan&, double, LossTarget, bool, const StepCost&);

MIXTRAIN_INSTANTIATE_STEPS(float)
MIXTRAIN_INSTANTIATE_STEPS(double)

// ---------------------------------------------------------------- data

std::string to_string(SslSource source) {
  return source == SslSource::subset ? "subset" : "full";
}

SslSource parse_ssl_source(const std::string& text) {
  if (text == "subset") return SslSource::subset;
  if (text == "full") return SslSource::full;
  throw ConfigError("unknown ssl_source '" + text + "' (subset|full)");
}

PreparedData prepare_data(const std::vector<Dataset>& raw, const TrainConfig& cfg, const DataPlan& plan,
                          StreamSet& streams) {
  if (raw.empty()) throw ValidationError("no datasets supplied");
  PreparedData out;
  out.identity_mix = plan.ssl_source == SslSource::subset;
  const std::uint64_t subsample_seed = streams.seed_of(StreamSet::kSubsample);
  for (std::size_t t = 0; t < raw.size(); ++t) {
    const auto& ds = raw[t];
    if (!ds.labeled())
      throw ValidationError("dataset '" + ds.name + "' has no labels; supervised training needs a labeled source");
    ds.validate();
    if (t > 0 && !same_shape(ds, raw[0]))
      throw DimensionError("task datasets differ in item shape: " + shape_string(raw[0].item_shape()) + " vs " +
                           shape_string(ds.item_shape()));
    auto [pool, held] = split_holdout(ds, plan.held_out_fraction, derive_seed(plan.split_seed, 0, t));
    TaskData task;
    task.task_id = static_cast<int>(t);
    task.held_out = std::move(held);
    task.train = subsample(pool, cfg.p, derive_seed(subsample_seed, 0, t));
    if (out.identity_mix) {
      out.ssl_sources.push_back(task.train);
    } else {
      pool.role = DatasetRole::ssl;
      std::fill(pool.labels.begin(), pool.labels.end(), kNoLabel);
      out.ssl_sources.push_back(std::move(pool));
    }
    out.tasks.push_back(std::move(task));
  }
  return out;
}

bool same_metrics(const EpochRecord& a, const EpochRecord& b) {
  return a.epoch == b.epoch && a.phase == b.phase && a.epoch_in_phase == b.epoch_in_phase && a.lr == b.lr &&
         a.weight_ssl == b.weight_ssl && a.l_ssl == b.l_ssl && a.l_sl == b.l_sl && a.joint == b.joint &&
         a.l_sl_tasks == b.l_sl_tasks && a.accuracy == b.accuracy && a.ledger.same_counts(b.ledger);
}

// ---------------------------------------------------------------- trainer

namespace {

// Shuffle keys: one per task for supervised/mixed data, one for the pool.
constexpr std::uint64_t kPoolKey = 1u << 20;

Dataset union_pool(const std::vector<Dataset>& sources) {
  Dataset pool = sources.front();
  pool.name = "ssl_pool";
  for (std::size_t i = 1; i < sources.size(); ++i) {
    pool.pixels.insert(pool.pixels.end(), sources[i].pixels.begin(), sources[i].pixels.end());
    pool.labels.insert(pool.labels.end(), sources[i].labels.begin(), sources[i].labels.end());
  }
  return pool;
}

using Clock = std::chrono::steady_clock;

}  // namespace

Trainer::Trainer(ModelConfig model_config, TrainConfig config, PreparedData data, TrainOptions options)
    : model_config_(std::move(model_config)),
      config_(config),
      data_(std::move(data)),
      options_(options),
      schedule_(plan(config_)),
      streams_(config_.seed),
      model_(model_config_, streams_[StreamSet::kInit]) {
  config_.validate();
  if (data_.tasks.empty()) throw ValidationError("trainer needs at least one task");
  if (model_config_.tasks.size() != data_.tasks.size())
    throw ValidationError("task count mismatch: " + std::to_string(model_config_.tasks.size()) + " heads vs " +
                          std::to_string(data_.tasks.size()) + " datasets");
  for (std::size_t t = 0; t < data_.tasks.size(); ++t) {
    const auto& task = data_.tasks[t];
    if (model_config_.tasks[t].task_id != task.task_id)
      throw ValidationError("head " + std::to_string(t) + " is registered for task " +
                            std::to_string(model_config_.tasks[t].task_id) + ", data is task " +
                            std::to_string(task.task_id));
    const auto& bb = model_config_.backbone;
    if (task.train.channels != bb.channels || task.train.height != bb.input_height ||
        task.train.width != bb.input_width)
      throw ConfigError("dataset items " + shape_string(task.train.item_shape()) + " do not match the backbone input " +
                        std::to_string(bb.channels) + "x" + std::to_string(bb.input_height) + "x" +
                        std::to_string(bb.input_width));
    if (task.train.num_classes.value_or(0) > model_config_.tasks[t].num_classes)
      throw ConfigError("task " + std::to_string(task.task_id) + " has more classes than its head");
  }
  if (data_.ssl_sources.size() != data_.tasks.size()) throw ValidationError("one self-supervised source per task");
  params_ = model_.parameters();
  optimizer_ = AdamW<float>(params_, AdamWHyper{config_.beta1, config_.beta2, config_.eps, config_.weight_decay});
  macs_ = mac_profile(model_config_);
  ssl_pool_ = union_pool(data_.ssl_sources);
}

Trainer::PhasePosition Trainer::locate(std::size_t epoch) const {
  std::size_t start = 0;
  for (auto span : schedule_.spans()) {
    if (epoch < start + span.length) return {span.phase, epoch - start, span.length};
    start += span.length;
  }
  throw ValidationError("epoch " + std::to_string(epoch) + " beyond the schedule");
}

std::size_t Trainer::task_index(int task_id) const {
  for (std::size_t t = 0; t < data_.tasks.size(); ++t)
    if (data_.tasks[t].task_id == task_id) return t;
  throw ValidationError("unknown task " + std::to_string(task_id));
}

const EpochRecord& Trainer::run_epoch() {
  if (done()) throw ValidationError("training already finished");
  const auto pos = locate(epoch_);
  const auto started = Clock::now();
  if (pos.epoch_in_phase == 0) optimizer_.reset();
  const double lr = lr_at(pos.phase, pos.epoch_in_phase, pos.length, config_);
  const std::size_t ntasks = data_.tasks.size();
  const std::uint64_t shuffle_seed = streams_.seed_of(StreamSet::kShuffle);
  const std::uint64_t mask_seed = streams_.seed_of(StreamSet::kMaskPlan);
  const std::uint64_t augment_seed = streams_.seed_of(StreamSet::kAugment);
  const std::uint64_t mixpair_seed = streams_.seed_of(StreamSet::kMixPair);
  const auto& bb = model_config_.backbone;

  EpochRecord rec;
  rec.epoch = epoch_;
  rec.phase = pos.phase;
  rec.epoch_in_phase = pos.epoch_in_phase;
  rec.lr = lr;
  rec.weight_ssl = pos.phase == Phase::ssl ? 1.0 : pos.phase == Phase::mix ? config_.alpha : 0.0;

  // (task index, batch) sequence for this epoch
  std::vector<std::vector<Batch>> per_task;
  std::vector<std::pair<std::size_t, std::size_t>> order;
  if (pos.phase == Phase::ssl) {
    per_task.push_back(batches(ssl_pool_, config_.batch_size, derive_seed(shuffle_seed, kPoolKey), epoch_));
    for (std::size_t i = 0; i < per_task[0].size(); ++i) order.emplace_back(0, i);
  } else {
    std::vector<std::size_t> counts;
    for (std::size_t t = 0; t < ntasks; ++t) {
      const auto& task = data_.tasks[t];
      const auto key = derive_seed(shuffle_seed, t);
      if (pos.phase == Phase::mix) {
        auto mixed = mix(data_.ssl_sources[t], task.train, static_cast<float>(config_.lambda),
                         derive_seed(mixpair_seed, epoch_, t), task.task_id, data_.identity_mix);
        per_task.push_back(batches(mixed.data, config_.batch_size, key, epoch_, task.task_id));
      } else {
        per_task.push_back(batches(task.train, config_.batch_size, key, epoch_, task.task_id));
      }
      counts.push_back(per_task.back().size());
    }
    order = round_robin(counts);
  }

  double ssl_sum = 0.0;
  std::size_t ssl_n = 0;
  std::vector<double> sl_sum(ntasks, 0.0);
  std::vector<std::size_t> sl_n(ntasks, 0);
  try {
    for (std::size_t s = 0; s < order.size(); ++s) {
      auto& batch = per_task[order[s].first][order[s].second];
      if (options_.augment.enabled) {
        RngStream aug(derive_seed(augment_seed, epoch_, s));
        augment(batch, options_.augment, aug);
      }
      const auto tokens = patchify(batch.images, bb.patch_size);
      const std::size_t b = batch.size();
      StepResult r;
      if (pos.phase == Phase::ssl) {
        const auto mp = make_mask_plan(bb.tokens(), model_config_.mask_ratio, derive_seed(mask_seed, epoch_, s));
        r = ssl_step(model_, tokens, mp, config_.loss_target, step_cost(macs_, 0));
        ssl_sum += r.losses.l_ssl * static_cast<double>(b);
        ssl_n += b;
      } else {
        const std::size_t t = order[s].first;
        const int task_id = data_.tasks[t].task_id;
        if (pos.phase == Phase::mix) {
          const auto mp = make_mask_plan(bb.tokens(), model_config_.mask_ratio, derive_seed(mask_seed, epoch_, s));
          r = mix_step(model_, tokens, batch.labels, task_id, mp, config_.alpha, config_.loss_target,
                       config_.head_parallel, step_cost(macs_, t));
          ssl_sum += r.losses.l_ssl * static_cast<double>(b);
          ssl_n += b;
        } else {
          r = sl_step(model_, tokens, batch.labels, task_id, step_cost(macs_, t));
        }
        sl_sum[t] += r.losses.l_sl * static_cast<double>(b);
        sl_n[t] += b;
      }
      ledger_ += r.delta;
      optimizer_.step(params_, lr);
      batch.images = Tensor<float>();  // release the pixels early
    }
  } catch (const TrainingAbort& e) {
    throw TrainingAbort(std::string(e.what()).substr(0, std::string(e.what()).rfind(" (epoch")),
                        static_cast<int>(epoch_));
  }

  if (ssl_n) rec.l_ssl = ssl_sum / static_cast<double>(ssl_n);
  if (pos.phase != Phase::ssl) {
    for (std::size_t t = 0; t < ntasks; ++t)
      rec.l_sl_tasks.push_back(sl_n[t] ? sl_sum[t] / static_cast<double>(sl_n[t]) : 0.0);
    rec.l_sl = std::accumulate(rec.l_sl_tasks.begin(), rec.l_sl_tasks.end(), 0.0) / static_cast<double>(ntasks);
  }
  rec.joint = rec.weight_ssl * rec.l_ssl + (1.0 - rec.weight_ssl) * rec.l_sl;
  if (!std::isfinite(rec.joint)) throw TrainingAbort("non-finite epoch loss", static_cast<int>(epoch_));

  rec.accuracy = evaluate_accuracy();
  ledger_.wall_clock_s += std::chrono::duration<double>(Clock::now() - started).count();
  rec.ledger = ledger_;
  records_.push_back(std::move(rec));
  ++epoch_;
  return records_.back();
}

std::vector<double> Trainer::evaluate_accuracy() {
  std::vector<double> acc;
  const auto& bb = model_config_.backbone;
  for (std::size_t t = 0; t < data_.tasks.size(); ++t) {
    const auto& held = data_.tasks[t].held_out;
    const auto cls_macs = step_cost(macs_, t);
    std::size_t correct = 0;
    for (std::size_t start = 0; start < held.size(); start += options_.eval_batch) {
      std::vector<std::size_t> rows(std::min(options_.eval_batch, held.size() - start));
      std::iota(rows.begin(), rows.end(), start);
      auto batch = gather(held, rows);
      auto logits = model_.classify(model_.encode(patchify(batch.images, bb.patch_size)), data_.tasks[t].task_id);
      const std::size_t k = logits.dim(1);
      auto v = logits.data();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto row = v.subspan(r * k, k);
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += pred == batch.labels[r];
      }
      ledger_.eval_fwd += rows.size();
      ledger_.mac_total += rows.size() * (cls_macs.backbone + cls_macs.cls_head);
    }
    acc.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(held.size()));
  }
  return acc;
}

double Trainer::evaluate_reconstruction() const {
  const auto& bb = model_config_.backbone;
  const std::uint64_t seed = derive_seed(streams_.seed_of(StreamSet::kMaskPlan), "held_out");
  double sum = 0.0;
  std::size_t n = 0, batch_index = 0;
  for (const auto& task : data_.tasks) {
    const auto& held = task.held_out;
    for (std::size_t start = 0; start < held.size(); start += options_.eval_batch, ++batch_index) {
      std::vector<std::size_t> rows(std::min(options_.eval_batch, held.size() - start));
      std::iota(rows.begin(), rows.end(), start);
      const auto tokens = patchify(gather(held, rows).images, bb.patch_size);
      const auto mp = make_mask_plan(bb.tokens(), model_config_.mask_ratio, derive_seed(seed, batch_index));
      const double loss =
          static_cast<double>(model_.reconstruct(model_.encode(tokens), mp, tokens, LossTarget::masked).item());
      sum += loss * static_cast<double>(rows.size());
      n += rows.size();
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

void Trainer::restore(std::size_t epoch, FlopLedger ledger, std::vector<EpochRecord> records) {
  if (epoch > schedule_.total_epochs || records.size() != epoch)
    throw ValidationError("checkpoint state does not fit the schedule (epoch " + std::to_string(epoch) + ", " +
                          std::to_string(records.size()) + " records)");
  epoch_ = epoch;
  ledger_ = ledger;
  records_ = std::move(records);
}

RunResult Trainer::run(const std::function<void(const EpochRecord&)>& on_epoch) {
  while (!done()) {
    const auto& rec = run_epoch();
    if (on_epoch) on_epoch(rec);
  }
  return result();
}

RunResult Trainer::result() const {
  RunResult r;
  r.method = config_.method;
  r.config = config_;
  r.seed = config_.seed;
  r.schedule = schedule_;
  for (const auto& t : data_.tasks) r.task_ids.push_back(t.task_id);
  r.epochs = records_;
  r.ledger = ledger_;
  if (!records_.empty()) {
    r.final_accuracy = records_.back().accuracy;
    r.mean_accuracy = std::accumulate(r.final_accuracy.begin(), r.final_accuracy.end(), 0.0) /
                      static_cast<double>(r.final_accuracy.size());
  }
  if (options_.final_recon_eval && done()) r.recon_mse = evaluate_reconstruction();
  r.run_id = to_string(config_.method) + "-s" + std::to_string(config_.seed);
  return r;
}

namespace {

ModelConfig with_heads(ModelConfig cfg, const std::vector<Dataset>& datasets) {
  cfg.tasks.clear();
  for (std::size_t t = 0; t < datasets.size(); ++t) {
    if (!datasets[t].num_classes) throw ValidationError("dataset '" + datasets[t].name + "' has no class count");
    cfg.tasks.push_back(TaskHeadSpec{static_cast<int>(t), *datasets[t].num_classes});
  }
  return cfg;
}

}  // namespace

std::unique_ptr<Trainer> make_trainer(const ModelConfig& model_config, const TrainConfig& config,
                                      const std::vector<Dataset>& task_datasets, const DataPlan& plan,
                                      const TrainOptions& options) {
  if (task_datasets.empty()) throw ValidationError("training needs at least one task dataset");
  config.validate();
  StreamSet streams(config.seed);
  auto data = prepare_data(task_datasets, config, plan, streams);
  return std::make_unique<Trainer>(with_heads(model_config, task_datasets), config, std::move(data), options);
}

RunResult train(const ModelConfig& model_config, const TrainConfig& config, const Dataset& dataset,
                const DataPlan& plan, const TrainOptions& options) {
  return make_trainer(model_config, config, {dataset}, plan, options)->run();
}

RunResult train_multitask(const ModelConfig& model_config, const TrainConfig& config,
                          const std::vector<Dataset>& task_datasets, const DataPlan& plan,
                          const TrainOptions& options) {
  return make_trainer(model_config, config, task_datasets, plan, options)->run();
}

std::vector<BenchRow> benchmark(const std::vector<Method>& methods, const ModelConfig& model_config,
                                const TrainConfig& config, const std::vector<Dataset>& task_datasets,
                                const std::vector<std::uint64_t>& seeds, std::size_t repeat, const DataPlan& plan,
                                const TrainOptions& options) {
  if (methods.size() < 2) throw ValidationError("benchmark needs at least two methods (speedup is relative)");
  if (seeds.empty() || repeat < 1) throw ValidationError("benchmark needs at least one seed and one repeat");
  std::vector<BenchRow> rows;
  for (auto method : methods) {
    BenchRow row;
    row.method = method;
    double recon = 0.0;
    for (auto seed : seeds)
      for (std::size_t k = 0; k < repeat; ++k) {
        auto cfg = config;
        cfg.method = method;
        cfg.seed = seed;
        auto r = train_multitask(model_config, cfg, task_datasets, plan, options);
        row.latencies_s.push_back(r.ledger.wall_clock_s);
        row.accuracies.push_back(r.mean_accuracy);
        recon += r.recon_mse;
        if (row.latencies_s.size() == 1) row.mac_total = r.ledger.mac_total;
      }
    const auto n = static_cast<double>(row.latencies_s.size());
    row.mean_latency_s = std::accumulate(row.latencies_s.begin(), row.latencies_s.end(), 0.0) / n;
    row.mean_accuracy = std::accumulate(row.accuracies.begin(), row.accuracies.end(), 0.0) / n;
    row.mean_recon_mse = recon / n;
    rows.push_back(std::move(row));
  }
  const auto base = std::find_if(rows.begin(), rows.end(), [](const BenchRow& r) { return r.method == Method::ssl_sl; });
  if (base != rows.end())
    for (auto& row : rows) {
      row.speedup = base->mean_latency_s / row.mean_latency_s;
      row.predicted_speedup = static_cast<double>(base->mac_total) / static_cast<double>(row.mac_total);
    }
  return rows;
}

}  // namespace mixtrain
