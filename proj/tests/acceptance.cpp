// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mixtrain/engine.hpp"
#include "mixtrain/metrics_io.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using namespace mixtrain;
using mixtrain::testing::check_gradients;
using mixtrain::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

ModelConfig toy_model(std::size_t classes = 3) {
  ModelConfig cfg;
  cfg.backbone.input_height = 8;
  cfg.backbone.input_width = 8;
  cfg.backbone.patch_size = 4;
  cfg.backbone.embed_dim = 16;
  cfg.backbone.depth = 2;
  cfg.backbone.num_heads = 2;
  cfg.decoder = DecoderConfig{8, 1, 2, 2};
  cfg.tasks = {TaskHeadSpec{0, classes}};
  cfg.mask_ratio = 0.5;
  return cfg;
}

Dataset toy_data(std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 20;
  spec.height = spec.width = 8;
  spec.seed = seed;
  return make_synthetic(spec);
}

TrainConfig toy_train(Method method, std::size_t e_ssl, std::size_t e_sl, double rho) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.e_ssl = e_ssl;
  cfg.e_sl = e_sl;
  cfg.rho = rho;
  cfg.batch_size = 8;
  cfg.base_lr_ssl = cfg.base_lr_sl = 2e-3;
  return cfg;
}

// Desk-scale configuration shared by the trend criteria.
TrainConfig desk_train() {
  TrainConfig cfg;
  cfg.e_ssl = cfg.e_sl = 20;
  cfg.rho = 0.5;
  cfg.alpha = 0.5;
  cfg.p = 0.1;
  cfg.batch_size = 32;
  cfg.base_lr_ssl = cfg.base_lr_sl = 2e-3;
  return cfg;
}

Dataset desk_data(std::uint64_t seed, std::size_t classes, std::size_t per_class) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.seed = seed;
  return make_synthetic(spec);
}

bool same_stream(const RunResult& a, const RunResult& b) {
  if (a.epochs.size() != b.epochs.size()) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i)
    if (!same_metrics(a.epochs[i], b.epochs[i])) return false;
  return a.final_accuracy == b.final_accuracy && a.recon_mse == b.recon_mse && a.ledger.same_counts(b.ledger);
}

std::vector<float> param_values(const Trainer& t) {
  std::vector<float> out;
  for (const auto& p : t.model().parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <typename T>
std::vector<std::vector<T>> grads_of(const MixModel<T>& model, ParamGroup group) {
  std::vector<std::vector<T>> out;
  for (const auto& p : model.parameters()) {
    if (p.group != group) continue;
    if (p.tensor.has_grad()) out.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    else out.emplace_back(p.tensor.numel(), T(0));
  }
  return out;
}

const BenchRow& row_of(const std::vector<BenchRow>& rows, Method m) {
  return *std::find_if(rows.begin(), rows.end(), [&](const BenchRow& r) { return r.method == m; });
}

Outcome gradients() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t ops = 0;
  for (int trial = 0; trial < 3; ++trial) {
    std::mt19937_64 rng(5000 + trial);
    for (auto& c : mixtrain::testing::op_cases(rng)) {
      auto r = check_gradients(c.inputs, c.fn);
      if (trial == 0) ++ops;
      if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = c.name;
    }
  }

  auto cfg = toy_model();
  RngStream init(21);
  MixModel<double> model(cfg, init);
  std::mt19937_64 rng(121);
  const std::size_t t = cfg.backbone.tokens(), pd = cfg.backbone.patch_dim();
  auto tokens = random_tensor({3, t, pd}, rng);
  std::vector<int> labels{0, 2, 1};
  auto plan = make_mask_plan(t, 0.5, 21);
  const double alpha = 0.3;
  std::vector<Tensor<double>> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  auto joint = check_gradients(params, [&](const std::vector<Tensor<double>>&) {
    auto features = model.encode(tokens);
    auto l_ssl = model.reconstruct(features, plan, tokens, LossTarget::masked);
    auto l_sl = softmax_cross_entropy(model.classify(features, 0), labels);
    return add(scale(l_ssl, alpha), scale(l_sl, 1.0 - alpha));
  });
  if (joint.max_rel_error > worst) worst = joint.max_rel_error, worst_name = "joint objective";
  return {worst < 1e-4, std::to_string(ops) + " ops + joint objective (" + std::to_string(t) +
                            " tokens), max rel error " + sci(worst) + " (" + worst_name + ")"};
}

Outcome schedule_grid() {
  std::size_t checked = 0, bad = 0;
  for (std::size_t a = 0; a <= 200; ++a)
    for (std::size_t b = 0; b <= 200; ++b)
      for (double rho : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        TrainConfig cfg;
        cfg.method = Method::mixtraining;
        cfg.e_ssl = a;
        cfg.e_sl = b;
        cfg.rho = rho;
        const auto s = plan(cfg);
        const auto expect = static_cast<std::size_t>(std::floor(rho * static_cast<double>(std::min(a, b))));
        const bool ok = s.e_mix == expect && s.e_mix <= a && s.e_mix <= b && s.pure_ssl_epochs == a - s.e_mix &&
                        s.pure_sl_epochs == b - s.e_mix && s.total_epochs == a + b - s.e_mix;
        ++checked;
        if (!ok) ++bad;
      }
  return {bad == 0, std::to_string(checked) + " configurations, " + std::to_string(bad) + " violations"};
}

Outcome pass_counts() {
  TrainConfig big;
  big.e_ssl = big.e_sl = 100;
  big.rho = 0.5;
  big.method = Method::mixtraining;
  const auto mix_plan = plan(big);
  big.method = Method::ssl_sl;
  const auto base_plan = plan(big);
  const bool plan_ok = base_plan.total_epochs == 200 && mix_plan.total_epochs == 150 &&
                       4 * (base_plan.total_epochs - mix_plan.total_epochs) == base_plan.total_epochs;

  auto data = toy_data();
  auto base = train(toy_model(), toy_train(Method::ssl_sl, 2, 2, 0.5), data);
  auto mixed = train(toy_model(), toy_train(Method::mixtraining, 2, 2, 0.5), data);
  const std::uint64_t n = base.ledger.sl_head_fwd / 2;  // training items per epoch
  const bool run_ok = n > 0 && base.ledger.backbone_fwd == 4 * n && base.ledger.backbone_bwd == 4 * n &&
                      mixed.ledger.backbone_fwd == 3 * n && mixed.ledger.backbone_bwd == 3 * n &&
                      base.ledger.ssl_head_fwd == mixed.ledger.ssl_head_fwd &&
                      base.ledger.ssl_head_bwd == mixed.ledger.ssl_head_bwd &&
                      base.ledger.sl_head_fwd == mixed.ledger.sl_head_fwd &&
                      base.ledger.sl_head_bwd == mixed.ledger.sl_head_bwd;
  return {plan_ok && run_ok, "100/100 epochs: " + std::to_string(base_plan.total_epochs) + " vs " +
                                 std::to_string(mix_plan.total_epochs) + " backbone epoch-passes; 2/2 run: backbone " +
                                 std::to_string(base.ledger.backbone_fwd) + " vs " +
                                 std::to_string(mixed.ledger.backbone_fwd) + " sample-passes, head passes " +
                                 (run_ok ? "equal" : "differ")};
}

Outcome merged_pass() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    RngStream init(300 + trial);
    MixModel<double> model(toy_model(), init);
    std::mt19937_64 rng(700 + trial);
    const std::size_t batch = 2 + rng() % 6;
    auto tokens = random_tensor({batch, 4, 16}, rng);
    std::vector<int> labels;
    for (std::size_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>(rng() % 3));
    auto mask = make_mask_plan(4, 0.5, trial);
    const double alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);

    ssl_step(model, tokens, mask, LossTarget::masked);
    auto ssl_bb = grads_of(model, ParamGroup::backbone);
    sl_step(model, tokens, labels, 0);
    auto sl_bb = grads_of(model, ParamGroup::backbone);
    mix_step(model, tokens, labels, 0, mask, alpha, LossTarget::masked);
    auto mix_bb = grads_of(model, ParamGroup::backbone);
    for (std::size_t i = 0; i < mix_bb.size(); ++i)
      for (std::size_t k = 0; k < mix_bb[i].size(); ++k)
        worst = std::max(worst, std::abs(mix_bb[i][k] - (alpha * ssl_bb[i][k] + (1 - alpha) * sl_bb[i][k])));
  }
  return {worst <= 1e-10, "20 trials, max |delta| " + sci(worst)};
}

Outcome reductions() {
  auto data = toy_data();
  auto mix0 = train(toy_model(), toy_train(Method::mixtraining, 3, 2, 0.0), data);
  auto base = train(toy_model(), toy_train(Method::ssl_sl, 3, 2, 0.0), data);
  auto ssl0 = train(toy_model(), toy_train(Method::ssl_sl, 0, 3, 0.5), data);
  auto sl = train(toy_model(), toy_train(Method::sl, 0, 3, 0.5), data);
  const bool a = same_stream(mix0, base);
  const bool b = same_stream(ssl0, sl);
  return {a && b, std::string("mixtraining rho=0 vs ssl_sl ") + (a ? "identical" : "differs") +
                      ", ssl_sl e_ssl=0 vs sl " + (b ? "identical" : "differs")};
}

Outcome measured_speedup() {
  ModelConfig model;  // transformer, depth 2, embed 64
  TrainConfig cfg;
  cfg.e_ssl = cfg.e_sl = 20;
  cfg.rho = 0.5;
  cfg.batch_size = 128;
  const auto rows = benchmark({Method::ssl_sl, Method::mixtraining}, model, cfg, {desk_data(7, 8, 512)}, {1});
  const auto& mix = row_of(rows, Method::mixtraining);
  const double measured = *mix.speedup, predicted = *mix.predicted_speedup;
  const double gap = std::abs(measured / predicted - 1.0);
  return {measured >= 1.10 && gap <= 0.15, "4096 items, measured " + fmt(measured, 3) + "x, predicted " +
                                               fmt(predicted, 3) + "x, gap " + fmt(100 * gap, 1) + "%"};
}

std::vector<BenchRow> desk_rows;

const std::vector<BenchRow>& desk_runs() {
  if (desk_rows.empty())
    desk_rows = benchmark({Method::ssl_sl, Method::mixtraining}, ModelConfig{}, desk_train(),
                          {desk_data(7, 10, 1000)}, {1, 2, 3, 4});
  return desk_rows;
}

Outcome accuracy_trend() {
  const auto& rows = desk_runs();
  const auto& base = row_of(rows, Method::ssl_sl);
  const auto& mix = row_of(rows, Method::mixtraining);
  const bool ok = mix.mean_accuracy >= base.mean_accuracy - 1.0 && mix.mean_latency_s < base.mean_latency_s;
  return {ok, "accuracy " + fmt(mix.mean_accuracy, 2) + " vs " + fmt(base.mean_accuracy, 2) + ", latency " +
                  fmt(mix.mean_latency_s, 2) + "s vs " + fmt(base.mean_latency_s, 2) + "s (seeds 1-4)"};
}

Outcome reconstruction_retention() {
  const auto& rows = desk_runs();
  const auto& base = row_of(rows, Method::ssl_sl);
  const auto& mix = row_of(rows, Method::mixtraining);
  return {mix.mean_recon_mse < base.mean_recon_mse,
          "held-out MSE " + fmt(mix.mean_recon_mse) + " vs " + fmt(base.mean_recon_mse) + " (seeds 1-4)"};
}

Outcome multitask() {
  auto data = toy_data();
  auto cfg = toy_train(Method::mixtraining, 2, 2, 0.5);
  auto single = train(toy_model(), cfg, data);
  auto multi = train_multitask(toy_model(), cfg, {data});
  const bool reduces = same_stream(single, multi);

  const auto rows = benchmark({Method::ssl_sl, Method::mixtraining}, ModelConfig{}, desk_train(),
                              {desk_data(7, 10, 1000), desk_data(8, 10, 1000)}, {1, 2, 3, 4});
  const auto& base = row_of(rows, Method::ssl_sl);
  const auto& mix = row_of(rows, Method::mixtraining);
  const bool trend = mix.mean_accuracy >= base.mean_accuracy - 1.0 && mix.mean_latency_s < base.mean_latency_s;
  return {reduces && trend, std::string("T=1 ") + (reduces ? "identical" : "differs") + "; T=2 accuracy " +
                                fmt(mix.mean_accuracy, 2) + " vs " + fmt(base.mean_accuracy, 2) + ", latency " +
                                fmt(mix.mean_latency_s, 2) + "s vs " + fmt(base.mean_latency_s, 2) + "s"};
}

Outcome determinism() {
  auto data = toy_data();
  auto cfg = toy_train(Method::mixtraining, 2, 3, 0.5);
  const bool repeat = same_stream(train(toy_model(), cfg, data), train(toy_model(), cfg, data));

  auto parallel_cfg = cfg;
  parallel_cfg.head_parallel = true;
  const bool parallel = same_stream(train(toy_model(), cfg, data), train(toy_model(), parallel_cfg, data));

  const auto dir = std::filesystem::temp_directory_path() / "mixtrain_acceptance";
  std::filesystem::create_directories(dir);
  auto full = make_trainer(toy_model(), cfg, {data});
  full->run();
  bool resume = true;
  for (std::size_t cut = 1; cut < full->schedule().total_epochs; ++cut) {
    auto first = make_trainer(toy_model(), cfg, {data});
    for (std::size_t e = 0; e < cut; ++e) first->run_epoch();
    save_checkpoint(*first, dir / "ckpt.bin");
    auto resumed = make_trainer(toy_model(), cfg, {data});
    load_checkpoint(*resumed, dir / "ckpt.bin");
    resumed->run();
    bool same = resumed->records().size() == full->records().size() && param_values(*full) == param_values(*resumed);
    for (std::size_t i = 0; same && i < full->records().size(); ++i)
      same = same_metrics(full->records()[i], resumed->records()[i]);
    resume = resume && same;
  }
  std::filesystem::remove_all(dir);
  return {repeat && parallel && resume, std::string("repeat ") + (repeat ? "identical" : "differs") + ", resume " +
                                            (resume ? "identical" : "differs") + ", head_parallel " +
                                            (parallel ? "identical" : "differs")};
}

Outcome report_arithmetic() {
  auto run = [](const std::string& method, double acc, double latency) {
    RunSummary s;
    s.run_id = method;
    s.method = method;
    s.dataset = "tinyimagenet";
    s.accuracy = acc;
    s.latency_s = latency;
    s.complete = true;
    return s;
  };
  const auto rows = build_report({run("ssl_sl", 46.65, 22917.29), run("mixtraining", 55.46, 17795.47)});
  const auto text = report_text(rows);
  const auto& mix = rows.back();
  auto round2 = [](double v) { return std::round(v * 100.0) / 100.0; };
  const bool ok = mix.method == "mixtraining" && round2(*mix.abs_gain_vs_ssl_sl) == 8.81 &&
                  round2(*mix.rel_gain_vs_ssl_sl) == 18.89 && round2(*mix.speedup_vs_ssl_sl) == 1.29 &&
                  text.find("8.81") != std::string::npos && text.find("18.89%") != std::string::npos &&
                  text.find("1.29x") != std::string::npos;
  return {ok, "+" + fmt(*mix.abs_gain_vs_ssl_sl, 2) + " absolute, +" + fmt(*mix.rel_gain_vs_ssl_sl, 2) +
                  "% relative, " + fmt(*mix.speedup_vs_ssl_sl, 2) + "x speedup"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{
      gradients,      schedule_grid,       pass_counts,  merged_pass, reductions,       measured_speedup,
      accuracy_trend, reconstruction_retention, multitask, determinism, report_arithmetic};
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << " " << o.detail << " [" << fmt(secs, 1)
              << "s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
