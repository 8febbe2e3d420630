#include "mixtrain/cli.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "mixtrain/errors.hpp"
#include "mixtrain/metrics_io.hpp"

namespace mixtrain::cli {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, sep))
    if (!trim(part).empty()) out.push_back(trim(part));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out.flush()) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string phases_text(const PhaseSchedule& s) {
  return "(" + std::to_string(s.pure_ssl_epochs) + "," + std::to_string(s.e_mix) + "," +
         std::to_string(s.pure_sl_epochs) + ")";
}

Json summary_json(const RunResult& r, const RunConfig& cfg) {
  return Json{{"run_id", r.run_id},
              {"method", to_string(r.method)},
              {"dataset", dataset_label(cfg.data)},
              {"p", cfg.train.p},
              {"seed", r.seed},
              {"phases",
               {{"ssl", r.schedule.pure_ssl_epochs},
                {"mix", r.schedule.e_mix},
                {"sl", r.schedule.pure_sl_epochs},
                {"total", r.schedule.total_epochs}}},
              {"final_accuracy", r.final_accuracy},
              {"mean_accuracy", r.mean_accuracy},
              {"recon_mse", r.recon_mse},
              {"latency_s", r.ledger.wall_clock_s},
              {"ledger", ledger_json(r.ledger)}};
}

void keep_finished_lines(const fs::path& log, std::size_t epochs) {
  if (!fs::exists(log)) return;
  auto read = read_metrics(log);
  std::string text;
  for (const auto& j : read.records)
    if (j.at("epoch").get<std::size_t>() < epochs) text += j.dump() + "\n";
  write_text(log, text);
}

// Config flags shared by train, sweep and bench: --config plus one option
// per config key (dashes or underscores).
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> values;
  std::vector<CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key=value config file");
    const auto& keys = config_keys();
    values.resize(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
      std::string dashed = keys[i];
      for (char& ch : dashed)
        if (ch == '_') ch = '-';
      std::string names = "--" + dashed;
      if (dashed != keys[i]) names += ",--" + keys[i];
      options.push_back(app->add_option(names, values[i], "config key " + keys[i])
                            ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast));
    }
  }

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config_file(config_path);
    const auto& keys = config_keys();
    for (std::size_t i = 0; i < keys.size(); ++i)
      if (options[i]->count() > 0) apply_setting(cfg, keys[i], values[i]);
    return cfg;
  }
};

int sweep_parallel(const std::vector<SweepCell>& cells, const fs::path& root, std::size_t jobs, std::ostream& out) {
  std::map<pid_t, std::string> running;
  int worst = kExitOk;
  auto reap = [&] {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid <= 0) return;
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kExitRuntime;
    out << "cell " << running[pid] << ": " << (code == 0 ? "done" : "failed (exit " + std::to_string(code) + ")")
        << "\n";
    worst = std::max(worst, code);
    running.erase(pid);
  };
  out.flush();
  for (const auto& cell : cells) {
    while (running.size() >= jobs) reap();
    const fs::path dir = root / cell.name;
    make_dir(dir);
    const pid_t pid = ::fork();
    if (pid < 0) throw IoError("fork failed while starting sweep cell " + cell.name);
    if (pid == 0) {
      int code = kExitOk;
      {
        std::ofstream log(dir / "stdout.txt");
        try {
          TrainRunFlags flags;
          flags.quiet = false;
          train_into(cell.config, dir, flags, log);
        } catch (const std::invalid_argument& e) {
          log << "error: " << e.what() << "\n";
          code = kExitConfig;
        } catch (const std::exception& e) {
          log << "error: " << e.what() << "\n";
          code = kExitRuntime;
        }
      }
      ::_exit(code);
    }
    running.emplace(pid, cell.name);
  }
  while (!running.empty()) reap();
  return worst;
}

void write_report(const ReportOutput& rep, const fs::path& dir) {
  make_dir(dir);
  write_text(dir / "report.csv", report_csv(rep.rows));
  write_text(dir / "report.txt", report_text(rep.rows));
  write_text(dir / "pareto.csv", pareto_csv(rep.runs));
}

}  // namespace

fs::path default_output_root() {
  if (const char* env = std::getenv("MIXTRAIN_OUT"); env && *env) return env;
  return "runs";
}

std::string run_id_of(const RunConfig& cfg) {
  return to_string(cfg.train.method) + "-s" + std::to_string(cfg.train.seed);
}

RunResult train_into(const RunConfig& cfg, const fs::path& dir, const TrainRunFlags& flags, std::ostream& out) {
  validate(cfg);
  make_dir(dir);
  write_text(dir / "config.txt", echo_config(cfg));

  const auto sets = load_datasets(cfg.data);
  auto trainer = make_trainer(model_for(cfg, sets), cfg.train, sets, cfg.data.plan, cfg.options);
  const RunInfo info{run_id_of(cfg), to_string(cfg.train.method), dataset_label(cfg.data), cfg.train.p,
                     cfg.train.seed, trainer->schedule().total_epochs};
  const auto ckpt = dir / "checkpoint.bin";
  const auto log_path = dir / "metrics.jsonl";
  if (flags.resume && fs::exists(ckpt)) {
    load_checkpoint(*trainer, ckpt);
    keep_finished_lines(log_path, trainer->epoch());
    if (!flags.quiet) out << "resuming " << info.run_id << " at epoch " << trainer->epoch() << "\n";
  } else {
    fs::remove(log_path);
    fs::remove(dir / "summary.json");
  }
  if (!flags.quiet)
    out << "run " << info.run_id << " on " << info.dataset << ": phases (ssl,mix,sl) = "
        << phases_text(trainer->schedule()) << ", " << info.total_epochs << " epochs\n";

  MetricsLog log(log_path);
  const auto echo = echo_map(cfg);
  while (!trainer->done()) {
    const auto& rec = trainer->run_epoch();
    log.append(info, rec);
    if (!flags.quiet) {
      out << "epoch " << std::setw(3) << rec.epoch + 1 << "/" << info.total_epochs << " " << std::setw(3)
          << to_string(rec.phase) << "  lr " << std::scientific << std::setprecision(3) << rec.lr << std::defaultfloat
          << "  l_ssl " << fixed(rec.l_ssl, 4) << "  l_sl " << fixed(rec.l_sl, 4) << "  acc";
      for (double a : rec.accuracy) out << " " << fixed(a, 2);
      out << "  t " << fixed(rec.ledger.wall_clock_s, 1) << "s\n";
    }
    if (flags.checkpoint_every && trainer->epoch() % flags.checkpoint_every == 0 && !trainer->done())
      save_checkpoint(*trainer, ckpt, echo);
  }
  save_checkpoint(*trainer, ckpt, echo);
  auto result = trainer->result();
  write_text(dir / "summary.json", summary_json(result, cfg).dump(2) + "\n");
  if (!flags.quiet) {
    out << "phases " << phases_text(result.schedule) << "  accuracy " << fixed(result.mean_accuracy, 2)
        << "%  latency " << fixed(result.ledger.wall_clock_s, 2) << "s  recon mse " << fixed(result.recon_mse, 4)
        << "  MACs " << result.ledger.mac_total << "\n";
  }
  return result;
}

std::vector<GridAxis> parse_grid(const std::vector<std::string>& specs) {
  std::vector<GridAxis> axes;
  for (const auto& spec : specs)
    for (const auto& part : split(spec, ';')) {
      const auto eq = part.find('=');
      if (eq == std::string::npos) throw ConfigError("grid axis '" + part + "' needs the form key=v1,v2");
      GridAxis axis{trim(part.substr(0, eq)), split(part.substr(eq + 1), ',')};
      if (axis.key != "epochs") {
        const auto& keys = config_keys();
        if (std::find(keys.begin(), keys.end(), axis.key) == keys.end())
          throw ConfigError("unknown grid axis '" + axis.key + "'");
      }
      if (axis.values.empty()) throw ConfigError("grid axis '" + axis.key + "' has no values");
      for (const auto& a : axes)
        if (a.key == axis.key) throw ConfigError("grid axis '" + axis.key + "' given twice");
      axes.push_back(std::move(axis));
    }
  if (axes.empty()) throw ConfigError("sweep needs at least one grid axis (e.g. --grid alpha=0.1,0.5)");
  return axes;
}

std::vector<SweepCell> expand_grid(const RunConfig& base, const std::vector<GridAxis>& axes,
                                   const std::vector<std::uint64_t>& seeds) {
  auto all = axes;
  const bool has_seed = std::any_of(axes.begin(), axes.end(), [](const GridAxis& a) { return a.key == "seed"; });
  if (!has_seed) {
    GridAxis seed_axis{"seed", {}};
    for (auto s : seeds) seed_axis.values.push_back(std::to_string(s));
    if (seed_axis.values.empty()) throw ConfigError("sweep needs at least one seed");
    all.push_back(seed_axis);
  }
  std::vector<SweepCell> cells{SweepCell{"", base}};
  for (const auto& axis : all) {
    std::vector<SweepCell> next;
    for (const auto& cell : cells)
      for (const auto& v : axis.values) {
        SweepCell c = cell;
        if (axis.key == "epochs") {
          apply_setting(c.config, "e_ssl", v);
          apply_setting(c.config, "e_sl", v);
        } else {
          apply_setting(c.config, axis.key, v);
        }
        std::string label = v;
        for (char& ch : label)
          if (ch == '/' || ch == ';' || ch == ':' || ch == ' ' || ch == ',') ch = '_';
        c.name += (c.name.empty() ? "" : "_") + axis.key + "-" + label;
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  return cells;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& s : split(text, ',')) {
    RunConfig scratch;
    apply_setting(scratch, "seed", s);
    out.push_back(scratch.train.seed);
  }
  if (out.empty()) throw ConfigError("seed list '" + text + "' is empty");
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"mixtrain: merged self-supervised and supervised training"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "run one training");
  ConfigFlags train_cfg;
  train_cfg.attach(train);
  std::string train_out;
  TrainRunFlags train_flags;
  train->add_option("--out", train_out, "run directory (default: $MIXTRAIN_OUT/<method>-s<seed>)");
  train->add_flag("--resume", train_flags.resume, "continue from the run directory's checkpoint");
  train->add_flag("--quiet", train_flags.quiet, "no per-epoch output");
  train->add_option("--checkpoint-every", train_flags.checkpoint_every, "checkpoint period in epochs");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Cartesian grid of training runs");
  ConfigFlags sweep_cfg;
  sweep_cfg.attach(sweep);
  std::vector<std::string> grid;
  std::string sweep_out, sweep_seeds = "1,2,3,4";
  std::size_t jobs = 1;
  sweep->add_option("--grid", grid, "axis spec key=v1,v2[;key=...]")->required();
  sweep->add_option("--out", sweep_out, "sweep root (default: $MIXTRAIN_OUT/sweep)");
  sweep->add_option("--seeds", sweep_seeds, "seeds used when the grid has no seed axis");
  sweep->add_option("--jobs", jobs, "cells run in parallel processes")->check(CLI::PositiveNumber);

  // bench
  auto* bench = app.add_subcommand("bench", "latency and accuracy of several methods");
  ConfigFlags bench_cfg;
  bench_cfg.attach(bench);
  std::string bench_methods = "ssl_sl,mixtraining", bench_seeds = "1,2,3,4", bench_out;
  std::size_t repeat = 1;
  bench->add_option("--methods", bench_methods, "comma-separated methods (at least two)");
  bench->add_option("--seeds", bench_seeds, "comma-separated seeds");
  bench->add_option("--repeat", repeat, "runs per seed")->check(CLI::PositiveNumber);
  bench->add_option("--out", bench_out, "output directory (default: $MIXTRAIN_OUT/bench)");

  // report
  auto* report = app.add_subcommand("report", "tables from metrics logs");
  std::string report_dir, report_out;
  report->add_option("dir", report_dir, "directory searched for metrics.jsonl")->required();
  report->add_option("--out", report_out, "where tables are written (default: the log directory)");

  // reconstruct
  auto* recon = app.add_subcommand("reconstruct", "dump reconstruction pairs from a checkpoint");
  std::string ckpt_path, recon_out;
  std::size_t count = 8;
  bool masked = false;
  recon->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  recon->add_option("--out", recon_out, "output directory (default: <checkpoint dir>/reconstructions)");
  recon->add_option("--count", count, "held-out samples to dump")->check(CLI::PositiveNumber);
  recon->add_flag("--masked", masked, "hide tokens at the configured mask ratio");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) {
      const auto cfg = train_cfg.resolve();
      const fs::path dir = train_out.empty() ? default_output_root() / run_id_of(cfg) : fs::path(train_out);
      train_into(cfg, dir, train_flags, out);
      out << "wrote " << dir.string() << "\n";
    } else if (*sweep) {
      const auto base = sweep_cfg.resolve();
      const auto cells = expand_grid(base, parse_grid(grid), parse_seeds(sweep_seeds));
      for (const auto& c : cells) validate(c.config);
      const fs::path root = sweep_out.empty() ? default_output_root() / "sweep" : fs::path(sweep_out);
      make_dir(root);
      std::vector<SweepCell> todo;
      for (const auto& c : cells) {
        if (fs::exists(root / c.name / "summary.json")) out << "cell " << c.name << ": already complete, skipped\n";
        else todo.push_back(c);
      }
      out << cells.size() << " cells, " << todo.size() << " to run\n";
      int code = kExitOk;
      if (jobs > 1) {
        code = sweep_parallel(todo, root, jobs, out);
      } else {
        for (const auto& c : todo) {
          out << "cell " << c.name << "\n";
          TrainRunFlags flags;
          flags.quiet = true;
          const auto r = train_into(c.config, root / c.name, flags, out);
          out << "  phases " << phases_text(r.schedule) << " accuracy " << fixed(r.mean_accuracy, 2) << "% latency "
              << fixed(r.ledger.wall_clock_s, 2) << "s\n";
        }
      }
      auto rep = report_directory(root);
      for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
      write_report(rep, root);
      out << report_text(rep.rows);
      return code;
    } else if (*bench) {
      const auto cfg = bench_cfg.resolve();
      validate(cfg);
      std::vector<Method> methods;
      for (const auto& m : split(bench_methods, ',')) methods.push_back(parse_method(m));
      if (methods.size() < 2) throw ValidationError("bench needs at least two methods; speedup is relative");
      const auto seeds = parse_seeds(bench_seeds);
      const fs::path dir = bench_out.empty() ? default_output_root() / "bench" : fs::path(bench_out);
      make_dir(dir);
      write_text(dir / "config.txt", echo_config(cfg));
      const auto sets = load_datasets(cfg.data);
      const auto rows = benchmark(methods, model_for(cfg, sets), cfg.train, sets, seeds, repeat, cfg.data.plan,
                                  cfg.options);
      std::ostringstream csv, text;
      csv << "method,runs,mean_latency_s,latencies_s,mean_accuracy,mean_recon_mse,mac_total,speedup,"
             "predicted_speedup\n";
      text << std::left << std::setw(12) << "method" << std::right << std::setw(6) << "runs" << std::setw(13)
           << "latency(s)" << std::setw(10) << "acc(%)" << std::setw(12) << "recon_mse" << std::setw(10) << "speedup"
           << std::setw(11) << "predicted" << "  per-run latency (s)\n";
      for (const auto& r : rows) {
        std::string lat_list, lat_text;
        for (double l : r.latencies_s) {
          lat_list += (lat_list.empty() ? "" : ";") + fixed(l, 4);
          lat_text += (lat_text.empty() ? "" : " ") + fixed(l, 2);
        }
        csv << to_string(r.method) << ',' << r.latencies_s.size() << ',' << fixed(r.mean_latency_s, 4) << ','
            << lat_list << ',' << fixed(r.mean_accuracy, 4) << ',' << fixed(r.mean_recon_mse, 6) << ','
            << r.mac_total << ',' << (r.speedup ? fixed(*r.speedup, 4) : "") << ','
            << (r.predicted_speedup ? fixed(*r.predicted_speedup, 4) : "") << '\n';
        text << std::left << std::setw(12) << to_string(r.method) << std::right << std::setw(6)
             << r.latencies_s.size() << std::setw(13) << fixed(r.mean_latency_s, 2) << std::setw(10)
             << fixed(r.mean_accuracy, 2) << std::setw(12) << fixed(r.mean_recon_mse, 4) << std::setw(10)
             << (r.speedup ? fixed(*r.speedup, 2) + "x" : "-") << std::setw(11)
             << (r.predicted_speedup ? fixed(*r.predicted_speedup, 2) + "x" : "-") << "  " << lat_text << "\n";
      }
      write_text(dir / "bench.csv", csv.str());
      write_text(dir / "bench.txt", text.str());
      out << text.str();
    } else if (*report) {
      auto rep = report_directory(report_dir);
      for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
      if (rep.runs.empty()) {
        err << "error: no metrics records found under '" << report_dir << "'\n";
        return kExitRuntime;
      }
      write_report(rep, report_out.empty() ? fs::path(report_dir) : fs::path(report_out));
      out << report_text(rep.rows);
    } else if (*recon) {
      const auto header = read_checkpoint_header(ckpt_path);
      RunConfig cfg;
      for (const auto& [k, v] : header.at("config").items()) apply_setting(cfg, k, v.get<std::string>());
      validate(cfg);
      const auto sets = load_datasets(cfg.data);
      auto opts = cfg.options;
      opts.final_recon_eval = false;
      auto trainer = make_trainer(model_for(cfg, sets), cfg.train, sets, cfg.data.plan, opts);
      load_checkpoint(*trainer, ckpt_path);
      const auto& held = trainer->data().tasks.at(0).held_out;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < std::min(count, held.size()); ++i) rows.push_back(i);
      std::optional<MaskPlan> plan;
      const auto& bb = trainer->model().config().backbone;
      if (masked) plan = make_mask_plan(bb.tokens(), cfg.model.mask_ratio, derive_seed(cfg.train.seed, "reconstruct"));
      const fs::path dir =
          recon_out.empty() ? fs::path(ckpt_path).parent_path() / "reconstructions" : fs::path(recon_out);
      const auto mse = dump_reconstructions(trainer->model(), held, rows, dir, plan);
      double mean = 0.0;
      for (double m : mse) mean += m;
      out << "wrote " << mse.size() << " pairs to " << dir.string() << ", mean mse "
          << fixed(mse.empty() ? 0.0 : mean / static_cast<double>(mse.size()), 6) << "\n";
    }
  } catch (const TrainingAbort& e) {
    err << "aborted: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace mixtrain::cli
