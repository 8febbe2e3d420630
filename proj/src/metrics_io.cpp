#include "mixtrain/metrics_io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "mixtrain/errors.hpp"

namespace mixtrain {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMagic = "MIXTRAIN-CHECKPOINT";
constexpr const char* kHeaderEnd = "END-HEADER";

void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((bits >> s) & 0xff));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int k = 3; k >= 0; --k) bits = (bits << 8) | p[k];
  return std::bit_cast<float>(bits);
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- json

Json ledger_json(const FlopLedger& l) {
  return Json{{"backbone_fwd", l.backbone_fwd}, {"backbone_bwd", l.backbone_bwd}, {"ssl_head_fwd", l.ssl_head_fwd},
              {"ssl_head_bwd", l.ssl_head_bwd}, {"sl_head_fwd", l.sl_head_fwd},   {"sl_head_bwd", l.sl_head_bwd},
              {"eval_fwd", l.eval_fwd},         {"mac_total", l.mac_total},       {"wall_clock_s", l.wall_clock_s}};
}

FlopLedger ledger_from_json(const Json& j) {
  FlopLedger l;
  l.backbone_fwd = j.at("backbone_fwd").get<std::uint64_t>();
  l.backbone_bwd = j.at("backbone_bwd").get<std::uint64_t>();
  l.ssl_head_fwd = j.at("ssl_head_fwd").get<std::uint64_t>();
  l.ssl_head_bwd = j.at("ssl_head_bwd").get<std::uint64_t>();
  l.sl_head_fwd = j.at("sl_head_fwd").get<std::uint64_t>();
  l.sl_head_bwd = j.at("sl_head_bwd").get<std::uint64_t>();
  l.eval_fwd = j.at("eval_fwd").get<std::uint64_t>();
  l.mac_total = j.at("mac_total").get<std::uint64_t>();
  l.wall_clock_s = j.at("wall_clock_s").get<double>();
  return l;
}

Json record_json(const EpochRecord& r) {
  return Json{{"epoch", r.epoch},
              {"phase", to_string(r.phase)},
              {"epoch_in_phase", r.epoch_in_phase},
              {"lr", r.lr},
              {"weight_ssl", r.weight_ssl},
              {"l_ssl", r.l_ssl},
              {"l_sl", r.l_sl},
              {"l_sl_tasks", r.l_sl_tasks},
              {"joint", r.joint},
              {"acc", r.accuracy},
              {"ledger", ledger_json(r.ledger)}};
}

EpochRecord record_from_json(const Json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  const auto phase = j.at("phase").get<std::string>();
  r.phase = phase == "ssl" ? Phase::ssl : phase == "mix" ? Phase::mix : Phase::sl;
  r.epoch_in_phase = j.at("epoch_in_phase").get<std::size_t>();
  r.lr = j.at("lr").get<double>();
  r.weight_ssl = j.at("weight_ssl").get<double>();
  r.l_ssl = j.at("l_ssl").get<double>();
  r.l_sl = j.at("l_sl").get<double>();
  r.l_sl_tasks = j.at("l_sl_tasks").get<std::vector<double>>();
  r.joint = j.at("joint").get<double>();
  r.accuracy = j.at("acc").get<std::vector<double>>();
  r.ledger = ledger_from_json(j.at("ledger"));
  return r;
}

Json metrics_line(const RunInfo& run, const EpochRecord& rec) {
  Json j = record_json(rec);
  j["run_id"] = run.run_id;
  j["method"] = run.method;
  j["dataset"] = run.dataset;
  j["p"] = run.p;
  j["seed"] = run.seed;
  j["total_epochs"] = run.total_epochs;
  j["wall_clock_s"] = rec.ledger.wall_clock_s;
  j["timestamp"] = now_utc();
  return j;
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Trainer& trainer, const fs::path& path, const std::map<std::string, std::string>& echo) {
  const auto params = trainer.model().parameters();
  const auto& opt = trainer.optimizer();
  std::string payload;
  Json manifest = Json::array();
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", payload.size()}});
    for (float v : p.tensor.data()) put_f32(payload, v);
  }
  Json first = Json::array(), second = Json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    first.push_back(payload.size());
    for (float v : opt.first_moments()[i]) put_f32(payload, v);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    second.push_back(payload.size());
    for (float v : opt.second_moments()[i]) put_f32(payload, v);
  }
  Json rng = Json::array();
  for (const auto& [name, state] : trainer.streams().states()) {
    rng.push_back({{"name", name}, {"offset", payload.size()}, {"bytes", state.size()}});
    payload += state;
  }
  Json records = Json::array();
  for (const auto& r : trainer.records()) records.push_back(record_json(r));

  Json header{{"version", kCheckpointVersion},
              {"dtype", "f32"},
              {"endianness", "little"},
              {"epoch", trainer.epoch()},
              {"seed", trainer.config().seed},
              {"method", to_string(trainer.config().method)},
              {"config", echo},
              {"parameters", manifest},
              {"first_moments", first},
              {"second_moments", second},
              {"steps", opt.steps()},
              {"rng", rng},
              {"ledger", ledger_json(trainer.ledger())},
              {"records", records},
              {"payload_bytes", payload.size()}};

  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    out << kMagic << '\n' << header.dump(1) << '\n' << kHeaderEnd << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.flush();
    if (!out) throw IoError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

namespace {

struct RawCheckpoint {
  Json header;
  std::vector<unsigned char> payload;
};

RawCheckpoint read_raw(const fs::path& path, bool need_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw FormatError("'" + path.string() + "' is not a checkpoint");
  std::string text;
  bool closed = false;
  while (std::getline(in, line)) {
    if (line == kHeaderEnd) {
      closed = true;
      break;
    }
    text += line;
    text += '\n';
  }
  if (!closed) throw FormatError("checkpoint '" + path.string() + "' has an unterminated header");
  RawCheckpoint raw;
  try {
    raw.header = Json::parse(text);
  } catch (const Json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "' header is not valid: " + e.what());
  }
  if (raw.header.value("version", 0) != kCheckpointVersion)
    throw FormatError("checkpoint '" + path.string() + "' has unsupported version " +
                      raw.header.value("version", Json()).dump());
  if (need_payload) {
    raw.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    const auto expected = raw.header.at("payload_bytes").get<std::size_t>();
    if (raw.payload.size() != expected)
      throw FormatError("checkpoint '" + path.string() + "' payload length mismatch: expected " +
                        std::to_string(expected) + " bytes, found " + std::to_string(raw.payload.size()));
  }
  return raw;
}

void read_floats(const std::vector<unsigned char>& payload, std::size_t offset, std::span<float> out,
                 const std::string& what) {
  if (offset + 4 * out.size() > payload.size())
    throw FormatError("checkpoint entry '" + what + "' runs past the payload");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_f32(payload.data() + offset + 4 * i);
}

}  // namespace

Json read_checkpoint_header(const fs::path& path) {
  return read_raw(path, false).header;
}

void load_checkpoint(Trainer& trainer, const fs::path& path) {
  auto raw = read_raw(path, true);
  const auto& h = raw.header;
  if (h.at("dtype") != "f32") throw FormatError("checkpoint dtype " + h.at("dtype").dump() + " is not f32");
  auto params = trainer.model().parameters();
  const auto& manifest = h.at("parameters");
  if (manifest.size() != params.size())
    throw FormatError("checkpoint lists " + std::to_string(manifest.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  auto& opt = trainer.optimizer();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name") != params[i].name || entry.at("shape").get<Shape>() != params[i].tensor.shape())
      throw FormatError("checkpoint parameter " + entry.at("name").dump() + " " +
                        shape_string(entry.at("shape").get<Shape>()) + " does not match model parameter '" +
                        params[i].name + "' " + shape_string(params[i].tensor.shape()));
    auto t = params[i].tensor;
    read_floats(raw.payload, entry.at("offset").get<std::size_t>(), t.data(), params[i].name);
    read_floats(raw.payload, h.at("first_moments")[i].get<std::size_t>(), opt.first_moments()[i], params[i].name);
    read_floats(raw.payload, h.at("second_moments")[i].get<std::size_t>(), opt.second_moments()[i], params[i].name);
  }
  opt.steps() = h.at("steps").get<std::vector<std::uint64_t>>();
  std::map<std::string, std::string> states;
  for (const auto& r : h.at("rng")) {
    const auto offset = r.at("offset").get<std::size_t>(), bytes = r.at("bytes").get<std::size_t>();
    if (offset + bytes > raw.payload.size()) throw FormatError("checkpoint random state runs past the payload");
    states.emplace(r.at("name").get<std::string>(),
                   std::string(raw.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               raw.payload.begin() + static_cast<std::ptrdiff_t>(offset + bytes)));
  }
  trainer.streams().restore(states);
  std::vector<EpochRecord> records;
  for (const auto& r : h.at("records")) records.push_back(record_from_json(r));
  trainer.restore(h.at("epoch").get<std::size_t>(), ledger_from_json(h.at("ledger")), std::move(records));
}

// ---------------------------------------------------------------- metrics log

MetricsLog::MetricsLog(const fs::path& path) : path_(path), out_(path, std::ios::app) {
  if (!out_) throw IoError("cannot open metrics log '" + path.string() + "'");
}

void MetricsLog::append(const RunInfo& run, const EpochRecord& rec) {
  out_ << metrics_line(run, rec).dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("failed appending to '" + path_.string() + "'");
}

LogReadResult read_metrics(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open metrics log '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  LogReadResult out;
  std::size_t start = 0, lineno = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    if (end == std::string::npos) break;  // partial trailing line
    ++lineno;
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = Json::parse(line);
      if (!j.is_object() || !j.contains("run_id") || !j.contains("epoch"))
        throw std::runtime_error("missing run_id/epoch");
      out.records.push_back(std::move(j));
    } catch (const std::exception& e) {
      out.warnings.push_back(path.string() + ":" + std::to_string(lineno) + ": skipped malformed record (" +
                             e.what() + ")");
    }
  }
  return out;
}

// ---------------------------------------------------------------- report

double relative_gain(double a, double b) {
  return 100.0 * (a - b) / b;
}

double absolute_gain(double a, double b) {
  return a - b;
}

double speedup(double latency_baseline, double latency) {
  return latency_baseline / latency;
}

std::vector<RunSummary> summarize_runs(const std::vector<Json>& records) {
  std::map<std::string, const Json*> last;
  std::vector<std::string> order;
  for (const auto& r : records) {
    const auto id = r.at("run_id").get<std::string>();
    auto it = last.find(id);
    if (it == last.end()) {
      order.push_back(id);
      last.emplace(id, &r);
    } else if (r.at("epoch").get<std::size_t>() >= it->second->at("epoch").get<std::size_t>()) {
      it->second = &r;
    }
  }
  std::vector<RunSummary> out;
  for (const auto& id : order) {
    const Json& r = *last.at(id);
    RunSummary s;
    s.run_id = id;
    s.method = r.value("method", "");
    s.dataset = r.value("dataset", "");
    s.p = r.value("p", 1.0);
    s.seed = r.value("seed", std::uint64_t{0});
    const auto acc = r.value("acc", std::vector<double>{});
    s.accuracy = acc.empty() ? 0.0 : std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    s.latency_s = r.value("wall_clock_s", 0.0);
    s.complete = r.contains("total_epochs") &&
                 r.at("epoch").get<std::size_t>() + 1 == r.at("total_epochs").get<std::size_t>();
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

int method_rank(const std::string& m) {
  if (m == "sl") return 0;
  if (m == "ssl_sl") return 1;
  if (m == "mixtraining") return 2;
  return 3;
}

}  // namespace

std::vector<ReportRow> build_report(const std::vector<RunSummary>& runs) {
  std::set<std::pair<std::string, double>> cells;
  std::set<std::pair<int, std::string>> methods;
  for (const auto& r : runs) {
    cells.emplace(r.dataset, r.p);
    methods.emplace(method_rank(r.method), r.method);
  }
  std::vector<ReportRow> rows;
  for (const auto& [dataset, p] : cells) {
    const std::size_t first = rows.size();
    for (const auto& [rank, method] : methods) {
      ReportRow row;
      row.dataset = dataset;
      row.p = p;
      row.method = method;
      double acc = 0.0, lat = 0.0;
      for (const auto& r : runs)
        if (r.complete && r.dataset == dataset && r.p == p && r.method == method) {
          acc += r.accuracy;
          lat += r.latency_s;
          ++row.runs;
        }
      row.missing = row.runs == 0;
      if (!row.missing) {
        row.mean_accuracy = acc / static_cast<double>(row.runs);
        row.mean_latency_s = lat / static_cast<double>(row.runs);
      }
      rows.push_back(row);
    }
    auto find = [&](const char* m) -> const ReportRow* {
      for (std::size_t i = first; i < rows.size(); ++i)
        if (rows[i].method == m && !rows[i].missing) return &rows[i];
      return nullptr;
    };
    const ReportRow* ssl_sl = find("ssl_sl");
    const ReportRow* sl = find("sl");
    for (std::size_t i = first; i < rows.size(); ++i) {
      auto& row = rows[i];
      if (row.missing) continue;
      if (ssl_sl) {
        row.speedup_vs_ssl_sl = speedup(ssl_sl->mean_latency_s, row.mean_latency_s);
        row.abs_gain_vs_ssl_sl = absolute_gain(row.mean_accuracy, ssl_sl->mean_accuracy);
        row.rel_gain_vs_ssl_sl = relative_gain(row.mean_accuracy, ssl_sl->mean_accuracy);
      }
      if (sl) {
        row.abs_gain_vs_sl = absolute_gain(row.mean_accuracy, sl->mean_accuracy);
        row.rel_gain_vs_sl = relative_gain(row.mean_accuracy, sl->mean_accuracy);
      }
    }
  }
  return rows;
}

namespace {

std::string fmt(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v, int precision) {
  return v ? fmt(*v, precision) : "";
}

std::string fmt_p(double p) {
  std::ostringstream os;
  os << p;
  return os.str();
}

}  // namespace

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "dataset,p,method,runs,status,mean_accuracy,mean_latency_s,speedup_vs_ssl_sl,abs_gain_vs_ssl_sl,"
        "rel_gain_vs_ssl_sl,abs_gain_vs_sl,rel_gain_vs_sl\n";
  for (const auto& r : rows) {
    os << r.dataset << ',' << fmt_p(r.p) << ',' << r.method << ',' << r.runs << ',' << (r.missing ? "missing" : "ok")
       << ',';
    if (r.missing) {
      os << ",,,,,,\n";
      continue;
    }
    os << fmt(r.mean_accuracy, 4) << ',' << fmt(r.mean_latency_s, 4) << ',' << fmt(r.speedup_vs_ssl_sl, 4) << ','
       << fmt(r.abs_gain_vs_ssl_sl, 4) << ',' << fmt(r.rel_gain_vs_ssl_sl, 4) << ',' << fmt(r.abs_gain_vs_sl, 4)
       << ',' << fmt(r.rel_gain_vs_sl, 4) << '\n';
  }
  return os.str();
}

std::string report_text(const std::vector<ReportRow>& rows) {
  const std::vector<std::string> head{"dataset", "p",       "method",   "runs",     "acc(%)",
                                      "latency(s)", "speedup", "abs/ssl_sl", "rel/ssl_sl", "abs/sl", "rel/sl"};
  std::vector<std::vector<std::string>> cells{head};
  for (const auto& r : rows) {
    if (r.missing) {
      cells.push_back({r.dataset, fmt_p(r.p), r.method, "0", "missing", "", "", "", "", "", ""});
      continue;
    }
    auto pct = [](const std::optional<double>& v) { return v ? fmt(*v, 2) + "%" : std::string("-"); };
    auto num = [](const std::optional<double>& v, const char* suffix) {
      return v ? fmt(*v, 2) + suffix : std::string("-");
    };
    cells.push_back({r.dataset, fmt_p(r.p), r.method, std::to_string(r.runs), fmt(r.mean_accuracy, 2),
                     fmt(r.mean_latency_s, 2), num(r.speedup_vs_ssl_sl, "x"), num(r.abs_gain_vs_ssl_sl, ""),
                     pct(r.rel_gain_vs_ssl_sl), num(r.abs_gain_vs_sl, ""), pct(r.rel_gain_vs_sl)});
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      if (c < 3) os << std::left;
      else os << std::right;
      os << std::setw(static_cast<int>(width[c])) << row[c];
    }
    os << '\n';
  }
  return os.str();
}

std::string pareto_csv(const std::vector<RunSummary>& runs) {
  std::ostringstream os;
  os << "run_id,dataset,p,method,seed,accuracy,latency_s,complete\n";
  for (const auto& r : runs)
    os << r.run_id << ',' << r.dataset << ',' << fmt_p(r.p) << ',' << r.method << ',' << r.seed << ','
       << fmt(r.accuracy, 4) << ',' << fmt(r.latency_s, 4) << ',' << (r.complete ? 1 : 0) << '\n';
  return os.str();
}

ReportOutput report_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> logs;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() == "metrics.jsonl") logs.push_back(entry.path());
  std::sort(logs.begin(), logs.end());
  ReportOutput out;
  std::vector<Json> records;
  for (const auto& log : logs) {
    auto r = read_metrics(log);
    // Runs in different directories stay distinct even when ids repeat.
    const auto where = fs::relative(log.parent_path(), dir).generic_string();
    for (auto& j : r.records)
      if (where != ".") j["run_id"] = where + "/" + j["run_id"].get<std::string>();
    records.insert(records.end(), std::make_move_iterator(r.records.begin()), std::make_move_iterator(r.records.end()));
    out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
  }
  out.runs = summarize_runs(records);
  out.rows = build_report(out.runs);
  return out;
}

// ---------------------------------------------------------------- reconstructions

void write_ppm(const fs::path& path, std::size_t width, std::size_t height, const std::vector<unsigned char>& rgb) {
  if (rgb.size() != width * height * 3) throw DimensionError("ppm pixel buffer does not match its size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<double> dump_reconstruction_pairs(const Tensor<float>& originals, const Tensor<float>& recons,
                                              const fs::path& dir) {
  if (originals.shape() != recons.shape() || originals.rank() != 4)
    throw DimensionError("reconstruction dump needs matching [n, C, H, W] tensors, got " +
                         shape_string(originals.shape()) + " and " + shape_string(recons.shape()));
  const std::size_t n = originals.dim(0), c = originals.dim(1), h = originals.dim(2), w = originals.dim(3);
  if (c != 1 && c != 3) throw DimensionError("reconstruction dump supports 1 or 3 channels, got " + std::to_string(c));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const std::size_t d = c * h * w;
  auto orig = originals.data();
  auto rec = recons.data();
  std::vector<double> mses;
  std::ostringstream csv;
  csv << "sample,mse\n";
  for (std::size_t i = 0; i < n; ++i) {
    const float* a = orig.data() + i * d;
    const float* b = rec.data() + i * d;
    double se = 0.0;
    float lo = a[0], hi = a[0];
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(b[k]) - static_cast<double>(a[k]);
      se += diff * diff;
      lo = std::min({lo, a[k], b[k]});
      hi = std::max({hi, a[k], b[k]});
    }
    mses.push_back(se / static_cast<double>(d));
    csv << i << ',' << std::setprecision(9) << mses.back() << '\n';

    const std::size_t out_w = 2 * w + 1;
    std::vector<unsigned char> rgb(out_w * h * 3, 255);
    const float span = hi > lo ? hi - lo : 1.0f;
    auto to_byte = [&](float v) { return static_cast<unsigned char>(std::lround(255.0f * (v - lo) / span)); };
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const std::size_t src = ((c == 1 ? 0 : ch) * h + y) * w + x;
          rgb[(y * out_w + x) * 3 + ch] = to_byte(a[src]);
          rgb[(y * out_w + w + 1 + x) * 3 + ch] = to_byte(b[src]);
        }
    write_ppm(dir / ("sample_" + std::to_string(i) + ".ppm"), out_w, h, rgb);
  }
  std::ofstream out(dir / "reconstructions.csv");
  if (!out) throw IoError("cannot write '" + (dir / "reconstructions.csv").string() + "'");
  out << csv.str();
  return mses;
}

std::vector<double> dump_reconstructions(const MixModel<float>& model, const Dataset& samples,
                                         const std::vector<std::size_t>& rows, const fs::path& dir,
                                         const std::optional<MaskPlan>& plan) {
  const auto& bb = model.config().backbone;
  auto batch = gather(samples, rows);
  const auto tokens = patchify(batch.images, bb.patch_size);
  const MaskPlan mp = plan.value_or(MaskPlan{bb.tokens(), {}, 0});
  const auto pred = model.decode(model.encode(tokens), mp);
  const auto images = unpatchify(pred, bb.channels, bb.input_height, bb.input_width, bb.patch_size);
  return dump_reconstruction_pairs(batch.images, images, dir);
}

}  // namespace mixtrain
