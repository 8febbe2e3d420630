#include "mixtrain/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "mixtrain/errors.hpp"

namespace mixtrain {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, sep)) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("bad value '" + value + "' for " + key + " (expected " + expected + ")");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out))
    bad(key, v, "a finite number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(key, v, "true or false");
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string num(std::uint64_t v) {
  return std::to_string(v);
}

std::string flag(bool v) {
  return v ? "true" : "false";
}

template <typename F>
auto wrap_enum(const std::string& key, const std::string& value, F parse) {
  try {
    return parse(value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct KeyDef {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      // training
      {"method", [](RunConfig& c, const std::string& v) { c.train.method = wrap_enum("method", v, parse_method); },
       [](const RunConfig& c) { return to_string(c.train.method); }},
      {"e_ssl", [](RunConfig& c, const std::string& v) { c.train.e_ssl = to_size("e_ssl", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.train.e_ssl}); }},
      {"e_sl", [](RunConfig& c, const std::string& v) { c.train.e_sl = to_size("e_sl", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.train.e_sl}); }},
      {"rho", [](RunConfig& c, const std::string& v) { c.train.rho = to_double("rho", v); },
       [](const RunConfig& c) { return num(c.train.rho); }},
      {"alpha", [](RunConfig& c, const std::string& v) { c.train.alpha = to_double("alpha", v); },
       [](const RunConfig& c) { return num(c.train.alpha); }},
      {"lambda", [](RunConfig& c, const std::string& v) { c.train.lambda = to_double("lambda", v); },
       [](const RunConfig& c) { return num(c.train.lambda); }},
      {"p", [](RunConfig& c, const std::string& v) { c.train.p = to_double("p", v); },
       [](const RunConfig& c) { return num(c.train.p); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = to_size("batch_size", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.train.batch_size}); }},
      {"base_lr_ssl", [](RunConfig& c, const std::string& v) { c.train.base_lr_ssl = to_double("base_lr_ssl", v); },
       [](const RunConfig& c) { return num(c.train.base_lr_ssl); }},
      {"base_lr_sl", [](RunConfig& c, const std::string& v) { c.train.base_lr_sl = to_double("base_lr_sl", v); },
       [](const RunConfig& c) { return num(c.train.base_lr_sl); }},
      {"warmup_ssl",
       [](RunConfig& c, const std::string& v) {
         c.train.warmup_ssl = v == "auto" ? std::nullopt : std::optional<std::size_t>(to_size("warmup_ssl", v));
       },
       [](const RunConfig& c) { return c.train.warmup_ssl ? num(std::uint64_t{*c.train.warmup_ssl}) : "auto"; }},
      {"warmup_sl",
       [](RunConfig& c, const std::string& v) {
         c.train.warmup_sl = v == "auto" ? std::nullopt : std::optional<std::size_t>(to_size("warmup_sl", v));
       },
       [](const RunConfig& c) { return c.train.warmup_sl ? num(std::uint64_t{*c.train.warmup_sl}) : "auto"; }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = to_double("weight_decay", v); },
       [](const RunConfig& c) { return num(c.train.weight_decay); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.train.beta1 = to_double("beta1", v); },
       [](const RunConfig& c) { return num(c.train.beta1); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.train.beta2 = to_double("beta2", v); },
       [](const RunConfig& c) { return num(c.train.beta2); }},
      {"eps", [](RunConfig& c, const std::string& v) { c.train.eps = to_double("eps", v); },
       [](const RunConfig& c) { return num(c.train.eps); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.train.seed = to_u64("seed", v); },
       [](const RunConfig& c) { return num(c.train.seed); }},
      {"loss_target",
       [](RunConfig& c, const std::string& v) {
         c.train.loss_target = c.model.loss_target = wrap_enum("loss_target", v, parse_loss_target);
       },
       [](const RunConfig& c) { return to_string(c.train.loss_target); }},
      {"head_parallel", [](RunConfig& c, const std::string& v) { c.train.head_parallel = to_bool("head_parallel", v); },
       [](const RunConfig& c) { return flag(c.train.head_parallel); }},
      // model
      {"backbone",
       [](RunConfig& c, const std::string& v) { c.model.backbone.kind = wrap_enum("backbone", v, parse_backbone_kind); },
       [](const RunConfig& c) { return to_string(c.model.backbone.kind); }},
      {"patch_size", [](RunConfig& c, const std::string& v) { c.model.backbone.patch_size = to_size("patch_size", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.backbone.patch_size}); }},
      {"embed_dim", [](RunConfig& c, const std::string& v) { c.model.backbone.embed_dim = to_size("embed_dim", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.backbone.embed_dim}); }},
      {"depth", [](RunConfig& c, const std::string& v) { c.model.backbone.depth = to_size("depth", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.backbone.depth}); }},
      {"num_heads", [](RunConfig& c, const std::string& v) { c.model.backbone.num_heads = to_size("num_heads", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.backbone.num_heads}); }},
      {"mlp_ratio", [](RunConfig& c, const std::string& v) { c.model.backbone.mlp_ratio = to_size("mlp_ratio", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.backbone.mlp_ratio}); }},
      {"decoder_dim", [](RunConfig& c, const std::string& v) { c.model.decoder.dim = to_size("decoder_dim", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.decoder.dim}); }},
      {"decoder_depth", [](RunConfig& c, const std::string& v) { c.model.decoder.depth = to_size("decoder_depth", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.decoder.depth}); }},
      {"decoder_heads",
       [](RunConfig& c, const std::string& v) { c.model.decoder.num_heads = to_size("decoder_heads", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.decoder.num_heads}); }},
      {"decoder_mlp_ratio",
       [](RunConfig& c, const std::string& v) { c.model.decoder.mlp_ratio = to_size("decoder_mlp_ratio", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.model.decoder.mlp_ratio}); }},
      {"mask_ratio", [](RunConfig& c, const std::string& v) { c.model.mask_ratio = to_double("mask_ratio", v); },
       [](const RunConfig& c) { return num(c.model.mask_ratio); }},
      // data
      {"data",
       [](RunConfig& c, const std::string& v) {
         c.data.sources = split(v, ';');
         if (c.data.sources.empty()) bad("data", v, "at least one source");
       },
       [](const RunConfig& c) {
         std::string out;
         for (const auto& s : c.data.sources) out += (out.empty() ? "" : ";") + s;
         return out;
       }},
      {"data_format",
       [](RunConfig& c, const std::string& v) {
         if (v != "auto") wrap_enum("data_format", v, parse_data_format);
         c.data.format = v;
       },
       [](const RunConfig& c) { return c.data.format; }},
      {"labels", [](RunConfig& c, const std::string& v) { c.data.labels = v; },
       [](const RunConfig& c) { return c.data.labels; }},
      {"num_classes", [](RunConfig& c, const std::string& v) { c.data.num_classes = to_size("num_classes", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.data.num_classes}); }},
      {"dataset_name", [](RunConfig& c, const std::string& v) { c.data.name = v; },
       [](const RunConfig& c) { return c.data.name; }},
      {"held_out_fraction",
       [](RunConfig& c, const std::string& v) { c.data.plan.held_out_fraction = to_double("held_out_fraction", v); },
       [](const RunConfig& c) { return num(c.data.plan.held_out_fraction); }},
      {"split_seed", [](RunConfig& c, const std::string& v) { c.data.plan.split_seed = to_u64("split_seed", v); },
       [](const RunConfig& c) { return num(c.data.plan.split_seed); }},
      {"ssl_source",
       [](RunConfig& c, const std::string& v) { c.data.plan.ssl_source = wrap_enum("ssl_source", v, parse_ssl_source); },
       [](const RunConfig& c) { return to_string(c.data.plan.ssl_source); }},
      // options
      {"augment", [](RunConfig& c, const std::string& v) { c.options.augment.enabled = to_bool("augment", v); },
       [](const RunConfig& c) { return flag(c.options.augment.enabled); }},
      {"crop_pad", [](RunConfig& c, const std::string& v) { c.options.augment.crop_pad = to_size("crop_pad", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.options.augment.crop_pad}); }},
      {"flip", [](RunConfig& c, const std::string& v) { c.options.augment.flip = to_bool("flip", v); },
       [](const RunConfig& c) { return flag(c.options.augment.flip); }},
      {"eval_batch", [](RunConfig& c, const std::string& v) { c.options.eval_batch = to_size("eval_batch", v); },
       [](const RunConfig& c) { return num(std::uint64_t{c.options.eval_batch}); }},
  };
  return table;
}

const KeyDef& find_key(const std::string& key) {
  for (const auto& def : key_table())
    if (def.name == key) return def;
  throw ConfigError("unknown config key '" + key + "'");
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& def : key_table()) out.push_back(def.name);
    return out;
  }();
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, trim(value));
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_text(RunConfig& cfg, const std::string& text) {
  for (const auto& [k, v] : parse_key_values(text)) apply_setting(cfg, k, v);
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream text;
  text << in.rdbuf();
  try {
    apply_text(base, text.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return base;
}

std::map<std::string, std::string> echo_map(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& def : key_table()) out[def.name] = def.get(cfg);
  return out;
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& def : key_table()) out += def.name + "=" + def.get(cfg) + "\n";
  return out;
}

std::string dataset_label(const DataConfig& data) {
  if (!data.name.empty()) return data.name;
  std::string out;
  for (const auto& s : data.sources) {
    std::string part = s.rfind("synthetic", 0) == 0 ? s : std::filesystem::path(s).stem().string();
    for (char& ch : part)
      if (ch == ',' || ch == ';' || ch == '=' || ch == ':' || ch == ' ') ch = '_';
    out += (out.empty() ? "" : "+") + part;
  }
  return out;
}

std::vector<Dataset> load_datasets(const DataConfig& data) {
  std::vector<Dataset> out;
  for (std::size_t i = 0; i < data.sources.size(); ++i) {
    const auto& src = data.sources[i];
    if (src == "synthetic" || src.rfind("synthetic:", 0) == 0) {
      std::string spec_text;
      if (src.size() > 10)
        for (char ch : src.substr(10)) spec_text += ch == ',' ? '\n' : ch;
      auto spec = parse_synthetic_spec(spec_text);
      if (spec.name.empty()) spec.name = src;
      out.push_back(make_synthetic(spec));
      continue;
    }
    DataSource ds;
    ds.path = src;
    ds.num_classes = data.num_classes;
    if (data.format != "auto") {
      ds.format = parse_data_format(data.format);
    } else if (ends_with(src, ".spec")) {
      ds.format = DataFormat::synthetic_spec;
    } else if (src.find("idx") != std::string::npos) {
      ds.format = DataFormat::idx;
    } else if (ends_with(src, ".bin")) {
      ds.format = DataFormat::cifar_binary;
    } else {
      throw ConfigError("cannot tell the format of data source '" + src + "'; set data_format");
    }
    if (i == 0 && !data.labels.empty()) ds.labels_path = data.labels;
    auto set = load(ds);
    if (ds.format != DataFormat::synthetic_spec && set.size() > 0) {
      // Standardize raw pixel data with its own statistics.
      double sum = 0.0, sq = 0.0;
      for (float v : set.pixels) sum += v;
      const double mean = sum / static_cast<double>(set.pixels.size());
      for (float v : set.pixels) sq += (v - mean) * (v - mean);
      const double sd = std::sqrt(sq / static_cast<double>(set.pixels.size()));
      normalize(set, static_cast<float>(mean), static_cast<float>(sd > 0 ? sd : 1.0));
    }
    out.push_back(std::move(set));
  }
  for (std::size_t i = 1; i < out.size(); ++i)
    if (!same_shape(out[0], out[i]))
      throw ValidationError("task datasets differ in item shape: '" + out[0].name + "' vs '" + out[i].name + "'");
  return out;
}

ModelConfig model_for(const RunConfig& cfg, const std::vector<Dataset>& datasets) {
  ModelConfig m = cfg.model;
  m.loss_target = cfg.train.loss_target;
  if (!datasets.empty()) {
    m.backbone.channels = datasets[0].channels;
    m.backbone.input_height = datasets[0].height;
    m.backbone.input_width = datasets[0].width;
  }
  return m;
}

void validate(const RunConfig& cfg) {
  cfg.train.validate();
  if (cfg.data.sources.empty()) throw ConfigError("data: at least one source is required");
  if (!(cfg.data.plan.held_out_fraction > 0.0 && cfg.data.plan.held_out_fraction < 1.0))
    throw ConfigError("held_out_fraction must be in (0, 1), got " + num(cfg.data.plan.held_out_fraction));
  if (cfg.options.eval_batch == 0) throw ConfigError("eval_batch must be positive");
}

}  // namespace mixtrain
