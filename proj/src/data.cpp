#include "mixtrain/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "mixtrain/errors.hpp"

namespace mixtrain {

std::string to_string(DatasetRole role) {
  switch (role) {
    case DatasetRole::ssl: return "ssl";
    case DatasetRole::sl: return "sl";
    case DatasetRole::both: return "both";
  }
  return "?";
}

std::string to_string(DataFormat format) {
  switch (format) {
    case DataFormat::idx: return "idx";
    case DataFormat::cifar_binary: return "cifar_binary";
    case DataFormat::synthetic_spec: return "synthetic_spec";
  }
  return "?";
}

DataFormat parse_data_format(const std::string& text) {
  if (text == "idx") return DataFormat::idx;
  if (text == "cifar_binary" || text == "cifar") return DataFormat::cifar_binary;
  if (text == "synthetic_spec" || text == "synthetic") return DataFormat::synthetic_spec;
  throw ConfigError("unknown data format '" + text + "' (expected idx, cifar_binary or synthetic_spec)");
}

bool Dataset::labeled() const {
  return !labels.empty() && std::none_of(labels.begin(), labels.end(), [](int l) { return l == kNoLabel; });
}

std::span<const float> Dataset::item(std::size_t i) const {
  return {pixels.data() + i * item_size(), item_size()};
}

std::span<float> Dataset::item(std::size_t i) {
  return {pixels.data() + i * item_size(), item_size()};
}

Dataset Dataset::select(std::span<const std::size_t> indices) const {
  Dataset out;
  out.name = name;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.num_classes = num_classes;
  out.role = role;
  out.pixels.reserve(indices.size() * item_size());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw ValidationError("dataset index " + std::to_string(i) + " out of range");
    auto src = item(i);
    out.pixels.insert(out.pixels.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

void Dataset::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw ValidationError("dataset '" + name + "' has an empty item shape");
  if (pixels.size() != size() * item_size())
    throw ValidationError("dataset '" + name + "' pixel count does not match " + std::to_string(size()) + " items");
  if (role == DatasetRole::ssl) return;
  if (!num_classes) throw ValidationError("labeled dataset '" + name + "' has no class count");
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= *num_classes)
      throw ValidationError("dataset '" + name + "' item " + std::to_string(i) + " label " +
                            std::to_string(labels[i]) + " outside [0, " + std::to_string(*num_classes) + ")");
  }
}

bool same_shape(const Dataset& a, const Dataset& b) {
  return a.channels == b.channels && a.height == b.height && a.width == b.width;
}

// ---------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
  if (classes < 1) throw ConfigError("synthetic spec needs at least one class");
  if (per_class < 1) throw ConfigError("synthetic spec needs per_class >= 1");
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("synthetic spec image size must be positive");
  if (!(sigma >= 0.0)) throw ConfigError("synthetic spec sigma must be non-negative");
  if (!(separation >= 0.0 && separation <= 1.0)) throw ConfigError("synthetic spec separation must lie in [0, 1]");
  if (blobs < 1) throw ConfigError("synthetic spec needs blobs >= 1");
}

SyntheticSpec parse_synthetic_spec(const std::string& text) {
  SyntheticSpec spec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("synthetic spec line " + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "classes") spec.classes = std::stoul(value);
      else if (key == "per_class") spec.per_class = std::stoul(value);
      else if (key == "channels") spec.channels = std::stoul(value);
      else if (key == "height") spec.height = std::stoul(value);
      else if (key == "width") spec.width = std::stoul(value);
      else if (key == "size") spec.height = spec.width = std::stoul(value);
      else if (key == "sigma") spec.sigma = std::stod(value);
      else if (key == "separation") spec.separation = std::stod(value);
      else if (key == "blobs") spec.blobs = std::stoul(value);
      else if (key == "seed") spec.seed = std::stoull(value);
      else if (key == "name") spec.name = value;
      else throw ConfigError("synthetic spec: unknown key '" + key + "'");
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ConfigError*>(&e)) throw;
      throw ConfigError("synthetic spec: bad value '" + value + "' for " + key);
    }
  }
  spec.validate();
  return spec;
}

namespace {

// Sum of Gaussian bumps, rescaled to unit RMS.
std::vector<double> smooth_field(const SyntheticSpec& spec, RngStream& rng) {
  const std::size_t h = spec.height, w = spec.width, c = spec.channels;
  std::vector<double> field(c * h * w, 0.0);
  const double max_width = std::max(1.5, 0.35 * static_cast<double>(std::min(h, w)));
  for (std::size_t b = 0; b < spec.blobs; ++b) {
    const double cy = rng.uniform() * static_cast<double>(h);
    const double cx = rng.uniform() * static_cast<double>(w);
    const double s = 1.0 + rng.uniform() * (max_width - 1.0);
    std::vector<double> amp(c);
    for (auto& a : amp) a = rng.normal();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * s * s));
        for (std::size_t ch = 0; ch < c; ++ch) field[(ch * h + y) * w + x] += amp[ch] * g;
      }
  }
  double ss = 0.0;
  for (double v : field) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(field.size()));
  if (rms > 0.0)
    for (auto& v : field) v /= rms;
  return field;
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.name = spec.name;
  ds.channels = spec.channels;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.num_classes = spec.classes;
  ds.role = DatasetRole::both;
  const std::size_t n = spec.classes * spec.per_class, d = ds.item_size();
  ds.pixels.resize(n * d);
  ds.labels.resize(n);

  RngStream shared_rng(derive_seed(spec.seed, "shared"));
  const auto shared = smooth_field(spec, shared_rng);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    RngStream class_rng(derive_seed(spec.seed, 1, c));
    const auto own = smooth_field(spec, class_rng);
    std::vector<double> proto(d);
    for (std::size_t k = 0; k < d; ++k) proto[k] = (1.0 - spec.separation) * shared[k] + spec.separation * own[k];
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const std::size_t row = c * spec.per_class + i;
      RngStream item_rng(derive_seed(spec.seed, 2, row));
      const double amplitude = 0.75 + 0.5 * item_rng.uniform();
      float* out = ds.pixels.data() + row * d;
      for (std::size_t k = 0; k < d; ++k)
        out[k] = static_cast<float>(amplitude * proto[k] + spec.sigma * item_rng.normal());
      ds.labels[row] = static_cast<int>(c);
    }
  }
  return ds;
}

// ---------------------------------------------------------------- file formats

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setfill('0') << std::setw(8) << v;
  return os.str();
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels,
                 std::size_t num_classes) {
  const auto img = read_file(images);
  const std::string where = "'" + images.string() + "'";
  if (img.size() < 16) throw FormatError(where + ": truncated idx header (" + std::to_string(img.size()) + " bytes)");
  if (auto magic = read_be32(img, 0); magic != 0x00000803)
    throw FormatError(where + ": bad idx image magic " + hex(magic) + " (expected 0x00000803)");
  const std::size_t n = read_be32(img, 4), rows = read_be32(img, 8), cols = read_be32(img, 12);
  const std::size_t expected = 16 + n * rows * cols;
  if (img.size() < expected)
    throw FormatError(where + ": truncated idx payload, expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(img.size()));

  Dataset ds;
  ds.name = images.stem().string();
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.pixels.resize(n * rows * cols);
  std::transform(img.begin() + 16, img.begin() + static_cast<std::ptrdiff_t>(expected), ds.pixels.begin(),
                 [](unsigned char b) { return static_cast<float>(b) / 255.0f; });
  ds.labels.assign(n, kNoLabel);
  ds.role = DatasetRole::ssl;
  if (labels) {
    const auto lab = read_file(*labels);
    const std::string lwhere = "'" + labels->string() + "'";
    if (lab.size() < 8) throw FormatError(lwhere + ": truncated idx header");
    if (auto magic = read_be32(lab, 0); magic != 0x00000801)
      throw FormatError(lwhere + ": bad idx label magic " + hex(magic) + " (expected 0x00000801)");
    const std::size_t count = read_be32(lab, 4);
    if (count != n)
      throw FormatError(lwhere + ": " + std::to_string(count) + " labels for " + std::to_string(n) + " images");
    if (lab.size() < 8 + n)
      throw FormatError(lwhere + ": truncated idx payload, expected " + std::to_string(8 + n) + " bytes, found " +
                        std::to_string(lab.size()));
    for (std::size_t i = 0; i < n; ++i) {
      if (lab[8 + i] >= num_classes)
        throw FormatError(lwhere + ": label " + std::to_string(lab[8 + i]) + " of item " + std::to_string(i) +
                          " outside [0, " + std::to_string(num_classes) + ")");
      ds.labels[i] = lab[8 + i];
    }
    ds.num_classes = num_classes;
    ds.role = DatasetRole::both;
  }
  return ds;
}

Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t num_classes) {
  constexpr std::size_t kPixels = 3 * 32 * 32, kRecord = kPixels + 1;
  const auto bytes = read_file(path);
  const std::string where = "'" + path.string() + "'";
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw FormatError(where + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(kRecord) + "-byte record");
  const std::size_t n = bytes.size() / kRecord;
  Dataset ds;
  ds.name = path.stem().string();
  ds.channels = 3;
  ds.height = ds.width = 32;
  ds.num_classes = num_classes;
  ds.pixels.resize(n * kPixels);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kRecord;
    if (rec[0] >= num_classes)
      throw FormatError(where + ": label " + std::to_string(rec[0]) + " of record " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    ds.labels[i] = rec[0];
    std::transform(rec + 1, rec + kRecord, ds.pixels.begin() + static_cast<std::ptrdiff_t>(i * kPixels),
                   [](unsigned char b) { return static_cast<float>(b) / 255.0f; });
  }
  return ds;
}

Dataset load(const DataSource& source) {
  switch (source.format) {
    case DataFormat::idx: {
      auto labels = source.labels_path;
      if (!labels) {
        std::string name = source.path.filename().string();
        if (auto pos = name.find("images-idx3"); pos != std::string::npos) {
          name.replace(pos, 11, "labels-idx1");
          auto sibling = source.path.parent_path() / name;
          if (std::filesystem::exists(sibling)) labels = sibling;
        }
      }
      return load_idx(source.path, labels, source.num_classes);
    }
    case DataFormat::cifar_binary:
      return load_cifar_binary(source.path, source.num_classes);
    case DataFormat::synthetic_spec: {
      std::ifstream in(source.path);
      if (!in) throw IoError("cannot open '" + source.path.string() + "'");
      std::stringstream text;
      text << in.rdbuf();
      return make_synthetic(parse_synthetic_spec(text.str()));
    }
  }
  throw ConfigError("unknown data format");
}

void normalize(Dataset& ds, float mean, float stddev) {
  if (!(stddev > 0.0f)) throw ConfigError("normalization stddev must be positive");
  for (auto& v : ds.pixels) v = (v - mean) / stddev;
}

// ---------------------------------------------------------------- sampling

namespace {

std::map<int, std::vector<std::size_t>> by_class(const Dataset& ds) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.size(); ++i) groups[ds.labels[i]].push_back(i);
  return groups;
}

}  // namespace

Dataset subsample(const Dataset& ds, double p, std::uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0)) throw ValidationError("data fraction p=" + std::to_string(p) + " outside (0, 1]");
  const auto target = static_cast<std::size_t>(std::floor(p * static_cast<double>(ds.size())));
  if (target < 1)
    throw ValidationError("subsampling " + std::to_string(ds.size()) + " items at p=" + std::to_string(p) +
                          " leaves an empty dataset");
  RngStream rng(seed);
  std::vector<std::size_t> keep;
  if (ds.labeled()) {
    auto groups = by_class(ds);
    struct Quota {
      int label;
      std::size_t count;
      double frac;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (const auto& [label, rows] : groups) {
      const double exact = p * static_cast<double>(rows.size());
      const auto base = static_cast<std::size_t>(std::floor(exact));
      quotas.push_back({label, base, exact - static_cast<double>(base)});
      assigned += base;
    }
    auto order = quotas;
    std::stable_sort(order.begin(), order.end(), [](const Quota& a, const Quota& b) { return a.frac > b.frac; });
    for (std::size_t k = 0; assigned < target && k < order.size(); ++k, ++assigned)
      for (auto& q : quotas)
        if (q.label == order[k].label) ++q.count;
    for (const auto& q : quotas) {
      auto rows = groups[q.label];
      rng.shuffle(rows.begin(), rows.end());
      keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(q.count));
    }
  } else {
    std::vector<std::size_t> rows(ds.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    rng.shuffle(rows.begin(), rows.end());
    keep.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(target));
  }
  std::sort(keep.begin(), keep.end());
  return ds.select(keep);
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ValidationError("held-out fraction " + std::to_string(fraction) + " outside (0, 1)");
  RngStream rng(seed);
  std::vector<std::size_t> train, held;
  auto take = [&](std::vector<std::size_t> rows) {
    rng.shuffle(rows.begin(), rows.end());
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows.size())));
    if (k == 0 && rows.size() >= 2) k = 1;
    if (k >= rows.size()) k = rows.size() - 1;
    held.insert(held.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(k), rows.end());
  };
  if (ds.labeled()) {
    for (auto& [label, rows] : by_class(ds)) take(rows);
  } else {
    std::vector<std::size_t> rows(ds.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    take(rows);
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
  if (held.empty()) throw ValidationError("dataset '" + ds.name + "' too small for a held-out split");
  return {ds.select(train), ds.select(held)};
}

MixedDataset mix(const Dataset& d_ssl, const Dataset& d_sl, float lambda, std::uint64_t seed, int task_id,
                 bool identical) {
  if (!(lambda >= 0.0f && lambda <= 1.0f)) throw ValidationError("mixing weight lambda outside [0, 1]");
  if (!d_sl.labeled()) throw ValidationError("supervised source '" + d_sl.name + "' is not labeled");
  MixedDataset out;
  out.lambda = lambda;
  out.task_ids.assign(d_sl.size(), task_id);
  if (&d_ssl == &d_sl || identical) {
    out.mode = MixMode::identity;
    out.data = d_sl;
    return out;
  }
  if (!same_shape(d_ssl, d_sl))
    throw DimensionError("mix: self-supervised items " + shape_string(d_ssl.item_shape()) +
                         " vs supervised items " + shape_string(d_sl.item_shape()));
  if (d_ssl.size() == 0) throw ValidationError("mix: empty self-supervised source");
  out.mode = MixMode::mixup;
  out.data = d_sl;
  RngStream rng(seed);
  out.ssl_sources.resize(d_sl.size());
  const float mu = 1.0f - lambda;
  for (std::size_t i = 0; i < d_sl.size(); ++i) {
    const std::size_t j = rng.uniform_index(d_ssl.size());
    out.ssl_sources[i] = j;
    auto dst = out.data.item(i);
    auto partner = d_ssl.item(j);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = lambda * dst[k] + mu * partner[k];
  }
  return out;
}

// ---------------------------------------------------------------- batching

std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                  std::uint64_t epoch) {
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  RngStream rng(derive_seed(seed, epoch));
  rng.shuffle(perm.begin(), perm.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices, int task_id) {
  Batch b;
  b.images = Tensor<float>(Shape{indices.size(), ds.channels, ds.height, ds.width});
  auto px = b.images.data();
  const std::size_t d = ds.item_size();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = ds.item(indices[r]);
    std::copy(src.begin(), src.end(), px.begin() + static_cast<std::ptrdiff_t>(r * d));
    b.labels.push_back(ds.labels[indices[r]]);
  }
  b.task_ids.assign(indices.size(), task_id);
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                           int task_id) {
  if (ds.size() == 0) throw ValidationError("cannot batch empty dataset '" + ds.name + "'");
  std::vector<Batch> out;
  for (const auto& rows : batch_order(ds.size(), batch_size, seed, epoch)) out.push_back(gather(ds, rows, task_id));
  return out;
}

void augment(Batch& batch, const AugmentConfig& cfg, RngStream& rng) {
  if (!cfg.enabled) return;
  const auto& s = batch.images.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], d = c * h * w;
  const auto pad = static_cast<std::ptrdiff_t>(cfg.crop_pad);
  std::vector<float> src(d);
  auto px = batch.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::ptrdiff_t dy = pad ? static_cast<std::ptrdiff_t>(rng.uniform_index(2 * cfg.crop_pad + 1)) - pad : 0;
    const std::ptrdiff_t dx = pad ? static_cast<std::ptrdiff_t>(rng.uniform_index(2 * cfg.crop_pad + 1)) - pad : 0;
    const bool flip = cfg.flip && rng.uniform() < 0.5;
    float* img = px.data() + i * d;
    std::copy(img, img + d, src.begin());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::ptrdiff_t sx0 = flip ? static_cast<std::ptrdiff_t>(w - 1 - x) : static_cast<std::ptrdiff_t>(x);
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy, sx = sx0 + dx;
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx < static_cast<std::ptrdiff_t>(w);
          img[(ch * h + y) * w + x] =
              inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0f;
        }
  }
}

std::vector<std::pair<std::size_t, std::size_t>> round_robin(std::span<const std::size_t> batch_counts) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t rounds = batch_counts.empty() ? 0 : *std::max_element(batch_counts.begin(), batch_counts.end());
  for (std::size_t r = 0; r < rounds; ++r)
    for (std::size_t t = 0; t < batch_counts.size(); ++t)
      if (r < batch_counts[t]) out.emplace_back(t, r);
  return out;
}

}  // namespace mixtrain
