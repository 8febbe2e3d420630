#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "mixtrain/data.hpp"
#include "mixtrain/errors.hpp"

using namespace mixtrain;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("mixtrain_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<unsigned char>& v, std::uint32_t x) {
  for (int s = 24; s >= 0; s -= 8) v.push_back(static_cast<unsigned char>(x >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> v;
  put_be32(v, 0x00000803);
  put_be32(v, n);
  put_be32(v, rows);
  put_be32(v, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) v.push_back(static_cast<unsigned char>(i % 256));
  return v;
}

std::vector<unsigned char> idx_labels(std::vector<unsigned char> labels) {
  std::vector<unsigned char> v;
  put_be32(v, 0x00000801);
  put_be32(v, static_cast<std::uint32_t>(labels.size()));
  v.insert(v.end(), labels.begin(), labels.end());
  return v;
}

Dataset balanced(std::size_t classes, std::size_t per_class, std::size_t d = 2) {
  Dataset ds;
  ds.name = "balanced";
  ds.channels = 1;
  ds.height = 1;
  ds.width = d;
  ds.num_classes = classes;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      ds.labels.push_back(static_cast<int>(c));
      for (std::size_t k = 0; k < d; ++k) ds.pixels.push_back(static_cast<float>(ds.labels.size() * 10 + k));
    }
  return ds;
}

std::map<int, std::size_t> class_counts(const Dataset& ds) {
  std::map<int, std::size_t> counts;
  for (int l : ds.labels) ++counts[l];
  return counts;
}

}  // namespace

TEST(LoadIdx, HeaderArithmetic) {
  TempDir dir;
  write_bytes(dir.path() / "train-images-idx3-ubyte", idx_images(4, 28, 28));
  write_bytes(dir.path() / "train-labels-idx1-ubyte", idx_labels({3, 1, 4, 1}));
  auto ds = load(DataSource{DataFormat::idx, dir.path() / "train-images-idx3-ubyte", std::nullopt, 10});
  EXPECT_EQ(ds.size(), 4u);
  EXPECT_EQ(ds.item_shape(), (Shape{1, 28, 28}));
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 1, 4, 1}));
  EXPECT_FLOAT_EQ(ds.pixels[1], 1.0f / 255.0f);
  EXPECT_FLOAT_EQ(ds.pixels[255], 1.0f);
  EXPECT_NO_THROW(ds.validate());
}

TEST(LoadIdx, ImagesWithoutLabelsAreSelfSupervised) {
  TempDir dir;
  write_bytes(dir.path() / "x.idx", idx_images(2, 3, 3));
  auto ds = load_idx(dir.path() / "x.idx", std::nullopt);
  EXPECT_EQ(ds.role, DatasetRole::ssl);
  EXPECT_FALSE(ds.labeled());
}

TEST(LoadIdx, Errors) {
  TempDir dir;
  auto bad_magic = idx_images(1, 2, 2);
  bad_magic[3] = 0x01;
  write_bytes(dir.path() / "magic", bad_magic);
  EXPECT_THROW(load_idx(dir.path() / "magic", std::nullopt), FormatError);

  auto truncated = idx_images(3, 4, 4);
  truncated.resize(truncated.size() - 1);
  write_bytes(dir.path() / "short", truncated);
  try {
    load_idx(dir.path() / "short", std::nullopt);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }

  write_bytes(dir.path() / "img", idx_images(2, 2, 2));
  write_bytes(dir.path() / "lab", idx_labels({1, 10}));
  EXPECT_THROW(load_idx(dir.path() / "img", dir.path() / "lab", 10), FormatError);
  write_bytes(dir.path() / "lab3", idx_labels({1, 2, 3}));
  EXPECT_THROW(load_idx(dir.path() / "img", dir.path() / "lab3", 10), FormatError);
  EXPECT_THROW(load_idx(dir.path() / "missing", std::nullopt), IoError);
}

TEST(LoadCifar, RecordCountIsFileSizeOver3073) {
  TempDir dir;
  std::vector<unsigned char> bytes;
  for (int r = 0; r < 5; ++r) {
    bytes.push_back(static_cast<unsigned char>(r));
    for (int k = 0; k < 3072; ++k) bytes.push_back(static_cast<unsigned char>(k == 0 ? 255 : r));
  }
  write_bytes(dir.path() / "data_batch_1.bin", bytes);
  auto ds = load(DataSource{DataFormat::cifar_binary, dir.path() / "data_batch_1.bin", std::nullopt, 10});
  EXPECT_EQ(ds.size(), bytes.size() / 3073);
  EXPECT_EQ(ds.item_shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(ds.labels[4], 4);
  EXPECT_FLOAT_EQ(ds.item(2)[0], 1.0f);
  EXPECT_FLOAT_EQ(ds.item(2)[1], 2.0f / 255.0f);

  bytes.pop_back();
  write_bytes(dir.path() / "bad.bin", bytes);
  EXPECT_THROW(load_cifar_binary(dir.path() / "bad.bin"), FormatError);
  std::vector<unsigned char> high(3073, 0);
  high[0] = 12;
  write_bytes(dir.path() / "label.bin", high);
  EXPECT_THROW(load_cifar_binary(dir.path() / "label.bin", 10), FormatError);
}

TEST(Synthetic, DeterministicFromSeed) {
  auto spec = parse_synthetic_spec("classes = 3\nper_class=10\nseed=7\n# comment\n");
  EXPECT_EQ(spec.classes, 3u);
  auto a = make_synthetic(spec);
  auto b = make_synthetic(spec);
  EXPECT_EQ(a.size(), 30u);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NO_THROW(a.validate());
  spec.seed = 8;
  EXPECT_NE(make_synthetic(spec).pixels, a.pixels);
}

TEST(Synthetic, SpecErrors) {
  EXPECT_THROW(parse_synthetic_spec("colour=3"), ConfigError);
  EXPECT_THROW(parse_synthetic_spec("classes=x"), ConfigError);
  EXPECT_THROW(parse_synthetic_spec("classes"), ConfigError);
  EXPECT_THROW(parse_synthetic_spec("separation=2"), ConfigError);
}

TEST(Subsample, FullFractionKeepsMultiset) {
  auto ds = balanced(3, 7);
  auto sub = subsample(ds, 1.0, 11);
  auto sorted = [](std::vector<float> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  EXPECT_EQ(sorted(sub.pixels), sorted(ds.pixels));
  EXPECT_EQ(class_counts(sub), class_counts(ds));
}

TEST(Subsample, TenPercentStratified) {
  auto ds = balanced(10, 100);
  auto sub = subsample(ds, 0.1, 3);
  EXPECT_EQ(sub.size(), 100u);
  for (const auto& [label, count] : class_counts(sub)) EXPECT_EQ(count, 10u) << label;
  auto again = subsample(ds, 0.1, 3);
  EXPECT_EQ(again.pixels, sub.pixels);
  EXPECT_NE(subsample(ds, 0.1, 4).pixels, sub.pixels);
}

TEST(Subsample, RemainderGoesToLargestFractions) {
  Dataset ds = balanced(1, 5);
  auto extra = balanced(1, 3);
  for (auto& l : extra.labels) l = 1;
  ds.pixels.insert(ds.pixels.end(), extra.pixels.begin(), extra.pixels.end());
  ds.labels.insert(ds.labels.end(), extra.labels.begin(), extra.labels.end());
  ds.num_classes = 2;
  // p=0.5: exact quotas 2.5 and 1.5, total floor(4) -> base 2+1, one extra
  auto sub = subsample(ds, 0.5, 1);
  EXPECT_EQ(sub.size(), 4u);
  auto counts = class_counts(sub);
  EXPECT_EQ(counts[0] + counts[1], 4u);
  EXPECT_EQ(counts[0], 3u);  // tie at .5 resolved to the lower class id
}

TEST(Subsample, IdempotentInSize) {
  for (std::size_t n : {37u, 100u, 1001u})
    for (double p : {0.1, 0.25, 0.5, 0.75, 1.0}) {
      auto ds = balanced(1, n);
      EXPECT_EQ(subsample(subsample(ds, 1.0, 2), p, 5).size(), subsample(ds, p, 5).size());
    }
}

TEST(Subsample, Errors) {
  auto ds = balanced(2, 2);
  EXPECT_THROW(subsample(ds, 0.1, 1), ValidationError);
  EXPECT_THROW(subsample(ds, 0.0, 1), ValidationError);
  EXPECT_THROW(subsample(ds, 1.5, 1), ValidationError);
}

TEST(HoldOut, StratifiedDisjointPartition) {
  auto ds = balanced(10, 50);
  auto [train, held] = split_holdout(ds, 0.1, 9);
  EXPECT_EQ(held.size(), 50u);
  EXPECT_EQ(train.size(), 450u);
  for (const auto& [label, count] : class_counts(held)) EXPECT_EQ(count, 5u);
  std::vector<float> all = train.pixels;
  all.insert(all.end(), held.pixels.begin(), held.pixels.end());
  std::sort(all.begin(), all.end());
  auto orig = ds.pixels;
  std::sort(orig.begin(), orig.end());
  EXPECT_EQ(all, orig);
}

TEST(Mix, IdentityMode) {
  auto ds = balanced(3, 4);
  auto m = mix(ds, ds, 0.5f, 1);
  EXPECT_EQ(m.mode, MixMode::identity);
  EXPECT_EQ(m.data.size(), ds.size());
  EXPECT_EQ(m.data.pixels, ds.pixels);
  auto copy = ds;
  EXPECT_EQ(mix(copy, ds, 0.3f, 1, 0, true).mode, MixMode::identity);
}

TEST(Mix, LambdaOneKeepsSupervisedImages) {
  auto sl = balanced(2, 3);
  auto ssl = balanced(1, 5);
  auto m = mix(ssl, sl, 1.0f, 4);
  EXPECT_EQ(m.mode, MixMode::mixup);
  EXPECT_EQ(m.data.pixels, sl.pixels);
  EXPECT_EQ(m.data.labels, sl.labels);
}

TEST(Mix, HalfwayArithmetic) {
  Dataset sl;
  sl.name = "sl";
  sl.channels = sl.height = 1;
  sl.width = 2;
  sl.pixels = {2, 4};
  sl.labels = {1};
  sl.num_classes = 2;
  Dataset ssl = sl;
  ssl.pixels = {0, 2};
  ssl.labels = {kNoLabel};
  auto m = mix(ssl, sl, 0.5f, 0);
  EXPECT_EQ(m.data.pixels, (std::vector<float>{1, 3}));
  EXPECT_EQ(m.data.labels, (std::vector<int>{1}));
}

TEST(Mix, RecordedSourceReplay) {
  SyntheticSpec a, b;
  a.classes = 4;
  a.per_class = 8;
  b = a;
  b.seed = 99;
  auto sl = make_synthetic(a);
  auto ssl = make_synthetic(b);
  for (float lambda : {0.0f, 0.25f, 0.5f, 0.9f}) {
    auto m = mix(ssl, sl, lambda, 17, 1);
    ASSERT_EQ(m.ssl_sources.size(), sl.size());
    EXPECT_EQ(m.data.labels, sl.labels);
    EXPECT_EQ(m.task_ids, std::vector<int>(sl.size(), 1));
    for (std::size_t i = 0; i < sl.size(); ++i) {
      auto x_sl = sl.item(i), x_ssl = ssl.item(m.ssl_sources[i]), x_mix = m.data.item(i);
      for (std::size_t k = 0; k < x_mix.size(); ++k)
        ASSERT_EQ(x_mix[k] - (lambda * x_sl[k] + (1.0f - lambda) * x_ssl[k]), 0.0f);
    }
  }
  // fresh seed, fresh pairing
  EXPECT_NE(mix(ssl, sl, 0.5f, 1).ssl_sources, mix(ssl, sl, 0.5f, 2).ssl_sources);
}

TEST(Mix, Errors) {
  auto sl = balanced(2, 2, 2);
  auto wide = balanced(2, 2, 3);
  EXPECT_THROW(mix(wide, sl, 0.5f, 0), DimensionError);
  auto unlabeled = sl;
  std::fill(unlabeled.labels.begin(), unlabeled.labels.end(), kNoLabel);
  EXPECT_THROW(mix(sl, unlabeled, 0.5f, 0), ValidationError);
  EXPECT_THROW(mix(wide, sl, 1.5f, 0), ValidationError);
}

TEST(Batches, SizesAndDeterminism) {
  auto ds = balanced(2, 5);
  auto bs = batches(ds, 4, 3, 0);
  ASSERT_EQ(bs.size(), 3u);
  EXPECT_EQ(bs[0].size(), 4u);
  EXPECT_EQ(bs[1].size(), 4u);
  EXPECT_EQ(bs[2].size(), 2u);
  EXPECT_EQ(bs[2].images.shape(), (Shape{2, 1, 1, 2}));
  auto again = batches(ds, 4, 3, 0);
  for (std::size_t i = 0; i < bs.size(); ++i) EXPECT_EQ(bs[i].indices, again[i].indices);
  std::vector<std::size_t> seen;
  for (const auto& b : bs) seen.insert(seen.end(), b.indices.begin(), b.indices.end());
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(10);
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(seen, all);
  // labels and pixels travel together
  for (std::size_t r = 0; r < bs[0].size(); ++r) {
    EXPECT_EQ(bs[0].labels[r], ds.labels[bs[0].indices[r]]);
    EXPECT_EQ(bs[0].images.data()[r * 2], ds.item(bs[0].indices[r])[0]);
  }
}

TEST(Batches, EpochsReshuffle) {
  auto ds = balanced(1, 32);
  int differing = 0;
  for (std::uint64_t e = 0; e < 10; ++e)
    differing += batch_order(32, 32, 5, e)[0] != batch_order(32, 32, 5, e + 1)[0];
  EXPECT_EQ(differing, 10);
  EXPECT_THROW(batches(Dataset{}, 4, 0, 0), ValidationError);
  EXPECT_THROW(batch_order(4, 0, 0, 0), ValidationError);
}

TEST(Augment, DisabledIsBitStable) {
  auto ds = make_synthetic(SyntheticSpec{});
  RngStream r1(1), r2(2);
  auto a = batches(ds, 16, 1, 0);
  auto b = batches(ds, 16, 1, 0);
  augment(a[0], AugmentConfig{}, r1);
  augment(b[0], AugmentConfig{}, r2);
  EXPECT_TRUE(std::equal(a[0].images.data().begin(), a[0].images.data().end(), b[0].images.data().begin()));
}

TEST(Augment, FlipAndShiftOnlyTouchBatch) {
  Dataset ds;
  ds.name = "ramp";
  ds.channels = 1;
  ds.height = 2;
  ds.width = 3;
  ds.pixels = {1, 2, 3, 4, 5, 6};
  ds.labels = {0};
  ds.num_classes = 1;
  const auto stored = ds.pixels;
  std::size_t flipped = 0, unchanged = 0;
  RngStream rng(3);
  for (int i = 0; i < 200; ++i) {
    auto b = gather(ds, std::vector<std::size_t>{0});
    augment(b, AugmentConfig{true, 0, true}, rng);
    std::vector<float> px(b.images.data().begin(), b.images.data().end());
    if (px == std::vector<float>{3, 2, 1, 6, 5, 4}) ++flipped;
    else if (px == stored) ++unchanged;
  }
  EXPECT_EQ(flipped + unchanged, 200u);
  EXPECT_NEAR(static_cast<double>(flipped), 100.0, 30.0);
  EXPECT_EQ(ds.pixels, stored);

  // crops keep the shape and shift content with zero fill
  auto b = gather(ds, std::vector<std::size_t>{0});
  augment(b, AugmentConfig{true, 1, false}, rng);
  EXPECT_EQ(b.images.shape(), (Shape{1, 1, 2, 3}));
  for (float v : b.images.data()) EXPECT_TRUE(v == 0.0f || std::find(stored.begin(), stored.end(), v) != stored.end());
}

TEST(RoundRobin, InterleavesAndDropsExhausted) {
  // three and two batches
  std::vector<std::size_t> counts{3, 2};
  auto seq = round_robin(counts);
  std::string trace;
  for (auto [t, i] : seq) trace += static_cast<char>('A' + t);
  EXPECT_EQ(trace, "ABABA");
  // task sizes 4 and 2 at batch size 2 give two and one batches
  counts = {4 / 2, 2 / 2};
  trace.clear();
  for (auto [t, i] : round_robin(counts)) trace += static_cast<char>('A' + t);
  EXPECT_EQ(trace, "ABA");
  EXPECT_TRUE(round_robin(std::vector<std::size_t>{}).empty());
}
