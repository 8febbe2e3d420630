#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace mixtrain {

// splitmix64 finalizer; mixes arbitrary keys into a well-spread seed.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0);

/// Seeded generator with distribution helpers that do not depend on the
/// standard library's implementation-defined distributions, so draws are
/// stable across toolchains.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                       // [0, 1)
  std::size_t uniform_index(std::size_t n);  // [0, n)
  double normal();
  // Normal(0, stddev) resampled until |x| <= bound * stddev.
  double truncated_normal(double stddev, double bound = 2.0);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[uniform_index(i)]);
  }

  // Opaque serialized engine state.
  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

/// Named child streams fanned out from one root seed.
class StreamSet {
 public:
  static constexpr std::string_view kInit = "init";
  static constexpr std::string_view kSubsample = "subsample";
  static constexpr std::string_view kMixPair = "mixpair";
  static constexpr std::string_view kMaskPlan = "maskplan";
  static constexpr std::string_view kShuffle = "shuffle";
  static constexpr std::string_view kAugment = "augment";

  explicit StreamSet(std::uint64_t root_seed);

  RngStream& operator[](std::string_view name);
  std::uint64_t root() const { return root_; }
  // Seed of a stream as created from the root, independent of its state.
  std::uint64_t seed_of(std::string_view name) const { return derive_seed(root_, name); }

  std::map<std::string, std::string> states() const;
  void restore(const std::map<std::string, std::string>& states);

 private:
  std::uint64_t root_;
  std::map<std::string, RngStream, std::less<>> streams_;
};

}  // namespace mixtrain
