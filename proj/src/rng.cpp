#include "mixtrain/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "mixtrain/errors.hpp"

namespace mixtrain {

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  // FNV-1a over the name, then mixed with the root
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(mix_seed(root) ^ h);
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(mix_seed(root) ^ a) ^ (b * 0x9e3779b97f4a7c15ULL));
}

double RngStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t RngStream::uniform_index(std::size_t n) {
  if (n <= 1) return 0;
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

double RngStream::normal() {
  // Box-Muller, one value per call
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RngStream::truncated_normal(double stddev, double bound) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= bound) return z * stddev;
  }
}

std::string RngStream::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void RngStream::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw FormatError("unreadable generator state");
}

StreamSet::StreamSet(std::uint64_t root_seed) : root_(root_seed) {
  for (auto name : {kInit, kSubsample, kMixPair, kMaskPlan, kShuffle, kAugment})
    streams_.emplace(std::string(name), RngStream(derive_seed(root_seed, name)));
}

RngStream& StreamSet::operator[](std::string_view name) {
  auto it = streams_.find(name);
  if (it == streams_.end()) throw ValidationError("unknown random stream '" + std::string(name) + "'");
  return it->second;
}

std::map<std::string, std::string> StreamSet::states() const {
  std::map<std::string, std::string> out;
  for (const auto& [name, stream] : streams_) out.emplace(name, stream.state());
  return out;
}

void StreamSet::restore(const std::map<std::string, std::string>& states) {
  for (const auto& [name, state] : states) (*this)[name].set_state(state);
}

}  // namespace mixtrain
