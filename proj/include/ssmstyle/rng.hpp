#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace ssmstyle {

// Seeded generator whose output is fully specified by the seed. The
// distribution objects of <random> are implementation-defined, so uniform and
// normal draws are derived from the raw 64-bit engine output here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second variate is cached.
  double normal();

  std::uint64_t below(std::uint64_t bound);

  std::vector<double> normal_vector(std::size_t n, double stddev);
  std::vector<double> uniform_vector(std::size_t n, double lo, double hi);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes a base seed with a stream id so independent components draw from
// unrelated streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace ssmstyle
