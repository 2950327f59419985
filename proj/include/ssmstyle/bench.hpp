#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace ssmstyle {

/// Wall-time comparison of the two scan implementations and the
/// cross-attention baseline over sequence lengths {64, 256, 1024, 4096} that
/// do not exceed `max_len`.
struct BenchOptions {
  std::size_t max_len = 4096;
  std::size_t channels = 16;
  std::size_t state_dim = 8;
  std::size_t reps = 3;
  unsigned threads = 1;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string impl;  // scan_sequential | scan_parallel | cross_attention_baseline
  std::size_t seq_len = 0;
  std::size_t channels = 0;
  double wall_time_ns = 0.0;  // fastest of `reps` runs
};

struct BenchResult {
  // Largest |parallel - sequential| seen by the equality guard. Timing only
  // runs when the guard passes.
  double guard_max_abs_diff = 0.0;
  bool guard_passed = false;
  std::vector<BenchRow> rows;
  std::string to_csv() const;
};

inline constexpr double kScanGuardTolerance = 1e-10;
extern const char* const kBenchHeader;

std::vector<std::size_t> bench_lengths(std::size_t max_len);
// Non-positive sizes are input errors.
BenchResult run_bench_scan(const BenchOptions& options);

}  // namespace ssmstyle
