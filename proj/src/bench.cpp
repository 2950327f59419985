#include "ssmstyle/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "ssmstyle/cross_attention.hpp"
#include "ssmstyle/errors.hpp"
#include "ssmstyle/models.hpp"
#include "ssmstyle/rng.hpp"
#include "ssmstyle/ssm.hpp"

namespace ssmstyle {
namespace {

template <typename F>
double best_ns(std::size_t reps, F&& body) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < reps; ++r) {
    const auto start = std::chrono::steady_clock::now();
    body();
    const auto stop = std::chrono::steady_clock::now();
    best = std::min(best, static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count()));
  }
  return best;
}

}  // namespace

const char* const kBenchHeader = "impl,seq_len,channels,wall_time_ns";

std::string BenchResult::to_csv() const {
  std::string out = std::string(kBenchHeader) + "\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.0f", r.wall_time_ns);
    out += r.impl + "," + std::to_string(r.seq_len) + "," + std::to_string(r.channels) + "," + buf + "\n";
  }
  return out;
}

std::vector<std::size_t> bench_lengths(std::size_t max_len) {
  std::vector<std::size_t> out;
  for (std::size_t len : {64, 256, 1024, 4096}) {
    if (len <= max_len) out.push_back(len);
  }
  return out;
}

BenchResult run_bench_scan(const BenchOptions& options) {
  if (options.max_len == 0) raise(ErrorKind::kInput, "--max-len must be positive");
  if (options.channels == 0) raise(ErrorKind::kInput, "--channels must be positive");
  if (options.reps == 0) raise(ErrorKind::kInput, "--reps must be positive");
  if (options.state_dim == 0) raise(ErrorKind::kInput, "state dimension must be positive");

  const std::size_t c = options.channels, n = options.state_dim;
  BenchResult result;
  struct Case {
    std::size_t len;
    Tensor a, b, x;
    CrossAttentionParams attn;
  };
  std::vector<Case> cases;
  Rng rng(options.seed);
  for (std::size_t len : bench_lengths(options.max_len)) {
    Case k;
    k.len = len;
    // Decays in (0, 1) as produced by exp(delta * A) with A < 0.
    k.a = Tensor::from({len, c, n}, rng.uniform_vector(len * c * n, 0.5, 0.999));
    k.b = Tensor::from({len, c, n}, rng.normal_vector(len * c * n, 0.1));
    k.x = Tensor::from({len, c}, rng.normal_vector(len * c, 1.0));
    k.attn = CrossAttentionParams::init(c, kEmbedDim, len, rng);
    const Tensor seq = scan_sequential(k.a, k.b);
    const Tensor par = scan_parallel(k.a, k.b, options.threads);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      result.guard_max_abs_diff = std::max(result.guard_max_abs_diff, std::abs(seq[i] - par[i]));
    }
    cases.push_back(std::move(k));
  }
  result.guard_passed = result.guard_max_abs_diff <= kScanGuardTolerance;
  if (!result.guard_passed) return result;

  std::vector<double> style(kEmbedDim, 0.0);
  style[0] = 1.0;
  const Tensor style_emb = Tensor::from({kEmbedDim}, style);
  for (const Case& k : cases) {
    result.rows.push_back({"scan_sequential", k.len, c, best_ns(options.reps, [&] { (void)scan_sequential(k.a, k.b); })});
    result.rows.push_back(
        {"scan_parallel", k.len, c, best_ns(options.reps, [&] { (void)scan_parallel(k.a, k.b, options.threads); })});
    result.rows.push_back({"cross_attention_baseline", k.len, c, best_ns(options.reps, [&] {
                             Tape tape;
                             (void)cross_attention_baseline(tape, k.attn, k.x, style_emb);
                           })});
  }
  return result;
}

}  // namespace ssmstyle
