// Verification and experiment harnesses: gradcheck, scan benchmark, ablation.
#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "ssmstyle/ablation.hpp"
#include "ssmstyle/bench.hpp"
#include "ssmstyle/gradcheck.hpp"
#include "ssmstyle/ops.hpp"
#include "support.hpp"

using namespace ssmstyle;
using testing_support::error_kind;

namespace {

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Gradcheck, ModulesListed) {
  const auto& m = gradcheck_modules();
  for (const char* name : {"all", "tensor", "ssm", "fusion", "losses"})
    EXPECT_NE(std::find(m.begin(), m.end(), name), m.end()) << name;
  EXPECT_EQ(error_kind([] { (void)run_gradcheck("nope"); }), ErrorKind::kInput);
}

TEST(Gradcheck, TensorAndSsmModulesPassOnTwoSeeds) {
  for (std::uint64_t seed : {0u, 7u}) {
    for (const char* module : {"tensor", "ssm"}) {
      GradcheckOptions o;
      o.seed = seed;
      const GradcheckReport r = run_gradcheck(module, o);
      EXPECT_TRUE(r.passed()) << module << " seed " << seed;
      EXPECT_FALSE(r.entries.empty());
      for (const auto& e : r.entries) {
        EXPECT_EQ(e.module, module);
        EXPECT_GE(e.instances, 20u) << e.op;
        EXPECT_LT(e.max_rel_err, 1e-4) << e.op;
      }
    }
  }
}

TEST(Gradcheck, InjectedFaultIsNamed) {
  GradcheckOptions o;
  o.inject_fault = true;
  const GradcheckReport r = run_gradcheck("tensor", o);
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.failing_ops(), std::vector<std::string>{"corrupted_fixture"});
}

TEST(Gradcheck, DetectsWrongVjpDirectly) {
  // x * x with a VJP of 3x instead of 2x.
  const GradFn bad = [](Tape& tape, std::span<const Tensor> in) {
    const Tensor& x = in[0];
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
    Tensor out = make_op_result(tape, x.shape(), y, {&x}, "bad_square");
    auto xi = x.impl();
    auto yi = out.impl();
    tape.record([xi, yi] {
      if (yi->grad.empty()) return;
      double* g = grad_sink(xi);
      if (!g) return;
      for (std::size_t i = 0; i < yi->grad.size(); ++i) g[i] += 3.0 * xi->data[i] * yi->grad[i];
    });
    return out;
  };
  const GradFn good = [](Tape& tape, std::span<const Tensor> in) { return ops::square(tape, in[0]); };
  Rng rng(1);
  const Tensor x = Tensor::from({4}, {0.5, -1.0, 2.0, 0.25});
  EXPECT_GT(max_relative_error(bad, {x}, rng), 0.1);
  EXPECT_LT(max_relative_error(good, {x}, rng), 1e-8);
}

TEST(Bench, LengthsAreClippedToMax) {
  EXPECT_EQ(bench_lengths(4096), (std::vector<std::size_t>{64, 256, 1024, 4096}));
  EXPECT_EQ(bench_lengths(1000), (std::vector<std::size_t>{64, 256}));
  EXPECT_TRUE(bench_lengths(10).empty());
}

TEST(Bench, OneRowPerImplAndLengthAfterGuard) {
  BenchOptions o;
  o.max_len = 256;
  o.reps = 1;
  const BenchResult r = run_bench_scan(o);
  EXPECT_TRUE(r.guard_passed);
  EXPECT_LE(r.guard_max_abs_diff, kScanGuardTolerance);
  ASSERT_EQ(r.rows.size(), 6u);
  for (const BenchRow& row : r.rows) {
    EXPECT_TRUE(row.impl == "scan_sequential" || row.impl == "scan_parallel" || row.impl == "cross_attention_baseline");
    EXPECT_TRUE(row.seq_len == 64 || row.seq_len == 256);
    EXPECT_EQ(row.channels, 16u);
    EXPECT_GT(row.wall_time_ns, 0.0);
  }
  const auto csv = lines(r.to_csv());
  ASSERT_EQ(csv.size(), 7u);
  EXPECT_EQ(csv[0], kBenchHeader);
  EXPECT_EQ(csv[0], "impl,seq_len,channels,wall_time_ns");
}

TEST(Bench, NonPositiveSizesRejected) {
  for (int which = 0; which < 3; ++which) {
    BenchOptions o;
    (which == 0 ? o.max_len : which == 1 ? o.channels : o.reps) = 0;
    EXPECT_EQ(error_kind([&] { (void)run_bench_scan(o); }), ErrorKind::kInput) << which;
  }
}

namespace {

// Small, fast setup: a 32x32 image, a briefly pretrained autoencoder and
// three epochs per row.
class SmallAblation : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new RunConfig();
    config_->prompts = {"Picasso oil painting"};
    config_->pretrain_steps = 30;
    config_->schedule.max_epochs = 3;
    content_ = new Tensor(smooth_random_image(32, 32, 4));
    models_ = new Models(Models::build(*config_, *content_));
  }
  static void TearDownTestSuite() {
    delete models_;
    delete content_;
    delete config_;
  }
  static AblationResult run(const std::string& suite) {
    AblationOptions o;
    o.timing_extent = 0;
    return run_ablation(suite, *config_, *content_, *models_, o);
  }
  static RunConfig* config_;
  static Tensor* content_;
  static Models* models_;
};

RunConfig* SmallAblation::config_ = nullptr;
Tensor* SmallAblation::content_ = nullptr;
Models* SmallAblation::models_ = nullptr;

}  // namespace

TEST_F(SmallAblation, LossesSuiteRows) {
  const AblationResult r = run("losses");
  ASSERT_EQ(r.rows.size(), 4u);
  const char* labels[] = {"baseline", "baseline+md", "baseline+md+lpips", "baseline+md+lpips+so"};
  const bool md[] = {false, true, true, true}, lp[] = {false, false, true, true}, so[] = {false, false, false, true};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.rows[i].label, labels[i]);
    EXPECT_EQ(r.rows[i].masked, md[i]);
    EXPECT_EQ(r.rows[i].lpips, lp[i]);
    EXPECT_EQ(r.rows[i].second_order, so[i]);
    EXPECT_EQ(r.rows[i].seq_len, 64u);
  }
  const auto csv = lines(r.to_csv());
  ASSERT_EQ(csv.size(), 5u);
  EXPECT_EQ(csv[0], kAblationHeader);
}

TEST_F(SmallAblation, FusionSuiteRows) {
  const AblationResult r = run("fusion");
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].fusion, FusionKind::kSsm);
  EXPECT_EQ(r.rows[1].fusion, FusionKind::kCrossAttention);
  EXPECT_GT(r.rows[0].epoch_ms, 0.0);
  EXPECT_GT(r.rows[1].epoch_ms, 0.0);
}

TEST_F(SmallAblation, DeterministicMetrics) {
  const AblationResult a = run("losses"), b = run("losses");
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].report.clip_score_analog, b.rows[i].report.clip_score_analog);
    EXPECT_EQ(a.rows[i].report.ssim, b.rows[i].report.ssim);
    EXPECT_EQ(a.rows[i].final_l_dir, b.rows[i].final_l_dir);
  }
}

TEST_F(SmallAblation, UnknownSuiteRejected) {
  EXPECT_EQ(error_kind([] { (void)run("everything"); }), ErrorKind::kInput);
}
