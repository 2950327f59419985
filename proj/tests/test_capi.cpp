// The exported C surface, exercised only through ssmstyle.h.
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <string>

#include "ssmstyle/ssmstyle.h"

namespace fs = std::filesystem;

namespace {

struct StrFree {
  void operator()(char* s) const { ssm_string_free(s); }
};
using Str = std::unique_ptr<char, StrFree>;

struct CfgFree {
  void operator()(ssm_config* c) const { ssm_config_destroy(c); }
};
using Cfg = std::unique_ptr<ssm_config, CfgFree>;

struct RunFree {
  void operator()(ssm_run* r) const { ssm_run_destroy(r); }
};
using RunHandle = std::unique_ptr<ssm_run, RunFree>;

Cfg make_config() {
  ssm_config* c = nullptr;
  EXPECT_EQ(ssm_config_create(&c), SSM_OK);
  return Cfg(c);
}

std::string to_json(const ssm_config* c) {
  char* s = nullptr;
  EXPECT_EQ(ssm_config_to_json(c, &s), SSM_OK);
  return Str(s).get();
}

const std::string kFixture = std::string(SSM_TEST_DATA_DIR) + "/meadow64.ppm";

// A short run: few pretraining steps and epochs.
Cfg quick_config() {
  Cfg c = make_config();
  EXPECT_EQ(ssm_config_set_content(c.get(), kFixture.c_str()), SSM_OK);
  EXPECT_EQ(ssm_config_add_prompt(c.get(), "Paul Gauguin style"), SSM_OK);
  EXPECT_EQ(ssm_config_merge_json(c.get(), R"({"pretrain":{"steps":20},"schedule":{"max_epochs":3}})"), SSM_OK);
  return c;
}

}  // namespace

TEST(CApi, VersionAndStatusNames) {
  EXPECT_STRNE(ssm_version(), "");
  EXPECT_STREQ(ssm_status_name(SSM_OK), "ok");
  for (int s = SSM_OK; s <= SSM_ERR_INTERNAL; ++s) EXPECT_STRNE(ssm_status_name(static_cast<ssm_status>(s)), "");
}

TEST(CApi, NullArgumentsRejected) {
  EXPECT_EQ(ssm_config_create(nullptr), SSM_ERR_NULL_ARGUMENT);
  EXPECT_NE(std::string(ssm_last_error()), "");
  EXPECT_EQ(ssm_config_merge_json(nullptr, "{}"), SSM_ERR_NULL_ARGUMENT);
  Cfg c = make_config();
  EXPECT_EQ(ssm_config_merge_json(c.get(), nullptr), SSM_ERR_NULL_ARGUMENT);
  EXPECT_EQ(ssm_stylize(c.get(), nullptr), SSM_ERR_NULL_ARGUMENT);
  EXPECT_EQ(ssm_run_status(nullptr), SSM_ERR_NULL_ARGUMENT);
  // Destroying null handles is a no-op.
  ssm_config_destroy(nullptr);
  ssm_run_destroy(nullptr);
  ssm_string_free(nullptr);
}

TEST(CApi, LastErrorClearedBySuccess) {
  Cfg c = make_config();
  EXPECT_EQ(ssm_config_merge_json(c.get(), "{not json"), SSM_ERR_CONFIG);
  EXPECT_NE(std::string(ssm_last_error()), "");
  EXPECT_EQ(ssm_config_validate(c.get()), SSM_ERR_CONFIG);  // no content yet
  EXPECT_EQ(ssm_config_set_content(c.get(), "x.png"), SSM_OK);
  EXPECT_STREQ(ssm_last_error(), "");
}

TEST(CApi, RejectedMergeLeavesConfigUntouched) {
  Cfg c = make_config();
  const std::string before = to_json(c.get());
  // First key valid, second unknown: nothing may be applied.
  EXPECT_EQ(ssm_config_merge_json(c.get(), R"({"schedule":{"max_epochs":7},"bogus":1})"), SSM_ERR_CONFIG);
  EXPECT_EQ(to_json(c.get()), before);
  EXPECT_EQ(ssm_config_merge_json(c.get(), R"({"schedule":{"max_epochs":7}})"), SSM_OK);
  EXPECT_NE(to_json(c.get()).find("\"max_epochs\": 7"), std::string::npos);
}

TEST(CApi, PromptsAndValidation) {
  Cfg c = make_config();
  ASSERT_EQ(ssm_config_set_content(c.get(), kFixture.c_str()), SSM_OK);
  ASSERT_EQ(ssm_config_add_prompt(c.get(), "oil painting"), SSM_OK);
  EXPECT_EQ(ssm_config_validate(c.get()), SSM_OK);
  ASSERT_EQ(ssm_config_clear_prompts(c.get()), SSM_OK);
  EXPECT_EQ(ssm_config_validate(c.get()), SSM_ERR_CONFIG);
  EXPECT_NE(std::string(ssm_last_error()).find("prompts"), std::string::npos);
  ASSERT_EQ(ssm_config_add_prompt(c.get(), "watercolor"), SSM_OK);
  ASSERT_EQ(ssm_config_add_prompt(c.get(), "ink sketch"), SSM_OK);
  EXPECT_EQ(ssm_config_validate(c.get()), SSM_OK);
  const std::string j = to_json(c.get());
  EXPECT_NE(j.find("watercolor"), std::string::npos);
  EXPECT_NE(j.find("ink sketch"), std::string::npos);
}

TEST(CApi, StylizeAndOutputs) {
  Cfg c = quick_config();
  const fs::path dir = fs::temp_directory_path() / "ssm_capi_outputs";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string img = (dir / "o.png").string(), trace = (dir / "t.csv").string(),
                    report = (dir / "r.json").string();
  ASSERT_EQ(ssm_config_set_outputs(c.get(), img.c_str(), trace.c_str(), report.c_str()), SSM_OK);

  ssm_run* raw = nullptr;
  ASSERT_EQ(ssm_stylize(c.get(), &raw), SSM_OK) << ssm_last_error();
  RunHandle run(raw);
  EXPECT_EQ(ssm_run_status(run.get()), SSM_OK);
  size_t epochs = 0;
  ASSERT_EQ(ssm_run_epochs(run.get(), &epochs), SSM_OK);
  EXPECT_EQ(epochs, 3u);

  size_t h = 0, w = 0;
  const double* px = nullptr;
  ASSERT_EQ(ssm_run_image(run.get(), &h, &w, &px), SSM_OK);
  EXPECT_EQ(h, 64u);
  EXPECT_EQ(w, 64u);
  for (size_t i = 0; i < h * w * 3; ++i) {
    ASSERT_TRUE(std::isfinite(px[i]));
    ASSERT_GE(px[i], 0.0);
    ASSERT_LE(px[i], 1.0);
  }

  char* csv = nullptr;
  ASSERT_EQ(ssm_run_trace_csv(run.get(), &csv), SSM_OK);
  const std::string trace_text = Str(csv).get();
  EXPECT_EQ(trace_text.rfind("epoch,l_dir,", 0), 0u);
  EXPECT_EQ(std::count(trace_text.begin(), trace_text.end(), '\n'), 4);

  char* json = nullptr;
  ASSERT_EQ(ssm_run_report_json(run.get(), &json), SSM_OK);
  EXPECT_NE(std::string(Str(json).get()).find("clip_score_analog"), std::string::npos);

  ASSERT_EQ(ssm_run_write_outputs(run.get(), c.get()), SSM_OK);
  EXPECT_TRUE(fs::exists(img));
  EXPECT_TRUE(fs::exists(trace));
  EXPECT_TRUE(fs::exists(report));

  // Metrics on the written image agree in shape and range.
  char* m = nullptr;
  ASSERT_EQ(ssm_metrics(kFixture.c_str(), img.c_str(), "Paul Gauguin style", 0, &m), SSM_OK);
  const std::string metrics = Str(m).get();
  EXPECT_NE(metrics.find("ssim"), std::string::npos);
  EXPECT_NE(metrics.find("clip_score_analog"), std::string::npos);
  fs::remove_all(dir);
}

TEST(CApi, StylizeMissingContentIsIoError) {
  Cfg c = make_config();
  ASSERT_EQ(ssm_config_set_content(c.get(), "/nonexistent/image.png"), SSM_OK);
  ASSERT_EQ(ssm_config_add_prompt(c.get(), "oil painting"), SSM_OK);
  ssm_run* raw = nullptr;
  EXPECT_EQ(ssm_stylize(c.get(), &raw), SSM_ERR_IO);
  EXPECT_EQ(raw, nullptr);
}

TEST(CApi, MetricsShapeMismatch) {
  const fs::path p = fs::temp_directory_path() / "ssm_capi_small.ppm";
  const std::string ppm = std::string("P6\n1 1\n255\n") + "abc";
  ASSERT_EQ(ssm_write_file_atomic(p.string().c_str(), ppm.data(), ppm.size()), SSM_OK);
  char* m = nullptr;
  EXPECT_EQ(ssm_metrics(kFixture.c_str(), p.string().c_str(), nullptr, 0, &m), SSM_ERR_DIMENSION);
  fs::remove(p);
}

TEST(CApi, GradcheckReportCsv) {
  int passed = 0;
  char* report = nullptr;
  ASSERT_EQ(ssm_gradcheck("ssm", 0, 20, 0, &passed, &report), SSM_OK);
  const std::string csv = Str(report).get();
  EXPECT_EQ(passed, 1);
  EXPECT_EQ(csv.rfind("module,op,instances,max_rel_err,status\n", 0), 0u);

  ASSERT_EQ(ssm_gradcheck("tensor", 0, 20, 1, &passed, &report), SSM_OK);
  const std::string faulty = Str(report).get();
  EXPECT_EQ(passed, 0);
  EXPECT_NE(faulty.find("corrupted_fixture"), std::string::npos);

  EXPECT_EQ(ssm_gradcheck("nope", 0, 20, 0, &passed, &report), SSM_ERR_INPUT);
}

TEST(CApi, BenchScan) {
  int guard = 0;
  double diff = -1;
  char* csv = nullptr;
  ASSERT_EQ(ssm_bench_scan(64, 4, 1, 1, &guard, &diff, &csv), SSM_OK);
  Str owned(csv);
  EXPECT_EQ(guard, 1);
  EXPECT_GE(diff, 0.0);
  EXPECT_LE(diff, 1e-10);
  ASSERT_NE(csv, nullptr);
  EXPECT_EQ(std::string(csv).rfind("impl,seq_len,channels,wall_time_ns\n", 0), 0u);
  EXPECT_EQ(ssm_bench_scan(0, 4, 1, 1, &guard, &diff, &csv), SSM_ERR_INPUT);
}

TEST(CApi, AblateUnknownSuite) {
  Cfg c = quick_config();
  char* csv = nullptr;
  EXPECT_EQ(ssm_ablate(c.get(), "everything", 0, 1, &csv), SSM_ERR_INPUT);
}
