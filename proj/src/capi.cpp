#include "ssmstyle/ssmstyle.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "ssmstyle/ablation.hpp"
#include "ssmstyle/bench.hpp"
#include "ssmstyle/errors.hpp"
#include "ssmstyle/gradcheck.hpp"
#include "ssmstyle/io.hpp"
#include "ssmstyle/metrics.hpp"
#include "ssmstyle/trainer.hpp"

struct ssm_config {
  ssmstyle::RunConfig cfg;
};

struct ssm_run {
  ssmstyle::RunResult result;
};

namespace {

using ssmstyle::ErrorKind;

thread_local std::string g_last_error;

ssm_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return SSM_ERR_DIMENSION;
    case ErrorKind::kDegenerateInput: return SSM_ERR_DEGENERATE_INPUT;
    case ErrorKind::kDegeneratePrompt: return SSM_ERR_DEGENERATE_PROMPT;
    case ErrorKind::kContract: return SSM_ERR_CONTRACT;
    case ErrorKind::kInput: return SSM_ERR_INPUT;
    case ErrorKind::kNumeric: return SSM_ERR_NUMERIC;
    case ErrorKind::kState: return SSM_ERR_STATE;
    case ErrorKind::kConfig: return SSM_ERR_CONFIG;
    case ErrorKind::kIo: return SSM_ERR_IO;
  }
  return SSM_ERR_INTERNAL;
}

ssm_status fail(ssm_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

// Runs `body`, translating exceptions into status codes.
template <typename F>
ssm_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return SSM_OK;
  } catch (const ssmstyle::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(SSM_ERR_OUT_OF_MEMORY, "out of memory");
  } catch (const std::exception& e) {
    return fail(SSM_ERR_INTERNAL, std::string("internal error: ") + e.what());
  } catch (...) {
    return fail(SSM_ERR_INTERNAL, "internal error");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

#define SSM_REQUIRE(ptr)                                                       \
  do {                                                                         \
    if ((ptr) == nullptr) return fail(SSM_ERR_NULL_ARGUMENT, #ptr " is NULL"); \
  } while (0)

}  // namespace

extern "C" {

const char* ssm_version(void) { return "1.0.0"; }

const char* ssm_status_name(ssm_status status) {
  switch (status) {
    case SSM_OK: return "ok";
    case SSM_ERR_DIMENSION: return "dimension error";
    case SSM_ERR_DEGENERATE_INPUT: return "degenerate input";
    case SSM_ERR_DEGENERATE_PROMPT: return "degenerate prompt";
    case SSM_ERR_CONTRACT: return "contract error";
    case SSM_ERR_INPUT: return "input error";
    case SSM_ERR_NUMERIC: return "numeric error";
    case SSM_ERR_STATE: return "state error";
    case SSM_ERR_CONFIG: return "config error";
    case SSM_ERR_IO: return "I/O error";
    case SSM_ERR_NULL_ARGUMENT: return "null argument";
    case SSM_ERR_OUT_OF_MEMORY: return "out of memory";
    case SSM_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* ssm_last_error(void) { return g_last_error.c_str(); }

void ssm_string_free(char* s) { std::free(s); }

ssm_status ssm_config_create(ssm_config** out) {
  SSM_REQUIRE(out);
  *out = nullptr;
  return guarded([&] { *out = new ssm_config(); });
}

void ssm_config_destroy(ssm_config* config) { delete config; }

ssm_status ssm_config_merge_json(ssm_config* config, const char* json) {
  SSM_REQUIRE(config);
  SSM_REQUIRE(json);
  // Merge into a copy so a rejected document leaves the config untouched.
  return guarded([&] {
    ssmstyle::RunConfig next = config->cfg;
    next.merge_json(json);
    config->cfg = std::move(next);
  });
}

ssm_status ssm_config_set_content(ssm_config* config, const char* path) {
  SSM_REQUIRE(config);
  SSM_REQUIRE(path);
  return guarded([&] { config->cfg.content_path = path; });
}

ssm_status ssm_config_clear_prompts(ssm_config* config) {
  SSM_REQUIRE(config);
  return guarded([&] { config->cfg.prompts.clear(); });
}

ssm_status ssm_config_add_prompt(ssm_config* config, const char* prompt) {
  SSM_REQUIRE(config);
  SSM_REQUIRE(prompt);
  return guarded([&] { config->cfg.prompts.emplace_back(prompt); });
}

ssm_status ssm_config_set_outputs(ssm_config* config, const char* image, const char* trace, const char* report) {
  SSM_REQUIRE(config);
  return guarded([&] {
    if (image) config->cfg.out_image = image;
    if (trace) config->cfg.trace_path = trace;
    if (report) config->cfg.report_path = report;
  });
}

ssm_status ssm_config_validate(const ssm_config* config) {
  SSM_REQUIRE(config);
  return guarded([&] { config->cfg.validate(); });
}

ssm_status ssm_config_to_json(const ssm_config* config, char** json_out) {
  SSM_REQUIRE(config);
  SSM_REQUIRE(json_out);
  *json_out = nullptr;
  return guarded([&] { *json_out = dup_string(config->cfg.to_json()); });
}

ssm_status ssm_stylize(const ssm_config* config, ssm_run** out) {
  SSM_REQUIRE(config);
  SSM_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto* run = new ssm_run{ssmstyle::run_stylization(config->cfg)};
    *out = run;
  });
}

void ssm_run_destroy(ssm_run* run) { delete run; }

ssm_status ssm_run_status(const ssm_run* run) {
  SSM_REQUIRE(run);
  if (run->result.aborted) return fail(SSM_ERR_NUMERIC, run->result.abort_message);
  g_last_error.clear();
  return SSM_OK;
}

ssm_status ssm_run_epochs(const ssm_run* run, size_t* epochs) {
  SSM_REQUIRE(run);
  SSM_REQUIRE(epochs);
  *epochs = run->result.state.epoch;
  return SSM_OK;
}

ssm_status ssm_run_image(const ssm_run* run, size_t* height, size_t* width, const double** pixels) {
  SSM_REQUIRE(run);
  SSM_REQUIRE(height);
  SSM_REQUIRE(width);
  SSM_REQUIRE(pixels);
  const auto& img = run->result.image;
  *height = img.dim(0);
  *width = img.dim(1);
  *pixels = img.data().data();
  return SSM_OK;
}

ssm_status ssm_run_trace_csv(const ssm_run* run, char** csv_out) {
  SSM_REQUIRE(run);
  SSM_REQUIRE(csv_out);
  *csv_out = nullptr;
  return guarded([&] { *csv_out = dup_string(ssmstyle::format_trace(run->result.state.trace)); });
}

ssm_status ssm_run_report_json(const ssm_run* run, char** json_out) {
  SSM_REQUIRE(run);
  SSM_REQUIRE(json_out);
  *json_out = nullptr;
  return guarded([&] { *json_out = dup_string(run->result.report.to_json()); });
}

ssm_status ssm_run_write_outputs(const ssm_run* run, const ssm_config* config) {
  SSM_REQUIRE(run);
  SSM_REQUIRE(config);
  return guarded([&] { ssmstyle::write_outputs(config->cfg, run->result); });
}

ssm_status ssm_ablate(const ssm_config* config, const char* suite, size_t timing_extent, size_t timing_epochs,
                      char** csv_out) {
  SSM_REQUIRE(config);
  SSM_REQUIRE(suite);
  SSM_REQUIRE(csv_out);
  *csv_out = nullptr;
  return guarded([&] {
    ssmstyle::AblationOptions options;
    options.timing_extent = timing_extent;
    options.timing_epochs = timing_epochs;
    *csv_out = dup_string(ssmstyle::run_ablation(suite, config->cfg, options).to_csv());
  });
}

ssm_status ssm_bench_scan(size_t max_len, size_t channels, size_t reps, unsigned threads, int* guard_passed,
                          double* guard_max_abs_diff, char** csv_out) {
  SSM_REQUIRE(guard_passed);
  SSM_REQUIRE(csv_out);
  *csv_out = nullptr;
  *guard_passed = 0;
  return guarded([&] {
    ssmstyle::BenchOptions options;
    options.max_len = max_len;
    options.channels = channels;
    options.reps = reps;
    options.threads = threads == 0 ? 1 : threads;
    const ssmstyle::BenchResult r = ssmstyle::run_bench_scan(options);
    *guard_passed = r.guard_passed ? 1 : 0;
    if (guard_max_abs_diff) *guard_max_abs_diff = r.guard_max_abs_diff;
    if (r.guard_passed) *csv_out = dup_string(r.to_csv());
  });
}

ssm_status ssm_gradcheck(const char* module, uint64_t seed, size_t instances, int inject_fault, int* passed,
                         char** report_out) {
  SSM_REQUIRE(module);
  SSM_REQUIRE(passed);
  SSM_REQUIRE(report_out);
  *report_out = nullptr;
  *passed = 0;
  return guarded([&] {
    ssmstyle::GradcheckOptions options;
    options.seed = seed;
    if (instances > 0) options.instances = instances;
    options.inject_fault = inject_fault != 0;
    const ssmstyle::GradcheckReport report = ssmstyle::run_gradcheck(module, options);
    std::string csv = "module,op,instances,max_rel_err,status\n";
    char buf[64];
    for (const auto& e : report.entries) {
      std::snprintf(buf, sizeof buf, "%.3e", e.max_rel_err);
      csv += e.module + "," + e.op + "," + std::to_string(e.instances) + "," + buf + "," +
             (e.passed ? "pass" : (e.error.empty() ? "FAIL" : "ERROR")) + "\n";
    }
    *passed = report.passed() ? 1 : 0;
    *report_out = dup_string(csv);
  });
}

ssm_status ssm_metrics(const char* content_path, const char* image_path, const char* prompt, uint64_t model_seed,
                       char** json_out) {
  SSM_REQUIRE(content_path);
  SSM_REQUIRE(image_path);
  SSM_REQUIRE(json_out);
  *json_out = nullptr;
  return guarded([&] {
    using namespace ssmstyle;
    const Tensor x = read_image(content_path);
    const Tensor y = read_image(image_path);
    if (x.shape() != y.shape()) {
      raise(ErrorKind::kDimension, "image shapes differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    }
    const ImageEmbedder embedder(derive_seed(model_seed, static_cast<std::uint64_t>(WeightStream::kImageEmbedder)));
    EvalReport report;
    report.ssim = ssim(x, y);
    report.feature_loss = feature_loss_metric(embedder, x, y);
    if (prompt) {
      const TextEmbedder text(derive_seed(model_seed, static_cast<std::uint64_t>(WeightStream::kTextEmbedder)));
      report.clip_score_analog = similarity_score(text.embed(prompt), embedder.embed(y));
    }
    *json_out = dup_string(report.to_json());
  });
}

ssm_status ssm_write_file_atomic(const char* path, const char* bytes, size_t size) {
  SSM_REQUIRE(path);
  if (size > 0) SSM_REQUIRE(bytes);
  return guarded([&] { ssmstyle::write_file_atomic(path, std::string(bytes ? bytes : "", size)); });
}

}  // extern "C"
