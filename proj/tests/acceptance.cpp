// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.
//
//   acceptance            run all ten
//   acceptance 3 5        run a subset
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssmstyle/ablation.hpp"
#include "ssmstyle/errors.hpp"
#include "ssmstyle/gradcheck.hpp"
#include "ssmstyle/io.hpp"
#include "ssmstyle/losses.hpp"
#include "ssmstyle/metrics.hpp"
#include "ssmstyle/ops.hpp"
#include "ssmstyle/ssm.hpp"
#include "ssmstyle/trainer.hpp"

using namespace ssmstyle;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  // Records a failed check; later checks still run so the detail lists all.
  void require(bool ok, const std::string& what) {
    if (ok) return;
    pass = false;
    detail += (detail.empty() ? "" : "; ") + what;
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string data_file(const std::string& name) { return std::string(SSM_TEST_DATA_DIR) + "/" + name; }

std::string bundled_prompt() {
  std::ifstream in(data_file("prompt.txt"));
  std::string line;
  std::getline(in, line);
  while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
  return line;
}

RunConfig bundled_config() {
  RunConfig c;
  c.content_path = data_file("meadow64.ppm");
  c.prompts = {bundled_prompt()};
  return c;
}

template <class F>
std::optional<ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

// The bundled image, its models and one default run are shared by several
// criteria and built on first use.
struct Shared {
  RunConfig config = bundled_config();
  Tensor content;
  std::optional<Models> models;
  std::optional<RunResult> run;
  double build_seconds = 0.0;
  double run_seconds = 0.0;

  const Models& get_models() {
    if (!models) {
      const auto t0 = Clock::now();
      content = read_image(config.content_path);
      models.emplace(Models::build(config, content));
      build_seconds = seconds_since(t0);
    }
    return *models;
  }
  const RunResult& get_run() {
    if (!run) {
      const Models& m = get_models();
      const auto t0 = Clock::now();
      run.emplace(run_stylization(config, content, m));
      run_seconds = seconds_since(t0) + build_seconds;
    }
    return *run;
  }
};

Shared& shared() {
  static Shared s;
  return s;
}

Outcome gradient_correctness() {
  Outcome o;
  const auto t0 = Clock::now();
  const GradcheckReport r = run_gradcheck("all");
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::map<std::string, std::size_t> per_module;
  for (const auto& e : r.entries) {
    worst = std::max(worst, e.max_rel_err);
    ++per_module[e.module];
    o.require(e.instances >= 20, e.op + " has fewer than 20 instances");
  }
  for (const char* m : {"tensor", "ssm", "fusion", "losses"}) o.require(per_module[m] > 0, std::string("no ops in ") + m);
  for (const auto& op : r.failing_ops()) o.require(false, op + " failed");
  o.require(worst < 1e-4, "max relative error " + fmt("%.3g", worst));
  o.require(secs < 300.0, "runtime " + fmt("%.0f s", secs));
  o.note(std::to_string(r.entries.size()) + " ops, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs));
  return o;
}

Outcome scan_equivalence() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (int instance = 0; instance < 100; ++instance) {
    for (std::size_t L = 1; L <= 1024; ++L) {
      std::vector<double> a(L), b(L);
      for (std::size_t t = 0; t < L; ++t) {
        a[t] = rng.uniform();
        b[t] = rng.uniform(-1.0, 1.0);
      }
      const Tensor at = Tensor::from({L, 1, 1}, std::move(a)), bt = Tensor::from({L, 1, 1}, std::move(b));
      const Tensor hs = scan_sequential(at, bt), hp = scan_parallel(at, bt);
      for (std::size_t t = 0; t < L; ++t) worst = std::max(worst, std::abs(hs[t] - hp[t]));
    }
  }
  double assoc = 0.0;
  for (int trial = 0; trial < 100000; ++trial) {
    const ScanElement e1{rng.uniform(), rng.uniform(-1, 1)};
    const ScanElement e2{rng.uniform(), rng.uniform(-1, 1)};
    const ScanElement e3{rng.uniform(), rng.uniform(-1, 1)};
    const ScanElement l = combine(combine(e1, e2), e3), r = combine(e1, combine(e2, e3));
    assoc = std::max({assoc, std::abs(l.a - r.a), std::abs(l.b - r.b)});
  }
  const double secs = seconds_since(t0);
  o.require(worst <= 1e-10, "scan difference " + fmt("%.3g", worst));
  o.require(assoc <= 1e-12, "associativity defect " + fmt("%.3g", assoc));
  o.require(secs < 60.0, "runtime " + fmt("%.0f s", secs));
  o.note("max scan diff " + fmt("%.2e", worst) + ", combine defect " + fmt("%.2e", assoc) + ", " + fmt("%.1f s", secs));
  return o;
}

Tensor vec(std::initializer_list<double> v) { return Tensor::from({v.size()}, std::vector<double>(v)); }

double l_dir_of(const Tensor& t, const Tensor& src, const Tensor& x, const Tensor& y) {
  Tape tape;
  return directional_loss(tape, PromptContext::make(t, src, x), y).item();
}

Outcome loss_analytics() {
  Outcome o;
  // Text direction +x; image displacement parallel, antiparallel, at 45 deg.
  const Tensor t = vec({1, 0, 0}), src = vec({0, 0, 0}), x = vec({0, 0, 1});
  const double par = l_dir_of(t, src, x, vec({2, 0, 1}));
  const double anti = l_dir_of(t, src, x, vec({-2, 0, 1}));
  const double diag = l_dir_of(t, src, x, vec({1, 1, 1}));
  o.require(std::abs(par) <= 1e-12, "parallel " + fmt("%.3g", par));
  o.require(std::abs(anti - 2.0) <= 1e-12, "antiparallel " + fmt("%.3g", anti));
  o.require(std::abs(diag - (1.0 - 1.0 / std::sqrt(2.0))) <= 1e-12, "45 degrees " + fmt("%.6g", diag));

  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> tv(8), yv(8), xv(8);
    for (auto* v : {&tv, &yv, &xv})
      for (double& e : *v) e = rng.uniform(-1, 1);
    const double l = l_dir_of(Tensor::from({8}, tv), Tensor::zeros({8}), Tensor::from({8}, xv), Tensor::from({8}, yv));
    if (!(l >= 0.0 && l <= 2.0)) {
      o.require(false, "l_dir out of range " + fmt("%.6g", l));
      break;
    }
  }

  o.require(alpha_shift_value(0.0, 0.7, 1.0) == 0.0, "alpha_shift(0) != 0");
  o.require(std::abs(alpha_shift_value(1e3, 0.7, 1.0) - 0.7) <= 1e-15, "alpha_shift at large distance != alpha");

  const RunResult& r = shared().get_run();
  const RunConfig& c = shared().config;
  o.require(r.state.trace.size() == 20, "trace rows " + std::to_string(r.state.trace.size()));
  std::size_t open = 0;
  for (const TraceRow& row : r.state.trace) {
    o.require(row.l_dir >= 0.0 && row.l_dir <= 2.0, "trace l_dir out of range at epoch " + std::to_string(row.epoch));
    const bool may_open = row.epoch % c.so_interval == 0 && row.l_dir < c.so_theta;
    if (!may_open) o.require(row.l_so == 0.0, "l_so non-zero at epoch " + std::to_string(row.epoch));
    if (row.l_so != 0.0) ++open;
  }
  o.note(std::to_string(open) + " epochs with the second-order term active");
  return o;
}

Outcome schedule_conformance() {
  Outcome o;
  const RunResult& r = shared().get_run();
  o.require(r.state.trace.size() == 20, "run length " + std::to_string(r.state.trace.size()));
  o.require(!r.aborted, "run aborted");
  for (const TraceRow& row : r.state.trace) {
    const std::string at = " at epoch " + std::to_string(row.epoch);
    o.require(row.lr == (row.epoch < 10 ? 5e-4 : 2.5e-4), "lr" + at);
    o.require(row.content_weight == (row.epoch < 5 ? 9000.0 : 150.0), "content weight" + at);
    o.require(row.mask_patches == 16, "mask patches" + at);
    o.require(row.mask_dropped * 2 == row.mask_patches, "mask drop count" + at);
  }
  return o;
}

Outcome convergence_shape() {
  Outcome o;
  const RunResult& r = shared().get_run();
  const auto& tr = r.state.trace;
  if (tr.size() < 2) {
    o.require(false, "trace too short");
    return o;
  }
  const double ratio = tr.back().l_dir / tr.front().l_dir;
  o.require(ratio <= 0.5, "final/initial l_dir " + fmt("%.3f", ratio));
  for (std::size_t i = 5; i < tr.size(); ++i) {
    double prev = 0.0, cur = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      prev += tr[i - 5 + k].total;
      cur += tr[i - 4 + k].total;
    }
    o.require(cur <= prev, "moving average rises at epoch " + std::to_string(i));
  }
  o.require(shared().run_seconds < 180.0, "runtime " + fmt("%.0f s", shared().run_seconds));
  o.note("l_dir " + fmt("%.4f", tr.front().l_dir) + " -> " + fmt("%.4f", tr.back().l_dir) + " (ratio " +
         fmt("%.3f", ratio) + "), " + fmt("%.1f s", shared().run_seconds));
  return o;
}

bool bits_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].shape() != b[i].shape() || a[i].to_vector() != b[i].to_vector()) return false;
  return true;
}

std::vector<Tensor> snapshot(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const Tensor& t : ts) out.push_back(t.detach());
  return out;
}

Outcome frozen_and_deterministic() {
  Outcome o;
  Shared& s = shared();
  const Models& m = s.get_models();
  const auto text = snapshot(m.text.tensors()), image = snapshot(m.image.tensors()),
             enc = snapshot(m.autoencoder.encoder_tensors());
  const RunResult& first = s.get_run();
  o.require(bits_equal(text, m.text.tensors()), "text embedder changed");
  o.require(bits_equal(image, m.image.tensors()), "image embedder changed");
  o.require(bits_equal(enc, m.autoencoder.encoder_tensors()), "encoder changed");

  // Second run from scratch, including model construction and pretraining.
  const Models again = Models::build(s.config, s.content);
  const RunResult second = run_stylization(s.config, s.content, again);
  o.require(format_trace(first.state.trace) == format_trace(second.state.trace), "traces differ");
  o.require(first.image.to_vector() == second.image.to_vector(), "images differ");
  o.require(encode_png(first.image) == encode_png(second.image), "encoded images differ");
  return o;
}

Outcome fusion_ablation() {
  Outcome o;
  Shared& s = shared();
  const AblationResult r = run_ablation("fusion", s.config, s.content, s.get_models());
  o.require(r.rows.size() == 2, "rows " + std::to_string(r.rows.size()));
  if (r.rows.size() != 2) return o;
  const AblationRow& ssm = r.rows[0];
  const AblationRow& xattn = r.rows[1];
  o.require(ssm.fusion == FusionKind::kSsm && xattn.fusion == FusionKind::kCrossAttention, "row kinds");
  o.require(ssm.timing_seq_len == 4096 && xattn.timing_seq_len == 4096, "timing length");
  o.require(ssm.timing_epoch_ms < xattn.timing_epoch_ms, "SSM not faster");
  o.note("per-epoch ms at L=4096: ssm " + fmt("%.0f", ssm.timing_epoch_ms) + ", cross-attention " +
         fmt("%.0f", xattn.timing_epoch_ms) + " (ratio " + fmt("%.2f", xattn.timing_epoch_ms / ssm.timing_epoch_ms) +
         ")");
  return o;
}

Outcome loss_ablation() {
  Outcome o;
  Shared& s = shared();
  AblationOptions opts;
  opts.timing_extent = 0;
  const AblationResult r = run_ablation("losses", s.config, s.content, s.get_models(), opts);
  o.require(r.rows.size() == 4, "rows " + std::to_string(r.rows.size()));
  if (r.rows.size() != 4) return o;
  const double base = r.rows.front().report.clip_score_analog;
  const double full = r.rows.back().report.clip_score_analog;
  o.require(full >= base, "full-loss row below baseline");
  o.note("similarity baseline " + fmt("%.6f", base) + ", full " + fmt("%.6f", full));
  return o;
}

Outcome metrics_sanity() {
  Outcome o;
  Rng rng(9);
  const ImageEmbedder emb(kDefaultModelSeed);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> xv(32 * 32 * 3), yv(32 * 32 * 3);
    for (double& v : xv) v = rng.uniform();
    for (double& v : yv) v = rng.uniform();
    const Tensor x = Tensor::from({32, 32, 3}, xv), y = Tensor::from({32, 32, 3}, yv);
    o.require(std::abs(ssim(x, x) - 1.0) <= 1e-9, "ssim(x,x) != 1");
    o.require(ssim(x, y) == ssim(y, x), "ssim asymmetric");
    o.require(feature_loss_metric(emb, x, x) == 0.0, "feature loss (x,x) != 0");
  }
  const Tensor a = vec({0.6, 0.8, 0});
  o.require(std::abs(similarity_score(a, a) - 1.0) <= 1e-15, "similarity(a,a)");
  o.require(std::abs(similarity_score(a, vec({0, 0, 1}))) <= 1e-15, "similarity orthogonal");
  o.require(std::abs(similarity_score(a, vec({-0.6, -0.8, 0})) + 1.0) <= 1e-15, "similarity opposite");
  return o;
}

Outcome degenerate_inputs() {
  Outcome o;
  const TextEmbedder text(kDefaultModelSeed);
  const ImageEmbedder image(kDefaultModelSeed);
  const Tensor src = text.embed(kSourcePrompt);
  const Tensor content = smooth_random_image(32, 32, 5);
  const Tensor x_emb = image.embed(content);
  o.require(error_kind([&] { (void)PromptContext::make(text.embed(kSourcePrompt), src, x_emb); }) ==
                ErrorKind::kDegeneratePrompt,
            "t = t_src not rejected");

  // Y = X: the stylized image equals the content image on the first step.
  const PromptContext ctx = PromptContext::make(text.embed("Paul Gauguin style"), src, x_emb);
  Tape tape;
  Tensor y = content.detach();
  y = Tensor::from(y.shape(), y.to_vector(), true);
  const Tensor l = directional_loss(tape, ctx, image.embed(tape, y));
  o.require(std::isfinite(l.item()) && l.item() == 1.0, "L_dir at Y=X is " + fmt("%.17g", l.item()));
  tape.backward(l);
  bool zero = true;
  if (y.has_grad())
    for (double g : y.grad()) zero = zero && g == 0.0;
  o.require(zero, "non-zero gradient at Y=X");

  Tape t2;
  o.require(error_kind([&] { (void)ops::l2_normalize(t2, Tensor::zeros({4})); }) == ErrorKind::kDegenerateInput,
            "zero-vector normalization not rejected");
  return o;
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {"gradient correctness", gradient_correctness},
      {"scan oracle equivalence", scan_equivalence},
      {"loss analytics", loss_analytics},
      {"schedule conformance", schedule_conformance},
      {"convergence shape", convergence_shape},
      {"frozen parameters and determinism", frozen_and_deterministic},
      {"fusion ablation structure", fusion_ablation},
      {"loss ablation structure", loss_ablation},
      {"metrics sanity", metrics_sanity},
      {"degenerate input handling", degenerate_inputs},
  };

  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const long n = std::strtol(argv[i], nullptr, 10);
    if (n < 1 || n > static_cast<long>(criteria.size())) {
      std::fprintf(stderr, "usage: %s [criterion 1-%zu ...]\n", argv[0], criteria.size());
      return 2;
    }
    selected.push_back(static_cast<std::size_t>(n));
  }
  if (selected.empty())
    for (std::size_t i = 1; i <= criteria.size(); ++i) selected.push_back(i);

  bool all = true;
  for (std::size_t n : selected) {
    const Criterion& c = criteria[n - 1];
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.require(false, std::string("threw: ") + e.what());
    }
    all = all && out.pass;
    std::printf("%s criterion %zu: %s%s%s\n", out.pass ? "PASS" : "FAIL", n, c.name, out.detail.empty() ? "" : " | ",
                out.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
