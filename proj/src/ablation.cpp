#include "ssmstyle/ablation.hpp"

#include <algorithm>
#include <cstdio>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/io.hpp"

namespace ssmstyle {
namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* fusion_name(FusionKind kind) { return kind == FusionKind::kSsm ? "ssm" : "cross_attention"; }

AblationRow row_from(const std::string& suite, const std::string& label, const RunConfig& cfg, const RunResult& r,
                     std::size_t seq_len) {
  if (r.aborted) raise(ErrorKind::kNumeric, "ablation row " + label + " aborted: " + r.abort_message);
  AblationRow row;
  row.suite = suite;
  row.label = label;
  row.fusion = cfg.fusion;
  row.masked = cfg.masked_loss;
  row.lpips = cfg.lpips_loss;
  row.second_order = cfg.second_order_loss;
  row.report = r.report;
  if (!r.state.trace.empty()) {
    row.initial_l_dir = r.state.trace.front().l_dir;
    row.final_l_dir = r.state.trace.back().l_dir;
  }
  row.seq_len = seq_len;
  row.epoch_ms = r.epoch_ms;
  return row;
}

// Per-epoch wall time of the training loop on a larger image. Pretraining is
// skipped: only the cost of an epoch matters here, not the output quality.
double timing_epoch_ms(const RunConfig& base, FusionKind kind, const AblationOptions& options) {
  RunConfig cfg = base;
  cfg.fusion = kind;
  cfg.schedule.max_epochs = options.timing_epochs;
  cfg.pretrain_steps = 0;
  const Tensor image = smooth_random_image(options.timing_extent, options.timing_extent, cfg.model_seed);
  const Models models = Models::build(cfg, image);
  return run_stylization(cfg, image, models).epoch_ms;
}

}  // namespace

const char* const kAblationHeader =
    "suite,row,fusion,masked,lpips,second_order,clip_score_analog,ssim,feature_loss,initial_l_dir,final_l_dir,"
    "seq_len,epoch_ms,timing_seq_len,timing_epoch_ms";

std::string AblationResult::to_csv() const {
  std::string out = std::string(kAblationHeader) + "\n";
  for (const auto& r : rows) {
    out += r.suite + "," + r.label + "," + fusion_name(r.fusion) + "," + (r.masked ? "1" : "0") + "," +
           (r.lpips ? "1" : "0") + "," + (r.second_order ? "1" : "0") + "," + num(r.report.clip_score_analog) + "," +
           num(r.report.ssim) + "," + num(r.report.feature_loss) + "," + num(r.initial_l_dir) + "," +
           num(r.final_l_dir) + "," + std::to_string(r.seq_len) + "," + num(r.epoch_ms) + "," +
           std::to_string(r.timing_seq_len) + "," + num(r.timing_epoch_ms) + "\n";
  }
  return out;
}

const std::vector<std::string>& ablation_suites() {
  static const std::vector<std::string> names{"losses", "fusion"};
  return names;
}

AblationResult run_ablation(const std::string& suite, const RunConfig& base, const AblationOptions& options) {
  const auto& names = ablation_suites();
  if (std::find(names.begin(), names.end(), suite) == names.end()) {
    raise(ErrorKind::kInput, "unknown ablation suite \"" + suite + "\" (expected losses or fusion)");
  }
  base.validate();
  if (base.content_path.empty()) raise(ErrorKind::kConfig, "content: a content image path is required");
  const Tensor content = read_image(base.content_path);
  const Models models = Models::build(base, content);
  return run_ablation(suite, base, content, models, options);
}

AblationResult run_ablation(const std::string& suite, const RunConfig& base, const Tensor& content,
                            const Models& models, const AblationOptions& options) {
  const auto& names = ablation_suites();
  if (std::find(names.begin(), names.end(), suite) == names.end()) {
    raise(ErrorKind::kInput, "unknown ablation suite \"" + suite + "\" (expected losses or fusion)");
  }
  const std::size_t seq_len = (content.dim(0) / 4) * (content.dim(1) / 4);
  AblationResult result;
  if (suite == "losses") {
    struct Variant {
      const char* label;
      bool masked, lpips, second_order;
    };
    const Variant variants[] = {{"baseline", false, false, false},
                                {"baseline+md", true, false, false},
                                {"baseline+md+lpips", true, true, false},
                                {"baseline+md+lpips+so", true, true, true}};
    for (const auto& v : variants) {
      RunConfig cfg = base;
      cfg.masked_loss = v.masked;
      cfg.lpips_loss = v.lpips;
      cfg.second_order_loss = v.second_order;
      result.rows.push_back(row_from(suite, v.label, cfg, run_stylization(cfg, content, models), seq_len));
    }
  } else {
    for (FusionKind kind : {FusionKind::kSsm, FusionKind::kCrossAttention}) {
      RunConfig cfg = base;
      cfg.fusion = kind;
      AblationRow row = row_from(suite, fusion_name(kind), cfg, run_stylization(cfg, content, models), seq_len);
      if (options.timing_extent > 0) {
        row.timing_seq_len = (options.timing_extent / 4) * (options.timing_extent / 4);
        row.timing_epoch_ms = timing_epoch_ms(base, kind, options);
      }
      result.rows.push_back(row);
    }
  }
  return result;
}

}  // namespace ssmstyle
