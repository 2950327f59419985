#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ssmstyle/fusion.hpp"
#include "ssmstyle/metrics.hpp"
#include "ssmstyle/trainer.hpp"

namespace ssmstyle {

/// Experiment grids over the toy pipeline.
///
/// "losses": four runs that add loss terms one at a time (baseline = L_dir +
/// content; +L_md; +L_md+lpips; +L_md+lpips+L_so).
/// "fusion": SSM fusion vs cross-attention fusion, each with a quality run on
/// the configured content image and a timing run at a larger latent length.
struct AblationOptions {
  // Timing runs use a square smooth random image of this extent; the latent
  // length is (extent / 4)^2, so 256 gives 4096 tokens. 0 skips timing.
  std::size_t timing_extent = 256;
  std::size_t timing_epochs = 2;
};

struct AblationRow {
  std::string suite;
  std::string label;
  FusionKind fusion = FusionKind::kSsm;
  bool masked = false;
  bool lpips = false;
  bool second_order = false;
  EvalReport report;
  double initial_l_dir = 0.0;
  double final_l_dir = 0.0;
  std::size_t seq_len = 0;
  double epoch_ms = 0.0;
  std::size_t timing_seq_len = 0;
  double timing_epoch_ms = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string to_csv() const;
};

extern const char* const kAblationHeader;

const std::vector<std::string>& ablation_suites();

// `base` supplies the content image, prompts and every setting the suite does
// not vary. Unknown suites are input errors.
AblationResult run_ablation(const std::string& suite, const RunConfig& base, const AblationOptions& options = {});
AblationResult run_ablation(const std::string& suite, const RunConfig& base, const Tensor& content,
                            const Models& models, const AblationOptions& options = {});

}  // namespace ssmstyle
