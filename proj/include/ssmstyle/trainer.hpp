#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssmstyle/fusion.hpp"
#include "ssmstyle/losses.hpp"
#include "ssmstyle/metrics.hpp"
#include "ssmstyle/models.hpp"
#include "ssmstyle/optim.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

/// Piecewise-constant learning-rate and content-weight schedules.
struct Schedule {
  double base_lr = 5e-4;
  std::size_t lr_halve_epoch = 10;
  std::size_t max_epochs = 20;
  double content_weight_hi = 9000.0;
  double content_weight_lo = 150.0;
  std::size_t content_switch_epoch = 5;
  // When the content weight drops, scale Adam's moments by lo/hi (second
  // moment by its square). Otherwise the second-moment estimate, which
  // remembers ~1000 steps, stays sized for the 60x larger early gradients and
  // stalls the rest of a 20-epoch run.
  bool rescale_moments_at_switch = true;

  double lr_at(std::size_t epoch) const { return epoch < lr_halve_epoch ? base_lr : base_lr / 2.0; }
  double content_weight_at(std::size_t epoch) const {
    return epoch < content_switch_epoch ? content_weight_hi : content_weight_lo;
  }
};

inline double lr_at(std::size_t epoch, const Schedule& schedule = {}) { return schedule.lr_at(epoch); }
inline double content_weight_at(std::size_t epoch, const Schedule& schedule = {}) {
  return schedule.content_weight_at(epoch);
}

/// One epoch of the convergence trace. `style` is the combined style loss
/// (l_dir + l_md + gated l_so, averaged over prompts) and `content` is the
/// unweighted feature loss.
struct TraceRow {
  std::size_t epoch = 0;
  double l_dir = 0.0;
  double l_md = 0.0;
  double l_so = 0.0;
  double content = 0.0;
  double total = 0.0;
  double style = 0.0;
  double lpips = 0.0;
  double lr = 0.0;
  double content_weight = 0.0;
  std::size_t mask_dropped = 0;
  std::size_t mask_patches = 0;
};

extern const char* const kTraceHeader;

struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  std::vector<AdamMoments> moments;
  SecondOrderState so_state;
  std::uint64_t seed = 0;
  std::vector<TraceRow> trace;
};

std::string format_trace(const std::vector<TraceRow>& trace);
std::vector<TraceRow> parse_trace(const std::string& csv);
// Header plus one row per completed epoch, written atomically.
void emit_trace(const TrainState& state, const std::string& path);

/// Everything a stylization run needs. Loaded from a JSON document whose
/// fields all have defaults; see docs/config.md.
struct RunConfig {
  std::string content_path;
  std::vector<std::string> prompts;
  std::string source_prompt{kSourcePrompt};

  std::uint64_t model_seed = kDefaultModelSeed;
  std::uint64_t mask_seed = 7;

  Schedule schedule;
  double style_weight = 1.0;
  double lpips_weight = 1.0;

  bool masked_loss = true;
  bool second_order_loss = true;
  bool lpips_loss = true;

  double so_alpha = 1.0;
  double so_beta = 1.0;
  double so_theta = 0.6;
  std::size_t so_interval = 5;
  SecondOrderQuotient so_quotient = SecondOrderQuotient::kNormRatio;

  std::size_t mask_patch = kMaskPatch;
  double mask_ratio = kMaskRatio;

  FusionKind fusion = FusionKind::kSsm;
  std::size_t state_dim = kDefaultStateDim;
  bool bidirectional = false;
  ScanImpl scan = ScanImpl::kParallel;
  unsigned threads = 1;
  std::size_t key_tokens = 0;  // cross-attention style tokens; 0 = latent length
  bool open_gate = true;       // Conditioner::open_gate_init instead of zero_init

  std::size_t pretrain_steps = 500;
  double pretrain_lr = 1e-2;

  std::string out_image;
  std::string trace_path;
  std::string report_path;

  // Every field is checked; the first violation throws a config error naming
  // the field.
  void validate() const;

  // Overlays the fields present in `json_text` onto this config. Unknown
  // keys and wrongly typed values are config errors.
  void merge_json(const std::string& json_text);
  static RunConfig from_json(const std::string& json_text);
  std::string to_json() const;
};

/// Frozen embedders plus the autoencoder pretrained on the content image.
struct Models {
  TextEmbedder text;
  ImageEmbedder image;
  ToyAutoencoder autoencoder;
  PretrainReport pretrain;

  static Models build(const RunConfig& config, const Tensor& content);
};

struct RunResult {
  Tensor image;
  TrainState state;
  EvalReport report;
  double epoch_ms = 0.0;  // mean wall time per epoch
  bool aborted = false;
  std::string abort_message;
  // Trained parameters (decoder copy, fusion block, conditioner).
  ToyAutoencoder decoder;
  FusionBlock fusion;
  Conditioner conditioner;
};

// Loads the image named by config.content_path, builds models and runs.
RunResult run_stylization(const RunConfig& config);
// Runs against already built (frozen) models; `models` is not modified.
RunResult run_stylization(const RunConfig& config, const Tensor& content, const Models& models);

// Writes the output image, trace and report named in the config (empty
// paths are skipped).
void write_outputs(const RunConfig& config, const RunResult& result);

}  // namespace ssmstyle
