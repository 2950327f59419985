#include "ssmstyle/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/io.hpp"
#include "ssmstyle/ops.hpp"
#include "ssmstyle/rng.hpp"

namespace ssmstyle {

const char* const kTraceHeader =
    "epoch,l_dir,l_md,l_so,content,total,style,lpips,lr,content_weight,mask_dropped,mask_patches";

namespace {

using Json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---- config parsing -------------------------------------------------------

[[noreturn]] void field_error(const std::string& field, const std::string& what) {
  raise(ErrorKind::kConfig, field + ": " + what);
}

double as_number(const Json& j, const std::string& field) {
  if (!j.is_number()) field_error(field, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) field_error(field, "must be finite");
  return v;
}

std::uint64_t as_uint(const Json& j, const std::string& field) {
  if (!j.is_number_integer()) field_error(field, "expected a non-negative integer");
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  const auto v = j.get<std::int64_t>();
  if (v < 0) field_error(field, "expected a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

bool as_bool(const Json& j, const std::string& field) {
  if (!j.is_boolean()) field_error(field, "expected true or false");
  return j.get<bool>();
}

std::string as_string(const Json& j, const std::string& field) {
  if (!j.is_string()) field_error(field, "expected a string");
  return j.get<std::string>();
}

using Setter = std::function<void(const Json&, const std::string&)>;

void apply_object(const Json& j, const std::string& prefix, const std::map<std::string, Setter>& setters) {
  const std::string where = prefix.empty() ? "config" : prefix;
  if (!j.is_object()) field_error(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    const std::string field = prefix.empty() ? key : prefix + "." + key;
    const auto it = setters.find(key);
    if (it == setters.end()) field_error(field, "unknown field");
    it->second(value, field);
  }
}

template <typename Enum>
Enum as_enum(const Json& j, const std::string& field, const std::map<std::string, Enum>& names) {
  const std::string s = as_string(j, field);
  const auto it = names.find(s);
  if (it == names.end()) {
    std::string allowed;
    for (const auto& [n, _] : names) allowed += (allowed.empty() ? "" : ", ") + n;
    field_error(field, "unknown value \"" + s + "\" (expected one of " + allowed + ")");
  }
  return it->second;
}

const std::map<std::string, SecondOrderQuotient> kQuotientNames{
    {"norm_ratio", SecondOrderQuotient::kNormRatio}, {"elementwise", SecondOrderQuotient::kElementwise}};
const std::map<std::string, FusionKind> kFusionNames{{"ssm", FusionKind::kSsm},
                                                     {"cross_attention", FusionKind::kCrossAttention}};
const std::map<std::string, ScanImpl> kScanNames{{"parallel", ScanImpl::kParallel},
                                                 {"sequential", ScanImpl::kSequential}};

template <typename Enum>
std::string enum_name(Enum v, const std::map<std::string, Enum>& names) {
  for (const auto& [n, e] : names) {
    if (e == v) return n;
  }
  return "?";
}

// ---- training helpers -----------------------------------------------------

Tensor combined_style_embedding(const std::vector<PromptContext>& contexts) {
  if (contexts.size() == 1) return contexts.front().t_emb;
  std::vector<double> sum(contexts.front().t_emb.size(), 0.0);
  for (const auto& ctx : contexts) {
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += ctx.t_emb[i];
  }
  const std::size_t dim = sum.size();
  Tape scratch;
  return ops::l2_normalize(scratch, Tensor::from({dim}, std::move(sum))).detach();
}

struct Forward {
  Tensor image;
  ImageFeatures feats;
};

Forward forward(Tape& tape, const LatentSequence& latent, const Tensor& style_emb, const Conditioner& conditioner,
                const FusionBlock& block, const ToyAutoencoder& decoder, const ImageEmbedder& embedder) {
  const ModulationParams mods = condition(tape, conditioner, style_emb);
  const LatentSequence fused = fuse(tape, latent, mods, block, style_emb);
  Forward out;
  out.image = decoder.decode(tape, fused);
  out.feats = embedder.features(tape, out.image);
  return out;
}

}  // namespace

// ---- trace ----------------------------------------------------------------

std::string format_trace(const std::vector<TraceRow>& trace) {
  std::string out = std::string(kTraceHeader) + "\n";
  for (const auto& r : trace) {
    out += std::to_string(r.epoch) + "," + fmt(r.l_dir) + "," + fmt(r.l_md) + "," + fmt(r.l_so) + "," +
           fmt(r.content) + "," + fmt(r.total) + "," + fmt(r.style) + "," + fmt(r.lpips) + "," + fmt(r.lr) + "," +
           fmt(r.content_weight) + "," + std::to_string(r.mask_dropped) + "," + std::to_string(r.mask_patches) +
           "\n";
  }
  return out;
}

std::vector<TraceRow> parse_trace(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kTraceHeader) raise(ErrorKind::kInput, "trace header mismatch");
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 12) raise(ErrorKind::kInput, "trace row has " + std::to_string(cells.size()) + " cells");
    try {
      TraceRow r;
      r.epoch = std::stoull(cells[0]);
      r.l_dir = std::stod(cells[1]);
      r.l_md = std::stod(cells[2]);
      r.l_so = std::stod(cells[3]);
      r.content = std::stod(cells[4]);
      r.total = std::stod(cells[5]);
      r.style = std::stod(cells[6]);
      r.lpips = std::stod(cells[7]);
      r.lr = std::stod(cells[8]);
      r.content_weight = std::stod(cells[9]);
      r.mask_dropped = std::stoull(cells[10]);
      r.mask_patches = std::stoull(cells[11]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      raise(ErrorKind::kInput, "malformed trace row: " + line);
    }
  }
  return rows;
}

void emit_trace(const TrainState& state, const std::string& path) { write_file_atomic(path, format_trace(state.trace)); }

// ---- config ---------------------------------------------------------------

void RunConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* what) {
    if (!ok) field_error(field, what);
  };
  require(!prompts.empty(), "prompts", "at least one prompt is required");
  for (const auto& p : prompts) require(p.find_first_not_of(" \t\r\n") != std::string::npos, "prompts", "empty prompt");
  require(source_prompt.find_first_not_of(" \t\r\n") != std::string::npos, "source_prompt", "must not be empty");
  require(std::isfinite(schedule.base_lr) && schedule.base_lr > 0, "schedule.base_lr", "must be positive");
  require(schedule.max_epochs >= 1 && schedule.max_epochs <= 100000, "schedule.max_epochs", "must be in [1, 100000]");
  require(schedule.content_weight_hi >= 0, "schedule.content_weight_hi", "must be non-negative");
  require(schedule.content_weight_lo >= 0, "schedule.content_weight_lo", "must be non-negative");
  require(style_weight >= 0, "weights.style", "must be non-negative");
  require(lpips_weight >= 0, "weights.lpips", "must be non-negative");
  require(so_alpha >= 0, "second_order.alpha", "must be non-negative");
  require(so_beta > 0, "second_order.beta", "must be positive");
  require(so_interval >= 1, "second_order.interval", "must be at least 1");
  require(mask_patch >= 1, "mask.patch", "must be at least 1");
  require(mask_ratio >= 0 && mask_ratio < 1, "mask.ratio", "must be in [0, 1)");
  require(state_dim >= 1 && state_dim <= 256, "fusion.state_dim", "must be in [1, 256]");
  require(threads >= 1 && threads <= 256, "fusion.threads", "must be in [1, 256]");
  require(key_tokens <= 1u << 16, "fusion.key_tokens", "must be at most 65536");
  require(pretrain_steps <= 1000000, "pretrain.steps", "must be at most 1000000");
  require(pretrain_lr > 0, "pretrain.lr", "must be positive");
}

void RunConfig::merge_json(const std::string& json_text) {
  Json doc;
  try {
    doc = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    raise(ErrorKind::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig& c = *this;
  auto size_field = [](std::size_t& dst) {
    return [&dst](const Json& j, const std::string& f) { dst = static_cast<std::size_t>(as_uint(j, f)); };
  };
  auto num_field = [](double& dst) { return [&dst](const Json& j, const std::string& f) { dst = as_number(j, f); }; };
  auto bool_field = [](bool& dst) { return [&dst](const Json& j, const std::string& f) { dst = as_bool(j, f); }; };
  auto str_field = [](std::string& dst) {
    return [&dst](const Json& j, const std::string& f) { dst = as_string(j, f); };
  };
  auto nested = [](std::map<std::string, Setter> setters) {
    return [setters = std::move(setters)](const Json& j, const std::string& f) { apply_object(j, f, setters); };
  };

  apply_object(
      doc, "",
      {
          {"content", str_field(c.content_path)},
          {"prompts",
           [&c](const Json& j, const std::string& f) {
             if (!j.is_array()) field_error(f, "expected an array of strings");
             std::vector<std::string> ps;
             for (std::size_t i = 0; i < j.size(); ++i) ps.push_back(as_string(j[i], f + "[" + std::to_string(i) + "]"));
             c.prompts = std::move(ps);
           }},
          {"source_prompt", str_field(c.source_prompt)},
          {"seeds", nested({{"model", [&c](const Json& j, const std::string& f) { c.model_seed = as_uint(j, f); }},
                            {"mask", [&c](const Json& j, const std::string& f) { c.mask_seed = as_uint(j, f); }}})},
          {"schedule", nested({{"base_lr", num_field(c.schedule.base_lr)},
                               {"lr_halve_epoch", size_field(c.schedule.lr_halve_epoch)},
                               {"max_epochs", size_field(c.schedule.max_epochs)},
                               {"content_weight_hi", num_field(c.schedule.content_weight_hi)},
                               {"content_weight_lo", num_field(c.schedule.content_weight_lo)},
                               {"content_switch_epoch", size_field(c.schedule.content_switch_epoch)},
                               {"rescale_moments_at_switch", bool_field(c.schedule.rescale_moments_at_switch)}})},
          {"weights", nested({{"style", num_field(c.style_weight)}, {"lpips", num_field(c.lpips_weight)}})},
          {"terms", nested({{"masked", bool_field(c.masked_loss)},
                            {"second_order", bool_field(c.second_order_loss)},
                            {"lpips", bool_field(c.lpips_loss)}})},
          {"second_order",
           nested({{"alpha", num_field(c.so_alpha)},
                   {"beta", num_field(c.so_beta)},
                   {"theta", num_field(c.so_theta)},
                   {"interval", size_field(c.so_interval)},
                   {"quotient", [&c](const Json& j, const std::string& f) {
                      c.so_quotient = as_enum(j, f, kQuotientNames);
                    }}})},
          {"mask", nested({{"patch", size_field(c.mask_patch)}, {"ratio", num_field(c.mask_ratio)}})},
          {"fusion",
           nested({{"kind", [&c](const Json& j, const std::string& f) { c.fusion = as_enum(j, f, kFusionNames); }},
                   {"state_dim", size_field(c.state_dim)},
                   {"bidirectional", bool_field(c.bidirectional)},
                   {"scan", [&c](const Json& j, const std::string& f) { c.scan = as_enum(j, f, kScanNames); }},
                   {"threads",
                    [&c](const Json& j, const std::string& f) {
                      const auto v = as_uint(j, f);
                      if (v > 256) field_error(f, "must be in [1, 256]");
                      c.threads = static_cast<unsigned>(v);
                    }},
                   {"key_tokens", size_field(c.key_tokens)},
                   {"open_gate", bool_field(c.open_gate)}})},
          {"pretrain", nested({{"steps", size_field(c.pretrain_steps)}, {"lr", num_field(c.pretrain_lr)}})},
          {"outputs", nested({{"image", str_field(c.out_image)},
                              {"trace", str_field(c.trace_path)},
                              {"report", str_field(c.report_path)}})},
      });
}

RunConfig RunConfig::from_json(const std::string& json_text) {
  RunConfig c;
  c.merge_json(json_text);
  return c;
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["content"] = content_path;
  j["prompts"] = prompts;
  j["source_prompt"] = source_prompt;
  j["seeds"] = {{"model", model_seed}, {"mask", mask_seed}};
  nlohmann::ordered_json s;
  s["base_lr"] = schedule.base_lr;
  s["lr_halve_epoch"] = schedule.lr_halve_epoch;
  s["max_epochs"] = schedule.max_epochs;
  s["content_weight_hi"] = schedule.content_weight_hi;
  s["content_weight_lo"] = schedule.content_weight_lo;
  s["content_switch_epoch"] = schedule.content_switch_epoch;
  s["rescale_moments_at_switch"] = schedule.rescale_moments_at_switch;
  j["schedule"] = s;
  j["weights"] = {{"style", style_weight}, {"lpips", lpips_weight}};
  nlohmann::ordered_json t;
  t["masked"] = masked_loss;
  t["second_order"] = second_order_loss;
  t["lpips"] = lpips_loss;
  j["terms"] = t;
  nlohmann::ordered_json so;
  so["alpha"] = so_alpha;
  so["beta"] = so_beta;
  so["theta"] = so_theta;
  so["interval"] = so_interval;
  so["quotient"] = enum_name(so_quotient, kQuotientNames);
  j["second_order"] = so;
  j["mask"] = {{"patch", mask_patch}, {"ratio", mask_ratio}};
  nlohmann::ordered_json f;
  f["kind"] = enum_name(fusion, kFusionNames);
  f["state_dim"] = state_dim;
  f["bidirectional"] = bidirectional;
  f["scan"] = enum_name(scan, kScanNames);
  f["threads"] = threads;
  f["key_tokens"] = key_tokens;
  f["open_gate"] = open_gate;
  j["fusion"] = f;
  j["pretrain"] = {{"steps", pretrain_steps}, {"lr", pretrain_lr}};
  nlohmann::ordered_json o;
  o["image"] = out_image;
  o["trace"] = trace_path;
  o["report"] = report_path;
  j["outputs"] = o;
  return j.dump(2) + "\n";
}

// ---- run ------------------------------------------------------------------

Models Models::build(const RunConfig& config, const Tensor& content) {
  PretrainOptions options;
  options.lr = config.pretrain_lr;
  options.seed = config.model_seed;
  PretrainReport report;
  ToyAutoencoder ae = pretrain_autoencoder(content, config.pretrain_steps, options, &report);
  return Models{TextEmbedder(derive_seed(config.model_seed, static_cast<std::uint64_t>(WeightStream::kTextEmbedder))),
                ImageEmbedder(derive_seed(config.model_seed, static_cast<std::uint64_t>(WeightStream::kImageEmbedder))),
                std::move(ae), report};
}

RunResult run_stylization(const RunConfig& config) {
  config.validate();
  if (config.content_path.empty()) field_error("content", "a content image path is required");
  const Tensor content = read_image(config.content_path);
  const auto start = Clock::now();
  const Models models = Models::build(config, content);
  const double pretrain_ms = ms_since(start);
  RunResult result = run_stylization(config, content, models);
  result.report.wall_time_ms["pretrain"] = pretrain_ms;
  return result;
}

RunResult run_stylization(const RunConfig& config, const Tensor& content, const Models& models) {
  config.validate();
  check_image(content, "content image");
  if (content.dim(0) % 4 != 0 || content.dim(1) % 4 != 0) {
    raise(ErrorKind::kInput, "content image extents must be divisible by 4, got " + shape_str(content.shape()));
  }
  if (content.dim(0) % config.mask_patch != 0 || content.dim(1) % config.mask_patch != 0) {
    raise(ErrorKind::kInput, "content image extents must be divisible by the mask patch size " +
                                 std::to_string(config.mask_patch));
  }

  const auto setup_start = Clock::now();
  RunResult result;
  const TextEmbedder& text = models.text;
  const ImageEmbedder& embedder = models.image;

  const Tensor x_emb = embedder.embed(content);
  const Tensor t_src = text.embed(config.source_prompt);
  std::vector<PromptContext> contexts;
  for (const auto& prompt : config.prompts) contexts.push_back(PromptContext::make(text.embed(prompt), t_src, x_emb));
  const Tensor style_emb = combined_style_embedding(contexts);

  Tape setup_tape;
  const ImageFeatures x_feats = [&] {
    ImageFeatures f = embedder.features(setup_tape, content);
    return ImageFeatures{f.conv1.detach(), f.conv2.detach(), f.embedding.detach()};
  }();
  const LatentSequence latent = models.autoencoder.encode(content);

  ToyAutoencoder decoder = models.autoencoder.clone();
  for (Tensor t : decoder.decoder_tensors()) t.set_requires_grad(true);
  Rng fusion_rng(derive_seed(config.model_seed, static_cast<std::uint64_t>(WeightStream::kFusion)));
  FusionBlock block;
  if (config.fusion == FusionKind::kSsm) {
    SsmOptions opts;
    opts.scan = config.scan;
    opts.bidirectional = config.bidirectional;
    opts.threads = config.threads;
    block = FusionBlock::init_ssm(kLatentChannels, config.state_dim, opts, fusion_rng);
  } else {
    const std::size_t keys = config.key_tokens == 0 ? latent.length() : config.key_tokens;
    block = FusionBlock::init_cross_attention(kLatentChannels, embedder.dim(), keys, fusion_rng);
  }
  Conditioner conditioner = config.open_gate ? Conditioner::open_gate_init(embedder.dim(), kLatentChannels)
                                             : Conditioner::zero_init(embedder.dim(), kLatentChannels);

  std::vector<Tensor> params = decoder.decoder_tensors();
  for (const auto& t : block.tensors()) params.push_back(t);
  for (const auto& t : conditioner.tensors()) params.push_back(t);

  TrainState& state = result.state;
  state.seed = config.mask_seed;
  state.so_state.alpha = config.so_alpha;
  state.so_state.beta = config.so_beta;
  state.so_state.theta = config.so_theta;
  state.so_state.interval = config.so_interval;
  state.so_state.quotient = config.so_quotient;
  const StyleTerms terms{config.masked_loss, config.second_order_loss};
  result.report.wall_time_ms["setup"] = ms_since(setup_start);

  const auto train_start = Clock::now();
  try {
    for (std::size_t epoch = 0; epoch < config.schedule.max_epochs; ++epoch) {
      for (auto& p : params) p.zero_grad();
      Tape tape;
      const Forward fw = forward(tape, latent, style_emb, conditioner, block, decoder, embedder);
      const PatchMask mask =
          sample_mask(fw.image.shape(), config.mask_patch, config.mask_ratio, derive_seed(config.mask_seed, epoch));
      const Tensor masked_emb =
          config.masked_loss ? embedder.embed(tape, apply_mask(tape, fw.image, mask)) : fw.feats.embedding;
      const StyleLoss sl = multi_prompt_style_loss(tape, contexts, fw.feats.embedding, masked_emb, state.so_state,
                                                   epoch, terms);
      const Tensor lpips = config.lpips_loss ? perceptual_loss(tape, x_feats, fw.feats) : Tensor::scalar(0.0);
      const Tensor content_loss = content_feature_loss(tape, x_feats, fw.feats);
      const LossWeights weights{config.style_weight, config.lpips_loss ? config.lpips_weight : 0.0,
                                config.schedule.content_weight_at(epoch)};
      const Tensor total = total_loss(tape, weights, sl.total, lpips, content_loss);

      tape.backward(total);
      if (config.schedule.rescale_moments_at_switch && epoch == config.schedule.content_switch_epoch &&
          config.schedule.content_weight_hi > 0) {
        rescale_moments(state.moments, config.schedule.content_weight_lo / config.schedule.content_weight_hi);
      }
      adam_step(params, state.moments, config.schedule.lr_at(epoch));
      // Compared against the next epoch's forward output by the second-order term.
      state.so_state.prev_img_emb = fw.feats.embedding.detach();

      TraceRow row;
      row.epoch = epoch;
      row.l_dir = sl.l_dir.item();
      row.l_md = sl.l_md.item();
      row.l_so = sl.l_so.item();
      row.content = content_loss.item();
      row.total = total.item();
      row.style = sl.total.item();
      row.lpips = lpips.item();
      row.lr = config.schedule.lr_at(epoch);
      row.content_weight = config.schedule.content_weight_at(epoch);
      row.mask_dropped = mask.dropped();
      row.mask_patches = mask.patches();
      state.trace.push_back(row);
      state.epoch = epoch + 1;
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumeric) throw;
    result.aborted = true;
    result.abort_message = e.what();
  }
  const double train_ms = ms_since(train_start);
  result.report.wall_time_ms["train"] = train_ms;
  result.epoch_ms = state.epoch > 0 ? train_ms / static_cast<double>(state.epoch) : 0.0;

  const auto eval_start = Clock::now();
  Tape eval_tape;
  result.image = forward(eval_tape, latent, style_emb, conditioner, block, decoder, embedder).image.detach();
  result.report.clip_score_analog = similarity_score(style_emb, embedder.embed(result.image));
  result.report.ssim = ssim(content, result.image);
  result.report.feature_loss = feature_loss_metric(embedder, content, result.image);
  result.report.wall_time_ms["eval"] = ms_since(eval_start);

  result.decoder = std::move(decoder);
  result.fusion = std::move(block);
  result.conditioner = std::move(conditioner);
  return result;
}

void write_outputs(const RunConfig& config, const RunResult& result) {
  if (!config.out_image.empty()) write_image(config.out_image, result.image);
  if (!config.trace_path.empty()) emit_trace(result.state, config.trace_path);
  if (!config.report_path.empty()) write_file_atomic(config.report_path, result.report.to_json());
}

}  // namespace ssmstyle
