#include "ssmstyle/models.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/ops.hpp"
#include "ssmstyle/optim.hpp"
#include "ssmstyle/rng.hpp"

namespace ssmstyle {
namespace {

// Hidden width of the toy autoencoder's conv layers.
constexpr std::size_t kAeHidden = 32;

std::uint64_t stream_seed(std::uint64_t seed, WeightStream stream) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream));
}

Tensor conv_kernel(Rng& rng, std::size_t k, std::size_t cin, std::size_t cout, bool trainable) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
  return Tensor::from({k, k, cin, cout}, rng.normal_vector(k * k * cin * cout, scale), trainable);
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor unit_layer_norm(Tape& tape, const Tensor& x) {
  const std::size_t c = x.shape().back();
  return ops::layer_norm(tape, x, Tensor::full({c}, 1.0), Tensor::zeros({c}));
}

}  // namespace

void check_image(const Tensor& image, const char* what) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    raise(ErrorKind::kDimension, std::string(what) + ": expected [H, W, 3] image, got " + shape_str(image.shape()));
  }
  for (double v : image.data()) {
    if (v < 0.0 || v > 1.0) raise(ErrorKind::kInput, std::string(what) + ": pixel values must lie in [0, 1]");
  }
}

TextEmbedder::TextEmbedder(std::uint64_t seed, std::size_t dim, std::size_t vocab)
    : seed_(seed), dim_(dim), vocab_(vocab) {
  Rng rng(stream_seed(seed, WeightStream::kTextEmbedder));
  table_ = Tensor::from({vocab, dim}, rng.normal_vector(vocab * dim, 1.0), false);
}

std::size_t TextEmbedder::token_index(std::string_view token) const {
  return static_cast<std::size_t>(fnv1a(token, seed_) % vocab_);
}

Tensor TextEmbedder::embed(std::string_view prompt) const {
  std::vector<double> acc(dim_, 0.0);
  std::size_t tokens = 0;
  std::istringstream words{std::string(prompt)};
  std::string token;
  while (words >> token) {
    const std::size_t row = token_index(token);
    for (std::size_t k = 0; k < dim_; ++k) acc[k] += table_[row * dim_ + k];
    ++tokens;
  }
  if (tokens == 0) raise(ErrorKind::kInput, "prompt must contain at least one token");
  double sq = 0.0;
  for (double v : acc) sq += v * v;
  const double n = std::sqrt(sq);
  if (!(n > 0.0)) raise(ErrorKind::kDegenerateInput, "prompt embedding has zero norm");
  for (double& v : acc) v /= n;
  return Tensor::from({dim_}, std::move(acc));
}

ImageEmbedder::ImageEmbedder(std::uint64_t seed, std::size_t dim) : dim_(dim) {
  Rng rng(stream_seed(seed, WeightStream::kImageEmbedder));
  w1_ = conv_kernel(rng, 3, 3, 16, false);
  b1_ = Tensor::from({16}, rng.normal_vector(16, 0.1), false);
  w2_ = conv_kernel(rng, 3, 16, 64, false);
  b2_ = Tensor::from({64}, rng.normal_vector(64, 0.1), false);
  // Pooled features are small in magnitude; scale the projection so the
  // pre-normalization embedding is O(1).
  proj_ = Tensor::from({64, dim}, rng.normal_vector(64 * dim, 4.0 / std::sqrt(64.0)), false);
  proj_b_ = Tensor::from({dim}, rng.normal_vector(dim, 0.1), false);
}

ImageFeatures ImageEmbedder::features(Tape& tape, const Tensor& image) const {
  check_image(image, "embed_image");
  const Tensor centered = ops::add_scalar(tape, image, -0.5);
  const Tensor f1 = ops::tanh(tape, ops::conv2d(tape, centered, w1_, b1_, 2, 1));
  const Tensor f2 = ops::tanh(tape, ops::conv2d(tape, f1, w2_, b2_, 2, 1));
  const Tensor pooled = ops::reshape(tape, ops::global_avg_pool(tape, f2), {1, 64});
  const Tensor projected = ops::reshape(tape, ops::linear(tape, pooled, proj_, proj_b_), {dim_});
  return {f1, f2, ops::l2_normalize(tape, projected)};
}

Tensor ImageEmbedder::embed(const Tensor& image) const {
  Tape scratch;
  return embed(scratch, image).detach();
}

ToyAutoencoder ToyAutoencoder::init(std::uint64_t seed) {
  Rng rng(stream_seed(seed, WeightStream::kAutoencoder));
  ToyAutoencoder ae;
  ae.enc_w1 = conv_kernel(rng, 3, 3, kAeHidden, true);
  ae.enc_b1 = Tensor::zeros({kAeHidden}, true);
  ae.enc_w2 = conv_kernel(rng, 3, kAeHidden, kLatentChannels, true);
  ae.enc_b2 = Tensor::zeros({kLatentChannels}, true);
  ae.dec_w1 = conv_kernel(rng, 4, kLatentChannels, kAeHidden, true);
  ae.dec_b1 = Tensor::zeros({kAeHidden}, true);
  ae.dec_w2 = conv_kernel(rng, 4, kAeHidden, 3, true);
  ae.dec_b2 = Tensor::zeros({3}, true);
  return ae;
}

LatentSequence ToyAutoencoder::encode(Tape& tape, const Tensor& image) const {
  check_image(image, "encode");
  if (image.dim(0) % 4 != 0 || image.dim(1) % 4 != 0) {
    raise(ErrorKind::kInput, "image extents must be divisible by 4, got " + shape_str(image.shape()));
  }
  const Tensor centered = ops::add_scalar(tape, image, -0.5);
  const Tensor h = ops::silu(tape, ops::conv2d(tape, centered, enc_w1, enc_b1, 2, 1));
  const Tensor z = ops::conv2d(tape, h, enc_w2, enc_b2, 2, 1);
  return flatten_grid(tape, z);
}

LatentSequence ToyAutoencoder::encode(const Tensor& image) const {
  Tape scratch;
  LatentSequence z = encode(scratch, image);
  return {z.tokens.detach(), z.height, z.width};
}

Tensor ToyAutoencoder::decode(Tape& tape, const LatentSequence& latent) const {
  if (latent.tokens.rank() != 2 || latent.tokens.dim(1) != kLatentChannels) {
    raise(ErrorKind::kDimension, "decode expects [L, 16] latent tokens, got " + shape_str(latent.tokens.shape()));
  }
  const Tensor grid = unflatten_grid(tape, latent);
  const Tensor h = ops::silu(tape, ops::conv_transpose2d(tape, grid, dec_w1, dec_b1, 2, 1));
  return ops::sigmoid(tape, ops::conv_transpose2d(tape, h, dec_w2, dec_b2, 2, 1));
}

Tensor ToyAutoencoder::decode(const LatentSequence& latent) const {
  Tape scratch;
  return decode(scratch, latent).detach();
}

Tensor ToyAutoencoder::reconstruct(Tape& tape, const Tensor& image) const {
  const LatentSequence z = encode(tape, image);
  return decode(tape, {unit_layer_norm(tape, z.tokens), z.height, z.width});
}

Tensor ToyAutoencoder::reconstruct(const Tensor& image) const {
  Tape scratch;
  return reconstruct(scratch, image).detach();
}

void ToyAutoencoder::freeze_encoder() {
  for (Tensor t : encoder_tensors()) t.set_requires_grad(false);
}

ToyAutoencoder ToyAutoencoder::clone() const {
  auto copy = [](const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  return {copy(enc_w1), copy(enc_b1), copy(enc_w2), copy(enc_b2),
          copy(dec_w1), copy(dec_b1), copy(dec_w2), copy(dec_b2)};
}

ToyAutoencoder pretrain_autoencoder(const Tensor& image, std::size_t steps, const PretrainOptions& options,
                                    PretrainReport* report) {
  check_image(image, "pretrain_autoencoder");
  if (image.dim(0) % 4 != 0 || image.dim(1) % 4 != 0) {
    raise(ErrorKind::kInput, "image extents must be divisible by 4, got " + shape_str(image.shape()));
  }
  ToyAutoencoder ae = ToyAutoencoder::init(options.seed);
  std::vector<Tensor> params = ae.encoder_tensors();
  for (const Tensor& t : ae.decoder_tensors()) params.push_back(t);
  std::vector<AdamMoments> moments;

  const double initial = mse(ae.reconstruct(image), image);
  double last = initial;
  for (std::size_t step = 0; step < steps; ++step) {
    // Cosine decay to a tenth of the base rate.
    const double progress = static_cast<double>(step) / static_cast<double>(steps);
    const double lr = options.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    Tape tape;
    const Tensor recon = ae.reconstruct(tape, image);
    const Tensor loss = ops::mean(tape, ops::square(tape, ops::sub(tape, recon, image)));
    for (Tensor& p : params) p.zero_grad();
    tape.backward(loss);
    adam_step(params, moments, lr);
  }
  for (Tensor& p : params) p.zero_grad();
  if (steps > 0) last = mse(ae.reconstruct(image), image);
  ae.freeze_encoder();
  if (report) *report = {initial, last};
  return ae;
}

Tensor smooth_random_image(std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  constexpr int kWaves = 4;
  std::vector<double> px(height * width * 3, 0.0);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double base = rng.uniform(0.3, 0.7);
    double fx[kWaves], fy[kWaves], phase[kWaves], amp[kWaves];
    for (int w = 0; w < kWaves; ++w) {
      fx[w] = rng.uniform(-3.0, 3.0);
      fy[w] = rng.uniform(-3.0, 3.0);
      phase[w] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      amp[w] = rng.uniform(0.03, 0.08);
    }
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double u = static_cast<double>(x) / static_cast<double>(width);
        const double v = static_cast<double>(y) / static_cast<double>(height);
        double val = base;
        for (int w = 0; w < kWaves; ++w) {
          val += amp[w] * std::sin(2.0 * std::numbers::pi * (fx[w] * u + fy[w] * v) + phase[w]);
        }
        px[(y * width + x) * 3 + ch] = std::clamp(val, 0.0, 1.0);
      }
    }
  }
  return Tensor::from({height, width, 3}, std::move(px));
}

double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) raise(ErrorKind::kDimension, "mse shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double e = mse(a, b);
  if (e == 0.0) return INFINITY;
  return 10.0 * std::log10(1.0 / e);
}

}  // namespace ssmstyle
