#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ssmstyle/fusion.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

inline constexpr std::size_t kEmbedDim = 64;
inline constexpr std::size_t kLatentChannels = 16;
inline constexpr std::size_t kTextVocab = 4096;
inline constexpr std::uint64_t kDefaultModelSeed = 1234;
inline constexpr std::string_view kSourcePrompt = "a plain photo";

// Independent weight streams derived from one model seed.
enum class WeightStream : std::uint64_t {
  kTextEmbedder = 1,
  kImageEmbedder = 2,
  kAutoencoder = 3,
  kFusion = 4,
  kPretrainImage = 5,
};

/// Frozen text encoder stand-in: whitespace tokens are hashed into a seeded
/// vocabulary, their projection rows summed, and the sum normalized.
class TextEmbedder {
 public:
  explicit TextEmbedder(std::uint64_t seed, std::size_t dim = kEmbedDim, std::size_t vocab = kTextVocab);

  // Unit-norm, deterministic. Empty (or all-whitespace) prompts are rejected.
  Tensor embed(std::string_view prompt) const;

  std::size_t dim() const { return dim_; }
  std::size_t token_index(std::string_view token) const;
  const Tensor& table() const { return table_; }
  std::vector<Tensor> tensors() const { return {table_}; }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
  std::size_t vocab_;
  Tensor table_;  // [vocab, dim]
};

struct ImageFeatures {
  Tensor conv1;      // [H/2, W/2, 16]
  Tensor conv2;      // [H/4, W/4, 64]
  Tensor embedding;  // [D], unit norm
};

/// Frozen image encoder stand-in: two stride-2 tanh convolutions, global
/// average pooling, a projection to D and L2 normalization. Differentiable
/// with respect to the input image.
class ImageEmbedder {
 public:
  explicit ImageEmbedder(std::uint64_t seed, std::size_t dim = kEmbedDim);

  // Pixels must lie in [0, 1].
  ImageFeatures features(Tape& tape, const Tensor& image) const;
  Tensor embed(Tape& tape, const Tensor& image) const { return features(tape, image).embedding; }
  Tensor embed(const Tensor& image) const;

  std::size_t dim() const { return dim_; }
  std::vector<Tensor> tensors() const { return {w1_, b1_, w2_, b2_, proj_, proj_b_}; }

 private:
  std::size_t dim_;
  Tensor w1_, b1_, w2_, b2_, proj_, proj_b_;
};

/// Convolutional autoencoder with a 4x spatial reduction to a 16-channel
/// latent grid. The decoder ends in a sigmoid, so decoded pixels lie in [0, 1].
struct ToyAutoencoder {
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  Tensor dec_w1, dec_b1, dec_w2, dec_b2;

  static ToyAutoencoder init(std::uint64_t seed);

  LatentSequence encode(Tape& tape, const Tensor& image) const;
  LatentSequence encode(const Tensor& image) const;
  Tensor decode(Tape& tape, const LatentSequence& latent) const;
  Tensor decode(const LatentSequence& latent) const;

  // decode(LN(encode(x))): the path a zero-modulated fusion block reduces to.
  Tensor reconstruct(Tape& tape, const Tensor& image) const;
  Tensor reconstruct(const Tensor& image) const;

  std::vector<Tensor> encoder_tensors() const { return {enc_w1, enc_b1, enc_w2, enc_b2}; }
  std::vector<Tensor> decoder_tensors() const { return {dec_w1, dec_b1, dec_w2, dec_b2}; }
  void freeze_encoder();
  ToyAutoencoder clone() const;
};

struct PretrainOptions {
  double lr = 1e-2;
  std::uint64_t seed = kDefaultModelSeed;
};

struct PretrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Adam on the reconstruction MSE of a single image. H and W must be
// divisible by 4. The returned encoder is frozen.
ToyAutoencoder pretrain_autoencoder(const Tensor& image, std::size_t steps, const PretrainOptions& options = {},
                                    PretrainReport* report = nullptr);

// Smooth seeded test image in [0, 1]: a few random low-frequency sinusoids
// per channel.
Tensor smooth_random_image(std::size_t height, std::size_t width, std::uint64_t seed);

double mse(const Tensor& a, const Tensor& b);
// Peak signal-to-noise ratio for peak value 1.
double psnr(const Tensor& a, const Tensor& b);

void check_image(const Tensor& image, const char* what);

}  // namespace ssmstyle
