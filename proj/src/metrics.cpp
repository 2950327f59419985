#include "ssmstyle/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/losses.hpp"

namespace ssmstyle {
namespace {

constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;
constexpr std::size_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

std::vector<double> gaussian_window(std::size_t size) {
  std::vector<double> w(size);
  const double center = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - center;
    w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

double ssim_plane(const std::vector<double>& x, const std::vector<double>& y, std::size_t h, std::size_t w) {
  std::size_t size = std::min({kSsimWindow, h, w});
  if (size % 2 == 0) --size;
  const auto win = gaussian_window(size);
  const double c1 = kSsimK1 * kSsimK1;
  const double c2 = kSsimK2 * kSsimK2;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t oy = 0; oy + size <= h; ++oy) {
    for (std::size_t ox = 0; ox + size <= w; ++ox) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t j = 0; j < size; ++j) {
          const double wt = win[i] * win[j];
          const double a = x[(oy + i) * w + ox + j];
          const double b = y[(oy + i) * w + ox + j];
          mx += wt * a;
          my += wt * b;
          sxx += wt * a * a;
          syy += wt * b * b;
          sxy += wt * (a * b);  // grouped so swapping x and y is bit-exact
        }
      }
      const double vx = sxx - mx * mx;
      const double vy = syy - my * my;
      const double cxy = sxy - mx * my;
      acc += ((2 * (mx * my) + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["clip_score_analog"] = clip_score_analog;
  j["ssim"] = ssim;
  j["feature_loss"] = feature_loss;
  nlohmann::ordered_json times = nlohmann::ordered_json::object();
  for (const auto& [phase, ms] : wall_time_ms) times[phase] = ms;
  j["wall_time_ms"] = times;
  return j.dump(2) + "\n";
}

double similarity_score(const Tensor& t_emb, const Tensor& y_emb) {
  if (t_emb.shape() != y_emb.shape()) raise(ErrorKind::kDimension, "similarity_score shape mismatch");
  double nt = 0, ny = 0, d = 0;
  for (std::size_t i = 0; i < t_emb.size(); ++i) {
    nt += t_emb[i] * t_emb[i];
    ny += y_emb[i] * y_emb[i];
    d += t_emb[i] * y_emb[i];
  }
  if (std::abs(std::sqrt(nt) - 1.0) > 1e-6 || std::abs(std::sqrt(ny) - 1.0) > 1e-6) {
    raise(ErrorKind::kContract, "similarity_score expects unit-norm embeddings");
  }
  return std::clamp(d, -1.0, 1.0);
}

double ssim(const Tensor& x_img, const Tensor& y_img, SsimMode mode) {
  if (x_img.shape() != y_img.shape()) raise(ErrorKind::kDimension, "ssim needs equally shaped images");
  if (x_img.rank() != 3 || x_img.dim(2) != 3) raise(ErrorKind::kDimension, "ssim expects [H, W, 3] images");
  const std::size_t h = x_img.dim(0), w = x_img.dim(1);
  if (mode == SsimMode::kLuma) {
    std::vector<double> gx(h * w), gy(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      gx[i] = 0.299 * x_img[3 * i] + 0.587 * x_img[3 * i + 1] + 0.114 * x_img[3 * i + 2];
      gy[i] = 0.299 * y_img[3 * i] + 0.587 * y_img[3 * i + 1] + 0.114 * y_img[3 * i + 2];
    }
    return ssim_plane(gx, gy, h, w);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> px(h * w), py(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      px[i] = x_img[3 * i + c];
      py[i] = y_img[3 * i + c];
    }
    total += ssim_plane(px, py, h, w);
  }
  return total / 3.0;
}

double feature_loss_metric(const ImageEmbedder& embedder, const Tensor& x_img, const Tensor& y_img) {
  Tape scratch;
  return content_feature_loss(scratch, embedder, x_img.detach(), y_img.detach()).item();
}

}  // namespace ssmstyle
