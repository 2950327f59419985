#include "ssmstyle/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssmstyle/errors.hpp"

namespace ssmstyle {
namespace {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void check_extent(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || h > kMaxImageExtent || w > kMaxImageExtent) {
    raise(ErrorKind::kInput, "image extent " + std::to_string(h) + "x" + std::to_string(w) + " outside [1, " +
                                 std::to_string(kMaxImageExtent) + "]");
  }
}

void require_rgb(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    raise(ErrorKind::kDimension, "expected [H, W, 3] image, got " + shape_str(image.shape()));
  }
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) raise(ErrorKind::kIo, "weight file truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorKind::kIo, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) raise(ErrorKind::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    raise(ErrorKind::kIo, "cannot move output into place at " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::kIo, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) raise(ErrorKind::kInput, "PPM header value too large");
      ++pos;
      ++digits;
    }
    if (digits == 0) raise(ErrorKind::kInput, "malformed PPM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') raise(ErrorKind::kInput, "not a binary PPM (P6)");
  pos = 2;
  const std::size_t w = number();
  const std::size_t h = number();
  const std::size_t maxval = number();
  if (maxval != 255) raise(ErrorKind::kInput, "only 8-bit PPM (maxval 255) is supported");
  check_extent(h, w);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    raise(ErrorKind::kInput, "malformed PPM header");
  }
  ++pos;
  if (bytes.size() - pos < h * w * 3) raise(ErrorKind::kInput, "PPM pixel data truncated");
  std::vector<double> px(h * w * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return Tensor::from({h, w, 3}, std::move(px));
}

std::string encode_ppm(const Tensor& image) {
  require_rgb(image);
  std::string out = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  out.reserve(out.size() + image.size());
  for (double v : image.data()) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

Tensor decode_png(const std::string& bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    raise(ErrorKind::kInput, std::string("cannot decode PNG: ") + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  if (h == 0 || w == 0 || h > kMaxImageExtent || w > kMaxImageExtent) {
    png_image_free(&img);
    check_extent(h, w);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    raise(ErrorKind::kInput, std::string("cannot decode PNG: ") + img.message);
  }
  std::vector<double> px(h * w * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = buf[i] / 255.0;
  return Tensor::from({h, w, 3}, std::move(px));
}

std::string encode_png(const Tensor& image) {
  require_rgb(image);
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(image[i]);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, px.data(), 0, nullptr)) {
    raise(ErrorKind::kIo, std::string("cannot encode PNG: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr)) {
    raise(ErrorKind::kIo, std::string("cannot encode PNG: ") + img.message);
  }
  out.resize(size);
  return out;
}

Tensor read_image(const std::string& path) {
  const std::string bytes = read_file(path);
  static const char kPngSig[] = "\x89PNG";
  if (bytes.size() >= 4 && bytes.compare(0, 4, kPngSig, 4) == 0) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  raise(ErrorKind::kInput, path + ": unsupported image format (expected PNG or binary PPM)");
}

void write_image(const std::string& path, const Tensor& image) {
  const auto ext = std::filesystem::path(path).extension().string();
  write_file_atomic(path, ext == ".png" || ext == ".PNG" ? encode_png(image) : encode_ppm(image));
}

const Tensor& WeightFile::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  raise(ErrorKind::kInput, "weight file has no tensor named " + name);
}

std::string encode_weights(const WeightFile& file) {
  std::string out = "SSMW";
  put<std::uint32_t>(out, kWeightFileVersion);
  put<std::uint64_t>(out, file.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& [name, t] : file.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

WeightFile decode_weights(const std::string& bytes) {
  Reader r(bytes);
  if (r.get_string(4) != "SSMW") raise(ErrorKind::kIo, "bad weight file magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightFileVersion) raise(ErrorKind::kIo, "unsupported weight file version " + std::to_string(version));
  WeightFile file;
  file.seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) raise(ErrorKind::kIo, "bad tensor rank in weight file");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (d == 0 || d > (1u << 26)) raise(ErrorKind::kIo, "bad tensor extent in weight file");
      n *= d;
      if (n > (1u << 28)) raise(ErrorKind::kIo, "tensor too large in weight file");
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>();
    file.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done()) raise(ErrorKind::kIo, "trailing bytes in weight file");
  return file;
}

void save_weights(const std::string& path, const WeightFile& file) { write_file_atomic(path, encode_weights(file)); }

WeightFile load_weights(const std::string& path) { return decode_weights(read_file(path)); }

}  // namespace ssmstyle
