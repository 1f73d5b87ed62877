#include "decontext/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "decontext/errors.hpp"

namespace decontext {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t get(std::size_t width, const char* what) {
    if (pos_ + width > bytes_.size()) {
      throw IoError(std::string("DCTX truncated reading ") + what + " at offset " + std::to_string(pos_));
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

void check_image(const Tensor& image, const char* what) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError(std::string(what) + ": expected [3, height, width], got " + shape_to_string(image.shape()));
  }
}

}  // namespace

std::vector<std::uint8_t> encode_dctx(const Tensor& tensor) {
  std::vector<std::uint8_t> out = {'D', 'C', 'T', 'X'};
  put_u32(out, kDctxVersion);
  out.push_back(0);
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) put_u64(out, d);
  out.reserve(out.size() + 4 * tensor.numel());
  for (float v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_dctx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DCTX", 4) != 0) throw IoError("DCTX: bad magic at offset 0");
  Reader r(bytes.subspan(4));
  const auto version = r.get(4, "version");
  if (version != kDctxVersion) throw IoError("DCTX: unsupported version " + std::to_string(version) + " at offset 4");
  const auto dtype = r.get(1, "dtype");
  if (dtype != 0) throw IoError("DCTX: unsupported dtype code " + std::to_string(dtype) + " at offset 8");
  const auto rank = r.get(4, "rank");
  if (rank > 16) throw IoError("DCTX: implausible rank " + std::to_string(rank) + " at offset 9");
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) {
    const auto d = r.get(8, "dimension");
    if (d == 0) throw IoError("DCTX: zero dimension at offset " + std::to_string(4 + r.pos() - 8));
    shape.push_back(static_cast<std::size_t>(d));
  }
  const std::size_t n = shape_numel(shape);
  if (r.remaining() != 4 * n) {
    throw IoError("DCTX: payload holds " + std::to_string(r.remaining()) + " bytes, expected " + std::to_string(4 * n));
  }
  std::vector<float> data(n);
  for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4, "data")));
  return Tensor(std::move(shape), std::move(data));
}

void write_dctx(const std::filesystem::path& path, const Tensor& tensor) {
  write_file(path, encode_dctx(tensor));
}

Tensor read_dctx(const std::filesystem::path& path) {
  try {
    return decode_dctx(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  check_image(image, "encode_ppm");
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * h * w);
  const auto px = image.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(px[(c * h + y) * w + x]));
    }
  }
  return out;
}

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 20) throw IoError(std::string("PPM: ") + what + " too large at offset " + std::to_string(start));
      ++pos;
    }
    if (pos == start) throw IoError(std::string("PPM: expected ") + what + " at offset " + std::to_string(start));
    return static_cast<std::size_t>(v);
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw IoError("PPM: invalid magic at offset 0 (expected P6)");
  pos = 2;
  const std::size_t w = number("width");
  const std::size_t h = number("height");
  skip_space();
  const std::size_t maxval_at = pos;
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw IoError("PPM: unsupported maxval " + std::to_string(maxval) + " at offset " + std::to_string(maxval_at));
  if (w == 0 || h == 0) throw IoError("PPM: zero image dimension");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw IoError("PPM: missing separator before pixel data at offset " + std::to_string(pos));
  }
  ++pos;
  if (bytes.size() - pos < 3 * w * h) {
    throw IoError("PPM: pixel data truncated at offset " + std::to_string(bytes.size()));
  }
  Tensor image(Shape{3, h, w});
  auto px = image.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) px[(c * h + y) * w + x] = static_cast<float>(bytes[pos++]) / 255.0f;
    }
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  write_file(path, encode_ppm(image));
}

Tensor read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Tensor quantize_within_budget(const Tensor& image, const Tensor& clean, double eta) {
  if (image.shape() != clean.shape()) {
    throw ShapeError("quantize_within_budget: " + shape_to_string(image.shape()) + " vs " + shape_to_string(clean.shape()));
  }
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.numel(); ++i) {
    const double c = clean[i];
    long q = std::lround(std::clamp(static_cast<double>(image[i]), 0.0, 1.0) * 255.0);
    auto decoded = [](long v) { return static_cast<double>(static_cast<float>(v) / 255.0f); };
    while (decoded(q) - c > eta && q > 0) --q;
    while (c - decoded(q) > eta && q < 255) ++q;
    out[i] = static_cast<float>(q) / 255.0f;
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace decontext
