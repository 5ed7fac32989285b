#pragma once

// Image and annotation value types plus their on-disk encodings:
// binary PGM (P5, 8-bit; channels stacked as planes), raw little-endian
// float64 images for lossless counter-examples, and JSONL box labels.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/tensor.hpp"

namespace rosar {

namespace fs = std::filesystem;

/// h x w x c grid of intensities in [0,1], row-major HWC.
struct Image {
  int h = 0, w = 0, c = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(int h_, int w_, int c_, double fill = 0.0)
      : h(h_), w(w_), c(c_), pixels(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  std::size_t size() const { return pixels.size(); }
  std::size_t index(int i, int j, int k = 0) const {
    return (static_cast<std::size_t>(i) * w + j) * c + k;
  }
  double& at(int i, int j, int k = 0) { return pixels[index(i, j, k)]; }
  double at(int i, int j, int k = 0) const { return pixels[index(i, j, k)]; }
  bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }

  Tensor to_tensor() const {
    return Tensor(Shape{static_cast<std::size_t>(h), static_cast<std::size_t>(w), static_cast<std::size_t>(c)},
                  pixels);
  }
  static Image from_data(int h, int w, int c, std::vector<double> data) {
    Image im(h, w, c);
    if (data.size() != im.size()) throw std::invalid_argument("image: data length mismatch");
    im.pixels = std::move(data);
    return im;
  }

  bool operator==(const Image&) const = default;
};

inline void clamp_unit(Image& im) {
  for (double& v : im.pixels) v = std::clamp(v, 0.0, 1.0);
}

/// Normalized center-format box.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

enum : int { kClassWall = 0, kClassNoWall = 1 };

struct Annotation {
  int class_id = kClassWall;
  Box bbox;
  bool operator==(const Annotation&) const = default;
};

inline void validate(const Annotation& a) {
  if (!(a.bbox.w > 0) || !(a.bbox.h > 0)) throw std::invalid_argument("annotation: w and h must be > 0");
  if (a.class_id < 0) throw std::invalid_argument("annotation: negative class id");
  constexpr double tol = 1e-9;
  const Box& b = a.bbox;
  if (b.cx - b.w / 2 < -tol || b.cx + b.w / 2 > 1 + tol || b.cy - b.h / 2 < -tol || b.cy + b.h / 2 > 1 + tol)
    throw std::invalid_argument("annotation: box extends outside the image");
}

// ---- files -----------------------------------------------------------------

/// Writes through a temp file and renames it into place.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Applies the 8-bit storage quantization in memory.
inline Image quantized(const Image& im) {
  Image q = im;
  for (double& v : q.pixels) v = quantize(v) / 255.0;
  return q;
}

inline std::string encode_pgm(const Image& im) {
  std::string out = "P5\n# channels " + std::to_string(im.c) + "\n" + std::to_string(im.w) + " " +
                    std::to_string(im.h * im.c) + "\n255\n";
  out.reserve(out.size() + im.size());
  for (int k = 0; k < im.c; ++k)
    for (int i = 0; i < im.h; ++i)
      for (int j = 0; j < im.w; ++j) out.push_back(static_cast<char>(quantize(im.at(i, j, k))));
  return out;
}

inline Image decode_pgm(const std::string& bytes, const std::string& name = "<pgm>") {
  std::size_t pos = 0;
  int channels = 1;
  auto fail = [&](const std::string& why) -> Image { throw std::runtime_error(name + ": " + why); };
  auto skip_ws_and_comments = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        const std::size_t eol = bytes.find('\n', pos);
        const std::string comment = bytes.substr(pos + 1, eol == std::string::npos ? std::string::npos : eol - pos - 1);
        std::istringstream cs(comment);
        std::string key;
        int value = 0;
        if (cs >> key >> value && key == "channels") channels = value;
        pos = eol == std::string::npos ? bytes.size() : eol + 1;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_ws_and_comments();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw std::runtime_error(name + ": malformed PGM header");
    return std::stoi(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes.compare(0, 2, "P5") != 0) return fail("not a binary PGM (P5)");
  pos = 2;
  const int w = read_int();
  const int rows = read_int();
  const int maxval = read_int();
  if (maxval != 255) return fail("only 8-bit PGM supported");
  ++pos;  // single whitespace before raster
  if (channels < 1 || rows % channels != 0) return fail("channel count does not divide row count");
  const int h = rows / channels;
  const std::size_t n = static_cast<std::size_t>(w) * rows;
  if (bytes.size() - pos < n) return fail("truncated raster");
  Image im(h, w, channels);
  std::size_t p = pos;
  for (int k = 0; k < channels; ++k)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) im.at(i, j, k) = static_cast<std::uint8_t>(bytes[p++]) / 255.0;
  return im;
}

inline void write_pgm(const fs::path& path, const Image& im) { write_file_atomic(path, encode_pgm(im)); }
inline Image read_pgm(const fs::path& path) { return decode_pgm(read_file(path), path.string()); }

/// Lossless raw image: "RIMG" h w c (int32 LE) followed by float64 LE pixels.
inline void write_raw_image(const fs::path& path, const Image& im) {
  static_assert(std::endian::native == std::endian::little, "raw image I/O assumes little-endian host");
  std::string bytes = "RIMG";
  auto put32 = [&](std::int32_t v) { bytes.append(reinterpret_cast<const char*>(&v), 4); };
  put32(im.h);
  put32(im.w);
  put32(im.c);
  bytes.append(reinterpret_cast<const char*>(im.pixels.data()), im.pixels.size() * sizeof(double));
  write_file_atomic(path, bytes);
}

inline Image read_raw_image(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 4, "RIMG") != 0)
    throw std::runtime_error(path.string() + ": not a raw image");
  std::int32_t dims[3];
  std::memcpy(dims, bytes.data() + 4, 12);
  Image im(dims[0], dims[1], dims[2]);
  if (bytes.size() != 16 + im.size() * sizeof(double)) throw std::runtime_error(path.string() + ": size mismatch");
  std::memcpy(im.pixels.data(), bytes.data() + 16, im.size() * sizeof(double));
  return im;
}

inline nlohmann::json to_json(const Annotation& a) {
  return {{"class", a.class_id}, {"cx", a.bbox.cx}, {"cy", a.bbox.cy}, {"w", a.bbox.w}, {"h", a.bbox.h}};
}

inline std::string encode_labels(const std::vector<Annotation>& anns) {
  std::string out;
  for (const auto& a : anns) out += to_json(a).dump() + "\n";
  return out;
}

inline std::vector<Annotation> decode_labels(const std::string& text, const std::string& name = "<labels>") {
  std::vector<Annotation> anns;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Annotation a;
      a.class_id = j.at("class").get<int>();
      a.bbox = {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(),
                j.at("h").get<double>()};
      validate(a);
      anns.push_back(a);
    } catch (const std::exception& e) {
      throw std::runtime_error(name + ":" + std::to_string(lineno) + ": corrupt annotation: " + e.what());
    }
  }
  return anns;
}

inline void write_labels(const fs::path& path, const std::vector<Annotation>& anns) {
  write_file_atomic(path, encode_labels(anns));
}
inline std::vector<Annotation> read_labels(const fs::path& path) {
  return decode_labels(read_file(path), path.string());
}

}  // namespace rosar
