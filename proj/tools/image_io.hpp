#pragma once

// 8-bit PNG (libpng) and PPM/PGM (ASCII P2/P3, binary P5/P6) images,
// converted to C x H x W tensors in [0, 1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fcss/error.hpp"
#include "fcss/tensor.hpp"

namespace fcss::image {

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline uint8_t to_byte(double v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Skips whitespace and '#' comments in a PNM header.
inline void skip_pnm_space(std::istream& is) {
  for (;;) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c != EOF && std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& is, const std::string& path) {
  skip_pnm_space(is);
  int v = -1;
  if (!(is >> v) || v < 0) throw FormatError(path + ": malformed PNM header");
  return v;
}

template <typename T>
Tensor<T> read_pnm(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '2' && magic[1] != '3' && magic[1] != '5' && magic[1] != '6'))
    throw FormatError(p.string() + ": bad magic (expected P2, P3, P5 or P6)");
  const bool color = magic[1] == '3' || magic[1] == '6';
  const bool binary = magic[1] == '5' || magic[1] == '6';
  const int w = read_pnm_int(is, p.string()), h = read_pnm_int(is, p.string());
  const int maxval = read_pnm_int(is, p.string());
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw FormatError(p.string() + ": bad PNM dimensions");
  const int C = color ? 3 : 1;
  Tensor<T> t(C, h, w);
  if (binary) {
    is.get();  // single whitespace byte after maxval
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * C * bytes);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw FormatError(p.string() + ": truncated PNM data");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < C; ++c) {
          const std::size_t k = (static_cast<std::size_t>(y) * w + x) * C + c;
          const int v = bytes == 2 ? (buf[2 * k] << 8) | buf[2 * k + 1] : buf[k];
          t(c, y, x) = static_cast<T>(static_cast<double>(v) / maxval);
        }
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < C; ++c) t(c, y, x) = static_cast<T>(static_cast<double>(read_pnm_int(is, p.string())) / maxval);
  }
  return t;
}

template <typename T>
void write_pnm(const std::filesystem::path& p, const Tensor<T>& t) {
  const int C = t.channels();
  if (C != 1 && C != 3) throw ShapeError("PNM output needs 1 or 3 channels, got " + std::to_string(C));
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  os << (C == 3 ? "P6" : "P5") << '\n' << t.width() << ' ' << t.height() << "\n255\n";
  std::vector<uint8_t> buf;
  buf.reserve(t.size());
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x)
      for (int c = 0; c < C; ++c) buf.push_back(to_byte(t(c, y, x)));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: '" + p.string() + "'");
}

template <typename T>
Tensor<T> read_png(const std::filesystem::path& p) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, p.string().c_str()))
    throw FormatError(p.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int C = color ? 3 : 1;
  std::vector<uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError(p.string() + ": " + msg);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Tensor<T> t(C, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < C; ++c)
        t(c, y, x) = static_cast<T>(buf[(static_cast<std::size_t>(y) * w + x) * C + c] / 255.0);
  return t;
}

template <typename T>
void write_png(const std::filesystem::path& p, const Tensor<T>& t) {
  const int C = t.channels();
  if (C != 1 && C != 3) throw ShapeError("PNG output needs 1 or 3 channels, got " + std::to_string(C));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(t.width());
  img.height = static_cast<png_uint_32>(t.height());
  img.format = C == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<uint8_t> buf;
  buf.reserve(t.size());
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x)
      for (int c = 0; c < C; ++c) buf.push_back(to_byte(t(c, y, x)));
  if (!png_image_write_to_file(&img, p.string().c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write '" + p.string() + "': " + img.message);
}

}  // namespace detail

template <typename T>
Tensor<T> load(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw IoError("file not found: '" + p.string() + "'");
  const auto ext = detail::lower_extension(p);
  if (ext == ".png") return detail::read_png<T>(p);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return detail::read_pnm<T>(p);
  throw FormatError(p.string() + ": unsupported image type (use .png, .ppm or .pgm)");
}

template <typename T>
void save(const std::filesystem::path& p, const Tensor<T>& t) {
  const auto ext = detail::lower_extension(p);
  if (ext == ".png") return detail::write_png(p, t);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return detail::write_pnm(p, t);
  throw FormatError(p.string() + ": unsupported image type (use .png, .ppm or .pgm)");
}

}  // namespace fcss::image
