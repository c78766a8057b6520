#pragma once

// Binary file formats (all little-endian):
//
//   tensor   "FCST" u32 version u32 dtype u32 rank u32 dims[rank] data
//   pyramid  "FCSP" u32 version u32 K { u32 stride, tensor }[K]
//   flow     "FCFL" u32 version u32 dtype u32 H u32 W dx[H*W] dy[H*W]
//            validity bitmap (ceil(H*W/8) bytes, row-major, LSB first)
//   model    "FCSS" u32 version u32 dtype, config echo, backbone weights,
//            sampling patterns (see write_model)
//
// dtype is 1 for float32 and 2 for float64. Readers convert between dtypes;
// same-dtype round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fcss/backbone.hpp"
#include "fcss/css.hpp"
#include "fcss/descriptor.hpp"
#include "fcss/error.hpp"
#include "fcss/evalkit.hpp"
#include "fcss/matching.hpp"
#include "fcss/rect.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

inline constexpr uint32_t kTensorFileVersion = 1;
inline constexpr uint32_t kPyramidFileVersion = 1;
inline constexpr uint32_t kFlowFileVersion = 1;
inline constexpr uint32_t kModelFileVersion = 1;

enum class DType : uint32_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <typename U>
void put(std::ostream& os, U v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError("truncated file");
  return byteswap_if_big(v);
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4] = {};
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
    throw FormatError(std::string("bad magic (expected \"") + magic + "\")");
}

inline void expect_version(std::istream& is, uint32_t expected, const char* what) {
  const auto v = get<uint32_t>(is);
  if (v != expected)
    throw FormatError(std::string(what) + " version " + std::to_string(v) + " unsupported (expected " +
                      std::to_string(expected) + ")");
}

inline DType read_dtype(std::istream& is) {
  const auto d = get<uint32_t>(is);
  if (d != 1 && d != 2) throw FormatError("unknown dtype tag " + std::to_string(d));
  return static_cast<DType>(d);
}

template <typename T>
void put_reals(std::ostream& os, const T* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) put(os, data[i]);
}

template <typename T>
void get_reals(std::istream& is, DType dt, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    out[i] = dt == DType::f32 ? static_cast<T>(get<float>(is)) : static_cast<T>(get<double>(is));
}

template <typename T>
T get_real(std::istream& is, DType dt) {
  T v;
  get_reals(is, dt, &v, 1);
  return v;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw IoError("file not found: '" + p.string() + "'");
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  return is;
}

template <typename Fn>
auto with_path(const std::filesystem::path& p, Fn&& fn) {
  try {
    return fn();
  } catch (const FormatError& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace detail

// ---- tensors ---------------------------------------------------------------

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  detail::put_magic(os, "FCST");
  detail::put(os, kTensorFileVersion);
  detail::put(os, static_cast<uint32_t>(dtype_of<T>()));
  detail::put(os, uint32_t{3});
  detail::put(os, static_cast<uint32_t>(t.channels()));
  detail::put(os, static_cast<uint32_t>(t.height()));
  detail::put(os, static_cast<uint32_t>(t.width()));
  detail::put_reals(os, t.data().data(), t.size());
  if (!os) throw IoError("write failed");
}

// Rank 1 and 2 tensors are read as 1 x 1 x W and 1 x H x W.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  detail::expect_magic(is, "FCST");
  detail::expect_version(is, kTensorFileVersion, "tensor file");
  const DType dt = detail::read_dtype(is);
  const auto rank = detail::get<uint32_t>(is);
  if (rank < 1 || rank > 3) throw FormatError("tensor rank " + std::to_string(rank) + " unsupported");
  uint32_t dims[3] = {1, 1, 1};
  for (uint32_t r = 0; r < rank; ++r) dims[3 - rank + r] = detail::get<uint32_t>(is);
  constexpr uint32_t kMaxDim = 1u << 20;
  for (auto d : dims)
    if (d > kMaxDim) throw FormatError("tensor dimension too large");
  Tensor<T> t(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  detail::get_reals(is, dt, t.data().data(), t.size());
  return t;
}

template <typename T>
void save_tensor(const std::filesystem::path& p, const Tensor<T>& t) {
  auto os = detail::open_out(p);
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return detail::with_path(p, [&] { return read_tensor<T>(is); });
}

// ---- pyramids --------------------------------------------------------------

template <typename T>
void write_pyramid(std::ostream& os, const FeaturePyramid<T>& pyr) {
  pyr.validate();
  detail::put_magic(os, "FCSP");
  detail::put(os, kPyramidFileVersion);
  detail::put(os, static_cast<uint32_t>(pyr.levels.size()));
  for (const auto& lvl : pyr.levels) {
    detail::put(os, static_cast<uint32_t>(lvl.stride));
    write_tensor(os, lvl.activation);
  }
}

template <typename T>
FeaturePyramid<T> read_pyramid(std::istream& is) {
  detail::expect_magic(is, "FCSP");
  detail::expect_version(is, kPyramidFileVersion, "pyramid file");
  const auto k = detail::get<uint32_t>(is);
  if (k < 1 || k > 64) throw FormatError("pyramid level count " + std::to_string(k) + " out of range");
  FeaturePyramid<T> pyr;
  for (uint32_t i = 0; i < k; ++i) {
    const auto stride = detail::get<uint32_t>(is);
    if (stride < 1 || stride > (1u << 16)) throw FormatError("pyramid stride out of range");
    pyr.levels.push_back({read_tensor<T>(is), static_cast<int>(stride)});
  }
  pyr.validate();
  return pyr;
}

template <typename T>
void save_pyramid(const std::filesystem::path& p, const FeaturePyramid<T>& pyr) {
  auto os = detail::open_out(p);
  write_pyramid(os, pyr);
}

// Loads externally computed taps. The result is marked frozen: there are no
// backbone parameters behind it.
template <typename T>
FeaturePyramid<T> inject_pyramid(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  auto pyr = detail::with_path(p, [&] { return read_pyramid<T>(is); });
  pyr.frozen = true;
  return pyr;
}

// ---- flows -----------------------------------------------------------------

template <typename T>
void write_flow(std::ostream& os, const FlowField<T>& f) {
  detail::put_magic(os, "FCFL");
  detail::put(os, kFlowFileVersion);
  detail::put(os, static_cast<uint32_t>(dtype_of<T>()));
  detail::put(os, static_cast<uint32_t>(f.height()));
  detail::put(os, static_cast<uint32_t>(f.width()));
  detail::put_reals(os, f.flow.data().data(), f.flow.size());
  std::vector<uint8_t> bits((f.valid.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < f.valid.size(); ++i)
    if (f.valid[i]) bits[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
  os.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (!os) throw IoError("write failed");
}

template <typename T>
FlowField<T> read_flow(std::istream& is) {
  detail::expect_magic(is, "FCFL");
  detail::expect_version(is, kFlowFileVersion, "flow file");
  const DType dt = detail::read_dtype(is);
  const auto h = detail::get<uint32_t>(is), w = detail::get<uint32_t>(is);
  if (h < 1 || w < 1 || h > (1u << 16) || w > (1u << 16)) throw FormatError("flow dimensions out of range");
  FlowField<T> f(static_cast<int>(h), static_cast<int>(w));
  detail::get_reals(is, dt, f.flow.data().data(), f.flow.size());
  std::vector<uint8_t> bits((f.valid.size() + 7) / 8, 0);
  if (!is.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size())))
    throw FormatError("truncated file");
  for (std::size_t i = 0; i < f.valid.size(); ++i) f.valid[i] = (bits[i / 8] >> (i % 8)) & 1u;
  return f;
}

template <typename T>
void save_flow(const std::filesystem::path& p, const FlowField<T>& f) {
  auto os = detail::open_out(p);
  write_flow(os, f);
}

template <typename T>
FlowField<T> load_flow(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return detail::with_path(p, [&] { return read_flow<T>(is); });
}

// ---- models ----------------------------------------------------------------

// Layout after the header: u32 K, u32 patterns_per_level, u32 L_k[K],
// i32 pool_radius, f64 pattern_radius, f64 initial_bandwidth, u32 shift_mode,
// u32 in_channels, {u32 num_convs, channels, kernel, downsample}[K], then for
// each conv layer in stage order its weights and biases, then for each level
// its log-bandwidth followed by (s.x, s.y, t.x, t.y) per pattern.
template <typename T>
void write_model(std::ostream& os, const Model<T>& m) {
  m.validate();
  using detail::put;
  detail::put_magic(os, "FCSS");
  put(os, kModelFileVersion);
  put(os, static_cast<uint32_t>(dtype_of<T>()));
  put(os, static_cast<uint32_t>(m.levels()));
  put(os, static_cast<uint32_t>(m.css.patterns_per_level));
  for (const auto& lvl : m.patterns.levels) put(os, static_cast<uint32_t>(lvl.size()));
  put(os, static_cast<int32_t>(m.css.pool_radius));
  put(os, m.css.pattern_radius);
  put(os, m.css.initial_bandwidth);
  put(os, static_cast<uint32_t>(m.css.shift_mode == ShiftMode::bilinear ? 0 : 1));
  put(os, static_cast<uint32_t>(m.backbone_config.in_channels));
  for (const auto& st : m.backbone_config.stages) {
    put(os, static_cast<uint32_t>(st.num_convs));
    put(os, static_cast<uint32_t>(st.channels));
    put(os, static_cast<uint32_t>(st.kernel));
    put(os, static_cast<uint32_t>(st.downsample));
  }
  for (const auto& stage : m.backbone.stages)
    for (const auto& layer : stage) {
      detail::put_reals(os, layer.weights.data(), layer.weights.size());
      detail::put_reals(os, layer.bias.data(), layer.bias.size());
    }
  for (const auto& lvl : m.patterns.levels) {
    put(os, lvl.log_bandwidth);
    for (int l = 0; l < lvl.size(); ++l) {
      put(os, lvl.s[l].x);
      put(os, lvl.s[l].y);
      put(os, lvl.t[l].x);
      put(os, lvl.t[l].y);
    }
  }
  if (!os) throw IoError("write failed");
}

template <typename T>
Model<T> read_model(std::istream& is) {
  using detail::get;
  detail::expect_magic(is, "FCSS");
  detail::expect_version(is, kModelFileVersion, "model file");
  const DType dt = detail::read_dtype(is);
  Model<T> m;
  const auto K = get<uint32_t>(is);
  if (K < 1 || K > 64) throw FormatError("model level count out of range");
  m.css.patterns_per_level = static_cast<int>(get<uint32_t>(is));
  std::vector<uint32_t> lk(K);
  for (auto& v : lk) {
    v = get<uint32_t>(is);
    if (v < 1 || v > (1u << 16)) throw FormatError("pattern count out of range");
  }
  m.css.pool_radius = get<int32_t>(is);
  m.css.pattern_radius = get<double>(is);
  m.css.initial_bandwidth = get<double>(is);
  const auto mode = get<uint32_t>(is);
  if (mode > 1) throw FormatError("unknown shift mode tag");
  m.css.shift_mode = mode == 0 ? ShiftMode::bilinear : ShiftMode::nearest;
  m.backbone_config.in_channels = static_cast<int>(get<uint32_t>(is));
  for (uint32_t k = 0; k < K; ++k) {
    StageSpec st;
    st.num_convs = static_cast<int>(get<uint32_t>(is));
    st.channels = static_cast<int>(get<uint32_t>(is));
    st.kernel = static_cast<int>(get<uint32_t>(is));
    st.downsample = static_cast<int>(get<uint32_t>(is));
    if (st.num_convs > 64 || st.channels > 4096 || st.kernel > 63)
      throw FormatError("backbone stage description out of range");
    m.backbone_config.stages.push_back(st);
  }
  try {
    m.backbone_config.validate();
    m.css.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  }
  int in_c = m.backbone_config.in_channels;
  for (const auto& st : m.backbone_config.stages) {
    auto& stage = m.backbone.stages.emplace_back();
    for (int l = 0; l < st.num_convs; ++l) {
      ConvParams<T> layer(st.channels, in_c, st.kernel, st.kernel);
      detail::get_reals(is, dt, layer.weights.data(), layer.weights.size());
      detail::get_reals(is, dt, layer.bias.data(), layer.bias.size());
      stage.push_back(std::move(layer));
      in_c = st.channels;
    }
  }
  for (uint32_t k = 0; k < K; ++k) {
    auto& lvl = m.patterns.levels.emplace_back();
    lvl.log_bandwidth = detail::get_real<T>(is, dt);
    lvl.s.resize(lk[k]);
    lvl.t.resize(lk[k]);
    for (uint32_t l = 0; l < lk[k]; ++l) {
      lvl.s[l].x = detail::get_real<T>(is, dt);
      lvl.s[l].y = detail::get_real<T>(is, dt);
      lvl.t[l].x = detail::get_real<T>(is, dt);
      lvl.t[l].y = detail::get_real<T>(is, dt);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after model data");
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model: ") + e.what());
  }
  return m;
}

template <typename T>
void save_model(const std::filesystem::path& p, const Model<T>& m) {
  auto os = detail::open_out(p);
  write_model(os, m);
}

template <typename T>
Model<T> load_model(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return detail::with_path(p, [&] { return read_model<T>(is); });
}

// ---- text formats ----------------------------------------------------------

// "x,y,w,h"
inline Rect parse_rect(const std::string& s) {
  Rect r;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(s);
  if (!(in >> r.x >> c1 >> r.y >> c2 >> r.w >> c3 >> r.h) || c1 != ',' || c2 != ',' || c3 != ',' ||
      (in >> std::ws, !in.eof()))
    throw FormatError("bad bounding box '" + s + "' (expected x,y,w,h)");
  if (r.empty()) throw FormatError("empty bounding box '" + s + "'");
  return r;
}

struct ManifestEntry {
  std::filesystem::path source;
  std::filesystem::path target;
  Rect source_bbox;
  Rect target_bbox;
};

// One pair per line: "<source> <target> x,y,w,h x,y,w,h". Blank lines and
// '#' comments are skipped. Relative paths resolve against base_dir.
inline std::vector<ManifestEntry> parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string src, tgt, ba, bb, extra;
    if (!(ls >> src >> tgt >> ba >> bb) || (ls >> extra))
      throw FormatError("manifest line " + std::to_string(lineno) +
                        ": expected '<source> <target> x,y,w,h x,y,w,h'");
    ManifestEntry e;
    try {
      e.source_bbox = parse_rect(ba);
      e.target_bbox = parse_rect(bb);
    } catch (const FormatError& err) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + err.what());
    }
    e.source = std::filesystem::path(src).is_absolute() ? std::filesystem::path(src) : base_dir / src;
    e.target = std::filesystem::path(tgt).is_absolute() ? std::filesystem::path(tgt) : base_dir / tgt;
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return parse_manifest(is, p.parent_path());
}

// One "x y" pair per line.
inline std::vector<Point> parse_keypoints(std::istream& in) {
  std::vector<Point> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Point p;
    std::string extra;
    if (!(ls >> p.x >> p.y) || (ls >> extra))
      throw FormatError("keypoint line " + std::to_string(lineno) + ": expected 'x y'");
    pts.push_back(p);
  }
  return pts;
}

inline std::vector<Point> load_keypoints(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return detail::with_path(p, [&] { return parse_keypoints(is); });
}

inline void save_keypoints(const std::filesystem::path& p, const std::vector<Point>& pts) {
  auto os = detail::open_out(p);
  os.precision(17);
  for (const auto& pt : pts) os << pt.x << ' ' << pt.y << '\n';
}

}  // namespace fcss
