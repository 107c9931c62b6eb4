#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhex/binary_io.hpp"
#include "mhex/data.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"
#include "mhex/rng.hpp"

// Synthetic planted-feature datasets. Every sample is generated from its own
// counter-based stream (seed, index), so datasets are reproducible bit for bit
// and can be produced in any order.

namespace mhex {

enum class ShapeKind { square = 0, disk = 1, cross = 2, bar = 3 };

inline const char* shape_name(int label) {
  static const char* names[] = {"square", "disk", "cross", "bar"};
  return names[label % 4];
}

struct ShapeSample {
  Image image;
  int label = 0;
  std::vector<std::uint8_t> truth_mask;  // height x width
};

struct TokenSample {
  TokenSeq tokens;
  int label = 0;
  std::vector<std::uint8_t> truth_mask;  // one flag per position
};

struct ShapeOptions {
  std::size_t size = 32;
  std::size_t channels = 1;
  int n_class = 4;
};

struct TokenOptions {
  int n_class = 4;
  int keywords_per_class = 4;
  int planted = 2;
  std::size_t min_len = 11;
  std::size_t max_len = 20;
  std::size_t pad_to = 20;
};

namespace detail {

inline constexpr std::uint64_t kShapeStream = 0x53484150ULL << 32;  // "SHAP"
inline constexpr std::uint64_t kTokenStream = 0x544F4B4EULL << 32;  // "TOKN"

// Value noise: random lattice values with bilinear interpolation, plus a
// small per-pixel jitter. Never depends on the label.
inline Image make_background(CounterRng& rng, const ShapeOptions& opt) {
  constexpr std::size_t cells = 4;
  Image img{opt.channels, opt.size, opt.size, std::vector<double>(opt.channels * opt.size * opt.size)};
  for (std::size_t c = 0; c < opt.channels; ++c) {
    double lattice[cells + 1][cells + 1];
    for (auto& row : lattice)
      for (auto& v : row) v = rng.uniform(0.0, 0.45);
    for (std::size_t y = 0; y < opt.size; ++y)
      for (std::size_t x = 0; x < opt.size; ++x) {
        const double fy = static_cast<double>(y) * cells / static_cast<double>(opt.size - 1);
        const double fx = static_cast<double>(x) * cells / static_cast<double>(opt.size - 1);
        const std::size_t iy = std::min<std::size_t>(static_cast<std::size_t>(fy), cells - 1);
        const std::size_t ix = std::min<std::size_t>(static_cast<std::size_t>(fx), cells - 1);
        const double ty = fy - static_cast<double>(iy), tx = fx - static_cast<double>(ix);
        const double top = lattice[iy][ix] * (1 - tx) + lattice[iy][ix + 1] * tx;
        const double bot = lattice[iy + 1][ix] * (1 - tx) + lattice[iy + 1][ix + 1] * tx;
        img.at(c, y, x) = std::clamp(top * (1 - ty) + bot * ty + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      }
  }
  return img;
}

inline std::vector<std::uint8_t> make_shape_mask(CounterRng& rng, int kind, std::size_t size) {
  std::vector<std::uint8_t> mask(size * size, 0);
  const int n = static_cast<int>(size);
  auto set = [&](int y, int x) {
    if (y >= 0 && y < n && x >= 0 && x < n) mask[static_cast<std::size_t>(y * n + x)] = 1;
  };
  switch (static_cast<ShapeKind>(kind)) {
    case ShapeKind::square: {
      const int s = rng.range(7, 13);
      const int y0 = rng.range(1, n - s - 1), x0 = rng.range(1, n - s - 1);
      for (int y = y0; y < y0 + s; ++y)
        for (int x = x0; x < x0 + s; ++x) set(y, x);
      break;
    }
    case ShapeKind::disk: {
      const double r = rng.uniform(4.0, 7.0);
      const int ri = static_cast<int>(std::ceil(r));
      const int cy = rng.range(ri + 1, n - ri - 2), cx = rng.range(ri + 1, n - ri - 2);
      for (int y = cy - ri; y <= cy + ri; ++y)
        for (int x = cx - ri; x <= cx + ri; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) set(y, x);
      break;
    }
    case ShapeKind::cross: {
      const int half = rng.range(5, 8);
      const int w = rng.range(3, 5);
      const int cy = rng.range(half + 1, n - half - 2), cx = rng.range(half + 1, n - half - 2);
      const int lo = -(w / 2), hi = lo + w - 1;
      for (int d = -half; d <= half; ++d)
        for (int t = lo; t <= hi; ++t) {
          set(cy + d, cx + t);
          set(cy + t, cx + d);
        }
      break;
    }
    case ShapeKind::bar: {
      const int len = rng.range(15, 24), w = rng.range(3, 4);
      const bool vertical = rng.below(2) == 1;
      const int a0 = rng.range(1, n - len - 1), b0 = rng.range(1, n - w - 1);
      for (int a = a0; a < a0 + len; ++a)
        for (int b = b0; b < b0 + w; ++b) vertical ? set(a, b) : set(b, a);
      break;
    }
  }
  return mask;
}

}  // namespace detail

/// Label-independent background for sample `index`; the image of the same
/// sample equals this background outside its truth mask.
inline Image shape_background(std::uint64_t seed, std::size_t index, const ShapeOptions& opt = {}) {
  CounterRng rng(seed, detail::kShapeStream + index);
  return detail::make_background(rng, opt);
}

inline ShapeSample gen_shape(std::uint64_t seed, std::size_t index, const ShapeOptions& opt = {}) {
  CounterRng rng(seed, detail::kShapeStream + index);
  ShapeSample s;
  s.image = detail::make_background(rng, opt);
  s.label = static_cast<int>(index % static_cast<std::size_t>(opt.n_class));
  s.truth_mask = detail::make_shape_mask(rng, s.label % 4, opt.size);
  const double base = rng.uniform(0.7, 0.95);
  for (std::size_t p = 0; p < s.truth_mask.size(); ++p) {
    if (!s.truth_mask[p]) continue;
    for (std::size_t c = 0; c < opt.channels; ++c)
      s.image.pixels[c * s.image.plane() + p] = std::clamp(base + rng.uniform(-0.05, 0.05), 0.0, 1.0);
  }
  return s;
}

/// n samples with labels cycling through the classes (counts differ by <= 1).
inline std::vector<ShapeSample> gen_shapes(std::size_t n, std::uint64_t seed, const ShapeOptions& opt = {}) {
  if (n == 0) throw ContractError("gen_shapes: n must be >= 1");
  if (opt.n_class < 2 || opt.n_class > 4) throw ConfigError("gen_shapes: between 2 and 4 shape classes");
  if (opt.size < 24) throw ConfigError("gen_shapes: image size must be at least 24");
  std::vector<ShapeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_shape(seed, i, opt));
  return out;
}

inline int keyword_id(const TokenOptions& opt, int cls, int j) { return 2 + cls * opt.keywords_per_class + j; }

inline int first_filler_id(const TokenOptions& opt) { return 2 + opt.n_class * opt.keywords_per_class; }

/// Ids 0 ([MASK]) and 1 ([PAD]) are reserved, keywords follow, then filler.
inline std::vector<TokenSample> gen_tokens(std::size_t n, std::size_t vocab_size, std::uint64_t seed,
                                           const TokenOptions& opt = {}) {
  if (n == 0) throw ContractError("gen_tokens: n must be >= 1");
  if (opt.n_class < 2 || opt.keywords_per_class < 1 || opt.planted < 1)
    throw ConfigError("gen_tokens: need >= 2 classes, >= 1 keyword per class, >= 1 planted keyword");
  if (vocab_size <= static_cast<std::size_t>(first_filler_id(opt)))
    throw ConfigError("gen_tokens: vocab of " + std::to_string(vocab_size) + " cannot hold " +
                      std::to_string(opt.n_class * opt.keywords_per_class) + " keywords, 2 specials and filler");
  if (opt.min_len < static_cast<std::size_t>(opt.planted) || opt.min_len > opt.max_len || opt.max_len > opt.pad_to)
    throw ConfigError("gen_tokens: require planted <= min_len <= max_len <= pad_to");
  const int filler0 = first_filler_id(opt);
  const auto filler_count = static_cast<std::uint64_t>(vocab_size) - static_cast<std::uint64_t>(filler0);
  std::vector<TokenSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(seed, detail::kTokenStream + i);
    TokenSample s;
    s.label = static_cast<int>(i % static_cast<std::size_t>(opt.n_class));
    const std::size_t len = opt.min_len + rng.below(opt.max_len - opt.min_len + 1);
    s.tokens.ids.assign(opt.pad_to, kPadToken);
    s.truth_mask.assign(opt.pad_to, 0);
    for (std::size_t j = 0; j < len; ++j) s.tokens.ids[j] = filler0 + static_cast<int>(rng.below(filler_count));
    // Planted positions: partial Fisher-Yates over [0, len).
    std::vector<std::size_t> pos(len);
    for (std::size_t j = 0; j < len; ++j) pos[j] = j;
    for (int k = 0; k < opt.planted; ++k) {
      const std::size_t pick = static_cast<std::size_t>(k) + rng.below(len - static_cast<std::size_t>(k));
      std::swap(pos[static_cast<std::size_t>(k)], pos[pick]);
      const std::size_t at = pos[static_cast<std::size_t>(k)];
      s.tokens.ids[at] = keyword_id(opt, s.label, static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.keywords_per_class))));
      s.truth_mask[at] = 1;
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Example> to_examples(std::span<const ShapeSample> samples) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.image, s.label});
  return out;
}

inline std::vector<Example> to_examples(std::span<const TokenSample> samples) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.tokens, s.label});
  return out;
}

/// Non-pad positions of a token sample, in order.
inline std::vector<std::size_t> valid_positions(const TokenSeq& seq) {
  std::vector<std::size_t> v;
  for (std::size_t j = 0; j < seq.ids.size(); ++j)
    if (seq.ids[j] != kPadToken) v.push_back(j);
  return v;
}

/// Mean saliency inside the mask over (inside + outside + 1e-12).
inline double localization_score(std::span<const double> saliency, std::span<const std::uint8_t> truth_mask) {
  if (saliency.size() != truth_mask.size())
    throw DimensionError("localization_score: saliency has " + std::to_string(saliency.size()) + " cells, mask " +
                         std::to_string(truth_mask.size()));
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < saliency.size(); ++i) {
    if (truth_mask[i]) {
      in += saliency[i];
      ++n_in;
    } else {
      out += saliency[i];
      ++n_out;
    }
  }
  if (n_in == 0) throw ContractError("localization_score: empty truth mask");
  const double mean_in = in / static_cast<double>(n_in);
  const double mean_out = n_out ? out / static_cast<double>(n_out) : 0.0;
  return mean_in / (mean_in + mean_out + 1e-12);
}

// ------------------------------------------------------------------ export

inline constexpr char kDatasetMagic[8] = {'M', 'H', 'E', 'X', 'D', 'A', 'T', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Layout: magic, u32 version, u32 kind (0 shapes), u64 count, u64 channels,
/// u64 height, u64 width; per sample i32 label (as u32), f64 pixels, u8 mask.
inline void write_shapes(const std::string& path, std::span<const ShapeSample> samples) {
  if (samples.empty()) throw ContractError("write_shapes: no samples");
  detail::ByteWriter w;
  w.bytes(std::string(kDatasetMagic, 8));
  w.u32(kDatasetVersion);
  w.u32(0);
  w.u64(samples.size());
  const Image& first = samples.front().image;
  w.u64(first.channels);
  w.u64(first.height);
  w.u64(first.width);
  for (const auto& s : samples) {
    w.u32(static_cast<std::uint32_t>(s.label));
    for (double v : s.image.pixels) w.f64(v);
    w.bytes(std::string(s.truth_mask.begin(), s.truth_mask.end()));
  }
  detail::write_file(path, w.str());
}

/// Same header with kind 1 and u64 sequence length; per sample i32 label,
/// i32 ids, u8 mask.
inline void write_tokens(const std::string& path, std::span<const TokenSample> samples) {
  if (samples.empty()) throw ContractError("write_tokens: no samples");
  detail::ByteWriter w;
  w.bytes(std::string(kDatasetMagic, 8));
  w.u32(kDatasetVersion);
  w.u32(1);
  w.u64(samples.size());
  w.u64(samples.front().tokens.ids.size());
  for (const auto& s : samples) {
    if (s.tokens.ids.size() != samples.front().tokens.ids.size())
      throw DimensionError("write_tokens: sequences must share one padded length");
    w.u32(static_cast<std::uint32_t>(s.label));
    for (int id : s.tokens.ids) w.u32(static_cast<std::uint32_t>(id));
    w.bytes(std::string(s.truth_mask.begin(), s.truth_mask.end()));
  }
  detail::write_file(path, w.str());
}

namespace detail {
inline std::uint32_t read_dataset_header(ByteReader& r) {
  if (r.bytes(8) != std::string(kDatasetMagic, 8)) throw FormatError("not an MHEX dataset (bad magic)");
  const auto version = r.u32();
  if (version != kDatasetVersion) throw VersionError("dataset version " + std::to_string(version));
  return r.u32();
}
}  // namespace detail

inline std::vector<ShapeSample> read_shapes(const std::string& path) {
  detail::ByteReader r(detail::read_file(path));
  if (detail::read_dataset_header(r) != 0) throw FormatError("'" + path + "' is not a shapes dataset");
  const auto n = r.u64();
  const auto c = r.u64(), h = r.u64(), w = r.u64();
  std::vector<ShapeSample> out(n);
  for (auto& s : out) {
    s.label = static_cast<int>(r.u32());
    s.image = Image{c, h, w, std::vector<double>(c * h * w)};
    for (auto& v : s.image.pixels) v = r.f64();
    const std::string m = r.bytes(h * w);
    s.truth_mask.assign(m.begin(), m.end());
  }
  return out;
}

inline std::vector<TokenSample> read_tokens(const std::string& path) {
  detail::ByteReader r(detail::read_file(path));
  if (detail::read_dataset_header(r) != 1) throw FormatError("'" + path + "' is not a token dataset");
  const auto n = r.u64();
  const auto len = r.u64();
  std::vector<TokenSample> out(n);
  for (auto& s : out) {
    s.label = static_cast<int>(r.u32());
    s.tokens.ids.resize(len);
    for (auto& id : s.tokens.ids) id = static_cast<int>(r.u32());
    const std::string m = r.bytes(len);
    s.truth_mask.assign(m.begin(), m.end());
  }
  return out;
}

}  // namespace mhex
