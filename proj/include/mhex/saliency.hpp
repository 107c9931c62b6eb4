#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mhex/data.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"
#include "mhex/mhex_block.hpp"
#include "mhex/ops.hpp"
#include "mhex/tensor.hpp"

namespace mhex {

/// Dense row-major matrix of plain values (no graph).
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), data(std::move(v)) {
    if (data.size() != r * c) throw DimensionError("Matrix: value count does not match extents");
  }
  static Matrix from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw DimensionError("Matrix::from_tensor expects rank 2, got " + shape_str(t.shape()));
    return Matrix(t.dim(0), t.dim(1), t.values());
  }

  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// Row-major H x W grid of scores.
struct Grid {
  std::size_t h = 0, w = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(std::size_t hh, std::size_t ww, double fill = 0.0) : h(hh), w(ww), v(hh * ww, fill) {}
  double operator()(std::size_t y, std::size_t x) const { return v[y * w + x]; }
  double& operator()(std::size_t y, std::size_t x) { return v[y * w + x]; }
};

struct WeightFilterConfig {
  double neg_mix = 0.25;                // alpha for negative weights
  std::optional<double> ss_threshold;   // nullopt: 1 / n_class + 0.2
  double eps = 1e-8;
  double layer_decay = 0.9;
  std::size_t layers = 3;               // token hosts: first L sites

  double threshold_for(std::size_t n_class) const {
    return ss_threshold ? *ss_threshold : 1.0 / static_cast<double>(n_class) + 0.2;
  }

  void validate() const {
    if (!(neg_mix >= 0.0 && neg_mix <= 1.0)) throw ConfigError("neg_mix alpha must lie in [0, 1]");
    if (ss_threshold && !(*ss_threshold >= 0.0 && *ss_threshold <= 1.0))
      throw ConfigError("ss_threshold must lie in [0, 1]");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("layer_decay must lie in (0, 1]");
    if (layers == 0) throw ConfigError("saliency layer count L must be >= 1");
  }
};

struct SaliencyMap {
  int class_id = 0;
  Grid normalized;          // in [0, 1]
  Grid raw;                 // weighted sum before normalization
  std::vector<Grid> layers; // per-site raw CAMs, shallow to deep, native resolution
};

struct TokenSaliency {
  int class_id = 0;
  std::vector<double> scores;               // one per non-pad token
  std::vector<std::vector<double>> layers;  // S^(l,c), l = 1..L

  std::vector<double> normalized() const;
};

// ------------------------------------------------------------------ weight filtering

inline std::pair<std::vector<double>, std::vector<double>> split_weights(std::span<const double> w) {
  std::vector<double> pos(w.size()), neg(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    pos[i] = std::max(w[i], 0.0);
    neg[i] = std::min(w[i], 0.0);
  }
  return {pos, neg};
}

/// w_pos + alpha * w_neg
inline std::vector<double> adjust_weights(std::span<const double> w, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("adjust_weights: alpha must lie in [0, 1]");
  auto [pos, neg] = split_weights(w);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] += alpha * neg[i];
  return pos;
}

struct Sharpness {
  Matrix pos, neg;
};

/// Column-normalized class specificity of each feature, separately for the
/// positive and the negative parts of W_equiv.
inline Sharpness salience_sharpness(const Matrix& w_equiv, double eps = 1e-8) {
  if (!(eps > 0.0)) throw ConfigError("salience_sharpness: eps must be positive");
  const std::size_t n = w_equiv.rows, c = w_equiv.cols;
  Sharpness s{Matrix(n, c), Matrix(n, c)};
  for (std::size_t j = 0; j < c; ++j) {
    double sum_pos = 0.0, sum_neg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_pos += std::max(w_equiv(i, j), 0.0);
      sum_neg += std::abs(std::min(w_equiv(i, j), 0.0));
    }
    for (std::size_t i = 0; i < n; ++i) {
      s.pos(i, j) = std::max(w_equiv(i, j), 0.0) / (sum_pos + eps);
      s.neg(i, j) = std::abs(std::min(w_equiv(i, j), 0.0)) / (sum_neg + eps);
    }
  }
  return s;
}

/// Positive weights survive where SS_pos > ss, negative ones (scaled by
/// alpha) where SS_neg > ss. Sharpness is measured on the unfiltered matrix.
inline Matrix final_weights(const Matrix& w_equiv, const WeightFilterConfig& cfg) {
  cfg.validate();
  const double ss = cfg.threshold_for(w_equiv.rows);
  const Sharpness sharp = salience_sharpness(w_equiv, cfg.eps);
  Matrix out(w_equiv.rows, w_equiv.cols);
  for (std::size_t i = 0; i < w_equiv.rows; ++i)
    for (std::size_t j = 0; j < w_equiv.cols; ++j) {
      const double w = w_equiv(i, j);
      if (w > 0.0 && sharp.pos(i, j) > ss) out(i, j) = w;
      if (w < 0.0 && sharp.neg(i, j) > ss) out(i, j) = cfg.neg_mix * w;
    }
  return out;
}

// ------------------------------------------------------------------ CAM kernels

/// Per-position weighted channel sum over a C x H x W feature block.
inline Grid cam_layer(std::span<const double> weights, std::span<const double> features, std::size_t c,
                      std::size_t h, std::size_t w) {
  if (weights.size() != c)
    throw DimensionError("cam_layer: " + std::to_string(weights.size()) + " weights for " + std::to_string(c) +
                         " channels");
  if (features.size() != c * h * w) throw DimensionError("cam_layer: feature block size mismatch");
  Grid g(h, w);
  const std::size_t plane = h * w;
  for (std::size_t k = 0; k < c; ++k) {
    const double wk = weights[k];
    if (wk == 0.0) continue;
    const double* f = features.data() + k * plane;
    for (std::size_t p = 0; p < plane; ++p) g.v[p] += wk * f[p];
  }
  return g;
}

inline Grid cam_layer(std::span<const double> weights, const Tensor& features) {
  if (features.rank() != 3) throw DimensionError("cam_layer expects C x H x W features, got " + shape_str(features.shape()));
  return cam_layer(weights, features.data(), features.dim(0), features.dim(1), features.dim(2));
}

inline Grid resize_nearest(const Grid& g, std::size_t h, std::size_t w) {
  if (g.h == h && g.w == w) return g;
  Grid out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out(y, x) = g(y * g.h / h, x * g.w / w);
  return out;
}

/// Min-max scaling to [0, 1]; a constant grid maps to all zeros.
inline Grid normalize(const Grid& g) {
  Grid out(g.h, g.w);
  if (g.v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(g.v.begin(), g.v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < g.v.size(); ++i) out.v[i] = (g.v[i] - *lo) / range;
  return out;
}

/// Sum_l decay^l grid_l with l = 1 at the first (shallowest) grid; grids are
/// brought to the finest resolution by nearest neighbour first.
inline Grid weighted_layer_sum(std::span<const Grid> grids, double layer_decay) {
  if (grids.empty()) throw ContractError("weighted_layer_sum: no layers");
  std::size_t h = 0, w = 0;
  for (const auto& g : grids)
    if (g.h * g.w > h * w) {
      h = g.h;
      w = g.w;
    }
  Grid out(h, w);
  double weight = 1.0;
  for (const auto& g : grids) {
    weight *= layer_decay;
    const Grid r = resize_nearest(g, h, w);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += weight * r.v[i];
  }
  return out;
}

inline SaliencyMap aggregate_cams(std::vector<Grid> layers, double layer_decay, int class_id = 0) {
  if (layers.empty()) throw ContractError("aggregate_cams: no layer CAMs");
  SaliencyMap m;
  m.class_id = class_id;
  m.raw = weighted_layer_sum(layers, layer_decay);
  m.normalized = normalize(m.raw);
  m.layers = std::move(layers);
  return m;
}

inline std::vector<double> TokenSaliency::normalized() const {
  Grid g(1, scores.size());
  g.v = scores;
  return normalize(g).v;
}

/// S^(c)(j) = sum_{l=1..L} decay^l sum_k w_final[c,k] A^(l)(j,k). Each
/// activation block is D x 1 x T, so the per-layer score is the same kernel
/// as an image CAM over a 1 x T grid.
inline TokenSaliency token_saliency(std::span<const Matrix> w_equiv, std::span<const Tensor> activations, int class_id,
                                    const WeightFilterConfig& cfg) {
  cfg.validate();
  if (w_equiv.size() != activations.size()) throw DimensionError("token_saliency: one W_equiv per layer required");
  if (cfg.layers > w_equiv.size())
    throw ConfigError("token_saliency: L = " + std::to_string(cfg.layers) + " exceeds " +
                      std::to_string(w_equiv.size()) + " MHEX sites");
  TokenSaliency ts;
  ts.class_id = class_id;
  std::vector<Grid> grids;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const Matrix wf = final_weights(w_equiv[l], cfg);
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= wf.rows) throw IndexError("token_saliency: class out of range");
    grids.push_back(cam_layer(wf.row(static_cast<std::size_t>(class_id)), activations[l]));
    ts.layers.push_back(grids.back().v);
  }
  ts.scores = weighted_layer_sum(grids, cfg.layer_decay).v;
  return ts;
}

// ------------------------------------------------------------------ model-level pipelines

inline Matrix site_equivalent_matrix(const Model& model, std::size_t site) {
  return Matrix::from_tensor(equivalent_matrix(model.site_params(site)).detach());
}

/// Multi-layer CAM for one class from a recorded forward pass, scaled to the
/// input resolution.
inline SaliencyMap explain_image(const Model& model, const ForwardRecord& rec, int class_id,
                                 const WeightFilterConfig& cfg) {
  cfg.validate();
  if (rec.sites.empty()) throw ContractError("explain_image: model has no MHEX sites");
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= model.n_class()) throw IndexError("explain_image: class out of range");
  std::vector<Grid> layers;
  for (std::size_t s = 0; s < rec.sites.size(); ++s) {
    const Matrix wf = final_weights(site_equivalent_matrix(model, s), cfg);
    layers.push_back(cam_layer(wf.row(static_cast<std::size_t>(class_id)), rec.sites[s].relu_features()));
  }
  SaliencyMap m = aggregate_cams(std::move(layers), cfg.layer_decay, class_id);
  m.raw = resize_nearest(m.raw, rec.input_h, rec.input_w);
  m.normalized = resize_nearest(m.normalized, rec.input_h, rec.input_w);
  return m;
}

inline TokenSaliency explain_tokens(const Model& model, const ForwardRecord& rec, int class_id,
                                    const WeightFilterConfig& cfg) {
  if (model.kind() != HostKind::transformer) throw UnsupportedError("explain_tokens requires a transformer host");
  std::vector<Matrix> weq;
  std::vector<Tensor> acts;
  for (std::size_t s = 0; s < rec.sites.size(); ++s) {
    weq.push_back(site_equivalent_matrix(model, s));
    acts.push_back(rec.sites[s].relu_features());
  }
  return token_saliency(weq, acts, class_id, cfg);
}

/// Grad-CAM on an arbitrary feature block: channel weights are the spatial
/// mean of d score / d features, the map is ReLU of the weighted sum.
inline Grid gradcam_map(const Tensor& features, const Tensor& score) {
  if (features.rank() != 3) throw DimensionError("gradcam_map expects C x H x W features");
  const Tensor grad = grad_wrt(score, features);
  const std::size_t c = features.dim(0), plane = features.dim(1) * features.dim(2);
  std::vector<double> weights(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t p = 0; p < plane; ++p) weights[k] += grad[k * plane + p];
    weights[k] /= static_cast<double>(plane);
  }
  Grid g = cam_layer(weights, features);
  for (auto& v : g.v) v = std::max(v, 0.0);
  return g;
}

inline SaliencyMap gradcam_baseline(const Model& model, const Input& input, int class_id) {
  if (model.kind() != HostKind::resnet) throw UnsupportedError("Grad-CAM baseline is defined for the CNN host only");
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= model.n_class()) throw IndexError("gradcam: class out of range");
  const ForwardRecord rec = model.forward_collect(input);
  const Tensor score = slice_rows(reshape(rec.final_logits, {model.n_class(), 1}), static_cast<std::size_t>(class_id),
                                  static_cast<std::size_t>(class_id) + 1);
  SaliencyMap m;
  m.class_id = class_id;
  Grid g = gradcam_map(rec.last_features, reshape(score, {1}));
  m.layers.push_back(g);
  m.raw = resize_nearest(g, rec.input_h, rec.input_w);
  m.normalized = normalize(m.raw);
  return m;
}

// ------------------------------------------------------------------ rendering

/// Five-stop ramp: blue, cyan, green, yellow, red.
inline std::array<std::uint8_t, 3> heat_color(double v) {
  static constexpr double stops[5][3] = {{0, 0, 255}, {0, 255, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}};
  v = std::clamp(v, 0.0, 1.0) * 4.0;
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(v), 3);
  const double t = v - static_cast<double>(i);
  std::array<std::uint8_t, 3> rgb{};
  for (int c = 0; c < 3; ++c)
    rgb[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(stops[i][c] * (1 - t) + stops[i + 1][c] * t));
  return rgb;
}

inline std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Binary PGM (P5) of a [0, 1] map, or a PPM (P6) heat overlay on `overlay`.
inline void render_heatmap(const Grid& map, const std::string& path, const Image* overlay = nullptr) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write heatmap '" + path + "'");
  if (!overlay) {
    out << "P5\n" << map.w << ' ' << map.h << "\n255\n";
    for (double v : map.v) out.put(static_cast<char>(quantize(v)));
  } else {
    const Grid m = resize_nearest(map, overlay->height, overlay->width);
    out << "P6\n" << overlay->width << ' ' << overlay->height << "\n255\n";
    for (std::size_t y = 0; y < overlay->height; ++y)
      for (std::size_t x = 0; x < overlay->width; ++x) {
        double gray = 0.0;
        for (std::size_t c = 0; c < overlay->channels; ++c) gray += overlay->at(c, y, x);
        gray = std::clamp(gray / static_cast<double>(overlay->channels), 0.0, 1.0) * 255.0;
        const auto rgb = heat_color(m(y, x));
        for (auto ch : rgb) out.put(static_cast<char>(std::lround(0.5 * gray + 0.5 * ch)));
      }
  }
  if (!out) throw IoError("write to heatmap '" + path + "' failed");
}

inline std::string token_saliency_csv(const TokenSaliency& ts, std::span<const int> tokens) {
  if (tokens.size() != ts.scores.size()) throw DimensionError("token_saliency_csv: token/score count mismatch");
  std::ostringstream os;
  os.precision(10);
  os << "token,position,score\n";
  for (std::size_t j = 0; j < tokens.size(); ++j) os << tokens[j] << ',' << j << ',' << ts.scores[j] << '\n';
  return os.str();
}

/// Standalone HTML: each token in a span whose background intensity is its
/// normalized score.
inline std::string token_saliency_html(const TokenSaliency& ts, std::span<const std::string> words) {
  if (words.size() != ts.scores.size()) throw DimensionError("token_saliency_html: token/score count mismatch");
  const auto norm = ts.normalized();
  std::ostringstream os;
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>token saliency, class " << ts.class_id
     << "</title></head>\n<body style=\"font-family:monospace\">\n<p>";
  os.precision(3);
  for (std::size_t j = 0; j < words.size(); ++j) {
    std::string esc;
    for (char ch : words[j]) {
      if (ch == '<') esc += "&lt;";
      else if (ch == '>') esc += "&gt;";
      else if (ch == '&') esc += "&amp;";
      else esc += ch;
    }
    os << "<span title=\"" << ts.scores[j] << "\" style=\"background-color:rgba(255,0,0," << std::fixed << norm[j]
       << ");padding:2px\">" << esc << "</span> ";
    os.unsetf(std::ios::fixed);
  }
  os << "</p>\n</body></html>\n";
  return os.str();
}

}  // namespace mhex
