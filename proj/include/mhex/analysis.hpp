#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mhex/data.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"
#include "mhex/metrics.hpp"
#include "mhex/ops.hpp"
#include "mhex/rng.hpp"
#include "mhex/saliency.hpp"
#include "mhex/stats.hpp"
#include "mhex/tensor.hpp"

namespace mhex {

inline constexpr double kCosineEps = 1e-8;

/// <a, b> / (|a| |b| + eps)
inline double cosine(std::span<const double> a, std::span<const double> b, double eps = kCosineEps) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb) + eps), -1.0, 1.0);
}

/// Cosine between dA/dparam and dB/dparam on one recorded graph.
inline double gradient_cosine(const Tensor& loss_a, const Tensor& loss_b, const Tensor& param,
                              std::span<const GradHook> hooks = {}) {
  const Tensor ga = grad_wrt(loss_a, param, hooks);
  const Tensor gb = grad_wrt(loss_b, param, hooks);
  return cosine(ga.data(), gb.data());
}

struct SiteGradients {
  Tensor attention;    // d L_DS^(l+1) / d W1_l
  Tensor supervision;  // d L_DS^(l) / d W1_l
};

namespace detail {

inline void check_successor(const ForwardRecord& rec, std::size_t site) {
  if (site + 1 >= rec.sites.size())
    throw ContractError("site " + std::to_string(site) + " has no successor MHEX site (" +
                        std::to_string(rec.sites.size()) + " sites)");
}

inline std::vector<GradHook> position_mask_hooks(const SiteRecord& s, const std::vector<char>& keep) {
  auto mask = [keep](std::span<double> g) {
    const std::size_t n = keep.size();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!keep[i % n]) g[i] = 0.0;
  };
  return {GradHook{s.out.gate.positions, mask}, GradHook{s.out.ds.positions, mask}};
}

}  // namespace detail

/// Both W1 gradients of `site`, optionally restricted to the spatial positions
/// flagged in `keep` (row-major over the site grid).
inline SiteGradients site_gradients(const Model& model, const ForwardRecord& rec, int label, std::size_t site,
                                    const std::vector<char>* keep = nullptr) {
  detail::check_successor(rec, site);
  const Tensor w1 = model.site_params(site).w1;
  const Tensor l_here = softmax_cross_entropy(rec.sites[site].ds_logits(), label);
  const Tensor l_next = softmax_cross_entropy(rec.sites[site + 1].ds_logits(), label);
  std::vector<GradHook> hooks;
  if (keep) {
    const SiteRecord& s = rec.sites[site];
    if (keep->size() != s.out.ds.positions.dim(1)) throw DimensionError("site_gradients: mask size mismatch");
    hooks = detail::position_mask_hooks(s, *keep);
  }
  return {grad_wrt(l_next, w1, hooks), grad_wrt(l_here, w1, hooks)};
}

inline double collaboration_cosine(const Model& model, const ForwardRecord& rec, int label, std::size_t site) {
  const SiteGradients g = site_gradients(model, rec, label, site);
  return cosine(g.attention.data(), g.supervision.data());
}

inline double collaboration_cosine(const Model& model, const Input& input, int label, std::size_t site) {
  const ForwardRecord rec = model.forward_collect(input);
  return collaboration_cosine(model, rec, label, site);
}

/// grid x grid map of collaboration cosines, each computed with the W1
/// gradients restricted to one spatial cell of the site's feature map.
inline Grid blockwise_quality(const Model& model, const Input& input, int label, std::size_t grid = 7,
                              std::size_t site = 0) {
  if (model.kind() != HostKind::resnet) throw UnsupportedError("blockwise_quality requires the CNN host");
  if (grid == 0) throw ConfigError("blockwise_quality: grid must be >= 1");
  const ForwardRecord rec = model.forward_collect(input);
  detail::check_successor(rec, site);
  const SiteRecord& s = rec.sites[site];
  const std::size_t h = s.grid_h(), w = s.grid_w();
  if (grid > h || grid > w)
    throw ConfigError("blockwise_quality: grid " + std::to_string(grid) + " exceeds the " + std::to_string(h) + "x" +
                      std::to_string(w) + " feature map at site " + std::to_string(site));
  Grid out(grid, grid);
  std::vector<char> keep(h * w);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) keep[y * w + x] = (y * grid / h == gy) && (x * grid / w == gx);
      const SiteGradients g = site_gradients(model, rec, label, site, &keep);
      out(gy, gx) = cosine(g.attention.data(), g.supervision.data());
    }
  return out;
}

// ------------------------------------------------------------------ triangle

struct CollabRecord {
  std::string sample_id;
  std::size_t site = 0;
  double cosine = 0.0;
  double p_orig = 0.0;
  double sad_drop = 0.0;
};

struct TriangleEntry {
  std::string pair;  // "cosine~sad", "cosine~p_orig", "sad~p_orig"
  std::optional<std::size_t> site;
  std::optional<Correlation> result;
  std::string error;  // set when the correlation is undefined
};

struct TriangleReport {
  std::vector<std::size_t> sites;
  std::vector<CollabRecord> records;
  std::vector<TriangleEntry> entries;

  std::string csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "pair,site,r,t,p,n\n";
    for (const auto& e : entries) {
      os << e.pair << ',';
      if (e.site) os << *e.site;
      else os << "all";
      if (e.result) os << ',' << e.result->r << ',' << e.result->t << ',' << e.result->p << ',' << e.result->n << '\n';
      else os << ",undefined,undefined,undefined,0\n";
    }
    return os.str();
  }

  std::string records_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "id,site,cosine,p_orig,sad_drop\n";
    for (const auto& r : records)
      os << r.sample_id << ',' << r.site << ',' << r.cosine << ',' << r.p_orig << ',' << r.sad_drop << '\n';
    return os.str();
  }
};

/// Sites that have a successor, last three of them.
inline std::vector<std::size_t> triangle_sites(std::size_t site_count) {
  std::vector<std::size_t> s;
  if (site_count < 2) return s;
  const std::size_t last = site_count - 2;
  for (std::size_t i = last >= 2 ? last - 2 : 0; i <= last; ++i) s.push_back(i);
  return s;
}

namespace detail {
inline TriangleEntry correlate(std::string pair, std::optional<std::size_t> site, std::span<const double> x,
                               std::span<const double> y) {
  TriangleEntry e{std::move(pair), site, std::nullopt, {}};
  try {
    e.result = pearson(x, y);
  } catch (const UndefinedCorrelation& err) {
    e.error = err.what();
  }
  return e;
}
}  // namespace detail

/// Correlations among collaboration cosine, SAD drop and p_orig. SAD uses the
/// soft mask of the MHEX saliency for the true class; p_orig is the final
/// head's true-class probability.
inline TriangleReport correlation_triangle(const Model& model, std::span<const Example> data,
                                           const WeightFilterConfig& cfg = {}) {
  if (model.kind() != HostKind::resnet) throw UnsupportedError("correlation_triangle requires the CNN host");
  if (data.size() < 3) throw ContractError("correlation_triangle: need at least 3 samples");
  TriangleReport rep;
  rep.sites = triangle_sites(model.site_count());
  if (rep.sites.empty()) throw ContractError("correlation_triangle: need at least two MHEX sites");
  const Classifier clf = model_classifier(model);
  std::vector<double> sad, porig;
  std::vector<std::vector<double>> cos(rep.sites.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    const auto* img = std::get_if<Image>(&ex.input);
    if (!img) throw ContractError("correlation_triangle: image samples required");
    const ForwardRecord rec = model.forward_collect(ex.input);
    const double p0 = softmax(rec.final_logits.data()).at(static_cast<std::size_t>(ex.label));
    const SaliencyMap map = explain_image(model, rec, ex.label, cfg);
    const double p1 = detail::class_prob(clf, soft_mask(*img, map.normalized), ex.label);
    const double drop = relative_drop(p0, p1);
    sad.push_back(drop);
    porig.push_back(p0);
    for (std::size_t k = 0; k < rep.sites.size(); ++k) {
      const double c = collaboration_cosine(model, rec, ex.label, rep.sites[k]);
      cos[k].push_back(c);
      rep.records.push_back({std::to_string(i), rep.sites[k], c, p0, drop});
    }
  }
  for (std::size_t k = 0; k < rep.sites.size(); ++k)
    rep.entries.push_back(detail::correlate("cosine~sad", rep.sites[k], cos[k], sad));
  for (std::size_t k = 0; k < rep.sites.size(); ++k)
    rep.entries.push_back(detail::correlate("cosine~p_orig", rep.sites[k], cos[k], porig));
  rep.entries.push_back(detail::correlate("sad~p_orig", std::nullopt, sad, porig));
  return rep;
}

// ------------------------------------------------------------------ entropy

struct EntropyEstimate {
  double h_gaussian = 0.0;    // histogram estimate of H(T)
  double h_discrete = 0.0;    // -p0 ln p0, p0 = mass at zero
  double h_continuous = 0.0;  // histogram estimate over the positive part
  double delta = 0.0;         // H(T) - (H_discrete + H_continuous)
};

inline double histogram_entropy(std::span<const double> xs, double lo, double hi, std::size_t bins) {
  if (xs.empty() || bins == 0 || !(hi > lo)) return 0.0;
  std::vector<std::size_t> counts(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : xs) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    counts[std::min(b, bins - 1)]++;
  }
  const double n = static_cast<double>(xs.size());
  double h = 0.0;
  for (auto c : counts)
    if (c) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p / width);
    }
  return h;
}

/// Monte-Carlo check of the entropy removed by a ReLU on standard normal input.
inline EntropyEstimate relu_entropy_drop(std::size_t n_samples, std::size_t bins, std::uint64_t seed) {
  if (n_samples < 2) throw ConfigError("relu_entropy_drop: need at least 2 samples");
  if (bins == 0) throw ConfigError("relu_entropy_drop: bins must be >= 1");
  CounterRng rng(seed, 0x454E54ULL);
  std::vector<double> t(n_samples), pos;
  pos.reserve(n_samples / 2 + 1);
  for (auto& v : t) {
    v = rng.normal();
    if (v > 0.0) pos.push_back(v);
  }
  const auto [lo, hi] = std::minmax_element(t.begin(), t.end());
  EntropyEstimate e;
  e.h_gaussian = histogram_entropy(t, *lo, *hi, bins);
  const double p0 = 1.0 - static_cast<double>(pos.size()) / static_cast<double>(n_samples);
  e.h_discrete = p0 > 0.0 ? -p0 * std::log(p0) : 0.0;
  e.h_continuous = pos.empty() ? 0.0 : histogram_entropy(pos, 0.0, *hi, bins);
  e.delta = e.h_gaussian - (e.h_discrete + e.h_continuous);
  return e;
}

}  // namespace mhex
