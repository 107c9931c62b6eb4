#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mhex/data.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"
#include "mhex/ops.hpp"
#include "mhex/saliency.hpp"

namespace mhex {

struct DropRecord {
  std::string sample_id;
  double p_orig = 0.0;
  double p_mask = 0.0;
  double drop = 0.0;
  double area = 0.0;
};

inline double relative_drop(double p_orig, double p_mask) {
  if (!(p_orig > 0.0)) return 0.0;
  return std::clamp((p_orig - p_mask) / p_orig, 0.0, 1.0);
}

inline DropRecord make_drop_record(std::string id, double p_orig, double p_mask, double area) {
  return {std::move(id), p_orig, p_mask, relative_drop(p_orig, p_mask), area};
}

struct Curve {
  std::vector<double> fractions;
  std::vector<double> confidences;

  void validate() const {
    if (fractions.size() != confidences.size()) throw DimensionError("curve: fraction/confidence lengths differ");
    if (fractions.size() < 2) throw ContractError("curve: need at least two points");
    if (fractions.front() != 0.0 || fractions.back() != 1.0) throw ContractError("curve: fractions must span [0, 1]");
    for (std::size_t i = 1; i < fractions.size(); ++i)
      if (!(fractions[i] >= fractions[i - 1])) throw ContractError("curve: fractions must be ascending");
  }
};

/// Mean clamped relative drop. Records with p_orig = 0 are skipped and
/// counted in `excluded`.
inline double avg_drop(std::span<const DropRecord> records, std::size_t* excluded = nullptr) {
  if (records.empty()) throw ContractError("avg_drop: no records");
  double sum = 0.0;
  std::size_t used = 0, skipped = 0;
  for (const auto& r : records) {
    if (!(r.p_orig > 0.0)) {
      ++skipped;
      continue;
    }
    sum += relative_drop(r.p_orig, r.p_mask);
    ++used;
  }
  if (excluded) *excluded = skipped;
  return used ? sum / static_cast<double>(used) : 0.0;
}

/// f(x) = 5x / (1 + 256 x^5); f(0.25) = 1 is the maximum.
inline double area_weight(double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("area_weight: x must lie in [0, 1]");
  return 5.0 * x / (1.0 + 256.0 * std::pow(x, 5));
}

inline double ead(std::span<const DropRecord> records) {
  if (records.empty()) throw ContractError("ead: no records");
  double sum = 0.0;
  for (const auto& r : records) sum += r.drop * area_weight(r.area);
  return sum / static_cast<double>(records.size());
}

inline double saliency_area(const Grid& cam, double threshold = 0.5) {
  if (cam.v.empty()) return 0.0;
  const auto n = std::count_if(cam.v.begin(), cam.v.end(), [&](double v) { return v >= threshold; });
  return static_cast<double>(n) / static_cast<double>(cam.v.size());
}

/// Per-channel mean intensity.
inline std::vector<double> channel_means(const Image& img) {
  std::vector<double> mu(img.channels, 0.0);
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) mu[c] += img.pixels[c * plane + p];
    mu[c] /= static_cast<double>(plane);
  }
  return mu;
}

namespace detail {
inline void check_cam(const Image& img, const Grid& cam, const char* who) {
  if (cam.h != img.height || cam.w != img.width)
    throw DimensionError(std::string(who) + ": map is " + std::to_string(cam.h) + "x" + std::to_string(cam.w) +
                         ", image is " + std::to_string(img.height) + "x" + std::to_string(img.width));
}
inline std::vector<double> fill_or_mean(const Image& img, const std::optional<std::vector<double>>& fill) {
  if (!fill) return channel_means(img);
  if (fill->size() != img.channels) throw DimensionError("fill needs one value per channel");
  return *fill;
}
}  // namespace detail

/// I (1 - cam) + mu cam
inline Image soft_mask(const Image& img, const Grid& cam, std::optional<std::vector<double>> mu = std::nullopt) {
  detail::check_cam(img, cam, "soft_mask");
  const auto m = detail::fill_or_mean(img, mu);
  Image out = img;
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double a = cam.v[p];
      out.pixels[c * plane + p] = img.pixels[c * plane + p] * (1.0 - a) + m[c] * a;
    }
  return out;
}

inline Image hard_mask(const Image& img, const Grid& cam, double threshold = 0.5,
                       std::optional<std::vector<double>> fill = std::nullopt) {
  detail::check_cam(img, cam, "hard_mask");
  const auto f = detail::fill_or_mean(img, fill);
  Image out = img;
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p)
    if (cam.v[p] >= threshold)
      for (std::size_t c = 0; c < img.channels; ++c) out.pixels[c * plane + p] = f[c];
  return out;
}

/// Class probabilities for one input.
using Classifier = std::function<std::vector<double>(const Input&)>;

/// Softmax of the model's final head.
inline Classifier model_classifier(const Model& model) {
  return [&model](const Input& in) {
    const ForwardRecord rec = model.forward_collect(in);
    return softmax(rec.final_logits.data());
  };
}

namespace detail {
inline double class_prob(const Classifier& f, const Input& in, int target) {
  const auto p = f(in);
  if (target < 0 || static_cast<std::size_t>(target) >= p.size()) throw IndexError("target class out of range");
  return p[static_cast<std::size_t>(target)];
}

// Descending saliency, ties broken by row-major index.
inline std::vector<std::size_t> rank_pixels(const Grid& cam) {
  std::vector<std::size_t> order(cam.v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cam.v[a] > cam.v[b]; });
  return order;
}

inline Curve perturbation_curve(const Classifier& f, const Image& img, const Grid& cam, int target,
                                std::size_t steps, bool insertion) {
  if (steps < 2) throw ConfigError("curve: steps must be >= 2");
  check_cam(img, cam, insertion ? "insertion_curve" : "deletion_curve");
  const auto order = rank_pixels(cam);
  const auto mu = channel_means(img);
  const std::size_t plane = img.height * img.width;
  Image work = img;
  if (insertion)
    for (std::size_t c = 0; c < img.channels; ++c)
      std::fill(work.pixels.begin() + static_cast<std::ptrdiff_t>(c * plane),
                work.pixels.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane), mu[c]);
  Curve curve;
  std::size_t done = 0;
  for (std::size_t i = 0; i <= steps; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(steps);
    const auto upto = static_cast<std::size_t>(std::llround(frac * static_cast<double>(plane)));
    for (; done < upto; ++done) {
      const std::size_t p = order[done];
      for (std::size_t c = 0; c < img.channels; ++c)
        work.pixels[c * plane + p] = insertion ? img.pixels[c * plane + p] : mu[c];
    }
    curve.fractions.push_back(frac);
    curve.confidences.push_back(class_prob(f, work, target));
  }
  return curve;
}
}  // namespace detail

/// Starts from the constant-mu image and restores pixels in saliency order.
inline Curve insertion_curve(const Classifier& f, const Image& img, const Grid& cam, int target,
                             std::size_t steps = 20) {
  return detail::perturbation_curve(f, img, cam, target, steps, true);
}

/// Starts from the image and replaces pixels with mu in saliency order.
inline Curve deletion_curve(const Classifier& f, const Image& img, const Grid& cam, int target,
                            std::size_t steps = 20) {
  return detail::perturbation_curve(f, img, cam, target, steps, false);
}

inline double auc(const Curve& c) {
  c.validate();
  double a = 0.0;
  for (std::size_t i = 1; i < c.fractions.size(); ++i)
    a += 0.5 * (c.fractions[i] - c.fractions[i - 1]) * (c.confidences[i] + c.confidences[i - 1]);
  return a;
}

/// Replaces the ceil(top_frac * len) most salient non-pad tokens with
/// `mask_token` and records the true-class confidence drop. `saliency` has
/// one score per non-pad position.
inline DropRecord token_perturb_drop(const Classifier& f, const TokenSeq& seq, std::span<const double> saliency,
                                     int target, double top_frac = 0.10, int mask_token = kMaskToken,
                                     std::string sample_id = {}) {
  std::vector<std::size_t> valid;
  for (std::size_t j = 0; j < seq.ids.size(); ++j)
    if (seq.ids[j] != kPadToken) valid.push_back(j);
  if (valid.empty()) throw ContractError("token_perturb_drop: empty sequence");
  if (saliency.size() != valid.size())
    throw DimensionError("token_perturb_drop: " + std::to_string(saliency.size()) + " scores for " +
                         std::to_string(valid.size()) + " tokens");
  if (!(top_frac >= 0.0 && top_frac <= 1.0)) throw ConfigError("token_perturb_drop: top_frac must lie in [0, 1]");
  if (mask_token < 0) throw ConfigError("token_perturb_drop: mask token must be a vocabulary id");
  const auto k = static_cast<std::size_t>(std::ceil(top_frac * static_cast<double>(valid.size()) - 1e-12));
  std::vector<std::size_t> order(valid.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return saliency[a] > saliency[b]; });
  TokenSeq masked = seq;
  for (std::size_t i = 0; i < k; ++i) masked.ids[valid[order[i]]] = mask_token;
  const double p0 = detail::class_prob(f, seq, target);
  const double p1 = detail::class_prob(f, masked, target);
  return make_drop_record(std::move(sample_id), p0, p1,
                          static_cast<double>(k) / static_cast<double>(valid.size()));
}

// ------------------------------------------------------------------ CSV

inline std::string drop_records_csv(std::span<const DropRecord> records) {
  std::ostringstream os;
  os.precision(10);
  os << "id,p_orig,p_mask,drop,area,f_area\n";
  for (const auto& r : records)
    os << r.sample_id << ',' << r.p_orig << ',' << r.p_mask << ',' << r.drop << ',' << r.area << ','
       << area_weight(std::clamp(r.area, 0.0, 1.0)) << '\n';
  return os.str();
}

inline std::string curve_csv(const Curve& c) {
  std::ostringstream os;
  os.precision(10);
  os << "fraction,confidence\n";
  for (std::size_t i = 0; i < c.fractions.size(); ++i) os << c.fractions[i] << ',' << c.confidences[i] << '\n';
  return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace mhex
