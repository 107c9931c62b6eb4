#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mhex/mhex.hpp"

namespace mhex::testing {

inline Tensor random_tensor(CounterRng& rng, Shape shape, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0, bool avoid_zero = false) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
    // keep clear of ReLU kinks so the central difference stays on one side
    if (avoid_zero && std::abs(x) < 0.02) x = x < 0 ? x - 0.05 : x + 0.05;
  }
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output entry contributes to the check.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  if (out.numel() == 1) return reshape(out, {1});
  CounterRng rng(seed, 0x57);
  std::vector<double> w(out.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(out, Tensor::from(out.shape(), w)));
}

struct GradCase {
  std::string name;
  std::function<std::vector<Tensor>(CounterRng&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
};

/// Max over entries of |analytic - numeric| / max(1, |analytic| + |numeric|),
/// central differences with step h.
inline double max_grad_error(const GradCase& c, std::uint64_t seed, double h = 1e-4) {
  CounterRng rng(seed, 0x4743);
  std::vector<Tensor> in = c.inputs(rng);
  auto loss_of = [&] { return weighted_sum(c.fn(in), seed); };
  const Tensor loss = loss_of();
  double worst = 0.0;
  for (auto& t : in) {
    if (!t.requires_grad()) continue;
    const Tensor g = grad_wrt(loss, t);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t[i];
      t.mutable_data()[i] = x0 + h;
      const double fp = loss_of().item();
      t.mutable_data()[i] = x0 - h;
      const double fm = loss_of().item();
      t.mutable_data()[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double err = std::abs(g[i] - num) / std::max(1.0, std::abs(g[i]) + std::abs(num));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline std::vector<GradCase> primitive_cases() {
  using V = std::vector<Tensor>;
  auto r = [](Shape s, bool avoid_zero = false) {
    return [s, avoid_zero](CounterRng& g) { return V{random_tensor(g, s, true, -1.0, 1.0, avoid_zero)}; };
  };
  auto r2 = [](Shape a, Shape b) {
    return [a, b](CounterRng& g) { return V{random_tensor(g, a), random_tensor(g, b)}; };
  };
  std::vector<GradCase> cs;
  cs.push_back({"add", r2({3, 4}, {3, 4}), [](const V& v) { return add(v[0], v[1]); }});
  cs.push_back({"sub", r2({3, 4}, {3, 4}), [](const V& v) { return sub(v[0], v[1]); }});
  cs.push_back({"mul", r2({2, 5}, {2, 5}), [](const V& v) { return mul(v[0], v[1]); }});
  cs.push_back({"scale", r({4, 3}), [](const V& v) { return scale(v[0], -1.7); }});
  cs.push_back({"relu", r({5, 5}, true), [](const V& v) { return relu(v[0]); }});
  cs.push_back({"sigmoid", r({6}), [](const V& v) { return sigmoid(scale(v[0], 4.0)); }});
  cs.push_back({"sum", r({3, 3}), [](const V& v) { return sum(v[0]); }});
  cs.push_back({"mean_axis0", r({3, 4}), [](const V& v) { return mean_axis(v[0], 0); }});
  cs.push_back({"mean_axis1", r({3, 4}), [](const V& v) { return mean_axis(v[0], 1); }});
  cs.push_back({"global_avg_pool", r({3, 4, 5}), [](const V& v) { return global_avg_pool(v[0]); }});
  cs.push_back({"reshape", r({2, 6}), [](const V& v) { return reshape(v[0], {3, 4}); }});
  cs.push_back({"transpose", r({3, 5}), [](const V& v) { return transpose(v[0]); }});
  cs.push_back({"slice_rows", r({5, 3}), [](const V& v) { return slice_rows(v[0], 1, 4); }});
  cs.push_back({"slice_cols", r({3, 6}), [](const V& v) { return slice_cols(v[0], 2, 5); }});
  cs.push_back({"concat_cols", r2({3, 2}, {3, 4}), [](const V& v) { return concat_cols({v[0], v[1]}); }});
  cs.push_back({"broadcast_add_axis0", r2({3, 2, 2}, {3}), [](const V& v) { return broadcast_add(v[0], v[1], 0); }});
  cs.push_back({"broadcast_add_axis1", r2({4, 3}, {3}), [](const V& v) { return broadcast_add(v[0], v[1], 1); }});
  cs.push_back({"broadcast_mul", r2({3, 2, 2}, {3}), [](const V& v) { return broadcast_mul(v[0], v[1], 0); }});
  cs.push_back({"gather_rows", r({5, 3}), [](const V& v) {
                  const std::vector<int> ids = {4, 0, 4, 2};
                  return gather_rows(v[0], ids);
                }});
  cs.push_back({"upsample_nearest", r({2, 2, 3}), [](const V& v) { return upsample_nearest(v[0], 4, 6); }});
  cs.push_back({"downsample_pad", r({2, 4, 4}), [](const V& v) { return downsample_pad(v[0], 3, 2, 2); }});
  cs.push_back({"matmul", r2({3, 4}, {4, 2}), [](const V& v) { return matmul(v[0], v[1]); }});
  cs.push_back({"matvec", r2({3, 4}, {4}), [](const V& v) { return matvec(v[0], v[1]); }});
  cs.push_back({"conv2d_s1p1", r2({2, 5, 5}, {3, 2, 3, 3}), [](const V& v) { return conv2d(v[0], v[1], 1, 1); }});
  cs.push_back({"conv2d_s2p1", r2({2, 6, 6}, {2, 2, 4, 4}), [](const V& v) { return conv2d(v[0], v[1], 2, 1); }});
  cs.push_back({"conv2d_s2p0", r2({3, 4, 4}, {2, 3, 2, 2}), [](const V& v) { return conv2d(v[0], v[1], 2, 0); }});
  cs.push_back({"layer_norm", [](CounterRng& g) {
                  return V{random_tensor(g, {3, 5}), random_tensor(g, {5}), random_tensor(g, {5})};
                },
                [](const V& v) { return layer_norm(v[0], v[1], v[2]); }});
  cs.push_back({"softmax_rows", r({3, 4}), [](const V& v) { return softmax_rows(v[0]); }});
  cs.push_back({"softmax_rows_masked", r({3, 4}), [](const V& v) {
                  std::vector<double> m(12, 0.0);
                  m[3] = m[7] = m[11] = -1e30;
                  return softmax_rows(v[0], m);
                }});
  cs.push_back({"softmax_cross_entropy", r({5}), [](const V& v) { return softmax_cross_entropy(v[0], 2); }});
  cs.push_back({"softmax_cross_entropy_batch", r({3, 4}), [](const V& v) {
                  const std::vector<int> t = {0, 3, 1};
                  return softmax_cross_entropy(v[0], t);
                }});
  cs.push_back({"mhex_forward", [](CounterRng& g) {
                  return V{random_tensor(g, {3, 2, 2}), random_tensor(g, {3, 2, 2}), random_tensor(g, {3, 3}),
                           random_tensor(g, {4, 3})};
                },
                [](const V& v) {
                  const MhexParams p{v[2], v[3], Tensor::zeros({3, 1})};
                  const MhexOutput o = mhex_forward(v[0], v[1], p);
                  return add(sum(o.gate.x_att), sum(o.ds.logits));
                }});
  cs.push_back({"mhex_loss_pretrain", r2({4}, {4}), [](const V& v) {
                  return mhex_loss(std::vector<Tensor>{v[0], v[1]}, 1, LossMode::pretrain);
                }});
  cs.push_back({"mhex_loss_finetune", r2({4}, {4}), [](const V& v) {
                  return mhex_loss(std::vector<Tensor>{v[0], v[1]}, 3, LossMode::finetune);
                }});
  return cs;
}

}  // namespace mhex::testing
