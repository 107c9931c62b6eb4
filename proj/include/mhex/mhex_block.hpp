#pragma once

#include <span>
#include <string>
#include <vector>

#include "mhex/errors.hpp"
#include "mhex/ops.hpp"
#include "mhex/tensor.hpp"

// One MHEX insertion point: attention gate, deep-supervision head and the
// equivalent matrix W2 W1. Feature maps are channel-major, [C x ...]; token
// hosts pass their activations as [D x 1 x T] so both hosts share one path.
//
// Both W1 products are evaluated per position and pooled afterwards
// (GAP(W1 z) == W1 GAP(z)). The per-position products are kept so the
// block-wise analysis can mask W1's gradient to a spatial cell.

namespace mhex {

struct MhexParams {
  Tensor w1;    // C x C, shared by gate and supervision head
  Tensor w2;    // n_class x C
  Tensor proj;  // C x C_global, maps the global feature onto this site

  std::size_t channels() const { return w1.dim(0); }
  std::size_t n_class() const { return w2.dim(0); }
};

inline void validate(const MhexParams& p) {
  if (p.w1.rank() != 2 || p.w1.dim(0) != p.w1.dim(1))
    throw DimensionError("MHEX W1 must be square, got " + shape_str(p.w1.shape()));
  if (p.w2.rank() != 2 || p.w2.dim(1) != p.w1.dim(0))
    throw DimensionError("MHEX W2 " + shape_str(p.w2.shape()) + " incompatible with W1 " + shape_str(p.w1.shape()));
}

struct GateOutput {
  Tensor g;          // C, each in (0, 1)
  Tensor x_att;      // g (.) x, shape of x
  Tensor positions;  // W1 (x + x_global) per position, C x N
};

struct DsOutput {
  Tensor logits;         // n_class
  Tensor relu_features;  // ReLU(x + x_global), shape of x
  Tensor positions;      // W1 ReLU(x + x_global) per position, C x N
};

struct MhexOutput {
  GateOutput gate;
  DsOutput ds;
};

namespace detail {

inline void check_site_inputs(const Tensor& x, const Tensor& x_global, const MhexParams& p) {
  validate(p);
  if (x.rank() < 2) throw DimensionError("MHEX input must be C x ..., got " + shape_str(x.shape()));
  if (x.shape() != x_global.shape())
    throw DimensionError("MHEX input " + shape_str(x.shape()) + " and projected global feature " +
                         shape_str(x_global.shape()) + " differ");
  if (x.dim(0) != p.channels())
    throw DimensionError("MHEX input has " + std::to_string(x.dim(0)) + " channels, W1 expects " +
                         std::to_string(p.channels()));
}

inline Tensor as_channel_matrix(const Tensor& t) {
  return reshape(t, {t.dim(0), t.numel() / t.dim(0)});
}

}  // namespace detail

/// g = sigmoid(W1 GAP(x + x_global)), x_att = g (.) x
inline GateOutput attention_gate(const Tensor& x, const Tensor& x_global, const MhexParams& p) {
  detail::check_site_inputs(x, x_global, p);
  const Tensor z = detail::as_channel_matrix(add(x, x_global));
  GateOutput out;
  out.positions = matmul(p.w1, z);
  out.g = sigmoid(mean_axis(out.positions, 1));
  out.x_att = broadcast_mul(x, out.g, 0);
  return out;
}

/// logits = W2 W1 GAP(ReLU(x + x_global)). GAP after ReLU makes logit c the
/// spatial mean of the class-c CAM built from the same features.
inline DsOutput ds_head(const Tensor& x, const Tensor& x_global, const MhexParams& p) {
  detail::check_site_inputs(x, x_global, p);
  DsOutput out;
  out.relu_features = relu(add(x, x_global));
  out.positions = matmul(p.w1, detail::as_channel_matrix(out.relu_features));
  out.logits = matvec(p.w2, mean_axis(out.positions, 1));
  return out;
}

inline Tensor ds_logits(const Tensor& x, const Tensor& x_global, const MhexParams& p) {
  return ds_head(x, x_global, p).logits;
}

inline MhexOutput mhex_forward(const Tensor& x, const Tensor& x_global, const MhexParams& p) {
  return {attention_gate(x, x_global, p), ds_head(x, x_global, p)};
}

/// W_equiv = W2 W1, n_class x C.
inline Tensor equivalent_matrix(const MhexParams& p) {
  validate(p);
  return matmul(p.w2, p.w1);
}

enum class LossMode { pretrain, finetune };

inline std::string to_string(LossMode m) { return m == LossMode::pretrain ? "pretrain" : "finetune"; }

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "pretrain") return LossMode::pretrain;
  if (s == "finetune") return LossMode::finetune;
  throw ConfigError("unknown loss mode '" + s + "' (expected pretrain|finetune)");
}

/// pretrain: CE(sum of all head logits); finetune: sum of per-head CE.
/// `heads` must include the host's final head.
inline Tensor mhex_loss(std::span<const Tensor> heads, int target, LossMode mode) {
  if (heads.empty()) throw ContractError("mhex_loss: empty head list");
  const std::size_t n = heads.front().numel();
  for (const auto& h : heads)
    if (h.numel() != n) throw DimensionError("mhex_loss: heads disagree on class count");
  if (mode == LossMode::pretrain) {
    Tensor total = heads.front();
    for (std::size_t i = 1; i < heads.size(); ++i) total = add(total, heads[i]);
    return softmax_cross_entropy(total, target);
  }
  Tensor total = softmax_cross_entropy(heads.front(), target);
  for (std::size_t i = 1; i < heads.size(); ++i) total = add(total, softmax_cross_entropy(heads[i], target));
  return total;
}

}  // namespace mhex
