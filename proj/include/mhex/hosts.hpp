#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mhex/data.hpp"
#include "mhex/errors.hpp"
#include "mhex/kv_config.hpp"
#include "mhex/mhex_block.hpp"
#include "mhex/ops.hpp"
#include "mhex/rng.hpp"
#include "mhex/tensor.hpp"

namespace mhex {

enum class HostKind { resnet, transformer };

inline constexpr int kMaskToken = 0;
inline constexpr int kPadToken = 1;

// ------------------------------------------------------------------ configs

struct ResNetConfig {
  std::vector<std::size_t> stage_channels{8, 16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t in_channels = 1;
  std::size_t image_size = 32;
  std::size_t n_class = 4;
  /// Block indices carrying an MHEX site. nullopt selects the default:
  /// every downsampling block plus the final block.
  std::optional<std::vector<std::size_t>> mhex_sites;
  bool stop_ds_gradient = false;
  std::uint64_t seed = 1;

  std::size_t n_blocks() const { return stage_channels.size() * blocks_per_stage; }
  std::size_t stage_of(std::size_t block) const { return block / blocks_per_stage; }
  std::size_t block_channels(std::size_t block) const { return stage_channels[stage_of(block)]; }
  bool downsamples(std::size_t block) const { return block % blocks_per_stage == 0 && stage_of(block) > 0; }
  std::size_t block_resolution(std::size_t block) const { return image_size >> stage_of(block); }

  std::vector<std::size_t> sites() const {
    if (mhex_sites) return *mhex_sites;
    std::vector<std::size_t> s;
    for (std::size_t b = 0; b < n_blocks(); ++b)
      if (downsamples(b) || b + 1 == n_blocks()) s.push_back(b);
    return s;
  }

  static std::vector<std::size_t> every_block(std::size_t n) {
    std::vector<std::size_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = i;
    return s;
  }

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("ResNetConfig: stage_channels is empty");
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
      if (stage_channels[i] == 0) throw ConfigError("ResNetConfig: stage channels must be positive");
      if (i && stage_channels[i] < stage_channels[i - 1])
        throw ConfigError("ResNetConfig: channels must be non-decreasing across stages");
    }
    if (blocks_per_stage == 0) throw ConfigError("ResNetConfig: blocks_per_stage must be >= 1");
    if (n_class < 2) throw ConfigError("ResNetConfig: n_class must be >= 2");
    if (in_channels != 1 && in_channels != 3) throw ConfigError("ResNetConfig: input must have 1 or 3 channels");
    const std::size_t down = std::size_t{1} << (stage_channels.size() - 1);
    if (image_size == 0 || image_size % down != 0 || image_size / down < 2)
      throw ConfigError("ResNetConfig: image_size " + std::to_string(image_size) + " cannot be halved " +
                        std::to_string(stage_channels.size() - 1) + " times");
    const auto s = sites();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= n_blocks()) throw ConfigError("ResNetConfig: MHEX site " + std::to_string(s[i]) + " out of range");
      if (i && s[i] <= s[i - 1]) throw ConfigError("ResNetConfig: MHEX sites must be strictly increasing");
    }
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("host", "resnet");
    kv.set("stage_channels", stage_channels);
    kv.set("blocks_per_stage", blocks_per_stage);
    kv.set("in_channels", in_channels);
    kv.set("image_size", image_size);
    kv.set("n_class", n_class);
    kv.set("mhex_sites", mhex_sites ? "list" : "default");
    if (mhex_sites) kv.set("mhex_site_list", *mhex_sites);
    kv.set("stop_ds_gradient", stop_ds_gradient);
    kv.set("seed", seed);
    return kv;
  }

  static ResNetConfig from_kv(const KeyValues& kv) {
    ResNetConfig c;
    c.stage_channels = kv.get_list("stage_channels");
    c.blocks_per_stage = kv.get_uint("blocks_per_stage");
    c.in_channels = kv.get_uint("in_channels");
    c.image_size = kv.get_uint("image_size");
    c.n_class = kv.get_uint("n_class");
    if (kv.get("mhex_sites") == "list")
      c.mhex_sites = kv.has("mhex_site_list") ? kv.get_list("mhex_site_list") : std::vector<std::size_t>{};
    c.stop_ds_gradient = kv.get_bool("stop_ds_gradient");
    c.seed = kv.get_uint("seed");
    return c;
  }
};

struct TransformerConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t max_seq = 24;
  std::size_t n_class = 4;
  std::size_t saliency_layers = 3;
  std::size_t ffn_mult = 2;
  /// Layer indices carrying an MHEX site; nullopt selects every layer.
  std::optional<std::vector<std::size_t>> mhex_sites;
  bool stop_ds_gradient = false;
  /// Init sd of the token embedding; large enough that token identity survives attention mixing.
  double embed_scale = 2.0;
  std::uint64_t seed = 1;

  std::vector<std::size_t> sites() const {
    return mhex_sites ? *mhex_sites : ResNetConfig::every_block(n_layers);
  }

  void validate() const {
    if (n_layers == 0) throw ConfigError("TransformerConfig: n_layers must be >= 1");
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0)
      throw ConfigError("TransformerConfig: d_model must be divisible by n_heads");
    if (saliency_layers > n_layers) throw ConfigError("TransformerConfig: saliency layers L exceed n_layers");
    if (n_class < 2) throw ConfigError("TransformerConfig: n_class must be >= 2");
    if (vocab_size < 3) throw ConfigError("TransformerConfig: vocab must hold [MASK], [PAD] and one token");
    if (max_seq == 0) throw ConfigError("TransformerConfig: max_seq must be positive");
    if (ffn_mult == 0) throw ConfigError("TransformerConfig: ffn_mult must be positive");
    if (!(embed_scale > 0.0) || !std::isfinite(embed_scale))
      throw ConfigError("TransformerConfig: embed_scale must be positive");
    const auto s = sites();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= n_layers) throw ConfigError("TransformerConfig: MHEX site out of range");
      if (i && s[i] <= s[i - 1]) throw ConfigError("TransformerConfig: MHEX sites must be strictly increasing");
    }
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("host", "transformer");
    kv.set("vocab_size", vocab_size);
    kv.set("d_model", d_model);
    kv.set("n_heads", n_heads);
    kv.set("n_layers", n_layers);
    kv.set("max_seq", max_seq);
    kv.set("n_class", n_class);
    kv.set("saliency_layers", saliency_layers);
    kv.set("ffn_mult", ffn_mult);
    kv.set("mhex_sites", mhex_sites ? "list" : "default");
    if (mhex_sites) kv.set("mhex_site_list", *mhex_sites);
    kv.set("stop_ds_gradient", stop_ds_gradient);
    kv.set("embed_scale", embed_scale);
    kv.set("seed", seed);
    return kv;
  }

  static TransformerConfig from_kv(const KeyValues& kv) {
    TransformerConfig c;
    c.vocab_size = kv.get_uint("vocab_size");
    c.d_model = kv.get_uint("d_model");
    c.n_heads = kv.get_uint("n_heads");
    c.n_layers = kv.get_uint("n_layers");
    c.max_seq = kv.get_uint("max_seq");
    c.n_class = kv.get_uint("n_class");
    c.saliency_layers = kv.get_uint("saliency_layers");
    c.ffn_mult = kv.get_uint("ffn_mult");
    if (kv.get("mhex_sites") == "list")
      c.mhex_sites = kv.has("mhex_site_list") ? kv.get_list("mhex_site_list") : std::vector<std::size_t>{};
    c.stop_ds_gradient = kv.get_bool("stop_ds_gradient");
    c.embed_scale = kv.get_double("embed_scale");
    c.seed = kv.get_uint("seed");
    return c;
  }
};

// ------------------------------------------------------------------ parameter accounting

struct ParamCount {
  std::size_t without_projection = 0;
  std::size_t with_projection = 0;
};

/// Per site: C^2 (W1) + n_class * C (W2); projections add C * C_global.
inline ParamCount count_mhex_params(const ResNetConfig& cfg) {
  cfg.validate();
  ParamCount pc;
  const std::size_t c_global = cfg.stage_channels.back();
  for (auto b : cfg.sites()) {
    const std::size_t c = cfg.block_channels(b);
    pc.without_projection += c * c + cfg.n_class * c;
    pc.with_projection += c * c + cfg.n_class * c + c * c_global;
  }
  return pc;
}

/// Token sites also carry the LayerNorm applied to x_att (2 D), counted with
/// the projection extras.
inline ParamCount count_mhex_params(const TransformerConfig& cfg) {
  cfg.validate();
  ParamCount pc;
  const std::size_t d = cfg.d_model;
  for (std::size_t i = 0; i < cfg.sites().size(); ++i) {
    pc.without_projection += d * d + cfg.n_class * d;
    pc.with_projection += d * d + cfg.n_class * d + d * d + 2 * d;
  }
  return pc;
}

// ------------------------------------------------------------------ records

struct SiteRecord {
  std::size_t host_index = 0;  // block (CNN) or layer (transformer)
  Tensor x;                    // site input f^(l) / A^(l), channel-major
  Tensor x_global;             // projected, resized global feature
  MhexOutput out;
  Tensor x_att_normed;         // transformer only: LayerNorm(x_att)

  const Tensor& ds_logits() const { return out.ds.logits; }
  const Tensor& relu_features() const { return out.ds.relu_features; }
  std::size_t grid_h() const { return x.dim(1); }
  std::size_t grid_w() const { return x.dim(2); }
};

enum class PredictionHead { host, deepest_mhex };

struct ForwardRecord {
  Tensor final_logits;
  Tensor last_features;  // final backbone feature map (Grad-CAM target)
  Tensor global_feature;
  std::vector<SiteRecord> sites;
  std::size_t input_h = 0, input_w = 0;

  /// DS heads in site order followed by the host head.
  std::vector<Tensor> head_logits() const {
    std::vector<Tensor> h;
    for (const auto& s : sites) h.push_back(s.ds_logits());
    h.push_back(final_logits);
    return h;
  }

  const Tensor& prediction(PredictionHead which = PredictionHead::host) const {
    if (which == PredictionHead::deepest_mhex && !sites.empty()) return sites.back().ds_logits();
    return final_logits;
  }
};

// ------------------------------------------------------------------ parameters

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool mhex = false;
};

class ParamStore {
 public:
  std::size_t add(std::string name, Tensor t, bool mhex = false) {
    index_[name] = items_.size();
    items_.push_back({std::move(name), std::move(t), mhex});
    return items_.size() - 1;
  }
  const Tensor& operator[](std::size_t i) const { return items_[i].tensor; }
  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<NamedParam>& items() { return items_; }
  const NamedParam* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second];
  }

 private:
  std::vector<NamedParam> items_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline Tensor kaiming(CounterRng& rng, Shape shape, std::size_t fan_in, double gain = 1.0) {
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(numel_of(shape));
  for (auto& e : v) e = sd * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor small_uniform(CounterRng& rng, Shape shape, std::size_t fan_in) {
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(numel_of(shape));
  for (auto& e : v) e = rng.uniform(-a, a);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace detail

// ------------------------------------------------------------------ model interface

class Model {
 public:
  virtual ~Model() = default;

  virtual HostKind kind() const = 0;
  virtual std::size_t n_class() const = 0;
  virtual KeyValues config_kv() const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;
  /// Same backbone parameters, every MHEX site removed.
  virtual std::unique_ptr<Model> without_mhex() const = 0;
  virtual ForwardRecord forward_collect(const Input& input) const = 0;
  virtual std::size_t site_count() const = 0;
  virtual MhexParams site_params(std::size_t i) const = 0;

  const std::vector<NamedParam>& params() const { return store_.items(); }
  std::vector<NamedParam>& params() { return store_.items(); }
  const NamedParam* find_param(const std::string& name) const { return store_.find(name); }

  void zero_grad() {
    for (auto& p : store_.items()) p.tensor.zero_grad();
  }

  /// Copies parameter values from a model with an identical shape table.
  void copy_values_from(const Model& other) {
    const auto& src = other.params();
    auto& dst = store_.items();
    if (src.size() != dst.size()) throw ShapeMismatchError("parameter tables differ in length");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape())
        throw ShapeMismatchError("parameter '" + dst[i].name + "' does not match '" + src[i].name + "'");
      auto d = dst[i].tensor.mutable_data();
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.begin());
    }
  }

 protected:
  ParamStore store_;
};

// ------------------------------------------------------------------ residual CNN host

class ResNetModel final : public Model {
 public:
  explicit ResNetModel(ResNetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    CounterRng rng(cfg_.seed, 0x5245534E);  // "RESN"
    const std::size_t c0 = cfg_.stage_channels.front();
    stem_w_ = store_.add("stem.w", detail::kaiming(rng, {c0, cfg_.in_channels, 3, 3}, cfg_.in_channels * 9));
    stem_b_ = store_.add("stem.b", Tensor::zeros({c0}, true));
    std::size_t in_c = c0;
    for (std::size_t b = 0; b < cfg_.n_blocks(); ++b) {
      const std::size_t c = cfg_.block_channels(b);
      const std::string pre = "block" + std::to_string(b) + ".";
      Block blk;
      blk.downsample = cfg_.downsamples(b);
      const std::size_t k1 = blk.downsample ? 4 : 3;
      blk.conv1_w = store_.add(pre + "conv1.w", detail::kaiming(rng, {c, in_c, k1, k1}, in_c * k1 * k1));
      blk.conv1_b = store_.add(pre + "conv1.b", Tensor::zeros({c}, true));
      blk.conv2_w = store_.add(pre + "conv2.w", detail::kaiming(rng, {c, c, 3, 3}, c * 9, 0.5));
      blk.conv2_b = store_.add(pre + "conv2.b", Tensor::zeros({c}, true));
      if (blk.downsample || c != in_c) {
        const std::size_t k = blk.downsample ? 2 : 1;
        blk.short_w = store_.add(pre + "shortcut.w", detail::kaiming(rng, {c, in_c, k, k}, in_c * k * k));
        blk.has_shortcut = true;
      }
      blocks_.push_back(blk);
      in_c = c;
    }
    head_w_ = store_.add("head.w", detail::small_uniform(rng, {cfg_.n_class, in_c}, in_c));
    head_b_ = store_.add("head.b", Tensor::zeros({cfg_.n_class}, true));
    const std::size_t c_global = in_c;
    const auto sites = cfg_.sites();
    for (std::size_t s = 0; s < sites.size(); ++s) {
      const std::size_t c = cfg_.block_channels(sites[s]);
      const std::string pre = "site" + std::to_string(s) + ".";
      Site site;
      site.block = sites[s];
      site.w1 = store_.add(pre + "w1", detail::small_uniform(rng, {c, c}, c), true);
      site.w2 = store_.add(pre + "w2", detail::small_uniform(rng, {cfg_.n_class, c}, c), true);
      site.proj = store_.add(pre + "proj", detail::small_uniform(rng, {c, c_global}, c_global), true);
      sites_.push_back(site);
    }
  }

  const ResNetConfig& config() const { return cfg_; }
  HostKind kind() const override { return HostKind::resnet; }
  std::size_t n_class() const override { return cfg_.n_class; }
  KeyValues config_kv() const override { return cfg_.to_kv(); }
  std::size_t site_count() const override { return sites_.size(); }

  MhexParams site_params(std::size_t i) const override {
    const auto& s = sites_.at(i);
    return {store_[s.w1], store_[s.w2], store_[s.proj]};
  }

  std::unique_ptr<Model> clone() const override {
    auto m = std::make_unique<ResNetModel>(cfg_);
    m->copy_values_from(*this);
    return m;
  }

  std::unique_ptr<Model> without_mhex() const override {
    ResNetConfig c = cfg_;
    c.mhex_sites = std::vector<std::size_t>{};
    auto m = std::make_unique<ResNetModel>(c);
    for (auto& p : m->params()) {
      const NamedParam* src = find_param(p.name);
      auto d = p.tensor.mutable_data();
      std::copy(src->tensor.data().begin(), src->tensor.data().end(), d.begin());
    }
    return m;
  }

  ForwardRecord forward_collect(const Input& input) const override {
    const auto* img = std::get_if<Image>(&input);
    if (!img) throw DimensionError("residual CNN host expects an image input");
    if (img->channels != cfg_.in_channels || img->height != cfg_.image_size || img->width != cfg_.image_size)
      throw DimensionError("image " + shape_str({img->channels, img->height, img->width}) + " does not match " +
                           shape_str({cfg_.in_channels, cfg_.image_size, cfg_.image_size}));
    ForwardRecord rec;
    rec.input_h = img->height;
    rec.input_w = img->width;
    Tensor h = Tensor::from({img->channels, img->height, img->width}, img->pixels);
    h = relu(broadcast_add(conv2d(h, store_[stem_w_], 1, 1), store_[stem_b_], 0));
    std::vector<Tensor> block_out;
    for (const auto& blk : blocks_) {
      const std::size_t stride = blk.downsample ? 2 : 1;
      Tensor y = relu(broadcast_add(conv2d(h, store_[blk.conv1_w], stride, 1), store_[blk.conv1_b], 0));
      y = broadcast_add(conv2d(y, store_[blk.conv2_w], 1, 1), store_[blk.conv2_b], 0);
      Tensor shortcut = blk.has_shortcut ? conv2d(h, store_[blk.short_w], stride, 0) : h;
      h = relu(add(y, shortcut));
      block_out.push_back(h);
    }
    rec.last_features = h;
    rec.final_logits = add(matvec(store_[head_w_], global_avg_pool(h)), store_[head_b_]);
    if (sites_.empty()) return rec;

    const std::size_t cg = h.dim(0), hg = h.dim(1), wg = h.dim(2);
    rec.global_feature = cfg_.stop_ds_gradient ? h.detach() : h;
    const Tensor global_flat = reshape(rec.global_feature, {cg, hg * wg});
    Tensor prev_att;
    for (std::size_t s = 0; s < sites_.size(); ++s) {
      const MhexParams p = site_params(s);
      Tensor x = block_out[sites_[s].block];
      if (cfg_.stop_ds_gradient) x = x.detach();
      const std::size_t c = x.dim(0), hh = x.dim(1), ww = x.dim(2);
      if (prev_att.defined()) x = add(x, downsample_pad(prev_att, c, hh, ww));
      Tensor xg = reshape(matmul(p.proj, global_flat), {c, hg, wg});
      xg = upsample_nearest(xg, hh, ww);
      SiteRecord sr;
      sr.host_index = sites_[s].block;
      sr.x = x;
      sr.x_global = xg;
      sr.out = mhex_forward(x, xg, p);
      prev_att = sr.out.gate.x_att;
      rec.sites.push_back(std::move(sr));
    }
    return rec;
  }

 private:
  struct Block {
    bool downsample = false;
    bool has_shortcut = false;
    std::size_t conv1_w = 0, conv1_b = 0, conv2_w = 0, conv2_b = 0, short_w = 0;
  };
  struct Site {
    std::size_t block = 0, w1 = 0, w2 = 0, proj = 0;
  };

  ResNetConfig cfg_;
  std::size_t stem_w_ = 0, stem_b_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<Block> blocks_;
  std::vector<Site> sites_;
};

// ------------------------------------------------------------------ transformer host

class TransformerModel final : public Model {
 public:
  explicit TransformerModel(TransformerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    CounterRng rng(cfg_.seed, 0x5452464D);  // "TRFM"
    const std::size_t d = cfg_.d_model, f = d * cfg_.ffn_mult;
    auto normal = [&](Shape shape, double sd) {
      std::vector<double> v(numel_of(shape));
      for (auto& e : v) e = sd * rng.normal();
      return Tensor::from(std::move(shape), std::move(v), true);
    };
    tok_emb_ = store_.add("tok_emb", normal({cfg_.vocab_size, d}, cfg_.embed_scale));
    pos_emb_ = store_.add("pos_emb", normal({cfg_.max_seq, d}, 0.1));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      Layer ly;
      ly.ln1_g = store_.add(pre + "ln1.g", Tensor::full({d}, 1.0, true));
      ly.ln1_b = store_.add(pre + "ln1.b", Tensor::zeros({d}, true));
      ly.wq = store_.add(pre + "wq", detail::small_uniform(rng, {d, d}, d));
      ly.bq = store_.add(pre + "bq", Tensor::zeros({d}, true));
      ly.wk = store_.add(pre + "wk", detail::small_uniform(rng, {d, d}, d));
      ly.bk = store_.add(pre + "bk", Tensor::zeros({d}, true));
      ly.wv = store_.add(pre + "wv", detail::small_uniform(rng, {d, d}, d));
      ly.bv = store_.add(pre + "bv", Tensor::zeros({d}, true));
      ly.wo = store_.add(pre + "wo", detail::small_uniform(rng, {d, d}, d));
      ly.bo = store_.add(pre + "bo", Tensor::zeros({d}, true));
      ly.ln2_g = store_.add(pre + "ln2.g", Tensor::full({d}, 1.0, true));
      ly.ln2_b = store_.add(pre + "ln2.b", Tensor::zeros({d}, true));
      ly.ff1_w = store_.add(pre + "ff1.w", detail::kaiming(rng, {d, f}, d));
      ly.ff1_b = store_.add(pre + "ff1.b", Tensor::zeros({f}, true));
      ly.ff2_w = store_.add(pre + "ff2.w", detail::small_uniform(rng, {f, d}, f));
      ly.ff2_b = store_.add(pre + "ff2.b", Tensor::zeros({d}, true));
      layers_.push_back(ly);
    }
    lnf_g_ = store_.add("lnf.g", Tensor::full({d}, 1.0, true));
    lnf_b_ = store_.add("lnf.b", Tensor::zeros({d}, true));
    head_w_ = store_.add("head.w", detail::small_uniform(rng, {cfg_.n_class, d}, d));
    head_b_ = store_.add("head.b", Tensor::zeros({cfg_.n_class}, true));
    for (std::size_t s = 0; s < cfg_.sites().size(); ++s) {
      const std::string pre = "site" + std::to_string(s) + ".";
      Site site;
      site.layer = cfg_.sites()[s];
      site.w1 = store_.add(pre + "w1", detail::small_uniform(rng, {d, d}, d), true);
      site.w2 = store_.add(pre + "w2", detail::small_uniform(rng, {cfg_.n_class, d}, d), true);
      site.proj = store_.add(pre + "proj", detail::small_uniform(rng, {d, d}, d), true);
      site.ln_g = store_.add(pre + "ln.g", Tensor::full({d}, 1.0, true), true);
      site.ln_b = store_.add(pre + "ln.b", Tensor::zeros({d}, true), true);
      sites_.push_back(site);
    }
  }

  const TransformerConfig& config() const { return cfg_; }
  HostKind kind() const override { return HostKind::transformer; }
  std::size_t n_class() const override { return cfg_.n_class; }
  KeyValues config_kv() const override { return cfg_.to_kv(); }
  std::size_t site_count() const override { return sites_.size(); }

  MhexParams site_params(std::size_t i) const override {
    const auto& s = sites_.at(i);
    return {store_[s.w1], store_[s.w2], store_[s.proj]};
  }

  std::unique_ptr<Model> clone() const override {
    auto m = std::make_unique<TransformerModel>(cfg_);
    m->copy_values_from(*this);
    return m;
  }

  std::unique_ptr<Model> without_mhex() const override {
    TransformerConfig c = cfg_;
    c.mhex_sites = std::vector<std::size_t>{};
    auto m = std::make_unique<TransformerModel>(c);
    for (auto& p : m->params()) {
      const NamedParam* src = find_param(p.name);
      auto d = p.tensor.mutable_data();
      std::copy(src->tensor.data().begin(), src->tensor.data().end(), d.begin());
    }
    return m;
  }

  ForwardRecord forward_collect(const Input& input) const override {
    const auto* seq = std::get_if<TokenSeq>(&input);
    if (!seq) throw DimensionError("transformer host expects a token sequence");
    const std::size_t t = seq->ids.size(), d = cfg_.d_model;
    if (t == 0 || t > cfg_.max_seq)
      throw DimensionError("sequence length " + std::to_string(t) + " outside [1, " + std::to_string(cfg_.max_seq) + "]");
    std::vector<int> valid;
    for (std::size_t j = 0; j < t; ++j)
      if (seq->ids[j] != kPadToken) valid.push_back(static_cast<int>(j));
    if (valid.empty()) throw ContractError("sequence contains only padding");
    const std::size_t tv = valid.size();

    // Padding keys never receive attention.
    std::vector<double> mask(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j)
        if (seq->ids[j] == kPadToken) mask[i * t + j] = -1e30;

    ForwardRecord rec;
    rec.input_h = 1;
    rec.input_w = tv;
    Tensor h = add(gather_rows(store_[tok_emb_], seq->ids), slice_rows(store_[pos_emb_], 0, t));
    const std::size_t dh = d / cfg_.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> attn_out;
    for (const auto& ly : layers_) {
      const Tensor a = layer_norm(h, store_[ly.ln1_g], store_[ly.ln1_b]);
      const Tensor q = broadcast_add(matmul(a, store_[ly.wq]), store_[ly.bq], 1);
      const Tensor k = broadcast_add(matmul(a, store_[ly.wk]), store_[ly.bk], 1);
      const Tensor v = broadcast_add(matmul(a, store_[ly.wv]), store_[ly.bv], 1);
      std::vector<Tensor> heads;
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        const Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
        const Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
        const Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
        const Tensor p = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), mask);
        heads.push_back(matmul(p, vh));
      }
      h = add(h, broadcast_add(matmul(concat_cols(heads), store_[ly.wo]), store_[ly.bo], 1));
      attn_out.push_back(h);
      Tensor f = layer_norm(h, store_[ly.ln2_g], store_[ly.ln2_b]);
      f = relu(broadcast_add(matmul(f, store_[ly.ff1_w]), store_[ly.ff1_b], 1));
      f = broadcast_add(matmul(f, store_[ly.ff2_w]), store_[ly.ff2_b], 1);
      h = add(h, f);
    }
    const Tensor hf = gather_rows(layer_norm(h, store_[lnf_g_], store_[lnf_b_]), valid);
    rec.last_features = reshape(transpose(hf), {d, 1, tv});
    const Tensor pooled = mean_axis(hf, 0);
    rec.final_logits = add(matvec(store_[head_w_], pooled), store_[head_b_]);
    if (sites_.empty()) return rec;

    rec.global_feature = cfg_.stop_ds_gradient ? pooled.detach() : pooled;
    const Tensor zeros = Tensor::zeros({d, 1, tv});
    Tensor carry;
    for (std::size_t s = 0; s < sites_.size(); ++s) {
      const MhexParams p = site_params(s);
      Tensor a = attn_out[sites_[s].layer];
      if (cfg_.stop_ds_gradient) a = a.detach();
      Tensor x = reshape(transpose(gather_rows(a, valid)), {d, 1, tv});
      if (carry.defined()) x = add(x, carry);
      const Tensor xg = broadcast_add(zeros, matvec(p.proj, rec.global_feature), 0);
      SiteRecord sr;
      sr.host_index = sites_[s].layer;
      sr.x = x;
      sr.x_global = xg;
      sr.out = mhex_forward(x, xg, p);
      const Tensor att_rows = transpose(reshape(sr.out.gate.x_att, {d, tv}));
      const Tensor normed = layer_norm(att_rows, store_[sites_[s].ln_g], store_[sites_[s].ln_b]);
      sr.x_att_normed = reshape(transpose(normed), {d, 1, tv});
      carry = sr.x_att_normed;
      rec.sites.push_back(std::move(sr));
    }
    return rec;
  }

 private:
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  struct Site {
    std::size_t layer = 0, w1 = 0, w2 = 0, proj = 0, ln_g = 0, ln_b = 0;
  };

  TransformerConfig cfg_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<Layer> layers_;
  std::vector<Site> sites_;
};

inline std::unique_ptr<Model> build_resnet(const ResNetConfig& cfg) { return std::make_unique<ResNetModel>(cfg); }

inline std::unique_ptr<Model> build_transformer(const TransformerConfig& cfg) {
  return std::make_unique<TransformerModel>(cfg);
}

/// Rebuilds a model from its canonical config text.
inline std::unique_ptr<Model> build_model(const KeyValues& kv) {
  const std::string host = kv.get("host");
  if (host == "resnet") return build_resnet(ResNetConfig::from_kv(kv));
  if (host == "transformer") return build_transformer(TransformerConfig::from_kv(kv));
  throw ConfigError("unknown host '" + host + "'");
}

}  // namespace mhex
