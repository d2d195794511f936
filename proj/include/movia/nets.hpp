#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "movia/nn_ops.hpp"
#include "movia/rng.hpp"

namespace movia {

using VarF = Var<float>;

// Incompatible or corrupt checkpoint (distinct from generic I/O failures so
// the CLI can map it to its own exit code).
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/*------------------------------- parameters -------------------------------*/

// Named trainable leaves in registration order. Order determines both the
// optimizer update sequence and the checkpoint layout.
class ParamStore {
 public:
  VarF create(const std::string& name, TensorF init) {
    check(!index_.count(name), "ParamStore: duplicate parameter name " + name);
    VarF v = make_var(std::move(init), true);
    index_[name] = items_.size();
    items_.push_back({name, v});
    return v;
  }

  const std::vector<std::pair<std::string, VarF>>& items() const { return items_; }

  VarF at(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "ParamStore: unknown parameter " + name);
    return items_[it->second].second;
  }

  std::vector<VarF> all() const {
    std::vector<VarF> out;
    out.reserve(items_.size());
    for (const auto& [n, v] : items_) out.push_back(v);
    return out;
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [name, v] : items_) n += v->value.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, VarF>> items_;
  std::unordered_map<std::string, size_t> index_;
};

/*------------------------------ initializers ------------------------------*/

namespace init {

inline TensorF he_normal(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
  TensorF t = rng.normal_tensor<float>(std::move(shape));
  float s = static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] *= s;
  return t;
}

inline TensorF xavier(Rng& rng, std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out) {
  TensorF t = rng.normal_tensor<float>(std::move(shape));
  float s = static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] *= s;
  return t;
}

}  // namespace init

/*---------------------------------- layers --------------------------------*/

struct Conv2dLayer {
  VarF w, b;
  int64_t stride = 1;

  static Conv2dLayer make(ParamStore& ps, const std::string& name, Rng& rng, int64_t kh,
                          int64_t kw, int64_t cin, int64_t cout, int64_t stride = 1,
                          bool zero_init = false) {
    Conv2dLayer l;
    l.stride = stride;
    l.w = ps.create(name + ".w", zero_init ? TensorF({kh, kw, cin, cout})
                                           : init::he_normal(rng, {kh, kw, cin, cout}, kh * kw * cin));
    l.b = ps.create(name + ".b", TensorF({cout}));
    return l;
  }

  VarF operator()(const VarF& x) const { return conv2d(x, w, b, stride); }
};

struct Conv1dTemporalLayer {
  VarF w, b;

  static Conv1dTemporalLayer make(ParamStore& ps, const std::string& name, Rng& rng, int64_t kt,
                                  int64_t cin, int64_t cout, bool zero_init = false) {
    Conv1dTemporalLayer l;
    l.w = ps.create(name + ".w",
                    zero_init ? TensorF({kt, cin, cout}) : init::he_normal(rng, {kt, cin, cout}, kt * cin));
    l.b = ps.create(name + ".b", TensorF({cout}));
    return l;
  }

  VarF operator()(const VarF& x) const { return conv1d_temporal(x, w, b); }
};

struct Conv3dLayer {
  VarF w, b;
  int64_t stride_s = 1, stride_t = 1;

  static Conv3dLayer make(ParamStore& ps, const std::string& name, Rng& rng, int64_t kt,
                          int64_t kh, int64_t kw, int64_t cin, int64_t cout, int64_t stride_s = 1,
                          int64_t stride_t = 1) {
    Conv3dLayer l;
    l.stride_s = stride_s;
    l.stride_t = stride_t;
    l.w = ps.create(name + ".w", init::he_normal(rng, {kt, kh, kw, cin, cout}, kt * kh * kw * cin));
    l.b = ps.create(name + ".b", TensorF({cout}));
    return l;
  }

  VarF operator()(const VarF& x) const { return conv3d(x, w, b, stride_s, stride_t); }
};

struct LinearLayer {
  VarF w, b;

  static LinearLayer make(ParamStore& ps, const std::string& name, Rng& rng, int64_t in,
                          int64_t out, bool zero_init = false) {
    LinearLayer l;
    l.w = ps.create(name + ".w", zero_init ? TensorF({in, out}) : init::xavier(rng, {in, out}, in, out));
    l.b = ps.create(name + ".b", TensorF({out}));
    return l;
  }

  VarF operator()(const VarF& x) const { return linear(x, w, b); }
};

struct GroupNormLayer {
  VarF g, b;
  int64_t groups = 1;

  static GroupNormLayer make(ParamStore& ps, const std::string& name, int64_t channels,
                             int64_t groups) {
    GroupNormLayer l;
    l.groups = std::min<int64_t>(groups, channels);
    while (channels % l.groups != 0) --l.groups;
    l.g = ps.create(name + ".g", TensorF({channels}, 1.f));
    l.b = ps.create(name + ".b", TensorF({channels}));
    return l;
  }

  VarF operator()(const VarF& x) const { return group_norm(x, groups, g, b); }
};

/*------------------------------- embeddings -------------------------------*/

inline TensorF sinusoidal_vec(double pos, int64_t dim) {
  TensorF v({dim});
  int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[2 * i] = static_cast<float>(std::sin(pos * freq));
    v[2 * i + 1] = static_cast<float>(std::cos(pos * freq));
  }
  return v;
}

// 2D separable positional encoding for a g x g token grid, half the
// dimensions per axis.
inline TensorF sinusoidal_grid(int64_t g, int64_t dim) {
  TensorF pe({g * g, dim});
  int64_t half = dim / 2;
  for (int64_t y = 0; y < g; ++y)
    for (int64_t x = 0; x < g; ++x) {
      TensorF ex = sinusoidal_vec(static_cast<double>(x), half);
      TensorF ey = sinusoidal_vec(static_cast<double>(y), dim - half);
      float* row = pe.data() + (y * g + x) * dim;
      std::copy(ex.data(), ex.data() + half, row);
      std::copy(ey.data(), ey.data() + (dim - half), row + half);
    }
  return pe;
}

// Sinusoidal encoding followed by a two-layer MLP; used for both the
// diffusion timestep and the fps condition.
struct ScalarEmbed {
  LinearLayer l1, l2;
  int64_t dim = 0;

  static ScalarEmbed make(ParamStore& ps, const std::string& name, Rng& rng, int64_t dim) {
    ScalarEmbed e;
    e.dim = dim;
    e.l1 = LinearLayer::make(ps, name + ".l1", rng, dim, dim);
    e.l2 = LinearLayer::make(ps, name + ".l2", rng, dim, dim);
    return e;
  }

  VarF operator()(double pos) const {
    VarF s = constant(sinusoidal_vec(pos, dim).reshaped({1, dim}));
    return reshape(l2(silu(l1(s))), {dim});
  }
};

/*--------------------------------- blocks ---------------------------------*/

struct SpatialResBlock {
  GroupNormLayer n1, n2;
  Conv2dLayer c1, c2;
  LinearLayer emb_proj;
  std::optional<Conv2dLayer> skip;

  static SpatialResBlock make(ParamStore& ps, const std::string& name, Rng& rng, int64_t cin,
                              int64_t cout, int64_t emb_dim, int64_t groups) {
    SpatialResBlock b;
    b.n1 = GroupNormLayer::make(ps, name + ".n1", cin, groups);
    b.c1 = Conv2dLayer::make(ps, name + ".c1", rng, 3, 3, cin, cout);
    b.emb_proj = LinearLayer::make(ps, name + ".emb", rng, emb_dim, cout);
    b.n2 = GroupNormLayer::make(ps, name + ".n2", cout, groups);
    b.c2 = Conv2dLayer::make(ps, name + ".c2", rng, 3, 3, cout, cout, 1, /*zero_init=*/true);
    if (cin != cout) b.skip = Conv2dLayer::make(ps, name + ".skip", rng, 1, 1, cin, cout);
    return b;
  }

  VarF operator()(const VarF& x, const VarF& emb) const {
    VarF h = c1(silu(n1(x)));
    h = add_channel_vector(h, reshape(emb_proj(reshape(emb, {1, emb->value.numel()})),
                                      {emb_proj.b->value.numel()}));
    h = c2(silu(n2(h)));
    return add(h, skip ? (*skip)(x) : x);
  }
};

// Residual temporal convolution pair; the closing projection starts at zero
// so a fresh network is an identical mapping across frames.
struct TemporalConvBlock {
  GroupNormLayer n;
  Conv1dTemporalLayer c1, c2;

  static TemporalConvBlock make(ParamStore& ps, const std::string& name, Rng& rng,
                                int64_t channels, int64_t kt, int64_t groups) {
    TemporalConvBlock b;
    b.n = GroupNormLayer::make(ps, name + ".n", channels, groups);
    b.c1 = Conv1dTemporalLayer::make(ps, name + ".c1", rng, kt, channels, channels);
    b.c2 = Conv1dTemporalLayer::make(ps, name + ".c2", rng, kt, channels, channels,
                                     /*zero_init=*/true);
    return b;
  }

  VarF operator()(const VarF& x) const { return add(x, c2(silu(c1(silu(n(x)))))); }
};

struct SpatialSelfAttnBlock {
  GroupNormLayer n;
  LinearLayer q, k, v, o;
  int64_t heads;

  static SpatialSelfAttnBlock make(ParamStore& ps, const std::string& name, Rng& rng,
                                   int64_t channels, int64_t heads, int64_t groups) {
    SpatialSelfAttnBlock b;
    b.heads = heads;
    b.n = GroupNormLayer::make(ps, name + ".n", channels, groups);
    b.q = LinearLayer::make(ps, name + ".q", rng, channels, channels);
    b.k = LinearLayer::make(ps, name + ".k", rng, channels, channels);
    b.v = LinearLayer::make(ps, name + ".v", rng, channels, channels);
    b.o = LinearLayer::make(ps, name + ".o", rng, channels, channels, /*zero_init=*/true);
    return b;
  }

  VarF operator()(const VarF& x) const {
    int64_t f = x->value.size(0), h = x->value.size(1), w = x->value.size(2), c = x->value.size(3);
    VarF t = reshape(n(x), {f, h * w, c});
    VarF att = attention(q(t), k(t), v(t), heads);
    return add(x, reshape(o(att), {f, h, w, c}));
  }
};

// Cross-attention from spatial positions onto the key-frame tokens.
struct CrossAttnBlock {
  GroupNormLayer n;
  LinearLayer q, k, v, o;
  int64_t heads;

  static CrossAttnBlock make(ParamStore& ps, const std::string& name, Rng& rng, int64_t channels,
                             int64_t token_dim, int64_t heads, int64_t groups) {
    CrossAttnBlock b;
    b.heads = heads;
    b.n = GroupNormLayer::make(ps, name + ".n", channels, groups);
    b.q = LinearLayer::make(ps, name + ".q", rng, channels, channels);
    b.k = LinearLayer::make(ps, name + ".k", rng, token_dim, channels);
    b.v = LinearLayer::make(ps, name + ".v", rng, token_dim, channels);
    b.o = LinearLayer::make(ps, name + ".o", rng, channels, channels, /*zero_init=*/true);
    return b;
  }

  // tokens: (N, D) shared across frames
  VarF operator()(const VarF& x, const VarF& tokens) const {
    int64_t f = x->value.size(0), h = x->value.size(1), w = x->value.size(2), c = x->value.size(3);
    int64_t nt = tokens->value.size(0), d = tokens->value.size(1);
    VarF t = reshape(n(x), {f, h * w, c});
    VarF tok = reshape(tokens, {1, nt, d});
    VarF att = attention(q(t), k(tok), v(tok), heads);
    return add(x, reshape(o(att), {f, h, w, c}));
  }
};

struct TemporalAttnBlock {
  GroupNormLayer n;
  LinearLayer q, k, v, o;
  int64_t heads;

  static TemporalAttnBlock make(ParamStore& ps, const std::string& name, Rng& rng,
                                int64_t channels, int64_t heads, int64_t groups) {
    TemporalAttnBlock b;
    b.heads = heads;
    b.n = GroupNormLayer::make(ps, name + ".n", channels, groups);
    b.q = LinearLayer::make(ps, name + ".q", rng, channels, channels);
    b.k = LinearLayer::make(ps, name + ".k", rng, channels, channels);
    b.v = LinearLayer::make(ps, name + ".v", rng, channels, channels);
    b.o = LinearLayer::make(ps, name + ".o", rng, channels, channels, /*zero_init=*/true);
    return b;
  }

  VarF operator()(const VarF& x) const {
    int64_t h = x->value.size(1), w = x->value.size(2);
    VarF t = to_temporal_tokens(n(x));  // (HW, F, C)
    VarF att = attention(q(t), k(t), v(t), heads);
    VarF back = from_temporal_tokens(o(att), h, w);
    return add(x, back);
  }
};

/*------------------------------ key-frame encoder --------------------------*/

// Small trained convolutional tower producing a g x g grid of unpooled
// tokens with fixed 2D sinusoidal positions.
struct KeyFrameEncoder {
  Conv2dLayer c1, c2, c3;
  GroupNormLayer n1, n2;
  TensorF pe;  // (g*g, dim), fixed
  int64_t grid = 8, dim = 0;

  static KeyFrameEncoder make(ParamStore& ps, const std::string& name, Rng& rng, int64_t image_hw,
                              int64_t grid, int64_t dim, int64_t groups) {
    check(image_hw % grid == 0 && (image_hw / grid) % 2 == 0,
          "KeyFrameEncoder: grid must divide the image size by a multiple of 2");
    int64_t w = std::max<int64_t>(8, dim / 2);
    KeyFrameEncoder e;
    e.grid = grid;
    e.dim = dim;
    e.c1 = Conv2dLayer::make(ps, name + ".c1", rng, 3, 3, 3, w);
    e.n1 = GroupNormLayer::make(ps, name + ".n1", w, groups);
    e.c2 = Conv2dLayer::make(ps, name + ".c2", rng, 3, 3, w, w * 2, 2);
    e.n2 = GroupNormLayer::make(ps, name + ".n2", w * 2, groups);
    e.c3 = Conv2dLayer::make(ps, name + ".c3", rng, 3, 3, w * 2, dim, 2);
    e.pe = sinusoidal_grid(grid, dim);
    return e;
  }

  // key: (H, W, 3) -> tokens (g*g, dim)
  VarF operator()(const TensorF& key, bool with_pe = true) const {
    check(key.rank() == 3 && key.size(2) == 3, "KeyFrameEncoder: key frame must be (H,W,3)");
    VarF x = constant(key.reshaped({1, key.size(0), key.size(1), 3}));
    x = c2(silu(n1(c1(x))));
    x = c3(silu(n2(x)));
    check(x->value.size(1) == grid && x->value.size(2) == grid,
          "KeyFrameEncoder: unexpected token grid " + x->value.shape_str());
    VarF tokens = reshape(x, {grid * grid, dim});
    if (!with_pe) return tokens;
    return add(tokens, constant(TensorF(pe)));
  }
};

/*---------------------------------- UNet ----------------------------------*/

struct UNetConfig {
  int64_t in_channels = 5;
  int64_t out_channels = 5;
  int64_t base_width = 16;
  int depth = 2;  // resolution levels; each level halves the grid
  std::set<int64_t> attn_resolutions = {16};
  int64_t temporal_kernel = 3;
  int64_t embed_dim = 32;
  int64_t num_heads = 2;
  int64_t key_grid = 8;
  int64_t norm_groups = 8;
  int64_t input_size = 32;  // spatial size of the noised tensor

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["in_channels"] = in_channels;
    j["out_channels"] = out_channels;
    j["base_width"] = base_width;
    j["depth"] = depth;
    j["attn_resolutions"] = std::vector<int64_t>(attn_resolutions.begin(), attn_resolutions.end());
    j["temporal_kernel"] = temporal_kernel;
    j["embed_dim"] = embed_dim;
    j["num_heads"] = num_heads;
    j["key_grid"] = key_grid;
    j["norm_groups"] = norm_groups;
    j["input_size"] = input_size;
    return j;
  }

  static UNetConfig from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.in_channels = j.at("in_channels");
    c.out_channels = j.at("out_channels");
    c.base_width = j.at("base_width");
    c.depth = j.at("depth");
    c.attn_resolutions.clear();
    for (int64_t r : j.at("attn_resolutions")) c.attn_resolutions.insert(r);
    c.temporal_kernel = j.at("temporal_kernel");
    c.embed_dim = j.at("embed_dim");
    c.num_heads = j.at("num_heads");
    c.key_grid = j.at("key_grid");
    c.norm_groups = j.at("norm_groups");
    c.input_size = j.at("input_size");
    return c;
  }
};

// Fig-3 style spatio-temporal denoiser: per level a spatial residual block
// (with the timestep + fps features added after its first convolution),
// a temporal convolution block, self + key-frame cross attention at the
// configured resolutions, and temporal attention. Temporal branches are
// zero-initialized residuals, so at init the network equals its 2D spatial
// subnetwork applied per frame (pass spatial_only to evaluate that subnet).
class UNet3D {
 public:
  UNet3D(ParamStore& ps, const std::string& name, Rng& rng, const UNetConfig& cfg) : cfg_(cfg) {
    check(cfg.depth >= 1 && cfg.depth <= 4, "UNet3D: depth out of range");
    auto track = [&](bool temporal, int64_t before) {
      // bookkeeping for per-group learning rates
      auto& dst = temporal ? temporal_params_ : spatial_params_;
      for (size_t i = size_t(before); i < ps.items().size(); ++i) dst.push_back(ps.items()[i].second);
    };
    int64_t mark = int64_t(ps.items().size());

    t_embed_ = ScalarEmbed::make(ps, name + ".t_embed", rng, cfg.embed_dim);
    fps_embed_ = ScalarEmbed::make(ps, name + ".fps_embed", rng, cfg.embed_dim);
    track(true, mark);  // conditioning MLPs count as new layers

    std::vector<int64_t> widths(size_t(cfg.depth));
    for (int l = 0; l < cfg.depth; ++l) widths[size_t(l)] = cfg.base_width << l;

    mark = int64_t(ps.items().size());
    stem_ = Conv2dLayer::make(ps, name + ".stem", rng, 3, 3, cfg.in_channels, widths[0]);
    track(false, mark);

    int64_t size = cfg.input_size;
    for (int l = 0; l < cfg.depth; ++l) {
      std::string lv = name + ".down" + std::to_string(l);
      int64_t cin = l == 0 ? widths[0] : widths[size_t(l - 1)];
      if (l > 0) {
        mark = int64_t(ps.items().size());
        down_convs_.push_back(Conv2dLayer::make(ps, lv + ".ds", rng, 3, 3, cin, cin, 2));
        track(false, mark);
        size /= 2;
      }
      Level lev;
      lev.size = size;
      lev.attn = cfg.attn_resolutions.count(size) > 0;
      mark = int64_t(ps.items().size());
      lev.res = SpatialResBlock::make(ps, lv + ".res", rng, cin, widths[size_t(l)], cfg.embed_dim,
                                      cfg.norm_groups);
      if (lev.attn) {
        lev.sattn = SpatialSelfAttnBlock::make(ps, lv + ".sattn", rng, widths[size_t(l)],
                                               cfg.num_heads, cfg.norm_groups);
        lev.xattn = CrossAttnBlock::make(ps, lv + ".xattn", rng, widths[size_t(l)], cfg.embed_dim,
                                         cfg.num_heads, cfg.norm_groups);
      }
      track(false, mark);
      mark = int64_t(ps.items().size());
      lev.tconv = TemporalConvBlock::make(ps, lv + ".tconv", rng, widths[size_t(l)],
                                          cfg.temporal_kernel, cfg.norm_groups);
      if (lev.attn)
        lev.tattn = TemporalAttnBlock::make(ps, lv + ".tattn", rng, widths[size_t(l)],
                                            cfg.num_heads, cfg.norm_groups);
      track(true, mark);
      down_.push_back(std::move(lev));
    }

    int64_t wmid = widths.back();
    mark = int64_t(ps.items().size());
    mid_res1_ = SpatialResBlock::make(ps, name + ".mid.res1", rng, wmid, wmid, cfg.embed_dim,
                                      cfg.norm_groups);
    mid_sattn_ = SpatialSelfAttnBlock::make(ps, name + ".mid.sattn", rng, wmid, cfg.num_heads,
                                            cfg.norm_groups);
    mid_xattn_ = CrossAttnBlock::make(ps, name + ".mid.xattn", rng, wmid, cfg.embed_dim,
                                      cfg.num_heads, cfg.norm_groups);
    mid_res2_ = SpatialResBlock::make(ps, name + ".mid.res2", rng, wmid, wmid, cfg.embed_dim,
                                      cfg.norm_groups);
    track(false, mark);
    mark = int64_t(ps.items().size());
    mid_tconv_ = TemporalConvBlock::make(ps, name + ".mid.tconv", rng, wmid, cfg.temporal_kernel,
                                         cfg.norm_groups);
    mid_tattn_ = TemporalAttnBlock::make(ps, name + ".mid.tattn", rng, wmid, cfg.num_heads,
                                         cfg.norm_groups);
    track(true, mark);

    for (int l = cfg.depth - 1; l >= 0; --l) {
      std::string lv = name + ".up" + std::to_string(l);
      Level lev;
      lev.size = cfg.input_size >> l;
      lev.attn = cfg.attn_resolutions.count(lev.size) > 0;
      mark = int64_t(ps.items().size());
      lev.res = SpatialResBlock::make(ps, lv + ".res", rng, 2 * widths[size_t(l)],
                                      widths[size_t(l)], cfg.embed_dim, cfg.norm_groups);
      if (lev.attn) {
        lev.sattn = SpatialSelfAttnBlock::make(ps, lv + ".sattn", rng, widths[size_t(l)],
                                               cfg.num_heads, cfg.norm_groups);
        lev.xattn = CrossAttnBlock::make(ps, lv + ".xattn", rng, widths[size_t(l)], cfg.embed_dim,
                                         cfg.num_heads, cfg.norm_groups);
      }
      track(false, mark);
      mark = int64_t(ps.items().size());
      lev.tconv = TemporalConvBlock::make(ps, lv + ".tconv", rng, widths[size_t(l)],
                                          cfg.temporal_kernel, cfg.norm_groups);
      if (lev.attn)
        lev.tattn = TemporalAttnBlock::make(ps, lv + ".tattn", rng, widths[size_t(l)],
                                            cfg.num_heads, cfg.norm_groups);
      track(true, mark);
      if (l > 0) {
        mark = int64_t(ps.items().size());
        up_convs_.push_back(Conv2dLayer::make(ps, lv + ".us", rng, 3, 3, widths[size_t(l)],
                                              widths[size_t(l - 1)]));
        track(false, mark);
      }
      up_.push_back(std::move(lev));
    }

    mark = int64_t(ps.items().size());
    head_norm_ = GroupNormLayer::make(ps, name + ".head.n", widths[0], cfg.norm_groups);
    head_ = Conv2dLayer::make(ps, name + ".head.c", rng, 3, 3, widths[0], cfg.out_channels, 1,
                              /*zero_init=*/true);
    track(false, mark);
  }

  const UNetConfig& config() const { return cfg_; }
  const std::vector<VarF>& spatial_params() const { return spatial_params_; }
  const std::vector<VarF>& temporal_params() const { return temporal_params_; }

  // x: (F, s, s, in_channels); tokens: (N, embed_dim). spatial_only runs the
  // per-frame 2D subnetwork (temporal blocks skipped).
  VarF forward(const VarF& x, int t, int fps, const VarF& tokens, bool spatial_only = false) const {
    check(x->value.rank() == 4 && x->value.size(3) == cfg_.in_channels,
          "UNet3D: bad input shape " + x->value.shape_str());
    check(x->value.size(1) == cfg_.input_size && x->value.size(2) == cfg_.input_size,
          "UNet3D: input grid mismatch");
    VarF emb = silu(add(t_embed_(static_cast<double>(t)), fps_embed_(static_cast<double>(fps))));

    VarF h = stem_(x);
    std::vector<VarF> skips;
    for (size_t l = 0; l < down_.size(); ++l) {
      if (l > 0) h = down_convs_[l - 1](h);
      const Level& lev = down_[l];
      h = lev.res(h, emb);
      if (!spatial_only) h = lev.tconv(h);
      if (lev.attn) {
        h = lev.sattn(h);
        h = lev.xattn(h, tokens);
        if (!spatial_only) h = lev.tattn(h);
      }
      skips.push_back(h);
    }

    h = mid_res1_(h, emb);
    if (!spatial_only) h = mid_tconv_(h);
    h = mid_sattn_(h);
    h = mid_xattn_(h, tokens);
    if (!spatial_only) h = mid_tattn_(h);
    h = mid_res2_(h, emb);

    for (size_t i = 0; i < up_.size(); ++i) {
      size_t l = up_.size() - 1 - i;  // level index of this up block
      const Level& lev = up_[i];
      h = concat_channels<float>({h, skips[l]});
      h = lev.res(h, emb);
      if (!spatial_only) h = lev.tconv(h);
      if (lev.attn) {
        h = lev.sattn(h);
        h = lev.xattn(h, tokens);
        if (!spatial_only) h = lev.tattn(h);
      }
      if (l > 0) h = up_convs_[i](upsample_nearest2x(h));
    }

    return head_(silu(head_norm_(h)));
  }

 private:
  struct Level {
    int64_t size = 0;
    bool attn = false;
    SpatialResBlock res;
    TemporalConvBlock tconv;
    SpatialSelfAttnBlock sattn;
    CrossAttnBlock xattn;
    TemporalAttnBlock tattn;
  };

  UNetConfig cfg_;
  ScalarEmbed t_embed_, fps_embed_;
  Conv2dLayer stem_;
  std::vector<Conv2dLayer> down_convs_, up_convs_;
  std::vector<Level> down_, up_;
  SpatialResBlock mid_res1_, mid_res2_;
  TemporalConvBlock mid_tconv_;
  SpatialSelfAttnBlock mid_sattn_;
  CrossAttnBlock mid_xattn_;
  TemporalAttnBlock mid_tattn_;
  GroupNormLayer head_norm_;
  Conv2dLayer head_;
  std::vector<VarF> spatial_params_, temporal_params_;
};

/*-------------------------------- checkpoints ------------------------------*/

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const std::string& kind,
                            const nlohmann::json& meta, const ParamStore& ps) {
  nlohmann::json dir;
  dir["kind"] = kind;
  dir["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, v] : ps.items()) {
    nlohmann::json t;
    t["name"] = name;
    t["shape"] = v->value.shape();
    tensors.push_back(t);
  }
  dir["tensors"] = tensors;
  std::string header = dir.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
  out.write("MOVIACKP", 8);
  uint32_t ver = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&ver), 4);
  uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, v] : ps.items())
    out.write(reinterpret_cast<const char*>(v->value.data()),
              static_cast<std::streamsize>(size_t(v->value.numel()) * 4));
  if (!out) throw IoError("save_checkpoint: write failed: " + path.string());
}

struct Checkpoint {
  std::string kind;
  nlohmann::json meta;
  std::map<std::string, TensorF> tensors;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MOVIACKP", 8) != 0)
    throw CheckpointError("load_checkpoint: bad magic in " + path.string());
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), 4);
  if (ver != kCheckpointVersion)
    throw CheckpointError("load_checkpoint: version " + std::to_string(ver) +
                          " is incompatible with " + std::to_string(kCheckpointVersion));
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw CheckpointError("load_checkpoint: truncated header in " + path.string());

  Checkpoint ck;
  nlohmann::json dir = nlohmann::json::parse(header, nullptr, false);
  if (dir.is_discarded()) throw CheckpointError("load_checkpoint: corrupt header json");
  ck.kind = dir.at("kind");
  ck.meta = dir.at("meta");
  for (const auto& t : dir.at("tensors")) {
    std::vector<int64_t> shape = t.at("shape").get<std::vector<int64_t>>();
    TensorF tensor(shape);
    in.read(reinterpret_cast<char*>(tensor.data()),
            static_cast<std::streamsize>(size_t(tensor.numel()) * 4));
    if (!in) throw CheckpointError("load_checkpoint: truncated tensor payload for " +
                                   t.at("name").get<std::string>());
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(tensor));
  }
  return ck;
}

// Copies checkpoint tensors into an already-built store; names and shapes
// must match exactly.
inline void load_into_store(const Checkpoint& ck, ParamStore& ps) {
  for (const auto& [name, v] : ps.items()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw CheckpointError("checkpoint is missing parameter " + name);
    if (!(it->second.shape() == v->value.shape()))
      throw CheckpointError("checkpoint shape mismatch for " + name + ": " +
                            it->second.shape_str() + " vs " + v->value.shape_str());
    v->value = it->second;
  }
  if (ck.tensors.size() != ps.items().size())
    throw CheckpointError("checkpoint carries " + std::to_string(ck.tensors.size()) +
                          " tensors, model expects " + std::to_string(ps.items().size()));
}

}  // namespace movia
