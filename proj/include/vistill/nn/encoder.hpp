#pragma once

// Image encoders: a residual CNN with group norm and a pre-norm ViT. Both
// emit one feature vector per image; an optional linear projection maps the
// native feature width onto a shared (teacher) dimension.
//
// Downsampling convolutions deliberately use even kernels (stem/downsample
// 4x4 stride 2 pad 1, skip 2x2 stride 2): on even grids those are exactly
// reflection-equivariant, so flipping the input and flipping every kernel
// yields bit-identical pooled features. Stride-1 convolutions are 3x3.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vistill/core/dispatch.hpp"
#include "vistill/core/rng.hpp"

namespace vistill::nn {

enum class Family { CnnResidual, Vit };

inline std::string family_name(Family f) { return f == Family::CnnResidual ? "cnn_residual" : "vit"; }
inline Family family_from(const std::string& s) {
  if (s == "cnn_residual") return Family::CnnResidual;
  if (s == "vit") return Family::Vit;
  throw ConfigError("unknown encoder family '" + s + "'");
}

struct EncoderConfig {
  Family family = Family::CnnResidual;
  int64_t width = 32;       // channels (cnn) or embed dim (vit)
  int64_t depth = 4;        // residual blocks or transformer blocks
  int64_t patch_size = 8;   // vit only
  int64_t heads = 4;        // vit only
  int64_t feature_dim = 128;  // D_out of the emitted feature
  int64_t input_resolution = 64;
  int64_t groups = 8;       // group-norm groups (cnn)
  std::string param_budget_tag;

  // number of stride-2 downsample blocks after the stem
  int64_t downsamples() const { return family == Family::CnnResidual ? (depth - 1) / 2 : 0; }
  int64_t total_stride() const { return 2ll << downsamples(); }

  int64_t native_dim() const {
    return family == Family::CnnResidual ? width << downsamples() : width;
  }
  bool needs_projection() const { return native_dim() != feature_dim; }

  void validate() const {
    if (width < 1 || depth < 1 || feature_dim < 1 || input_resolution < 1)
      throw ConfigError("encoder config: non-positive dimension");
    if (family == Family::Vit) {
      if (patch_size < 1 || input_resolution % patch_size != 0)
        throw ConfigError("encoder config: input_resolution must be divisible by patch_size");
      if (heads < 1 || width % heads != 0) throw ConfigError("encoder config: embed dim must be divisible by heads");
    } else {
      if (input_resolution % total_stride() != 0)
        throw ConfigError("encoder config: input_resolution must be divisible by total stride " +
                          std::to_string(total_stride()));
      if (width % groups != 0) throw ConfigError("encoder config: width must be divisible by group-norm groups");
    }
  }
};

/// Optional capture of internals for the analysis tools.
template <class T>
struct EncodeTrace {
  Var<T> last_conv_act;                   // cnn: post-activation maps of the final block
  std::vector<std::vector<T>> attn_probs;  // vit: per-layer softmax probs [heads*T*T] (batch 1)
};

template <class T>
struct Encoder {
  EncoderConfig config;
  std::map<std::string, Var<T>> params;  // name-ordered; iteration order is the canonical order

  Var<T>& p(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("encoder parameter '" + name + "' missing");
    return it->second;
  }
  const Var<T>& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("encoder parameter '" + name + "' missing");
    return it->second;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (const auto& [k, v] : params) out.push_back(v);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& [k, v] : params) v->requires_grad = on;
  }
};

template <class T>
int64_t count_params(const Encoder<T>& e) {
  int64_t n = 0;
  for (const auto& [k, v] : e.params) n += v->size();
  return n;
}

namespace detail {

template <class T>
Var<T> init_param(std::map<std::string, Var<T>>& m, uint64_t seed, const std::string& name, Dims shape,
                  const char* kind) {
  auto v = make_var<T>(std::move(shape), true);
  if (std::string_view(kind) == "weight") {
    RngStream rng(derive_seed(seed, name));
    for (auto& x : v->data) x = static_cast<T>(rng.normal(0.0, 0.02));
  } else if (std::string_view(kind) == "one") {
    std::fill(v->data.begin(), v->data.end(), T(1));
  }  // "zero": already zero-filled
  m.emplace(name, v);
  return v;
}

}  // namespace detail

/// Channel count of residual block `i` (stage doubles at blocks 2, 4, ...).
inline int64_t cnn_block_channels(const EncoderConfig& c, int64_t i) { return c.width << ((i + 1) / 2); }

template <class T>
Encoder<T> build_encoder(const EncoderConfig& config, uint64_t seed) {
  config.validate();
  Encoder<T> e;
  e.config = config;
  auto& m = e.params;
  using detail::init_param;
  if (config.family == Family::CnnResidual) {
    init_param<T>(m, seed, "stem.conv.w", {config.width, 3, 4, 4}, "weight");
    init_param<T>(m, seed, "stem.gn.gamma", {config.width}, "one");
    init_param<T>(m, seed, "stem.gn.beta", {config.width}, "zero");
    int64_t in_ch = config.width;
    for (int64_t i = 0; i < config.depth; ++i) {
      const bool down = (i > 0 && i % 2 == 0);
      const int64_t out_ch = down ? in_ch * 2 : in_ch;
      const std::string b = "block" + std::to_string(i) + ".";
      init_param<T>(m, seed, b + "conv1.w", {out_ch, in_ch, down ? 4 : 3, down ? 4 : 3}, "weight");
      init_param<T>(m, seed, b + "gn1.gamma", {out_ch}, "one");
      init_param<T>(m, seed, b + "gn1.beta", {out_ch}, "zero");
      init_param<T>(m, seed, b + "conv2.w", {out_ch, out_ch, 3, 3}, "weight");
      init_param<T>(m, seed, b + "gn2.gamma", {out_ch}, "one");
      init_param<T>(m, seed, b + "gn2.beta", {out_ch}, "zero");
      if (down) init_param<T>(m, seed, b + "skip.w", {out_ch, in_ch, 2, 2}, "weight");
      in_ch = out_ch;
    }
  } else {
    const int64_t E = config.width;
    const int64_t tokens = (config.input_resolution / config.patch_size) * (config.input_resolution / config.patch_size);
    init_param<T>(m, seed, "patch.w", {E, 3, config.patch_size, config.patch_size}, "weight");
    init_param<T>(m, seed, "patch.b", {E}, "zero");
    init_param<T>(m, seed, "cls", {1, E}, "weight");
    init_param<T>(m, seed, "pos", {tokens + 1, E}, "weight");
    for (int64_t i = 0; i < config.depth; ++i) {
      const std::string b = "block" + std::to_string(i) + ".";
      init_param<T>(m, seed, b + "ln1.gamma", {E}, "one");
      init_param<T>(m, seed, b + "ln1.beta", {E}, "zero");
      init_param<T>(m, seed, b + "qkv.w", {E, 3 * E}, "weight");
      init_param<T>(m, seed, b + "qkv.b", {3 * E}, "zero");
      init_param<T>(m, seed, b + "attn_out.w", {E, E}, "weight");
      init_param<T>(m, seed, b + "attn_out.b", {E}, "zero");
      init_param<T>(m, seed, b + "ln2.gamma", {E}, "one");
      init_param<T>(m, seed, b + "ln2.beta", {E}, "zero");
      init_param<T>(m, seed, b + "mlp1.w", {E, 4 * E}, "weight");
      init_param<T>(m, seed, b + "mlp1.b", {4 * E}, "zero");
      init_param<T>(m, seed, b + "mlp2.w", {4 * E, E}, "weight");
      init_param<T>(m, seed, b + "mlp2.b", {E}, "zero");
    }
    init_param<T>(m, seed, "final_ln.gamma", {E}, "one");
    init_param<T>(m, seed, "final_ln.beta", {E}, "zero");
  }
  if (config.needs_projection()) {
    init_param<T>(m, seed, "proj.w", {config.native_dim(), config.feature_dim}, "weight");
    init_param<T>(m, seed, "proj.b", {config.feature_dim}, "zero");
  }
  return e;
}

namespace detail {

template <class T>
Var<T> cnn_forward(Graph<T>& g, const Encoder<T>& e, const Var<T>& x, EncodeTrace<T>* trace) {
  const auto& c = e.config;
  auto h = conv2d(g, x, e.p("stem.conv.w"), 2, 1);
  h = group_norm(g, h, e.p("stem.gn.gamma"), e.p("stem.gn.beta"), c.groups);
  h = relu(g, h);
  for (int64_t i = 0; i < c.depth; ++i) {
    const bool down = (i > 0 && i % 2 == 0);
    const std::string b = "block" + std::to_string(i) + ".";
    auto main = conv2d(g, h, e.p(b + "conv1.w"), down ? 2 : 1, 1);
    main = group_norm(g, main, e.p(b + "gn1.gamma"), e.p(b + "gn1.beta"), c.groups);
    main = relu(g, main);
    main = conv2d(g, main, e.p(b + "conv2.w"), 1, 1);
    main = group_norm(g, main, e.p(b + "gn2.gamma"), e.p(b + "gn2.beta"), c.groups);
    auto skip = down ? conv2d(g, h, e.p(b + "skip.w"), 2, 0) : h;
    h = relu(g, add(g, main, skip));
  }
  if (trace) trace->last_conv_act = h;
  const int64_t side = h->dim(2);
  auto pooled = avg_pool2d(g, h, side, side);
  return reshape(g, pooled, {h->dim(0), h->dim(1)});
}

template <class T>
Var<T> vit_forward(Graph<T>& g, const Encoder<T>& e, const Var<T>& x, EncodeTrace<T>* trace) {
  const auto& c = e.config;
  const int64_t B = x->dim(0), E = c.width, P = c.patch_size;
  const int64_t grid = c.input_resolution / P, Tn = grid * grid + 1;
  const int64_t Hh = c.heads, Dd = E / Hh;
  auto p = conv2d(g, x, e.p("patch.w"), P, 0);          // [B,E,g,g]
  p = add(g, p, e.p("patch.b"));
  p = reshape(g, p, {B, E, grid * grid});
  p = transpose(g, p, {0, 2, 1});                        // [B,tokens,E]
  auto cls = embedding_lookup(g, e.p("cls"), std::vector<int64_t>(B, 0));
  auto seq = concat<T>(g, {reshape(g, cls, {B, 1, E}), p}, 1);  // [B,T,E]
  auto pos_flat = reshape(g, e.p("pos"), {Tn * E});
  seq = reshape(g, add(g, reshape(g, seq, {B, Tn * E}), pos_flat), {B, Tn, E});
  for (int64_t i = 0; i < c.depth; ++i) {
    const std::string b = "block" + std::to_string(i) + ".";
    auto flat = reshape(g, seq, {B * Tn, E});
    auto h = layer_norm(g, flat, e.p(b + "ln1.gamma"), e.p(b + "ln1.beta"));
    auto qkv = add(g, matmul(g, h, e.p(b + "qkv.w")), e.p(b + "qkv.b"));
    auto split_heads = [&](int64_t lo) {
      auto part = slice(g, qkv, 1, lo * E, (lo + 1) * E);
      return transpose(g, reshape(g, part, {B, Tn, Hh, Dd}), {0, 2, 1, 3});  // [B,H,T,D]
    };
    auto q = split_heads(0), k = split_heads(1), v = split_heads(2);
    std::vector<T> probs;
    auto a = scaled_dot_product_attention(g, q, k, v, trace ? &probs : nullptr);
    if (trace) trace->attn_probs.push_back(std::move(probs));
    a = reshape(g, transpose(g, a, {0, 2, 1, 3}), {B * Tn, E});
    a = add(g, matmul(g, a, e.p(b + "attn_out.w")), e.p(b + "attn_out.b"));
    seq = add(g, seq, reshape(g, a, {B, Tn, E}));
    auto flat2 = reshape(g, seq, {B * Tn, E});
    auto h2 = layer_norm(g, flat2, e.p(b + "ln2.gamma"), e.p(b + "ln2.beta"));
    auto mid = gelu(g, add(g, matmul(g, h2, e.p(b + "mlp1.w")), e.p(b + "mlp1.b")));
    auto out = add(g, matmul(g, mid, e.p(b + "mlp2.w")), e.p(b + "mlp2.b"));
    seq = add(g, seq, reshape(g, out, {B, Tn, E}));
  }
  auto flat = reshape(g, seq, {B * Tn, E});
  flat = layer_norm(g, flat, e.p("final_ln.gamma"), e.p("final_ln.beta"));
  auto seq_n = reshape(g, flat, {B, Tn, E});
  auto cls_out = slice(g, seq_n, 1, 0, 1);  // final [CLS] representation
  return reshape(g, cls_out, {B, E});
}

}  // namespace detail

/// One feature vector per image. Images are [B,3,R,R] with R equal to the
/// configured input resolution.
template <class T>
Var<T> encode(Graph<T>& g, const Encoder<T>& e, const Var<T>& images, EncodeTrace<T>* trace = nullptr) {
  if (images->rank() != 4 || images->dim(1) != 3)
    throw ShapeError("encode expects images [B,3,H,W], got " + dims_str(images->shape));
  if (images->dim(2) != e.config.input_resolution || images->dim(3) != e.config.input_resolution)
    throw ShapeError("encode: resolution mismatch, expected " + std::to_string(e.config.input_resolution) +
                     ", got " + dims_str(images->shape));
  auto feat = e.config.family == Family::CnnResidual ? detail::cnn_forward(g, e, images, trace)
                                                     : detail::vit_forward(g, e, images, trace);
  if (e.config.needs_projection()) feat = add(g, matmul(g, feat, e.p("proj.w")), e.p("proj.b"));
  return feat;
}

// ---------------------------------------------------------------------------
// Desk-scale presets. The vit half-size student is parameter-matched to the
// tiny CNN student (within a couple of percent) so the architectural-bias
// comparison is at equal budget.
// ---------------------------------------------------------------------------

inline EncoderConfig teacher_vit_config() {
  return {.family = Family::Vit, .width = 128, .depth = 6, .patch_size = 8, .heads = 4,
          .feature_dim = 128, .input_resolution = 64, .param_budget_tag = "teacher"};
}

inline EncoderConfig teacher_vit_large_config() {
  return {.family = Family::Vit, .width = 192, .depth = 8, .patch_size = 8, .heads = 4,
          .feature_dim = 192, .input_resolution = 64, .param_budget_tag = "teacher-large"};
}

inline EncoderConfig student_cnn_config(int64_t feature_dim = 128) {
  return {.family = Family::CnnResidual, .width = 32, .depth = 4, .feature_dim = feature_dim,
          .input_resolution = 64, .param_budget_tag = "tiny"};
}

inline EncoderConfig student_cnn_big_config(int64_t feature_dim = 128) {
  return {.family = Family::CnnResidual, .width = 64, .depth = 6, .feature_dim = feature_dim,
          .input_resolution = 64, .param_budget_tag = "2x-tiny"};
}

inline EncoderConfig student_vit_half_config(int64_t feature_dim = 128) {
  return {.family = Family::Vit, .width = 68, .depth = 3, .patch_size = 8, .heads = 4,
          .feature_dim = feature_dim, .input_resolution = 64, .param_budget_tag = "tiny-half"};
}

}  // namespace vistill::nn
