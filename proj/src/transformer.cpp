#include "l4seg/transformer.hpp"

#include <cmath>

namespace l4s {

void TransformerLayerConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_kv_heads <= 0 || d_ff <= 0)
    fail(Err::usage, "transformer config: extents must be positive");
  if (d_model % n_heads != 0)
    fail(Err::usage, "transformer config: d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
  if (n_heads % n_kv_heads != 0)
    fail(Err::usage, "transformer config: n_heads " + std::to_string(n_heads) +
                         " not divisible by n_kv_heads " + std::to_string(n_kv_heads));
  if (d_ff < d_model) fail(Err::usage, "transformer config: d_ff must be >= d_model");
  if (head_dim() % 2 != 0) fail(Err::usage, "transformer config: head dim must be even for rope");
}

std::vector<Tensor> TransformerLayerParams::all() const {
  return {wq, wk, wv, wo, w_gate, w_up, w_down, attn_norm, mlp_norm};
}

std::vector<std::pair<std::string, Tensor>> TransformerLayerParams::named(const std::string& prefix) const {
  return {{prefix + ".attn.wq", wq},     {prefix + ".attn.wk", wk},
          {prefix + ".attn.wv", wv},     {prefix + ".attn.wo", wo},
          {prefix + ".mlp.gate", w_gate}, {prefix + ".mlp.up", w_up},
          {prefix + ".mlp.down", w_down}, {prefix + ".norm.attn", attn_norm},
          {prefix + ".norm.mlp", mlp_norm}};
}

int64_t TransformerLayerParams::param_count() const {
  int64_t n = 0;
  for (const Tensor& t : all()) n += t.numel();
  return n;
}

void TransformerLayerParams::set_requires_grad(bool rg) {
  wq.set_requires_grad(rg); wk.set_requires_grad(rg); wv.set_requires_grad(rg); wo.set_requires_grad(rg);
  w_gate.set_requires_grad(rg); w_up.set_requires_grad(rg); w_down.set_requires_grad(rg);
  attn_norm.set_requires_grad(rg); mlp_norm.set_requires_grad(rg);
}

TransformerLayerParams TransformerLayerParams::clone() const {
  TransformerLayerParams c;
  c.wq = wq.clone(); c.wk = wk.clone(); c.wv = wv.clone(); c.wo = wo.clone();
  c.w_gate = w_gate.clone(); c.w_up = w_up.clone(); c.w_down = w_down.clone();
  c.attn_norm = attn_norm.clone(); c.mlp_norm = mlp_norm.clone();
  return c;
}

bool TransformerLayerParams::bitwise_equal(const TransformerLayerParams& other) const {
  auto a = all(), b = other.all();
  for (size_t i = 0; i < a.size(); ++i)
    if (!a[i].bitwise_equal(b[i])) return false;
  return true;
}

TransformerLayerParams init_layer_random(const TransformerLayerConfig& cfg, uint64_t seed, Dtype dt) {
  cfg.validate();
  Rng rng(splitmix64(seed));
  int64_t d = cfg.d_model, kvd = cfg.n_kv_heads * cfg.head_dim();
  TransformerLayerParams p;
  p.wq = Tensor::trunc_normal({d, d}, rng, 0.02, dt);
  p.wk = Tensor::trunc_normal({kvd, d}, rng, 0.02, dt);
  p.wv = Tensor::trunc_normal({kvd, d}, rng, 0.02, dt);
  p.wo = Tensor::trunc_normal({d, d}, rng, 0.02, dt);
  p.w_gate = Tensor::trunc_normal({cfg.d_ff, d}, rng, 0.02, dt);
  p.w_up = Tensor::trunc_normal({cfg.d_ff, d}, rng, 0.02, dt);
  p.w_down = Tensor::trunc_normal({d, cfg.d_ff}, rng, 0.02, dt);
  p.attn_norm = Tensor::full({d}, 1.0, dt);
  p.mlp_norm = Tensor::full({d}, 1.0, dt);
  return p;
}

TransformerLayerParams layer_from_tensors(const NamedTensors& tensors, const std::string& prefix,
                                          const TransformerLayerConfig& cfg) {
  cfg.validate();
  auto get = [&](const std::string& key, Shape want) {
    auto it = tensors.find(prefix + key);
    if (it == tensors.end()) fail(Err::missing_key, "missing tensor '" + prefix + key + "'");
    if (it->second.shape() != want)
      fail(Err::config_mismatch, "tensor '" + prefix + key + "' has shape " +
                                     shape_str(it->second.shape()) + ", expected " + shape_str(want));
    return it->second;
  };
  int64_t d = cfg.d_model, kvd = cfg.n_kv_heads * cfg.head_dim();
  TransformerLayerParams p;
  p.wq = get(".attn.wq", {d, d});
  p.wk = get(".attn.wk", {kvd, d});
  p.wv = get(".attn.wv", {kvd, d});
  p.wo = get(".attn.wo", {d, d});
  p.w_gate = get(".mlp.gate", {cfg.d_ff, d});
  p.w_up = get(".mlp.up", {cfg.d_ff, d});
  p.w_down = get(".mlp.down", {d, cfg.d_ff});
  p.attn_norm = get(".norm.attn", {d});
  p.mlp_norm = get(".norm.mlp", {d});
  return p;
}

Tensor attention(const Tensor& h, const TransformerLayerParams& p, const TransformerLayerConfig& cfg) {
  if (h.ndim() != 3 || h.dim(2) != cfg.d_model)
    fail(Err::shape_mismatch, "attention: input must be B x L x d_model, got " + shape_str(h.shape()));
  int64_t B = h.dim(0), L = h.dim(1), dh = cfg.head_dim();
  int64_t rep = cfg.n_heads / cfg.n_kv_heads;

  auto split_heads = [&](const Tensor& t, int64_t nh) {
    // B x L x (nh*dh) -> B x nh x L x dh
    return permute(reshape(t, {B, L, nh, dh}), {0, 2, 1, 3});
  };

  Tensor q = split_heads(matmul(h, p.wq, false, true), cfg.n_heads);
  Tensor k = split_heads(matmul(h, p.wk, false, true), cfg.n_kv_heads);
  Tensor v = split_heads(matmul(h, p.wv, false, true), cfg.n_kv_heads);

  q = rope_apply(q, cfg.rope_theta);
  k = rope_apply(k, cfg.rope_theta);
  if (rep > 1) {
    k = repeat_heads(k, static_cast<int>(rep));
    v = repeat_heads(v, static_cast<int>(rep));
  }

  Tensor scores = mul_scalar(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = attention_softmax(scores, cfg.causal);
  Tensor ctx = matmul(attn, v);  // B x nh x L x dh
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, L, cfg.d_model});
  return matmul(merged, p.wo, false, true);
}

Tensor transformer_layer(const Tensor& h, const TransformerLayerParams& p,
                         const TransformerLayerConfig& cfg) {
  Tensor h1 = add(h, attention(rmsnorm(h, p.attn_norm, cfg.norm_eps), p, cfg));
  Tensor z = rmsnorm(h1, p.mlp_norm, cfg.norm_eps);
  Tensor gated = mul(activation(matmul(z, p.w_gate, false, true), Act::silu),
                     matmul(z, p.w_up, false, true));
  return add(h1, matmul(gated, p.w_down, false, true));
}

// ---------------------------------------------------------------------------
// bottleneck

const char* variant_name(BottleneckVariant v) {
  switch (v) {
    case BottleneckVariant::Identity: return "none";
    case BottleneckVariant::RandomTrainable: return "random";
    case BottleneckVariant::FrozenPretrained: return "frozen";
    case BottleneckVariant::TrainablePretrained: return "trainable";
  }
  return "?";
}

std::optional<BottleneckVariant> variant_from_name(const std::string& s) {
  if (s == "none") return BottleneckVariant::Identity;
  if (s == "random") return BottleneckVariant::RandomTrainable;
  if (s == "frozen") return BottleneckVariant::FrozenPretrained;
  if (s == "trainable") return BottleneckVariant::TrainablePretrained;
  return std::nullopt;
}

bool variant_needs_weights(BottleneckVariant v) {
  return v == BottleneckVariant::FrozenPretrained || v == BottleneckVariant::TrainablePretrained;
}

bool variant_has_layer(BottleneckVariant v) { return v != BottleneckVariant::Identity; }

bool variant_layer_trainable(BottleneckVariant v) {
  return v == BottleneckVariant::RandomTrainable || v == BottleneckVariant::TrainablePretrained;
}

Bottleneck::Bottleneck() = default;

namespace {

void init_projection(Tensor& w, Tensor& b, int64_t out, int64_t in, Rng& rng, Dtype dt) {
  w = Tensor::trunc_normal({out, in}, rng, 0.02, dt);
  b = Tensor::zeros({out}, dt);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
}

}  // namespace

Bottleneck::Bottleneck(const TransformerLayerConfig& cfg, int64_t channels, uint64_t seed, Dtype dt)
    : Bottleneck(BottleneckVariant::RandomTrainable, cfg, channels,
                 init_layer_random(cfg, splitmix64(seed) ^ 0x6c61796572ull, dt), seed, dt) {}

Bottleneck::Bottleneck(BottleneckVariant v, const TransformerLayerConfig& cfg, int64_t channels,
                       TransformerLayerParams layer, uint64_t seed, Dtype dt)
    : variant_(v), cfg_(cfg), channels_(channels), layer_(std::move(layer)) {
  if (!variant_has_layer(v)) fail(Err::usage, "bottleneck: identity variant takes no layer");
  cfg_.validate();
  Rng rng(splitmix64(seed ^ 0x70726f6aull));
  init_projection(proj_in_w, proj_in_b, cfg_.d_model, channels_, rng, dt);
  init_projection(proj_out_w, proj_out_b, channels_, cfg_.d_model, rng, dt);
  layer_.set_requires_grad(variant_layer_trainable(v));
}

Tensor Bottleneck::forward(const Tensor& tokens) const {
  if (tokens.ndim() != 3)
    fail(Err::shape_mismatch, "bottleneck: tokens must be B x L x C, got " + shape_str(tokens.shape()));
  if (variant_ == BottleneckVariant::Identity) return tokens;
  if (tokens.dim(2) != channels_)
    fail(Err::shape_mismatch, "bottleneck: expected " + std::to_string(channels_) + " channels, got " +
                                  std::to_string(tokens.dim(2)));
  Tensor t_hat = linear(tokens, proj_in_w, proj_in_b);
  t_hat = transformer_layer(t_hat, layer_, cfg_);
  return linear(t_hat, proj_out_w, proj_out_b);
}

std::vector<std::pair<std::string, Tensor>> Bottleneck::projection_params() const {
  if (variant_ == BottleneckVariant::Identity) return {};
  return {{"proj_in.w", proj_in_w},
          {"proj_in.b", proj_in_b},
          {"proj_out.w", proj_out_w},
          {"proj_out.b", proj_out_b}};
}

std::vector<std::pair<std::string, Tensor>> Bottleneck::trainable_params() const {
  auto out = projection_params();
  if (variant_layer_trainable(variant_))
    for (auto& nt : layer_.named("bottleneck")) out.push_back(nt);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Bottleneck::state_params() const {
  auto out = projection_params();
  if (variant_has_layer(variant_))
    for (auto& nt : layer_.named("bottleneck")) out.push_back(nt);
  return out;
}

int64_t Bottleneck::projection_param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : projection_params()) n += t.numel();
  return n;
}

int64_t Bottleneck::layer_param_count() const {
  return variant_has_layer(variant_) ? layer_.param_count() : 0;
}

void Bottleneck::load_state(const NamedTensors& tensors) {
  auto copy_into = [&](const std::string& name, Tensor dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(Err::missing_key, "checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != dst.shape() || it->second.dtype() != dst.dtype())
      fail(Err::config_mismatch, "checkpoint tensor '" + name + "' has wrong shape/dtype");
    if (dst.dtype() == Dtype::F32)
      std::copy_n(it->second.data<float>(), dst.numel(), dst.data_mut<float>());
    else
      std::copy_n(it->second.data<double>(), dst.numel(), dst.data_mut<double>());
  };
  for (auto& [name, t] : state_params()) copy_into(name, t);
}

}  // namespace l4s
