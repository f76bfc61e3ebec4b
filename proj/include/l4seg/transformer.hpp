#pragma once

// One pre-norm decoder layer (RMSNorm, rotary embeddings, grouped-query
// attention, gated-silu MLP) and the bottleneck wrapper that projects token
// features into it and back out.

#include <optional>
#include <string>
#include <vector>

#include "l4seg/tensor.hpp"
#include "l4seg/weights.hpp"

namespace l4s {

struct TransformerLayerConfig {
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_kv_heads = 2;
  int64_t d_ff = 128;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  bool causal = false;  // visual tokens have no autoregressive order; LM pretraining flips this

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// The nine tensors of one layer. Attention and MLP projections carry no bias.
struct TransformerLayerParams {
  Tensor wq, wk, wv, wo;          // [d_model,d_model], [kv*dh,d_model], [kv*dh,d_model], [d_model,d_model]
  Tensor w_gate, w_up, w_down;    // [d_ff,d_model], [d_ff,d_model], [d_model,d_ff]
  Tensor attn_norm, mlp_norm;     // [d_model]

  std::vector<Tensor> all() const;
  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const;
  int64_t param_count() const;
  void set_requires_grad(bool rg);
  TransformerLayerParams clone() const;
  bool bitwise_equal(const TransformerLayerParams& other) const;
};

// trunc-normal(0.02) projections, unit norm weights; deterministic per seed
TransformerLayerParams init_layer_random(const TransformerLayerConfig& cfg, uint64_t seed,
                                         Dtype dt = Dtype::F32);

// keys: {prefix}.attn.{wq,wk,wv,wo}, {prefix}.mlp.{gate,up,down}, {prefix}.norm.{attn,mlp}
TransformerLayerParams layer_from_tensors(const NamedTensors& tensors, const std::string& prefix,
                                          const TransformerLayerConfig& cfg);

Tensor attention(const Tensor& h, const TransformerLayerParams& p, const TransformerLayerConfig& cfg);
Tensor transformer_layer(const Tensor& h, const TransformerLayerParams& p,
                         const TransformerLayerConfig& cfg);

// --- bottleneck ---------------------------------------------------------

enum class BottleneckVariant { Identity, RandomTrainable, FrozenPretrained, TrainablePretrained };

const char* variant_name(BottleneckVariant v);
std::optional<BottleneckVariant> variant_from_name(const std::string& s);
bool variant_needs_weights(BottleneckVariant v);
bool variant_has_layer(BottleneckVariant v);
bool variant_layer_trainable(BottleneckVariant v);

// Linear(in) -> transformer layer -> Linear(out). The in/out projections are
// always trainable; the layer's trainability depends on the variant.
class Bottleneck {
 public:
  // Identity
  Bottleneck();
  // RandomTrainable
  Bottleneck(const TransformerLayerConfig& cfg, int64_t channels, uint64_t seed,
             Dtype dt = Dtype::F32);
  // Frozen/TrainablePretrained from an already-extracted layer
  Bottleneck(BottleneckVariant v, const TransformerLayerConfig& cfg, int64_t channels,
             TransformerLayerParams layer, uint64_t seed, Dtype dt = Dtype::F32);

  BottleneckVariant variant() const { return variant_; }
  const TransformerLayerConfig& config() const { return cfg_; }
  const TransformerLayerParams& layer() const { return layer_; }

  // t': B x L x C  ->  B x L x C
  Tensor forward(const Tensor& tokens) const;

  // the always-trainable projections (empty for Identity)
  std::vector<std::pair<std::string, Tensor>> projection_params() const;
  // projections plus the layer when the variant trains it
  std::vector<std::pair<std::string, Tensor>> trainable_params() const;
  // everything that must be checkpointed (projections + layer regardless of freezing)
  std::vector<std::pair<std::string, Tensor>> state_params() const;

  int64_t projection_param_count() const;
  int64_t layer_param_count() const;

  void load_state(const NamedTensors& tensors);

 private:
  BottleneckVariant variant_ = BottleneckVariant::Identity;
  TransformerLayerConfig cfg_;
  int64_t channels_ = 0;
  Tensor proj_in_w, proj_in_b;    // gamma1: C -> d_model, with bias
  Tensor proj_out_w, proj_out_b;  // gamma2: d_model -> C, with bias
  TransformerLayerParams layer_;
};

}  // namespace l4s
