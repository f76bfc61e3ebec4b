#pragma once

// U-Net style encoder/decoder with skip connections and a pluggable bottleneck
// slot at the deepest level.

#include <functional>
#include <string>
#include <vector>

#include "l4seg/tensor.hpp"
#include "l4seg/weights.hpp"

namespace l4s {

struct BackboneConfig {
  int64_t in_channels = 1;
  int64_t base_channels = 16;
  int64_t depth = 2;        // number of downsamplings
  int64_t norm_groups = 4;
  int64_t out_channels = 1;  // binary logits

  int64_t bottleneck_channels() const { return base_channels << depth; }
  void validate() const;
};

struct EncoderOutput {
  Tensor bottleneck;           // B x base*2^depth x H/2^d x W/2^d
  std::vector<Tensor> skips;   // one per level, finest first
};

// Optional capture of the tensors entering and leaving the bottleneck slot
// (detached copies, B x C x h x w).
struct BottleneckCapture {
  Tensor before;
  Tensor after;
};

// B x C x h x w -> B x (h*w) x C; token l = row*w + col
Tensor flatten_tokens(const Tensor& t);
// inverse of flatten_tokens
Tensor reshape_tokens(const Tensor& tokens, int64_t h, int64_t w);

class UNet {
 public:
  UNet(const BackboneConfig& cfg, uint64_t seed, Dtype dt = Dtype::F32);

  const BackboneConfig& config() const { return cfg_; }

  EncoderOutput encode(const Tensor& x) const;
  Tensor decode(const Tensor& bottleneck, const std::vector<Tensor>& skips) const;

  // decode(reshape(bottleneck_fn(flatten(encode(x))), skips); bottleneck_fn maps
  // B x L x C -> B x L x C. Identity bottleneck_fn gives the plain baseline.
  Tensor forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& bottleneck_fn,
                 BottleneckCapture* capture = nullptr) const;

  std::vector<std::pair<std::string, Tensor>> encoder_params() const;  // theta1
  std::vector<std::pair<std::string, Tensor>> decoder_params() const;  // theta2
  std::vector<std::pair<std::string, Tensor>> named_params() const;

  void load_state(const NamedTensors& tensors);

 private:
  struct ConvBlock {
    Tensor cw0, cb0, gw0, gb0;  // conv3x3 + groupnorm
    Tensor cw1, cb1, gw1, gb1;
  };
  ConvBlock make_block(int64_t cin, int64_t cout, Rng& rng) const;
  Tensor run_block(const ConvBlock& b, const Tensor& x) const;
  static void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                      const ConvBlock& b);

  BackboneConfig cfg_;
  Dtype dtype_ = Dtype::F32;
  std::vector<ConvBlock> enc_;  // depth entries
  ConvBlock mid_;
  std::vector<ConvBlock> dec_;  // depth entries, deepest first
  Tensor head_w, head_b;        // 1x1 conv to logits
};

}  // namespace l4s
