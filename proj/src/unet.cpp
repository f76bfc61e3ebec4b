#include "l4seg/unet.hpp"

#include <cmath>

namespace l4s {

void BackboneConfig::validate() const {
  if (depth < 1) fail(Err::usage, "backbone: depth must be >= 1");
  if (in_channels < 1 || base_channels < 1 || out_channels < 1)
    fail(Err::usage, "backbone: channel extents must be positive");
  if (norm_groups < 1) fail(Err::usage, "backbone: norm_groups must be >= 1");
  if (base_channels % norm_groups != 0)
    fail(Err::usage, "backbone: base_channels must be divisible by norm_groups");
}

Tensor flatten_tokens(const Tensor& t) {
  if (t.ndim() != 4) fail(Err::shape_mismatch, "flatten_tokens: input must be B x C x h x w");
  int64_t B = t.dim(0), C = t.dim(1), L = t.dim(2) * t.dim(3);
  return permute(reshape(t, {B, C, L}), {0, 2, 1});
}

Tensor reshape_tokens(const Tensor& tokens, int64_t h, int64_t w) {
  if (tokens.ndim() != 3) fail(Err::shape_mismatch, "reshape_tokens: input must be B x L x C");
  if (tokens.dim(1) != h * w)
    fail(Err::shape_mismatch, "reshape_tokens: token count " + std::to_string(tokens.dim(1)) +
                                  " != h*w = " + std::to_string(h * w));
  int64_t B = tokens.dim(0), C = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {B, C, h, w});
}

UNet::ConvBlock UNet::make_block(int64_t cin, int64_t cout, Rng& rng) const {
  auto kaiming = [&](int64_t co, int64_t ci, int64_t k) {
    double std = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    Tensor w = Tensor::randn({co, ci, k, k}, rng, std, dtype_);
    w.set_requires_grad(true);
    return w;
  };
  auto vec = [&](int64_t n, double v) {
    Tensor t = Tensor::full({n}, v, dtype_);
    t.set_requires_grad(true);
    return t;
  };
  ConvBlock b;
  b.cw0 = kaiming(cout, cin, 3);
  b.cb0 = vec(cout, 0.0);
  b.gw0 = vec(cout, 1.0);
  b.gb0 = vec(cout, 0.0);
  b.cw1 = kaiming(cout, cout, 3);
  b.cb1 = vec(cout, 0.0);
  b.gw1 = vec(cout, 1.0);
  b.gb1 = vec(cout, 0.0);
  return b;
}

Tensor UNet::run_block(const ConvBlock& b, const Tensor& x) const {
  int groups = static_cast<int>(cfg_.norm_groups);
  Tensor h = conv2d(x, b.cw0, b.cb0, 1, 1);
  h = activation(groupnorm(h, b.gw0, b.gb0, groups, 1e-5), Act::silu);
  h = conv2d(h, b.cw1, b.cb1, 1, 1);
  return activation(groupnorm(h, b.gw1, b.gb1, groups, 1e-5), Act::silu);
}

UNet::UNet(const BackboneConfig& cfg, uint64_t seed, Dtype dt) : cfg_(cfg), dtype_(dt) {
  cfg_.validate();
  Rng rng(splitmix64(seed ^ 0x756e6574ull));
  int64_t c = cfg_.in_channels;
  for (int64_t lvl = 0; lvl < cfg_.depth; ++lvl) {
    int64_t cout = cfg_.base_channels << lvl;
    enc_.push_back(make_block(c, cout, rng));
    c = cout;
  }
  mid_ = make_block(c, cfg_.bottleneck_channels(), rng);
  c = cfg_.bottleneck_channels();
  for (int64_t lvl = cfg_.depth - 1; lvl >= 0; --lvl) {
    int64_t skip_c = cfg_.base_channels << lvl;
    dec_.push_back(make_block(c + skip_c, skip_c, rng));
    c = skip_c;
  }
  double std = std::sqrt(2.0 / static_cast<double>(c));
  head_w = Tensor::randn({cfg_.out_channels, c, 1, 1}, rng, std, dtype_);
  head_b = Tensor::zeros({cfg_.out_channels}, dtype_);
  head_w.set_requires_grad(true);
  head_b.set_requires_grad(true);
}

EncoderOutput UNet::encode(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels)
    fail(Err::shape_mismatch, "encode: input must be B x " + std::to_string(cfg_.in_channels) +
                                  " x H x W, got " + shape_str(x.shape()));
  int64_t div = int64_t(1) << cfg_.depth;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
    fail(Err::shape_mismatch, "encode: spatial extents " + std::to_string(x.dim(2)) + "x" +
                                  std::to_string(x.dim(3)) + " not divisible by 2^depth = " +
                                  std::to_string(div));
  EncoderOutput out;
  Tensor h = x;
  for (const ConvBlock& b : enc_) {
    h = run_block(b, h);
    out.skips.push_back(h);
    h = maxpool2d(h, 2);
  }
  out.bottleneck = run_block(mid_, h);
  return out;
}

Tensor UNet::decode(const Tensor& bottleneck, const std::vector<Tensor>& skips) const {
  if (static_cast<int64_t>(skips.size()) != cfg_.depth)
    fail(Err::shape_mismatch, "decode: expected " + std::to_string(cfg_.depth) + " skips, got " +
                                  std::to_string(skips.size()));
  Tensor h = bottleneck;
  for (int64_t i = 0; i < cfg_.depth; ++i) {
    const Tensor& skip = skips[static_cast<size_t>(cfg_.depth - 1 - i)];
    h = upsample2x_bilinear(h);
    if (h.dim(2) != skip.dim(2) || h.dim(3) != skip.dim(3))
      fail(Err::shape_mismatch, "decode: skip extent " + shape_str(skip.shape()) +
                                    " does not match upsampled " + shape_str(h.shape()));
    h = run_block(dec_[static_cast<size_t>(i)], concat_ch(h, skip));
  }
  return conv2d(h, head_w, head_b, 1, 0);
}

Tensor UNet::forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& bottleneck_fn,
                     BottleneckCapture* capture) const {
  EncoderOutput enc = encode(x);
  int64_t h = enc.bottleneck.dim(2), w = enc.bottleneck.dim(3);
  Tensor tokens = flatten_tokens(enc.bottleneck);
  Tensor processed = bottleneck_fn ? bottleneck_fn(tokens) : tokens;
  Tensor back = reshape_tokens(processed, h, w);
  if (capture) {
    capture->before = enc.bottleneck.detach().clone();
    capture->after = back.detach().clone();
  }
  return decode(back, enc.skips);
}

void UNet::collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                   const ConvBlock& b) {
  out.emplace_back(prefix + ".conv0.w", b.cw0);
  out.emplace_back(prefix + ".conv0.b", b.cb0);
  out.emplace_back(prefix + ".gn0.w", b.gw0);
  out.emplace_back(prefix + ".gn0.b", b.gb0);
  out.emplace_back(prefix + ".conv1.w", b.cw1);
  out.emplace_back(prefix + ".conv1.b", b.cb1);
  out.emplace_back(prefix + ".gn1.w", b.gw1);
  out.emplace_back(prefix + ".gn1.b", b.gb1);
}

std::vector<std::pair<std::string, Tensor>> UNet::encoder_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < enc_.size(); ++i) collect(out, "enc" + std::to_string(i), enc_[i]);
  collect(out, "mid", mid_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> UNet::decoder_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < dec_.size(); ++i) collect(out, "dec" + std::to_string(i), dec_[i]);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> UNet::named_params() const {
  auto out = encoder_params();
  for (auto& nt : decoder_params()) out.push_back(nt);
  return out;
}

void UNet::load_state(const NamedTensors& tensors) {
  for (auto& [name, t] : named_params()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(Err::missing_key, "checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != t.shape() || it->second.dtype() != t.dtype())
      fail(Err::config_mismatch, "checkpoint tensor '" + name + "' has wrong shape/dtype");
    Tensor dst = t;
    if (dst.dtype() == Dtype::F32)
      std::copy_n(it->second.data<float>(), dst.numel(), dst.data_mut<float>());
    else
      std::copy_n(it->second.data<double>(), dst.numel(), dst.data_mut<double>());
  }
}

}  // namespace l4s
