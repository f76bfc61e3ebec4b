#include "l4seg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace l4s {

SegModel::SegModel(const SegModelInit& init)
    : unet_(init.backbone, init.seed, init.dtype), bottleneck_() {
  int64_t channels = init.backbone.bottleneck_channels();
  switch (init.variant) {
    case BottleneckVariant::Identity:
      break;
    case BottleneckVariant::RandomTrainable:
      bottleneck_ = Bottleneck(init.layer, channels, init.seed, init.dtype);
      break;
    case BottleneckVariant::FrozenPretrained:
    case BottleneckVariant::TrainablePretrained: {
      if (!init.pretrained)
        fail(Err::usage, std::string("variant '") + variant_name(init.variant) +
                             "' requires pretrained layer weights");
      bottleneck_ = Bottleneck(init.variant, init.layer, channels, init.pretrained->clone(),
                               init.seed, init.dtype);
      break;
    }
  }
}

Tensor SegModel::forward(const Tensor& x, BottleneckCapture* capture) const {
  return unet_.forward(
      x, [this](const Tensor& tokens) { return bottleneck_.forward(tokens); }, capture);
}

std::vector<std::pair<std::string, Tensor>> SegModel::trainable_params() const {
  auto out = unet_.named_params();
  for (auto& nt : bottleneck_.trainable_params()) out.push_back(nt);
  return out;
}

std::vector<std::pair<std::string, Tensor>> SegModel::state_params() const {
  auto out = unet_.named_params();
  for (auto& nt : bottleneck_.state_params()) out.push_back(nt);
  return out;
}

int64_t SegModel::trainable_param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : trainable_params()) n += t.numel();
  return n;
}

void SegModel::load_state(const NamedTensors& tensors) {
  unet_.load_state(tensors);
  bottleneck_.load_state(tensors);
}

NamedTensors SegModel::state_snapshot() const {
  NamedTensors out;
  for (const auto& [name, t] : state_params()) out.emplace(name, t.clone());
  return out;
}

// ---------------------------------------------------------------------------
// loss

Tensor dice_bce_loss(const Tensor& logits, const Tensor& mask, double w_bce, double w_dice) {
  if (logits.shape() != mask.shape())
    fail(Err::shape_mismatch, "dice_bce_loss: logits " + shape_str(logits.shape()) + " vs mask " +
                                  shape_str(mask.shape()));
  constexpr double kEps = 1.0;
  Tensor bce = bce_with_logits_mean(logits, mask);
  Tensor p = activation(logits, Act::sigmoid);
  Tensor inter = sum_all(mul(p, mask));
  Tensor denom = add_scalar(add(sum_all(p), sum_all(mask)), kEps);
  Tensor ratio = divide(add_scalar(mul_scalar(inter, 2.0), kEps), denom);
  Tensor dice = add_scalar(mul_scalar(ratio, -1.0), 1.0);
  return add(mul_scalar(bce, w_bce), mul_scalar(dice, w_dice));
}

// ---------------------------------------------------------------------------
// batching helpers

Tensor stack_images(const std::vector<Sample>& samples, const std::vector<size_t>& order,
                    size_t begin, size_t end) {
  int64_t B = static_cast<int64_t>(end - begin);
  const Sample& first = samples[order[begin]];
  Tensor out = Tensor::zeros({B, 1, first.h, first.w}, Dtype::F32);
  auto* p = out.data_mut<float>();
  int64_t plane = first.h * first.w;
  for (size_t i = begin; i < end; ++i) {
    const Sample& s = samples[order[i]];
    if (s.h != first.h || s.w != first.w)
      fail(Err::shape_mismatch, "batch: sample extents differ within a batch");
    std::copy_n(s.image.data<float>(), plane, p + static_cast<int64_t>(i - begin) * plane);
  }
  return out;
}

Tensor stack_masks(const std::vector<Sample>& samples, const std::vector<size_t>& order,
                   size_t begin, size_t end) {
  int64_t B = static_cast<int64_t>(end - begin);
  const Sample& first = samples[order[begin]];
  Tensor out = Tensor::zeros({B, 1, first.h, first.w}, Dtype::F32);
  auto* p = out.data_mut<float>();
  int64_t plane = first.h * first.w;
  for (size_t i = begin; i < end; ++i) {
    const Sample& s = samples[order[i]];
    for (int64_t j = 0; j < plane; ++j)
      p[static_cast<int64_t>(i - begin) * plane + j] = static_cast<float>(s.mask[static_cast<size_t>(j)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// evaluation: per-image metric averaging (not global pixel pooling)

EvalMetrics evaluate_model(const SegModel& model, const std::vector<Sample>& samples, int64_t batch) {
  if (samples.empty()) fail(Err::empty_dataset, "evaluate: dataset is empty");
  NoGradGuard ng;
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t(0));
  double iou_sum = 0.0, f1_sum = 0.0;
  for (size_t b = 0; b < samples.size(); b += static_cast<size_t>(batch)) {
    size_t e = std::min(samples.size(), b + static_cast<size_t>(batch));
    Tensor logits = model.forward(stack_images(samples, order, b, e));
    const auto* pl = logits.data<float>();
    int64_t plane = logits.dim(2) * logits.dim(3);
    for (size_t i = b; i < e; ++i) {
      std::vector<uint8_t> pred(static_cast<size_t>(plane));
      const float* row = pl + static_cast<int64_t>(i - b) * plane;
      for (int64_t j = 0; j < plane; ++j) pred[static_cast<size_t>(j)] = row[j] > 0.0f ? 1 : 0;
      iou_sum += iou(pred, samples[i].mask);
      f1_sum += f1(pred, samples[i].mask);
    }
  }
  EvalMetrics m;
  m.n_samples = static_cast<int64_t>(samples.size());
  m.iou = iou_sum / static_cast<double>(samples.size());
  m.f1 = f1_sum / static_cast<double>(samples.size());
  return m;
}

// ---------------------------------------------------------------------------
// training loop

TrainResult train_model(SegModel& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const TrainConfig& cfg, bool verbose) {
  if (train_set.empty()) fail(Err::empty_dataset, "train: training set is empty");
  if (val_set.empty()) fail(Err::empty_dataset, "train: validation set is empty");
  if (cfg.batch < 1) fail(Err::usage, "train: batch must be >= 1");
  if (cfg.w_bce + cfg.w_dice <= 0.0) fail(Err::usage, "train: loss weights must sum positive");

  // freeze contract: snapshot the layer now, compare bitwise at the end
  std::optional<TransformerLayerParams> frozen_snapshot;
  if (model.variant() == BottleneckVariant::FrozenPretrained)
    frozen_snapshot = model.bottleneck().layer().clone();

  std::vector<Tensor> params;
  for (auto& [name, t] : model.trainable_params()) params.push_back(t);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt(params, acfg);

  TrainResult result;
  Rng shuffle_rng(splitmix64(cfg.seed ^ 0x747261696eull));
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), size_t(0));

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic Fisher-Yates
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    double loss_sum = 0.0;
    int64_t seen = 0;
    for (size_t b = 0; b < train_set.size(); b += static_cast<size_t>(cfg.batch)) {
      size_t e = std::min(train_set.size(), b + static_cast<size_t>(cfg.batch));
      Tensor x = stack_images(train_set, order, b, e);
      Tensor m = stack_masks(train_set, order, b, e);
      double loss_val;
      {
        Tape tape;
        Tensor loss = dice_bce_loss(model.forward(x), m, cfg.w_bce, cfg.w_dice);
        loss_val = loss.item();
        if (!std::isfinite(loss_val))
          fail(Err::non_finite, "train: non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch offset " + std::to_string(b) + " (step " +
                                    std::to_string(opt.step_count()) + ")");
        opt.zero_grad();
        tape.backward(loss);
      }
      opt.step();
      loss_sum += loss_val * static_cast<double>(e - b);
      seen += static_cast<int64_t>(e - b);
    }

    EvalMetrics vm = evaluate_model(model, val_set, cfg.batch);
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.val_iou = vm.iou;
    em.val_f1 = vm.f1;
    result.history.push_back(em);
    if (verbose)
      std::fprintf(stderr, "epoch %3lld  loss %.4f  val_iou %.4f  val_f1 %.4f\n",
                   static_cast<long long>(epoch), em.train_loss, em.val_iou, em.val_f1);

    if (result.best_epoch < 0 || em.val_iou > result.best_iou) {
      result.best_epoch = epoch;
      result.best_iou = em.val_iou;
      result.best_f1 = em.val_f1;
      result.best_state = model.state_snapshot();
    }
    if (cfg.stop_at_iou > 0.0 && result.best_iou >= cfg.stop_at_iou) break;
  }

  if (frozen_snapshot)
    result.frozen_layer_intact = model.bottleneck().layer().bitwise_equal(*frozen_snapshot);
  if (!result.frozen_layer_intact)
    fail(Err::runtime, "train: frozen layer weights changed during training");
  return result;
}

}  // namespace l4s
