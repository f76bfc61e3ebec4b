#pragma once

// Combined segmentation model (backbone + bottleneck), loss, and the
// training/evaluation loops.

#include <optional>
#include <string>
#include <vector>

#include "l4seg/data.hpp"
#include "l4seg/transformer.hpp"
#include "l4seg/unet.hpp"

namespace l4s {

struct SegModelInit {
  BackboneConfig backbone;
  BottleneckVariant variant = BottleneckVariant::Identity;
  TransformerLayerConfig layer;                        // ignored for Identity
  std::optional<TransformerLayerParams> pretrained;    // required for frozen/trainable
  uint64_t seed = 0;
  Dtype dtype = Dtype::F32;
};

class SegModel {
 public:
  explicit SegModel(const SegModelInit& init);

  BottleneckVariant variant() const { return bottleneck_.variant(); }
  const BackboneConfig& backbone_config() const { return unet_.config(); }
  const Bottleneck& bottleneck() const { return bottleneck_; }
  const UNet& unet() const { return unet_; }

  Tensor forward(const Tensor& x, BottleneckCapture* capture = nullptr) const;

  // optimizer set per the variant's freeze semantics; the frozen layer stays
  // on the gradient path but out of this list
  std::vector<std::pair<std::string, Tensor>> trainable_params() const;
  // everything a checkpoint must carry (includes a frozen layer)
  std::vector<std::pair<std::string, Tensor>> state_params() const;

  int64_t trainable_param_count() const;
  int64_t projection_param_count() const { return bottleneck_.projection_param_count(); }
  int64_t layer_param_count() const { return bottleneck_.layer_param_count(); }

  void load_state(const NamedTensors& tensors);
  NamedTensors state_snapshot() const;  // deep-copied

 private:
  UNet unet_;
  Bottleneck bottleneck_;
};

// w_bce * BCE(sigmoid(logits), mask) + w_dice * (1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)),
// eps = 1.0; differentiable
Tensor dice_bce_loss(const Tensor& logits, const Tensor& mask, double w_bce = 0.5,
                     double w_dice = 0.5);

struct EpochMetrics {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_iou = 0.0;
  double val_f1 = 0.0;
};

struct EvalMetrics {
  double iou = 0.0;
  double f1 = 0.0;
  int64_t n_samples = 0;
};

struct TrainConfig {
  int64_t epochs = 60;
  int64_t batch = 8;
  double lr = 1e-3;
  double w_bce = 0.5;
  double w_dice = 0.5;
  uint64_t seed = 0;
  // stop as soon as best val IoU reaches this (0 = run all epochs)
  double stop_at_iou = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  int64_t best_epoch = -1;
  double best_iou = 0.0;
  double best_f1 = 0.0;
  NamedTensors best_state;
  bool frozen_layer_intact = true;  // checked when the variant freezes the layer
};

TrainResult train_model(SegModel& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const TrainConfig& cfg,
                        bool verbose = false);

EvalMetrics evaluate_model(const SegModel& model, const std::vector<Sample>& samples,
                           int64_t batch = 8);

// mask tensor B x 1 x H x W built from samples [begin, end)
Tensor stack_images(const std::vector<Sample>& samples, const std::vector<size_t>& order,
                    size_t begin, size_t end);
Tensor stack_masks(const std::vector<Sample>& samples, const std::vector<size_t>& order,
                   size_t begin, size_t end);

}  // namespace l4s
