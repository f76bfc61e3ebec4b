#pragma once

// Character-level language model over a synthetic arithmetic-expression
// grammar. Produces genuinely pretrained transformer-layer weights at desk
// scale; any single layer can be extracted into the segmentation bottleneck.

#include <string>
#include <vector>

#include "l4seg/transformer.hpp"
#include "l4seg/weights.hpp"

namespace l4s {

// fixed character vocabulary; ids are positions in this string
inline constexpr const char* kLmVocabChars = "0123456789+-*()= ";

struct LmConfig {
  int64_t vocab_size = 32;
  int64_t seq_len = 64;
  int64_t d_model = 64;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t n_kv_heads = 2;
  int64_t d_ff = 128;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  int64_t steps = 3000;
  int64_t batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 0;

  void validate() const;
  TransformerLayerConfig layer_config(bool causal) const;
};

std::vector<int32_t> tokenize(const std::string& text);  // unknown_symbol on bad chars
std::string detokenize(const std::vector<int32_t>& ids);

// deterministic arithmetic-expression stream: "expr=value " statements,
// parenthesis nesting capped at 4
std::vector<int32_t> gen_corpus(uint64_t seed, int64_t n_chars);

class LmModel {
 public:
  LmModel(const LmConfig& cfg, uint64_t seed);                  // random init
  LmModel(const LmConfig& cfg, const NamedTensors& checkpoint); // load

  const LmConfig& config() const { return cfg_; }

  // next-token logits, [B*L, vocab]; output head is tied to the embedding
  Tensor forward_logits(const std::vector<int32_t>& ids, int64_t B, int64_t L) const;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  NamedTensors state_snapshot() const;
  const TransformerLayerParams& layer(int64_t k) const;

 private:
  LmConfig cfg_;
  Tensor embed_;       // vocab x d_model
  Tensor final_norm_;  // d_model
  std::vector<TransformerLayerParams> layers_;
};

struct LmTrainResult {
  double initial_loss = 0.0;  // probe batch, before the first update
  double final_loss = 0.0;    // same probe batch, after training
  NamedTensors checkpoint;
};

LmTrainResult pretrain_lm(const LmConfig& cfg, const std::vector<int32_t>& corpus,
                          bool verbose = false);

// exp(mean next-token cross-entropy), causal, over non-overlapping windows
double perplexity(const LmModel& model, const std::vector<int32_t>& ids);

// the nine tensors of layer k, keys "layer{k}.*"; out_of_range checked
TransformerLayerParams extract_layer(const NamedTensors& checkpoint, const LmConfig& cfg, int64_t k);

// strict JSON parsing: unknown keys are usage errors listing the valid set
LmConfig lm_config_from_json_text(const std::string& text);
std::string lm_config_to_json_text(const LmConfig& cfg);

}  // namespace l4s
