#pragma once

// Character-level decoder-only transformer: learned token + position
// embeddings, pre-norm blocks with fused-qkv causal self-attention and a GELU
// MLP, and a separate (quantizable) lm head.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "potq/ops.hpp"
#include "potq/rng.hpp"
#include "potq/tensor.hpp"

namespace potq {

struct ModelConfig {
  int64_t vocab_size = 65;
  int64_t n_layer = 4;
  int64_t n_head = 4;
  int64_t n_embd = 128;
  int64_t block_size = 128;
  float dropout = 0.1f;

  void validate() const;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, uint64_t seed);

  ModelConfig config;
  std::vector<NamedParam> params;  // fixed enumeration order

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  int64_t param_count() const;

  // matmul weights are the quantization surface: attention qkv/proj, both MLP
  // matrices, and the lm head; embeddings are a separate class and layernorm
  // parameters plus biases are never quantized
  static bool is_matmul_weight(const std::string& name);
  static bool is_embedding_weight(const std::string& name);

 private:
  std::unordered_map<std::string, size_t> index_;
  void rebuild_index();
  friend Model model_with_params(ModelConfig, std::vector<NamedParam>);
};

// Builds a model around an existing parameter list (checkpoint loading).
Model model_with_params(ModelConfig config, std::vector<NamedParam> params);

// Activation tap: given a site name and the tensor flowing into the matmul at
// that site, returns the tensor to use instead (observation / fake quant).
using ActivationTap = std::function<Tensor(const std::string&, const Tensor&)>;

struct ForwardOpts {
  bool training = false;
  Pcg64* dropout_rng = nullptr;  // required when training with dropout > 0
  const ActivationTap* tap = nullptr;
};

// ids is a row-major [batch, seq] token matrix; returns [batch*seq, vocab]
// logits. Params are passed explicitly so callers can substitute
// fake-quantized views of the weights.
Tensor forward_logits(const ModelConfig& config, const std::vector<NamedParam>& params,
                      std::span<const int32_t> ids, int64_t batch, int64_t seq, const ForwardOpts& opts = {});

// Iterative sampling from softmax(logits / temperature), window-clipped to
// block_size. An empty prompt falls back to start_token.
std::vector<int32_t> generate(const ModelConfig& config, const std::vector<NamedParam>& params,
                              std::span<const int32_t> prompt, int64_t n_tokens, double temperature,
                              uint64_t seed, int32_t start_token);

}  // namespace potq
