#pragma once

// The prepare -> train -> convert pipeline plus PTQ calibration. Fake-quant
// attachments wrap model parameters directly: the forward pass sees quantized
// weight images while the optimizer updates the float shadow weights through
// the straight-through estimator.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "potq/checkpoint.hpp"
#include "potq/corpus.hpp"
#include "potq/model.hpp"
#include "potq/optim.hpp"
#include "potq/quant.hpp"

namespace potq {

struct QatConfig {
  QuantScheme weight_scheme = QuantScheme::PowerOfTwo;
  int weight_levels = 15;  // PoT level count
  int weight_bits = 4;     // affine bit width
  bool quantize_embeddings = false;
  bool quantize_activations = false;
  int act_bits = 8;
  SteMode ste = SteMode::Identity;

  double lr = 0.5e-5;
  int64_t iters = 2000;
  int64_t eval_interval = 250;
  int64_t batch_size = 12;
  int64_t context_length = 64;
  int64_t eval_batches = 20;
  double weight_decay = 0.1;  // matmul weights only
  uint64_t seed = 1337;

  void validate() const;
  QuantSpec weight_base_spec() const;
};

enum class PrepMode { Training, Converted };

struct WeightAttachment {
  std::string param;
  QuantSpec spec;  // scale/zero_point live here once frozen
};

struct ActAttachment {
  std::string site;
  QuantSpec spec;
  Observer observer;
};

class PreparedModel {
 public:
  Model model;  // float shadow (master) weights
  QatConfig config;
  PrepMode mode = PrepMode::Training;
  std::vector<WeightAttachment> weights;
  std::vector<ActAttachment> activations;

  // Parameter list for the forward pass: quantized parameters are replaced by
  // fake-quant views (recorded on the active tape, so STE gradients reach the
  // masters). Training mode re-derives weight scales from the live tensors.
  std::vector<NamedParam> effective_params();

  // Activation tap for forward_logits; pass calibrating=true to only collect
  // observer statistics.
  ActivationTap activation_tap(bool calibrating = false);

  ActAttachment* find_activation(const std::string& site);
};

PreparedModel prepare(Model model, const QatConfig& config);

// Freezes quantizer parameters with no gradient steps. n_batches of val-split
// forwards feed the activation observers when activation quantization is on.
void calibrate_ptq(PreparedModel& prepared, const Corpus& corpus, int64_t n_batches);

// One optimizer step on a batch; returns the training loss.
float train_step(PreparedModel& prepared, const Batch& batch, AdamW& opt, Pcg64& dropout_rng);

// Freezes scales from the current masters and drops observers.
void convert(PreparedModel& prepared);

AdamW make_optimizer(const Model& model, double weight_decay);

// Mean cross-entropy over n_batches sampled with a fixed seed (no dropout).
float evaluate(const ModelConfig& config, const std::vector<NamedParam>& params,
               std::span<const int32_t> split, int64_t n_batches, int64_t batch, int64_t seq, uint64_t seed,
               const ActivationTap* tap = nullptr);
float evaluate(PreparedModel& prepared, std::span<const int32_t> split, int64_t n_batches, uint64_t seed);
float evaluate(const Model& model, std::span<const int32_t> split, int64_t n_batches, int64_t batch,
               int64_t seq, uint64_t seed);

inline double perplexity(double l_ce) { return std::exp(l_ce); }

struct RunResult {
  float val_at_start = 0.0f;  // evaluation before the first step
  float best_val = 0.0f;
  float final_val = 0.0f;
  std::string best_path;
  std::string last_path;
  std::string metrics_path;
};

// Shared training loop: QuantScheme::None gives the float phase, anything
// else runs QAT through the same code path. Writes metrics.csv
// (iter,split,loss,perplexity) plus best/last checkpoints under out_dir.
RunResult training_run(Model model, const QatConfig& config, const Corpus& corpus, const std::string& out_dir,
                       bool quiet = false);

QuantMeta quant_meta_for(const QatConfig& config);

}  // namespace potq
