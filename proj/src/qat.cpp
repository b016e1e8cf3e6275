#include "potq/qat.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace potq {

void QatConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("qat config: lr must be positive");
  if (context_length < 1) throw std::invalid_argument("qat config: context_length must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("qat config: batch_size must be >= 1");
  if (iters < 0) throw std::invalid_argument("qat config: iters must be >= 0");
  if (eval_interval < 1) throw std::invalid_argument("qat config: eval_interval must be >= 1");
  if (eval_batches < 1) throw std::invalid_argument("qat config: eval_batches must be >= 1");
  if (weight_scheme != QuantScheme::None) weight_base_spec().validate();
  if (quantize_activations && (act_bits < 2 || act_bits > 8))
    throw std::invalid_argument("qat config: act_bits must be in [2, 8]");
}

QuantSpec QatConfig::weight_base_spec() const {
  QuantSpec s;
  s.scheme = weight_scheme;
  s.levels = weight_levels;
  s.bits = weight_bits;
  s.ste = ste;
  s.scale = 1.0f;
  s.zero_point = 0;
  return s;
}

std::vector<NamedParam> PreparedModel::effective_params() {
  std::vector<NamedParam> eff = model.params;
  for (const auto& att : weights) {
    for (auto& np : eff) {
      if (np.name != att.param) continue;
      QuantSpec spec = att.spec;
      if (mode == PrepMode::Training) {
        // weight scales track the live tensor during training; convert()
        // freezes them into the attachment
        spec = weight_spec_for(att.spec, {np.tensor.data(), size_t(np.tensor.numel())});
      }
      np.tensor = fake_quant(np.tensor, spec);
      break;
    }
  }
  return eff;
}

ActAttachment* PreparedModel::find_activation(const std::string& site) {
  for (auto& a : activations)
    if (a.site == site) return &a;
  return nullptr;
}

ActivationTap PreparedModel::activation_tap(bool calibrating) {
  return [this, calibrating](const std::string& site, const Tensor& t) -> Tensor {
    ActAttachment* att = find_activation(site);
    if (att == nullptr) return t;
    if (calibrating || mode == PrepMode::Training)
      att->observer.update({t.data(), size_t(t.numel())});
    if (calibrating) return t;
    QuantSpec spec = att->spec;
    if (mode == PrepMode::Training) {
      if (att->observer.count == 0) return t;  // nothing observed yet
      auto [s, zp] = compute_scale_affine(att->observer.min_seen, att->observer.max_seen, spec.bits);
      spec.scale = s;
      spec.zero_point = zp;
    }
    return fake_quant(t, spec);
  };
}

PreparedModel prepare(Model model, const QatConfig& config) {
  config.validate();
  PreparedModel p;
  p.model = std::move(model);
  p.config = config;
  p.mode = PrepMode::Training;
  if (config.weight_scheme != QuantScheme::None) {
    const QuantSpec base = config.weight_base_spec();
    for (const auto& np : p.model.params) {
      const bool quantize = Model::is_matmul_weight(np.name) ||
                            (config.quantize_embeddings && Model::is_embedding_weight(np.name));
      if (quantize) p.weights.push_back({np.name, base});
    }
    if (config.quantize_activations) {
      QuantSpec act;
      act.scheme = QuantScheme::AffineAsymmetric;
      act.bits = config.act_bits;
      act.ste = config.ste;
      for (const auto& np : p.model.params) {
        if (!Model::is_matmul_weight(np.name)) continue;
        // site name: strip the trailing ".w" and tag the matmul input
        const std::string site = np.name.substr(0, np.name.size() - 2) + ".in";
        p.activations.push_back({site, act, Observer{}});
      }
    }
  }
  return p;
}

namespace {

void freeze_weight_scales(PreparedModel& p) {
  for (auto& att : p.weights) {
    const Tensor& w = p.model.param(att.param);
    att.spec = weight_spec_for(att.spec, {w.data(), size_t(w.numel())});
  }
}

void freeze_activation_scales(PreparedModel& p) {
  for (auto& att : p.activations) {
    if (att.observer.count == 0)
      throw std::runtime_error("calibrate: no statistics observed for activation site " + att.site);
    auto [s, zp] = compute_scale_affine(att.observer.min_seen, att.observer.max_seen, att.spec.bits);
    att.spec.scale = s;
    att.spec.zero_point = zp;
  }
}

}  // namespace

void calibrate_ptq(PreparedModel& p, const Corpus& corpus, int64_t n_batches) {
  if (p.mode == PrepMode::Converted) throw std::logic_error("calibrate_ptq: model already converted");
  if (p.config.quantize_activations) {
    if (n_batches < 1)
      throw std::runtime_error("calibrate_ptq: activation quantization needs at least one calibration batch");
    Pcg64 rng(p.config.seed, rng_stream::kEval);
    const auto tap = p.activation_tap(/*calibrating=*/true);
    for (int64_t i = 0; i < n_batches; ++i) {
      const Batch b = sample_batch(corpus.val, p.config.batch_size, p.config.context_length, rng);
      ForwardOpts opts;
      opts.tap = &tap;
      (void)forward_logits(p.model.config, p.model.params, b.x, b.batch, b.seq, opts);
    }
    freeze_activation_scales(p);
  }
  freeze_weight_scales(p);
  p.mode = PrepMode::Converted;
}

void convert(PreparedModel& p) {
  if (p.mode == PrepMode::Converted) throw std::logic_error("convert: model already converted");
  if (p.config.quantize_activations) freeze_activation_scales(p);
  freeze_weight_scales(p);
  p.mode = PrepMode::Converted;
}

AdamW make_optimizer(const Model& model, double weight_decay) {
  AdamW opt;
  for (const auto& np : model.params)
    opt.add(np.tensor, Model::is_matmul_weight(np.name) ? weight_decay : 0.0);
  return opt;
}

float train_step(PreparedModel& p, const Batch& batch, AdamW& opt, Pcg64& dropout_rng) {
  if (p.mode != PrepMode::Training) throw std::logic_error("train_step: model is converted");
  Graph tape;
  TapeScope scope(tape);
  auto eff = p.effective_params();
  const auto tap = p.activation_tap();
  ForwardOpts opts;
  opts.training = true;
  opts.dropout_rng = &dropout_rng;
  if (p.config.quantize_activations) opts.tap = &tap;
  Tensor logits = forward_logits(p.model.config, eff, batch.x, batch.batch, batch.seq, opts);
  Tensor loss = cross_entropy(logits, batch.y);
  const float lv = loss.item();
  if (!std::isfinite(lv))
    throw std::runtime_error("train_step: loss is " + std::to_string(lv) + "; aborting");
  opt.zero_grad();
  tape.backward(loss);
  opt.step(p.config.lr);
  return lv;
}

float evaluate(const ModelConfig& config, const std::vector<NamedParam>& params,
               std::span<const int32_t> split, int64_t n_batches, int64_t batch, int64_t seq, uint64_t seed,
               const ActivationTap* tap) {
  if (n_batches < 1) throw std::invalid_argument("evaluate: n_batches must be >= 1");
  if (split.empty()) throw std::runtime_error("evaluate: split is empty");
  Pcg64 rng(seed, rng_stream::kEval);
  double total = 0.0;
  for (int64_t i = 0; i < n_batches; ++i) {
    const Batch b = sample_batch(split, batch, seq, rng);
    ForwardOpts opts;
    opts.tap = tap;
    Tensor logits = forward_logits(config, params, b.x, b.batch, b.seq, opts);
    total += double(cross_entropy(logits, b.y).item());
  }
  return float(total / double(n_batches));
}

float evaluate(PreparedModel& p, std::span<const int32_t> split, int64_t n_batches, uint64_t seed) {
  auto eff = p.effective_params();
  const auto tap = p.activation_tap();
  const ActivationTap* tp = p.config.quantize_activations ? &tap : nullptr;
  return evaluate(p.model.config, eff, split, n_batches, p.config.batch_size, p.config.context_length, seed,
                  tp);
}

float evaluate(const Model& model, std::span<const int32_t> split, int64_t n_batches, int64_t batch,
               int64_t seq, uint64_t seed) {
  return evaluate(model.config, model.params, split, n_batches, batch, seq, seed);
}

QuantMeta quant_meta_for(const QatConfig& config) {
  QuantMeta q;
  q.scheme = config.weight_scheme;
  if (config.weight_scheme == QuantScheme::PowerOfTwo)
    q.levels_or_bits = uint32_t(config.weight_levels);
  else if (config.weight_scheme == QuantScheme::AffineAsymmetric)
    q.levels_or_bits = uint32_t(config.weight_bits);
  q.ste = config.ste;
  return q;
}

RunResult training_run(Model model, const QatConfig& config, const Corpus& corpus, const std::string& out_dir,
                       bool quiet) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = out_dir + "/metrics.csv";
  std::ofstream csv(metrics_path, std::ios::trunc);
  if (!csv) throw std::runtime_error("training: cannot open " + metrics_path + " for writing");
  csv << "iter,split,loss,perplexity\n";

  PreparedModel prepared = prepare(std::move(model), config);
  AdamW opt = make_optimizer(prepared.model, config.weight_decay);
  Pcg64 data_rng(config.seed, rng_stream::kData);
  Pcg64 dropout_rng(config.seed, rng_stream::kDropout);

  const QuantMeta meta = quant_meta_for(config);
  RunResult res;
  res.metrics_path = metrics_path;
  res.best_path = out_dir + "/ckpt_best.potq";
  res.last_path = out_dir + "/ckpt_last.potq";

  const auto log_point = [&](int64_t iter) -> float {
    const float tl = evaluate(prepared, corpus.train, config.eval_batches, config.seed);
    const float vl = evaluate(prepared, corpus.val, config.eval_batches, config.seed);
    char line[160];
    std::snprintf(line, sizeof line, "%ld,train,%.6f,%.6f\n%ld,val,%.6f,%.6f\n", long(iter), tl,
                  perplexity(tl), long(iter), vl, perplexity(vl));
    csv << line;
    csv.flush();
    if (!quiet)
      std::printf("iter %6ld | train %.4f ppl %8.3f | val %.4f ppl %8.3f\n", long(iter), tl, perplexity(tl),
                  vl, perplexity(vl));
    return vl;
  };

  // iteration-0 evaluation: with quantization on, this is the loss right
  // after inserting the fake quantizers and before any tuning
  float best_val = log_point(0);
  res.val_at_start = best_val;
  save_checkpoint(res.best_path,
                  checkpoint_from_model(prepared.model, corpus.vocab, 0, best_val, meta));

  float last_val = best_val;
  for (int64_t it = 1; it <= config.iters; ++it) {
    const Batch b = sample_batch(corpus.train, config.batch_size, config.context_length, data_rng);
    (void)train_step(prepared, b, opt, dropout_rng);
    if (it % config.eval_interval == 0) {
      const float vl = log_point(it);
      last_val = vl;
      if (vl < best_val) {
        best_val = vl;
        save_checkpoint(res.best_path,
                        checkpoint_from_model(prepared.model, corpus.vocab, uint32_t(it), vl, meta));
      }
    }
  }
  res.best_val = best_val;
  res.final_val = last_val;
  save_checkpoint(res.last_path,
                  checkpoint_from_model(prepared.model, corpus.vocab, uint32_t(config.iters), last_val, meta));
  return res;
}

}  // namespace potq
