// potq: power-of-two weight quantization experiments for a character-level
// transformer. One binary, subcommand style; all experiment state lives in
// files so runs compose as shell pipelines. All randomness flows from --seed
// through a PCG64 generator, so identical flags give identical artifacts.

#include <array>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "potq/checkpoint.hpp"
#include "potq/corpus.hpp"
#include "potq/model.hpp"
#include "potq/qat.hpp"
#include "potq/quant.hpp"
#include "potq/shift.hpp"

namespace {

using namespace potq;

QuantScheme parse_scheme(const std::string& s) {
  if (s == "pot") return QuantScheme::PowerOfTwo;
  if (s == "affine") return QuantScheme::AffineAsymmetric;
  throw CLI::ValidationError("--scheme", "must be 'pot' or 'affine'");
}

SteMode parse_ste(const std::string& s) {
  if (s == "identity") return SteMode::Identity;
  if (s == "clipped") return SteMode::Clipped;
  throw CLI::ValidationError("--ste", "must be 'identity' or 'clipped'");
}

// Rebuilds the runnable parameter set for an evaluation/generation checkpoint.
// Checkpoints with a weight-quantization scheme evaluate through fake-quant
// views; pot4 payloads are already on the grid so dequantizing suffices.
std::vector<NamedParam> effective_eval_params(const Checkpoint& ckpt, const Model& model) {
  std::vector<NamedParam> params = model.params;
  if (ckpt.quant.scheme == QuantScheme::None) return params;
  bool any_packed = false;
  for (const auto& t : ckpt.tensors) any_packed |= t.dtype == TensorDtype::Pot4;
  if (any_packed) return params;  // grid values were stored directly

  QuantSpec base;
  base.scheme = ckpt.quant.scheme;
  base.levels = int(ckpt.quant.levels_or_bits);
  base.bits = int(ckpt.quant.levels_or_bits);
  base.ste = ckpt.quant.ste;
  for (auto& np : params) {
    if (!Model::is_matmul_weight(np.name)) continue;
    const QuantSpec spec = weight_spec_for(base, {np.tensor.data(), size_t(np.tensor.numel())});
    np.tensor = fake_quant(np.tensor, spec);
  }
  return params;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << content;
}

struct ModelFlags {
  int64_t n_layer = 4;
  int64_t n_head = 4;
  int64_t n_embd = 128;
  int64_t block_size = 128;
  float dropout = 0.1f;

  void attach(CLI::App* cmd) {
    cmd->add_option("--n-layer", n_layer, "transformer blocks");
    cmd->add_option("--n-head", n_head, "attention heads");
    cmd->add_option("--n-embd", n_embd, "embedding width");
    cmd->add_option("--block", block_size, "maximum context window");
    cmd->add_option("--dropout", dropout, "dropout probability");
  }
};

int run_cli(int argc, char** argv) {
  CLI::App app{"power-of-two weight quantization for a character-level transformer"};
  app.require_subcommand(1);

  // ---- train ----
  auto* train = app.add_subcommand("train", "float pretraining phase");
  std::string tr_data, tr_out = "run_float";
  int64_t tr_iters = 15000, tr_batch = 12, tr_ctx = 64, tr_eval_int = 250, tr_eval_batches = 20;
  double tr_lr = 1e-3;
  uint64_t tr_seed = 1337;
  ModelFlags tr_model;
  train->add_option("--data", tr_data, "UTF-8 text corpus")->required();
  train->add_option("--out", tr_out, "output directory");
  train->add_option("--iters", tr_iters, "training iterations");
  train->add_option("--lr", tr_lr, "learning rate");
  train->add_option("--seed", tr_seed, "seed for init/data/dropout");
  train->add_option("--batch", tr_batch, "batch size");
  train->add_option("--ctx", tr_ctx, "training context length");
  train->add_option("--eval-interval", tr_eval_int, "iterations between evaluations");
  train->add_option("--eval-batches", tr_eval_batches, "batches per evaluation");
  tr_model.attach(train);

  // ---- qat ----
  auto* qat = app.add_subcommand("qat", "quantization-aware fine-tuning");
  std::string q_ckpt, q_data, q_out = "run_qat", q_scheme = "pot", q_ste = "identity";
  int q_levels = 15, q_bits = 4;
  int64_t q_iters = 2000, q_batch = 12, q_ctx = 64, q_eval_int = 250, q_eval_batches = 20;
  double q_lr = 0.5e-5;
  uint64_t q_seed = 1337;
  bool q_emb = false;
  qat->add_option("--ckpt", q_ckpt, "float checkpoint to fine-tune")->required();
  qat->add_option("--data", q_data, "UTF-8 text corpus")->required();
  qat->add_option("--out", q_out, "output directory");
  qat->add_option("--scheme", q_scheme, "pot|affine");
  qat->add_option("--levels", q_levels, "PoT level count {7,9,11,15}");
  qat->add_option("--bits", q_bits, "affine bit width");
  qat->add_option("--ste", q_ste, "identity|clipped straight-through mode");
  qat->add_option("--lr", q_lr, "learning rate");
  qat->add_option("--iters", q_iters, "fine-tuning iterations");
  qat->add_option("--batch", q_batch, "batch size");
  qat->add_option("--ctx", q_ctx, "context length");
  qat->add_option("--eval-interval", q_eval_int, "iterations between evaluations");
  qat->add_option("--eval-batches", q_eval_batches, "batches per evaluation");
  qat->add_option("--seed", q_seed, "seed");
  qat->add_flag("--quant-embeddings", q_emb, "also fake-quantize embedding tables");

  // ---- ptq ----
  auto* ptq = app.add_subcommand("ptq", "post-training quantization (no tuning)");
  std::string p_ckpt, p_out = "ckpt_ptq.potq", p_scheme = "pot";
  int p_levels = 15, p_bits = 4;
  ptq->add_option("--ckpt", p_ckpt, "trained float checkpoint")->required();
  ptq->add_option("--scheme", p_scheme, "pot|affine");
  ptq->add_option("--levels", p_levels, "PoT level count {7,9,11,15}");
  ptq->add_option("--bits", p_bits, "affine bit width");
  ptq->add_option("--out", p_out, "output checkpoint");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "loss + perplexity on a corpus split");
  std::string e_ckpt, e_data, e_split = "val", e_csv;
  int64_t e_batches = 20, e_batch = 12, e_ctx = 64;
  uint64_t e_seed = 1337;
  eval->add_option("--ckpt", e_ckpt, "checkpoint")->required();
  eval->add_option("--data", e_data, "UTF-8 text corpus")->required();
  eval->add_option("--split", e_split, "val|test|train");
  eval->add_option("--batches", e_batches, "number of evaluation batches");
  eval->add_option("--batch", e_batch, "batch size");
  eval->add_option("--ctx", e_ctx, "context length");
  eval->add_option("--seed", e_seed, "seed");
  eval->add_option("--csv", e_csv, "also append a metrics row to this file");

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "sample text from a checkpoint");
  std::string g_ckpt, g_prompt;
  int64_t g_tokens = 200;
  double g_temp = 0.8;
  uint64_t g_seed = 1337;
  gen->add_option("--ckpt", g_ckpt, "checkpoint")->required();
  gen->add_option("--prompt", g_prompt, "prompt text (empty starts at newline)");
  gen->add_option("--tokens", g_tokens, "tokens to sample");
  gen->add_option("--temperature", g_temp, "softmax temperature");
  gen->add_option("--seed", g_seed, "seed");

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "float vs shift matmul timings");
  std::string b_sizes = "64,64,64;128,128,128;256,256,256", b_csv;
  int b_repeats = 5;
  uint64_t b_seed = 1337;
  bench->add_option("--sizes", b_sizes, "semicolon-separated m,k,n triples");
  bench->add_option("--repeats", b_repeats, "timed runs per shape (median)");
  bench->add_option("--seed", b_seed, "seed");
  bench->add_option("--csv", b_csv, "write the report to this file");

  // ---- export ----
  auto* exp = app.add_subcommand("export", "pack quantized weights as 4-bit codes");
  std::string x_ckpt, x_out = "ckpt_pot4.potq", x_format = "pot4";
  exp->add_option("--ckpt", x_ckpt, "PoT-quantized checkpoint (from ptq or qat)")->required();
  exp->add_option("--format", x_format, "only 'pot4'");
  exp->add_option("--out", x_out, "output checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the usage error
    return rc == 0 ? 0 : 2;
  }

  if (train->parsed()) {
    const Corpus corpus = load_corpus(tr_data);
    ModelConfig mc;
    mc.vocab_size = corpus.vocab.size();
    mc.n_layer = tr_model.n_layer;
    mc.n_head = tr_model.n_head;
    mc.n_embd = tr_model.n_embd;
    mc.block_size = tr_model.block_size;
    mc.dropout = tr_model.dropout;
    Model model(mc, tr_seed);
    std::printf("float training: %ld params, vocab %ld\n", long(model.param_count()),
                long(mc.vocab_size));
    QatConfig cfg;
    cfg.weight_scheme = QuantScheme::None;
    cfg.lr = tr_lr;
    cfg.iters = tr_iters;
    cfg.eval_interval = tr_eval_int;
    cfg.batch_size = tr_batch;
    cfg.context_length = tr_ctx;
    cfg.eval_batches = tr_eval_batches;
    cfg.seed = tr_seed;
    const RunResult res = training_run(std::move(model), cfg, corpus, tr_out);
    std::printf("best val %.4f (ppl %.3f); checkpoints in %s\n", res.best_val,
                perplexity(res.best_val), tr_out.c_str());
    return 0;
  }

  if (qat->parsed()) {
    const Corpus corpus = load_corpus(q_data);
    const Checkpoint ckpt = load_checkpoint(q_ckpt);
    Model model = model_from_checkpoint(ckpt);
    QatConfig cfg;
    cfg.weight_scheme = parse_scheme(q_scheme);
    cfg.weight_levels = q_levels;
    cfg.weight_bits = q_bits;
    cfg.quantize_embeddings = q_emb;
    cfg.ste = parse_ste(q_ste);
    cfg.lr = q_lr;
    cfg.iters = q_iters;
    cfg.eval_interval = q_eval_int;
    cfg.batch_size = q_batch;
    cfg.context_length = q_ctx;
    cfg.eval_batches = q_eval_batches;
    cfg.seed = q_seed;
    std::printf("qat: scheme %s, %s %d\n", scheme_name(cfg.weight_scheme),
                cfg.weight_scheme == QuantScheme::PowerOfTwo ? "levels" : "bits",
                cfg.weight_scheme == QuantScheme::PowerOfTwo ? q_levels : q_bits);
    const RunResult res = training_run(std::move(model), cfg, corpus, q_out);
    std::printf("post-switch val %.4f -> best val %.4f (ppl %.3f); checkpoints in %s\n",
                res.val_at_start, res.best_val, perplexity(res.best_val), q_out.c_str());
    return 0;
  }

  if (ptq->parsed()) {
    const Checkpoint ckpt = load_checkpoint(p_ckpt);
    Model model = model_from_checkpoint(ckpt);
    QatConfig cfg;
    cfg.weight_scheme = parse_scheme(p_scheme);
    cfg.weight_levels = p_levels;
    cfg.weight_bits = p_bits;
    PreparedModel prepared = prepare(std::move(model), cfg);
    Corpus unused;  // weights-only calibration reads no data
    calibrate_ptq(prepared, unused, 0);
    const QuantMeta meta = quant_meta_for(cfg);
    save_checkpoint(p_out, checkpoint_from_model(prepared.model, vocab_from_checkpoint(ckpt), ckpt.iter,
                                                 ckpt.val_loss, meta));
    std::printf("ptq: %s -> %s (%s %d)\n", p_ckpt.c_str(), p_out.c_str(), p_scheme.c_str(),
                p_scheme == "pot" ? p_levels : p_bits);
    return 0;
  }

  if (eval->parsed()) {
    const Checkpoint ckpt = load_checkpoint(e_ckpt);
    const Corpus corpus = load_corpus(e_data);
    const Model model = model_from_checkpoint(ckpt);
    const auto params = effective_eval_params(ckpt, model);
    Split split = Split::Val;
    if (e_split == "test") split = Split::Test;
    else if (e_split == "train") split = Split::Train;
    else if (e_split != "val") throw CLI::ValidationError("--split", "must be train, val or test");
    const float loss = evaluate(ckpt.config, params, corpus.split(split), e_batches, e_batch, e_ctx, e_seed);
    std::printf("split %s | loss %.6f | perplexity %.6f\n", e_split.c_str(), loss, perplexity(loss));
    if (!e_csv.empty()) {
      char row[128];
      std::snprintf(row, sizeof row, "0,%s,%.6f,%.6f\n", e_split.c_str(), loss, perplexity(loss));
      std::ofstream f(e_csv, std::ios::app);
      if (!f) throw std::runtime_error("cannot open " + e_csv);
      if (f.tellp() == 0) f << "iter,split,loss,perplexity\n";
      f << row;
    }
    return 0;
  }

  if (gen->parsed()) {
    const Checkpoint ckpt = load_checkpoint(g_ckpt);
    const Model model = model_from_checkpoint(ckpt);
    const auto params = effective_eval_params(ckpt, model);
    const CharVocab vocab = vocab_from_checkpoint(ckpt);
    const auto prompt_ids = vocab.encode_utf8(g_prompt);
    int32_t start_token = 0;
    if (const auto it = vocab.to_id.find(uint32_t('\n')); it != vocab.to_id.end())
      start_token = it->second;
    const auto out_ids =
        generate(ckpt.config, params, prompt_ids, g_tokens, g_temp, g_seed, start_token);
    std::printf("%s\n", vocab.decode_utf8(out_ids).c_str());
    return 0;
  }

  if (bench->parsed()) {
    std::vector<std::array<int64_t, 3>> sizes;
    std::string item;
    std::stringstream ss(b_sizes);
    while (std::getline(ss, item, ';')) {
      std::array<int64_t, 3> t{};
      if (std::sscanf(item.c_str(), "%ld,%ld,%ld", &t[0], &t[1], &t[2]) != 3)
        throw CLI::ValidationError("--sizes", "expected m,k,n triples separated by ';'");
      sizes.push_back(t);
    }
    const auto rows = bench_matmul(sizes, b_repeats, b_seed);
    const std::string csv = bench_csv(rows);
    std::printf("%s", csv.c_str());
    for (const auto& r : rows)
      if (r.max_ulp > 2)
        throw std::runtime_error("bench: kernels disagree by " + std::to_string(r.max_ulp) + " ulp");
    if (!b_csv.empty()) write_file(b_csv, csv);
    return 0;
  }

  if (exp->parsed()) {
    if (x_format != "pot4") throw CLI::ValidationError("--format", "only pot4 is supported");
    Checkpoint ckpt = load_checkpoint(x_ckpt);
    if (ckpt.quant.scheme != QuantScheme::PowerOfTwo)
      throw std::runtime_error("export: checkpoint has no PoT quantization scheme (run ptq or qat first)");
    const QuantSpec base = QuantSpec::pot(int(ckpt.quant.levels_or_bits));
    for (auto& t : ckpt.tensors) {
      if (t.dtype != TensorDtype::F32 || !Model::is_matmul_weight(t.name)) continue;
      const QuantSpec spec = weight_spec_for(base, t.f32);
      const PackedPotTensor packed = pot_pack_tensor(t.f32, t.shape, spec);
      t.dtype = TensorDtype::Pot4;
      t.scale = packed.scale;
      t.codes = packed.codes;
      t.f32.clear();
    }
    save_checkpoint(x_out, ckpt);
    std::printf("%s", format_size_report(model_size_report(ckpt)).c_str());
    std::printf("file: %s -> %s\n", x_ckpt.c_str(), x_out.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const CLI::Error&) {
    return 2;  // reachable only if a subcommand throws a CLI error after parse
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
