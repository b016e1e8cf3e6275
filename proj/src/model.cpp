#include "potq/model.hpp"

#include <cmath>
#include <stdexcept>

namespace potq {

void ModelConfig::validate() const {
  if (vocab_size < 1) throw std::invalid_argument("model config: vocab_size must be >= 1");
  if (n_layer < 0) throw std::invalid_argument("model config: n_layer must be >= 0");
  if (n_head < 1 || n_embd < 1 || n_embd % n_head != 0)
    throw std::invalid_argument("model config: n_embd must be a positive multiple of n_head");
  if (block_size < 1) throw std::invalid_argument("model config: block_size must be >= 1");
  if (dropout < 0.0f || dropout >= 1.0f) throw std::invalid_argument("model config: dropout must be in [0, 1)");
}

namespace {

Tensor normal_init(Shape shape, double std_dev, Pcg64& rng) {
  auto t = Tensor::zeros(std::move(shape), true);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = float(rng.next_normal() * std_dev);
  return t;
}

Tensor const_init(Shape shape, float v) {
  auto t = Tensor::zeros(std::move(shape), true);
  std::fill(t.vec().begin(), t.vec().end(), v);
  return t;
}

}  // namespace

Model::Model(ModelConfig cfg, uint64_t seed) {
  cfg.validate();
  config = cfg;
  Pcg64 rng(seed, rng_stream::kInit);
  const int64_t d = cfg.n_embd, v = cfg.vocab_size;
  const double w_std = 0.02;
  // residual output projections get the 1/sqrt(2 * n_layer) shrink
  const double proj_std = cfg.n_layer > 0 ? w_std / std::sqrt(2.0 * double(cfg.n_layer)) : w_std;

  params.push_back({"tok_emb.w", normal_init({v, d}, w_std, rng)});
  params.push_back({"pos_emb.w", normal_init({cfg.block_size, d}, w_std, rng)});
  for (int64_t l = 0; l < cfg.n_layer; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    params.push_back({p + "ln1.g", const_init({d}, 1.0f)});
    params.push_back({p + "ln1.b", const_init({d}, 0.0f)});
    params.push_back({p + "attn.qkv.w", normal_init({d, 3 * d}, w_std, rng)});
    params.push_back({p + "attn.qkv.b", const_init({3 * d}, 0.0f)});
    params.push_back({p + "attn.proj.w", normal_init({d, d}, proj_std, rng)});
    params.push_back({p + "attn.proj.b", const_init({d}, 0.0f)});
    params.push_back({p + "ln2.g", const_init({d}, 1.0f)});
    params.push_back({p + "ln2.b", const_init({d}, 0.0f)});
    params.push_back({p + "mlp.fc.w", normal_init({d, 4 * d}, w_std, rng)});
    params.push_back({p + "mlp.fc.b", const_init({4 * d}, 0.0f)});
    params.push_back({p + "mlp.proj.w", normal_init({4 * d, d}, proj_std, rng)});
    params.push_back({p + "mlp.proj.b", const_init({d}, 0.0f)});
  }
  params.push_back({"ln_f.g", const_init({d}, 1.0f)});
  params.push_back({"ln_f.b", const_init({d}, 0.0f)});
  params.push_back({"lm_head.w", normal_init({d, v}, w_std, rng)});
  rebuild_index();
}

void Model::rebuild_index() {
  index_.clear();
  for (size_t i = 0; i < params.size(); ++i) index_.emplace(params[i].name, i);
}

Tensor& Model::param(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("model: no parameter named " + name);
  return params[it->second].tensor;
}

const Tensor& Model::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("model: no parameter named " + name);
  return params[it->second].tensor;
}

bool Model::has_param(const std::string& name) const { return index_.count(name) > 0; }

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

bool Model::is_matmul_weight(const std::string& name) {
  if (name == "lm_head.w") return true;
  if (name.rfind("h.", 0) != 0) return false;
  const auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".attn.qkv.w") || ends_with(".attn.proj.w") || ends_with(".mlp.fc.w") ||
         ends_with(".mlp.proj.w");
}

bool Model::is_embedding_weight(const std::string& name) {
  return name == "tok_emb.w" || name == "pos_emb.w";
}

Model model_with_params(ModelConfig config, std::vector<NamedParam> params) {
  config.validate();
  Model m;
  m.config = config;
  m.params = std::move(params);
  m.rebuild_index();
  return m;
}

namespace {

class ParamLookup {
 public:
  explicit ParamLookup(const std::vector<NamedParam>& ps) : ps_(ps) {
    for (size_t i = 0; i < ps.size(); ++i) index_.emplace(ps[i].name, i);
  }
  const Tensor& operator()(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("forward: missing parameter " + name);
    return ps_[it->second].tensor;
  }

 private:
  const std::vector<NamedParam>& ps_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace

Tensor forward_logits(const ModelConfig& cfg, const std::vector<NamedParam>& params,
                      std::span<const int32_t> ids, int64_t batch, int64_t seq, const ForwardOpts& opts) {
  cfg.validate();
  if (seq > cfg.block_size)
    throw std::invalid_argument("forward: sequence length " + std::to_string(seq) + " exceeds block size " +
                                std::to_string(cfg.block_size));
  if (int64_t(ids.size()) != batch * seq)
    throw std::invalid_argument("forward: ids length does not match batch*seq");
  const bool use_dropout = opts.training && cfg.dropout > 0.0f;
  if (use_dropout && opts.dropout_rng == nullptr)
    throw std::invalid_argument("forward: training with dropout requires an rng");

  ParamLookup P(params);
  const auto tap = [&](const std::string& site, const Tensor& t) -> Tensor {
    return opts.tap ? (*opts.tap)(site, t) : t;
  };
  const auto drop = [&](const Tensor& t) -> Tensor {
    return use_dropout ? dropout(t, double(cfg.dropout), *opts.dropout_rng) : t;
  };

  const std::vector<int32_t> tok_ids(ids.begin(), ids.end());
  std::vector<int32_t> pos_ids(size_t(batch * seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq; ++t) pos_ids[size_t(b * seq + t)] = int32_t(t);

  Tensor x = add(embedding_lookup(P("tok_emb.w"), tok_ids), embedding_lookup(P("pos_emb.w"), pos_ids));
  x = drop(x);

  for (int64_t l = 0; l < cfg.n_layer; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    Tensor a = layernorm(x, P(p + "ln1.g"), P(p + "ln1.b"));
    a = tap(p + "attn.qkv.in", a);
    Tensor qkv = add_bias(matmul(a, P(p + "attn.qkv.w")), P(p + "attn.qkv.b"));
    Tensor att = causal_attention(qkv, batch, seq, cfg.n_head);
    att = tap(p + "attn.proj.in", att);
    att = add_bias(matmul(att, P(p + "attn.proj.w")), P(p + "attn.proj.b"));
    x = add(x, drop(att));

    Tensor m = layernorm(x, P(p + "ln2.g"), P(p + "ln2.b"));
    m = tap(p + "mlp.fc.in", m);
    m = gelu(add_bias(matmul(m, P(p + "mlp.fc.w")), P(p + "mlp.fc.b")));
    m = tap(p + "mlp.proj.in", m);
    m = add_bias(matmul(m, P(p + "mlp.proj.w")), P(p + "mlp.proj.b"));
    x = add(x, drop(m));
  }

  x = layernorm(x, P("ln_f.g"), P("ln_f.b"));
  x = tap("lm_head.in", x);
  return matmul(x, P("lm_head.w"));
}

std::vector<int32_t> generate(const ModelConfig& cfg, const std::vector<NamedParam>& params,
                              std::span<const int32_t> prompt, int64_t n_tokens, double temperature,
                              uint64_t seed, int32_t start_token) {
  if (!(temperature > 0.0)) throw std::invalid_argument("generate: temperature must be positive");
  std::vector<int32_t> out(prompt.begin(), prompt.end());
  if (out.empty()) out.push_back(start_token);
  for (const int32_t id : out)
    if (id < 0 || int64_t(id) >= cfg.vocab_size)
      throw std::out_of_range("generate: prompt id " + std::to_string(id) + " outside vocabulary");

  Pcg64 rng(seed, rng_stream::kGenerate);
  const int64_t v = cfg.vocab_size;
  std::vector<double> probs(static_cast<size_t>(v));
  for (int64_t i = 0; i < n_tokens; ++i) {
    const int64_t ctx = std::min<int64_t>(int64_t(out.size()), cfg.block_size);
    const std::span<const int32_t> window(out.data() + out.size() - size_t(ctx), size_t(ctx));
    Tensor logits = forward_logits(cfg, params, window, 1, ctx);
    const float* last = logits.data() + (ctx - 1) * v;

    double mx = -1e300;
    for (int64_t j = 0; j < v; ++j) mx = std::max(mx, double(last[j]) / temperature);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      probs[size_t(j)] = std::exp(double(last[j]) / temperature - mx);
      sum += probs[size_t(j)];
    }
    const double u = rng.next_double() * sum;
    double acc = 0.0;
    int32_t pick = int32_t(v - 1);
    for (int64_t j = 0; j < v; ++j) {
      acc += probs[size_t(j)];
      if (u < acc) {
        pick = int32_t(j);
        break;
      }
    }
    out.push_back(pick);
  }
  return out;
}

}  // namespace potq
