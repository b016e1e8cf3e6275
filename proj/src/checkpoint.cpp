#include "potq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace potq {

namespace {

void put_u8(std::vector<uint8_t>& b, uint8_t v) { b.push_back(v); }

void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(uint8_t(v & 0xFF));
  b.push_back(uint8_t((v >> 8) & 0xFF));
  b.push_back(uint8_t((v >> 16) & 0xFF));
  b.push_back(uint8_t((v >> 24) & 0xFF));
}

void put_f32(std::vector<uint8_t>& b, float v) { put_u32(b, std::bit_cast<uint32_t>(v)); }

void put_str(std::vector<uint8_t>& b, const std::string& s) {
  put_u32(b, uint32_t(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& b) : b_(b) {}

  size_t offset() const { return off_; }

  void require(size_t n, const char* what) {
    if (off_ + n > b_.size())
      throw std::runtime_error("checkpoint: truncated while reading " + std::string(what) + " at offset " +
                               std::to_string(off_));
  }
  uint8_t u8(const char* what) {
    require(1, what);
    return b_[off_++];
  }
  uint32_t u32(const char* what) {
    require(4, what);
    uint32_t v = uint32_t(b_[off_]) | (uint32_t(b_[off_ + 1]) << 8) | (uint32_t(b_[off_ + 2]) << 16) |
                 (uint32_t(b_[off_ + 3]) << 24);
    off_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(const char* what) {
    const uint32_t n = u32(what);
    require(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + off_), n);
    off_ += n;
    return s;
  }
  std::vector<uint8_t> bytes(size_t n, const char* what) {
    require(n, what);
    std::vector<uint8_t> out(b_.begin() + int64_t(off_), b_.begin() + int64_t(off_ + n));
    off_ += n;
    return out;
  }
  bool done() const { return off_ == b_.size(); }

 private:
  const std::vector<uint8_t>& b_;
  size_t off_ = 0;
};

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<uint8_t> b;
  b.insert(b.end(), kCheckpointMagic, kCheckpointMagic + 5);
  put_u8(b, kCheckpointVersion);

  put_u32(b, uint32_t(ckpt.config.vocab_size));
  put_u32(b, uint32_t(ckpt.config.n_layer));
  put_u32(b, uint32_t(ckpt.config.n_head));
  put_u32(b, uint32_t(ckpt.config.n_embd));
  put_u32(b, uint32_t(ckpt.config.block_size));
  put_f32(b, ckpt.config.dropout);

  put_u32(b, ckpt.iter);
  put_f32(b, ckpt.val_loss);
  put_u8(b, uint8_t(ckpt.quant.scheme));
  put_u32(b, ckpt.quant.levels_or_bits);
  put_u8(b, uint8_t(ckpt.quant.ste));

  put_u32(b, uint32_t(ckpt.vocab_codepoints.size()));
  for (const uint32_t cp : ckpt.vocab_codepoints) put_u32(b, cp);

  put_u32(b, uint32_t(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_str(b, t.name);
    put_u8(b, uint8_t(t.dtype));
    put_u32(b, uint32_t(t.shape.size()));
    for (const int64_t d : t.shape) put_u32(b, uint32_t(d));
    const int64_t n = t.numel();
    if (t.dtype == TensorDtype::F32) {
      if (int64_t(t.f32.size()) != n)
        throw std::logic_error("checkpoint: tensor " + t.name + " f32 payload does not match shape");
      for (const float v : t.f32) put_f32(b, v);
    } else {
      if (int64_t(t.codes.size()) != (n + 1) / 2)
        throw std::logic_error("checkpoint: tensor " + t.name + " pot4 payload does not match shape");
      put_f32(b, t.scale);
      b.insert(b.end(), t.codes.begin(), t.codes.end());
    }
  }
  return b;
}

Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  r.require(5, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 5) != 0)
    throw std::runtime_error("checkpoint: bad magic at offset 0");
  (void)r.bytes(5, "magic");
  const uint8_t version = r.u8("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(int(version)) + " at offset 5");

  Checkpoint c;
  c.config.vocab_size = r.u32("config.vocab_size");
  c.config.n_layer = r.u32("config.n_layer");
  c.config.n_head = r.u32("config.n_head");
  c.config.n_embd = r.u32("config.n_embd");
  c.config.block_size = r.u32("config.block_size");
  c.config.dropout = r.f32("config.dropout");

  c.iter = r.u32("meta.iter");
  c.val_loss = r.f32("meta.val_loss");
  const uint8_t scheme = r.u8("meta.quant_scheme");
  if (scheme > 2)
    throw std::runtime_error("checkpoint: unknown quant scheme " + std::to_string(int(scheme)) + " at offset " +
                             std::to_string(r.offset() - 1));
  c.quant.scheme = QuantScheme(scheme);
  c.quant.levels_or_bits = r.u32("meta.quant_levels");
  const uint8_t ste = r.u8("meta.ste_mode");
  if (ste > 1)
    throw std::runtime_error("checkpoint: unknown ste mode " + std::to_string(int(ste)) + " at offset " +
                             std::to_string(r.offset() - 1));
  c.quant.ste = SteMode(ste);

  const uint32_t vn = r.u32("vocab.count");
  c.vocab_codepoints.resize(vn);
  for (uint32_t i = 0; i < vn; ++i) c.vocab_codepoints[i] = r.u32("vocab.codepoint");

  const uint32_t tn = r.u32("tensors.count");
  c.tensors.resize(tn);
  for (uint32_t i = 0; i < tn; ++i) {
    auto& t = c.tensors[i];
    t.name = r.str("tensor.name");
    const uint8_t dtype = r.u8("tensor.dtype");
    if (dtype > 1)
      throw std::runtime_error("checkpoint: unknown dtype " + std::to_string(int(dtype)) + " for tensor " +
                               t.name + " at offset " + std::to_string(r.offset() - 1));
    t.dtype = TensorDtype(dtype);
    const uint32_t nd = r.u32("tensor.ndim");
    t.shape.resize(nd);
    for (uint32_t j = 0; j < nd; ++j) t.shape[j] = r.u32("tensor.dim");
    const int64_t n = t.numel();
    if (t.dtype == TensorDtype::F32) {
      t.f32.resize(size_t(n));
      r.require(size_t(n) * 4, "tensor.f32 payload");
      for (int64_t j = 0; j < n; ++j) t.f32[size_t(j)] = r.f32("tensor.f32");
    } else {
      t.scale = r.f32("tensor.scale");
      t.codes = r.bytes(size_t((n + 1) / 2), "tensor.pot4 payload");
    }
  }
  if (!r.done())
    throw std::runtime_error("checkpoint: " + std::to_string(bytes.size() - r.offset()) +
                             " trailing bytes at offset " + std::to_string(r.offset()));
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), int64_t(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

Checkpoint checkpoint_from_model(const Model& model, const CharVocab& vocab, uint32_t iter, float val_loss,
                                 const QuantMeta& quant) {
  Checkpoint c;
  c.config = model.config;
  c.iter = iter;
  c.val_loss = val_loss;
  c.quant = quant;
  c.vocab_codepoints = vocab.codepoints;
  for (const auto& p : model.params) {
    TensorEntry t;
    t.name = p.name;
    t.dtype = TensorDtype::F32;
    t.shape = p.tensor.shape();
    t.f32 = p.tensor.vec();
    c.tensors.push_back(std::move(t));
  }
  return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<NamedParam> params;
  params.reserve(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    std::vector<float> data;
    if (t.dtype == TensorDtype::F32) {
      data = t.f32;
    } else {
      if (ckpt.quant.scheme != QuantScheme::PowerOfTwo)
        throw std::runtime_error("checkpoint: pot4 tensor " + t.name + " without a PoT quant scheme");
      PackedPotTensor pt;
      pt.shape = t.shape;
      pt.scale = t.scale;
      pt.levels = int(ckpt.quant.levels_or_bits);
      pt.codes = t.codes;
      data = pot_unpack_tensor(pt);
    }
    params.push_back({t.name, Tensor::from_data(t.shape, std::move(data), true)});
  }
  return model_with_params(ckpt.config, std::move(params));
}

CharVocab vocab_from_checkpoint(const Checkpoint& ckpt) {
  CharVocab v;
  v.codepoints = ckpt.vocab_codepoints;
  for (size_t i = 0; i < v.codepoints.size(); ++i) v.to_id.emplace(v.codepoints[i], int32_t(i));
  return v;
}

}  // namespace potq
